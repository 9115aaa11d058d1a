//! Define-by-run reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its backward rule. Nodes are created in topological order,
//! so [`Tape::backward`] is a single reverse sweep. The tape is single-writer
//! by construction (`&mut self` everywhere); loss reductions accumulate in
//! f64 regardless of the storage precision.

use crate::error::{Error, Result};
use crate::neural::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    /// 3D convolution, stride 1, zero same-padding, odd kernel.
    Conv3d {
        x: usize,
        w: usize,
        b: usize,
        /// Zero-padded input, cached for the backward pass.
        xpad: Vec<S>,
        pad_dims: [usize; 5],
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    UpsampleNn2 {
        x: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Matmul {
        x: usize,
        w: usize,
    },
    MeanRows {
        x: usize,
    },
    AddRowBroadcast {
        x: usize,
        row: usize,
    },
    Relu {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    SoftmaxRows {
        x: usize,
    },
    MaskedMse {
        pred: usize,
        target: usize,
        mask: usize,
        count: usize,
    },
    CrossEntropy {
        logits: usize,
        classes: Vec<usize>,
        /// Row-wise softmax cached for the backward pass.
        probs: Vec<S>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    WeightedSum {
        x: usize,
        weights: Tensor<S>,
    },
    Scale {
        x: usize,
        c: S,
    },
    AddN {
        parts: Vec<usize>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    requires: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Adds one padded input channel convolved with one kernel into one output
/// channel. `pad` is a `[xp, yp, zp]` block with `xp = nx + kx - 1` etc.;
/// `out` is the `[nx, ny, nz]` destination. The 3x3x3 case fuses all 27 taps
/// into a single pass per output row so the x loop vectorizes.
fn conv_gather_channel<S: Scalar>(
    pad: &[S],
    (xp, yp): (usize, usize),
    w: &[S],
    (kx, ky, kz): (usize, usize, usize),
    out: &mut [S],
    (nx, ny, nz): (usize, usize, usize),
) {
    if (kx, ky, kz) == (3, 3, 3) {
        for z in 0..nz {
            for y in 0..ny {
                let row = |dy: usize, dz: usize| {
                    let start = xp * ((y + dy) + yp * (z + dz));
                    &pad[start..start + nx + 2]
                };
                let (r00, r10, r20) = (row(0, 0), row(1, 0), row(2, 0));
                let (r01, r11, r21) = (row(0, 1), row(1, 1), row(2, 1));
                let (r02, r12, r22) = (row(0, 2), row(1, 2), row(2, 2));
                let orow = &mut out[nx * (y + ny * z)..nx * (y + ny * z) + nx];
                for x in 0..nx {
                    let mut acc = orow[x];
                    acc += w[0] * r00[x] + w[1] * r00[x + 1] + w[2] * r00[x + 2];
                    acc += w[3] * r10[x] + w[4] * r10[x + 1] + w[5] * r10[x + 2];
                    acc += w[6] * r20[x] + w[7] * r20[x + 1] + w[8] * r20[x + 2];
                    acc += w[9] * r01[x] + w[10] * r01[x + 1] + w[11] * r01[x + 2];
                    acc += w[12] * r11[x] + w[13] * r11[x + 1] + w[14] * r11[x + 2];
                    acc += w[15] * r21[x] + w[16] * r21[x + 1] + w[17] * r21[x + 2];
                    acc += w[18] * r02[x] + w[19] * r02[x + 1] + w[20] * r02[x + 2];
                    acc += w[21] * r12[x] + w[22] * r12[x + 1] + w[23] * r12[x + 2];
                    acc += w[24] * r22[x] + w[25] * r22[x + 1] + w[26] * r22[x + 2];
                    orow[x] = acc;
                }
            }
        }
    } else if (kx, ky, kz) == (1, 1, 1) {
        axpy(w[0], &pad[..nx * ny * nz], &mut out[..nx * ny * nz]);
    } else {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let wgt = w[dx + kx * (dy + ky * dz)];
                    for z in 0..nz {
                        for y in 0..ny {
                            let src = dx + xp * ((y + dy) + yp * (z + dz));
                            let dst = nx * (y + ny * z);
                            axpy(wgt, &pad[src..src + nx], &mut out[dst..dst + nx]);
                        }
                    }
                }
            }
        }
    }
}

/// Zero-pads the spatial axes of a `[B, C, X, Y, Z]` block by `(px, py, pz)`.
fn pad_spatial<S: Scalar>(
    x: &[S],
    (bn, c, nx, ny, nz): (usize, usize, usize, usize, usize),
    (px, py, pz): (usize, usize, usize),
) -> (Vec<S>, [usize; 5]) {
    let (xp, yp, zp) = (nx + 2 * px, ny + 2 * py, nz + 2 * pz);
    let mut pad = vec![S::ZERO; bn * c * xp * yp * zp];
    for bi in 0..bn {
        for ci in 0..c {
            for z in 0..nz {
                for y in 0..ny {
                    let src = nx * (y + ny * (z + nz * (ci + c * bi)));
                    let dst = px + xp * ((y + py) + yp * ((z + pz) + zp * (ci + c * bi)));
                    pad[dst..dst + nx].copy_from_slice(&x[src..src + nx]);
                }
            }
        }
    }
    (pad, [bn, c, xp, yp, zp])
}

#[inline]
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = S::ZERO;
    for (&a, &b) in x.iter().zip(y.iter()) {
        acc += a * b;
    }
    acc
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn requires_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.node(v).value
    }

    /// Value of a single-element node as f64.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = &self.node(v).value;
        if !t.is_scalar() {
            return Err(Error::Validation(format!(
                "expected scalar node, got dims {:?}",
                t.dims()
            )));
        }
        Ok(t.data()[0].to_f64())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = self.node(v);
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.dims().to_vec(), g.clone()).expect("grad matches value dims"))
    }

    // ----- volumetric ops ------------------------------------------------

    /// stride-1 zero-padded 3D convolution; kernel dims must be odd.
    /// x: `[B, Cin, X, Y, Z]`, w: `[Cout, Cin, KX, KY, KZ]`, b: `[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [bn, cin, nx, ny, nz] = self.node(x).value.dims5()?;
        let wd = self.node(w).value.dims5()?;
        let (cout, wcin, kx, ky, kz) = (wd[0], wd[1], wd[2], wd[3], wd[4]);
        if wcin != cin {
            return Err(Error::Shape(format!(
                "weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if kx % 2 == 0 || ky % 2 == 0 || kz % 2 == 0 {
            return Err(Error::Shape(format!("kernel dims must be odd, got {kx}x{ky}x{kz}")));
        }
        if self.node(b).value.dims() != [cout] {
            return Err(Error::Shape(format!(
                "bias dims {:?} do not match {cout} output channels",
                self.node(b).value.dims()
            )));
        }
        // Cache the padded input; also used by the backward pass.
        let (xpad, pad_dims) = pad_spatial(
            self.node(x).value.data(),
            (bn, cin, nx, ny, nz),
            (kx / 2, ky / 2, kz / 2),
        );
        let (xp, yp, zp) = (pad_dims[2], pad_dims[3], pad_dims[4]);
        let mut out = vec![S::ZERO; bn * cout * nx * ny * nz];
        {
            let wv = self.node(w).value.data();
            let bv = self.node(b).value.data();
            let ksize = kx * ky * kz;
            for bi in 0..bn {
                for co in 0..cout {
                    let obase = nx * ny * nz * (co + cout * bi);
                    let ochan = &mut out[obase..obase + nx * ny * nz];
                    ochan.fill(bv[co]);
                    for ci in 0..cin {
                        let pbase = xp * yp * zp * (ci + cin * bi);
                        let wbase = ksize * (ci + cin * co);
                        conv_gather_channel(
                            &xpad[pbase..pbase + xp * yp * zp],
                            (xp, yp),
                            &wv[wbase..wbase + ksize],
                            (kx, ky, kz),
                            ochan,
                            (nx, ny, nz),
                        );
                    }
                }
            }
        }
        let requires = self.requires_any(&[x.0, w.0, b.0]);
        let value = Tensor::new(vec![bn, cout, nx, ny, nz], out)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.0,
                xpad,
                pad_dims,
            },
            requires,
        ))
    }

    /// 2x2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [bn, c, nx, ny, nz] = self.node(x).value.dims5()?;
        if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial dims, got {nx}x{ny}x{nz}"
            )));
        }
        let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
        let mut out = vec![S::ZERO; bn * c * ox * oy * oz];
        let mut argmax = vec![0u32; out.len()];
        let xv = self.node(x).value.data();
        let mut j = 0;
        for bi in 0..bn {
            for ci in 0..c {
                let base = nx * ny * nz * (ci + c * bi);
                for z in 0..oz {
                    for y in 0..oy {
                        for xo in 0..ox {
                            let mut best_idx = base + 2 * xo + nx * (2 * y + ny * (2 * z));
                            let mut best = xv[best_idx];
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let idx = base + (2 * xo + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                        if xv[idx] > best {
                                            best = xv[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            out[j] = best;
                            argmax[j] = best_idx as u32;
                            j += 1;
                        }
                    }
                }
            }
        }
        let requires = self.nodes[x.0].requires;
        let value = Tensor::new(vec![bn, c, ox, oy, oz], out)?;
        Ok(self.push(value, Op::MaxPool2 { x: x.0, argmax }, requires))
    }

    /// Nearest-neighbor 2x upsampling of the spatial axes.
    pub fn upsample_nn2(&mut self, x: Var) -> Result<Var> {
        let [bn, c, nx, ny, nz] = self.node(x).value.dims5()?;
        let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
        let mut out = vec![S::ZERO; bn * c * ox * oy * oz];
        let xv = self.node(x).value.data();
        for bi in 0..bn {
            for ci in 0..c {
                let ibase = nx * ny * nz * (ci + c * bi);
                let obase = ox * oy * oz * (ci + c * bi);
                for z in 0..oz {
                    for y in 0..oy {
                        let irow = ibase + nx * ((y / 2) + ny * (z / 2));
                        let orow = obase + ox * (y + oy * z);
                        for xo in 0..ox {
                            out[orow + xo] = xv[irow + xo / 2];
                        }
                    }
                }
            }
        }
        let requires = self.nodes[x.0].requires;
        let value = Tensor::new(vec![bn, c, ox, oy, oz], out)?;
        Ok(self.push(value, Op::UpsampleNn2 { x: x.0 }, requires))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [bn, ca, nx, ny, nz] = self.node(a).value.dims5()?;
        let db = self.node(b).value.dims5()?;
        if db[0] != bn || db[2] != nx || db[3] != ny || db[4] != nz {
            return Err(Error::Shape(format!(
                "concat operands disagree outside the channel axis: {:?} vs {:?}",
                self.node(a).value.dims(),
                self.node(b).value.dims()
            )));
        }
        let cb = db[1];
        let spatial = nx * ny * nz;
        let mut out = vec![S::ZERO; bn * (ca + cb) * spatial];
        let av = self.node(a).value.data();
        let bv = self.node(b).value.data();
        for bi in 0..bn {
            let dst = (ca + cb) * spatial * bi;
            out[dst..dst + ca * spatial].copy_from_slice(&av[ca * spatial * bi..ca * spatial * (bi + 1)]);
            out[dst + ca * spatial..dst + (ca + cb) * spatial]
                .copy_from_slice(&bv[cb * spatial * bi..cb * spatial * (bi + 1)]);
        }
        let requires = self.requires_any(&[a.0, b.0]);
        let value = Tensor::new(vec![bn, ca + cb, nx, ny, nz], out)?;
        Ok(self.push(value, Op::ConcatChannels { a: a.0, b: b.0 }, requires))
    }

    // ----- dense ops ------------------------------------------------------

    /// x `[N, Fin]` times w `[Fin, Fout]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, fin] = self.node(x).value.dims2()?;
        let [wfin, fout] = self.node(w).value.dims2()?;
        if fin != wfin {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {fin} vs {wfin}"
            )));
        }
        let mut out = vec![S::ZERO; n * fout];
        let xv = self.node(x).value.data();
        let wv = self.node(w).value.data();
        for i in 0..n {
            let orow = &mut out[i * fout..(i + 1) * fout];
            for j in 0..fin {
                axpy(xv[i * fin + j], &wv[j * fout..(j + 1) * fout], orow);
            }
        }
        let requires = self.requires_any(&[x.0, w.0]);
        let value = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(value, Op::Matmul { x: x.0, w: w.0 }, requires))
    }

    /// Affine map `x·w + b` with x `[N, Fin]`, w `[Fin, Fout]`, b `[Fout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, fin] = self.node(x).value.dims2()?;
        let [wfin, fout] = self.node(w).value.dims2()?;
        if fin != wfin {
            return Err(Error::Shape(format!("dense inner dims differ: {fin} vs {wfin}")));
        }
        if self.node(b).value.dims() != [fout] {
            return Err(Error::Shape(format!(
                "dense bias dims {:?} do not match {fout} outputs",
                self.node(b).value.dims()
            )));
        }
        let mut out = vec![S::ZERO; n * fout];
        let xv = self.node(x).value.data();
        let wv = self.node(w).value.data();
        let bv = self.node(b).value.data();
        for i in 0..n {
            let orow = &mut out[i * fout..(i + 1) * fout];
            orow.copy_from_slice(bv);
            for j in 0..fin {
                axpy(xv[i * fin + j], &wv[j * fout..(j + 1) * fout], orow);
            }
        }
        let requires = self.requires_any(&[x.0, w.0, b.0]);
        let value = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(value, Op::Dense { x: x.0, w: w.0, b: b.0 }, requires))
    }

    /// Column means of a `[N, F]` tensor, producing `[1, F]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let [n, f] = self.node(x).value.dims2()?;
        let xv = self.node(x).value.data();
        let mut out = vec![S::ZERO; f];
        for j in 0..f {
            let mut acc = 0f64;
            for i in 0..n {
                acc += xv[i * f + j].to_f64();
            }
            out[j] = S::from_f64(acc / n as f64);
        }
        let requires = self.nodes[x.0].requires;
        let value = Tensor::new(vec![1, f], out)?;
        Ok(self.push(value, Op::MeanRows { x: x.0 }, requires))
    }

    /// Adds a `[1, F]` row to every row of a `[N, F]` tensor.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let [n, f] = self.node(x).value.dims2()?;
        let [rn, rf] = self.node(row).value.dims2()?;
        if rn != 1 || rf != f {
            return Err(Error::Shape(format!(
                "broadcast row must be [1, {f}], got [{rn}, {rf}]"
            )));
        }
        let xv = self.node(x).value.data();
        let rv = self.node(row).value.data();
        let mut out = Vec::with_capacity(n * f);
        for i in 0..n {
            for j in 0..f {
                out.push(xv[i * f + j] + rv[j]);
            }
        }
        let requires = self.requires_any(&[x.0, row.0]);
        let value = Tensor::new(vec![n, f], out)?;
        Ok(self.push(value, Op::AddRowBroadcast { x: x.0, row: row.0 }, requires))
    }

    // ----- pointwise ops --------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.node(x).value.data();
        let out: Vec<S> = xv.iter().map(|&v| if v > S::ZERO { v } else { S::ZERO }).collect();
        let dims = self.node(x).value.dims().to_vec();
        let requires = self.nodes[x.0].requires;
        let value = Tensor::new(dims, out)?;
        Ok(self.push(value, Op::Relu { x: x.0 }, requires))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = self.node(x).value.data();
        let out: Vec<S> = xv.iter().map(|&v| v.tanh()).collect();
        let dims = self.node(x).value.dims().to_vec();
        let requires = self.nodes[x.0].requires;
        let value = Tensor::new(dims, out)?;
        Ok(self.push(value, Op::Tanh { x: x.0 }, requires))
    }

    /// Row-wise softmax of a `[N, C]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let [n, c] = self.node(x).value.dims2()?;
        let xv = self.node(x).value.data();
        let mut out = vec![S::ZERO; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out[i * c + j] = S::from_f64(e / sum);
            }
        }
        let requires = self.nodes[x.0].requires;
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::SoftmaxRows { x: x.0 }, requires))
    }

    // ----- losses -----------------------------------------------------------

    /// Mean squared error over voxels whose mask weight is nonzero. Voxels
    /// with zero weight contribute nothing; an all-zero mask is degenerate.
    pub fn masked_mse_loss(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let pd = self.node(pred).value.dims();
        if pd != self.node(target).value.dims() || pd != self.node(mask).value.dims() {
            return Err(Error::Shape(format!(
                "masked mse operands disagree: pred {:?}, target {:?}, mask {:?}",
                pd,
                self.node(target).value.dims(),
                self.node(mask).value.dims()
            )));
        }
        let pv = self.node(pred).value.data();
        let tv = self.node(target).value.data();
        let mv = self.node(mask).value.data();
        let mut count = 0usize;
        let mut acc = 0f64;
        for i in 0..pv.len() {
            if mv[i] != S::ZERO {
                let d = pv[i].to_f64() - tv[i].to_f64();
                acc += d * d;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::DegenerateInput("masked mse over an all-zero mask".into()));
        }
        let requires = self.nodes[pred.0].requires;
        let value = Tensor::scalar(S::from_f64(acc / count as f64));
        Ok(self.push(
            value,
            Op::MaskedMse {
                pred: pred.0,
                target: target.0,
                mask: mask.0,
                count,
            },
            requires,
        ))
    }

    /// Mean negative log softmax probability of the true class per row of
    /// `[N, C]` logits.
    pub fn cross_entropy_loss(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let [n, c] = self.node(logits).value.dims2()?;
        if classes.len() != n {
            return Err(Error::Shape(format!(
                "{} class labels for {} logit rows",
                classes.len(),
                n
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::Validation(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let xv = self.node(logits).value.data();
        let mut probs = vec![S::ZERO; n * c];
        let mut acc = 0f64;
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                probs[i * c + j] = S::from_f64(e / sum);
            }
            acc -= (exps[classes[i]] / sum).ln();
        }
        let requires = self.nodes[logits.0].requires;
        let value = Tensor::scalar(S::from_f64(acc / n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                classes: classes.to_vec(),
                probs,
            },
            requires,
        ))
    }

    // ----- glue -------------------------------------------------------------

    /// Stacks 2-axis tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Validation("concat_rows of zero parts".into()));
        }
        let [_, c] = self.node(parts[0]).value.dims2()?;
        let mut rows = 0;
        for &p in parts {
            let [pn, pc] = self.node(p).value.dims2()?;
            if pc != c {
                return Err(Error::Shape(format!("column count mismatch: {pc} vs {c}")));
            }
            rows += pn;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.node(p).value.data());
        }
        let requires = parts.iter().any(|&p| self.nodes[p.0].requires);
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            requires,
        ))
    }

    /// Scalar projection `sum(x * weights)` with fixed weights; used to
    /// scalarize op outputs for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<S>) -> Result<Var> {
        if self.node(x).value.dims() != weights.dims() {
            return Err(Error::Shape(format!(
                "weighted_sum dims disagree: {:?} vs {:?}",
                self.node(x).value.dims(),
                weights.dims()
            )));
        }
        let mut acc = 0f64;
        for (a, b) in self.node(x).value.data().iter().zip(weights.data()) {
            acc += a.to_f64() * b.to_f64();
        }
        let requires = self.nodes[x.0].requires;
        let value = Tensor::scalar(S::from_f64(acc));
        Ok(self.push(
            value,
            Op::WeightedSum {
                x: x.0,
                weights: weights.clone(),
            },
            requires,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.node(x).value.data().iter().map(|&v| v * cs).collect();
        let dims = self.node(x).value.dims().to_vec();
        let requires = self.nodes[x.0].requires;
        let value = Tensor::new(dims, out)?;
        Ok(self.push(value, Op::Scale { x: x.0, c: cs }, requires))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Validation("add_n of zero parts".into()));
        }
        let dims = self.node(parts[0]).value.dims().to_vec();
        for &p in parts {
            if self.node(p).value.dims() != dims {
                return Err(Error::Shape(format!(
                    "add_n operand dims {:?} differ from {:?}",
                    self.node(p).value.dims(),
                    dims
                )));
            }
        }
        let mut out = vec![S::ZERO; self.node(parts[0]).value.len()];
        for &p in parts {
            for (o, &v) in out.iter_mut().zip(self.node(p).value.data()) {
                *o += v;
            }
        }
        let requires = parts.iter().any(|&p| self.nodes[p.0].requires);
        let value = Tensor::new(dims, out)?;
        Ok(self.push(
            value,
            Op::AddN {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            requires,
        ))
    }

    // ----- backward ---------------------------------------------------------

    fn accumulate(&mut self, id: usize, delta: Vec<S>) {
        if !self.nodes[id].requires {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.nodes[id].grad = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss; populates gradients of every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.node(loss).value.is_scalar() {
            return Err(Error::Validation(format!(
                "backward requires a scalar loss, got dims {:?}",
                self.node(loss).value.dims()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![S::ONE]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backward_op(id, &op);
            self.nodes[id].op = op;
        }
        Ok(())
    }

    /// Shared backward for matmul and dense: dX = g·Wᵀ, dW = Xᵀ·g, db = Σ g.
    fn backward_matmul(&mut self, x: usize, w: usize, b: Option<usize>, g: &[S]) {
        let [n, fin] = self.nodes[x].value.dims2().expect("matmul input is 2d");
        let fout = self.nodes[w].value.dims2().expect("matmul weight is 2d")[1];
        if self.nodes[x].requires {
            let wv = self.nodes[w].value.data();
            let mut dx = vec![S::ZERO; n * fin];
            for i in 0..n {
                let grow = &g[i * fout..(i + 1) * fout];
                for j in 0..fin {
                    dx[i * fin + j] = dot(grow, &wv[j * fout..(j + 1) * fout]);
                }
            }
            self.accumulate(x, dx);
        }
        if self.nodes[w].requires {
            let xv = self.nodes[x].value.data();
            let mut dw = vec![S::ZERO; fin * fout];
            for i in 0..n {
                let grow = &g[i * fout..(i + 1) * fout];
                for j in 0..fin {
                    axpy(xv[i * fin + j], grow, &mut dw[j * fout..(j + 1) * fout]);
                }
            }
            self.accumulate(w, dw);
        }
        if let Some(b) = b {
            if self.nodes[b].requires {
                let mut db = vec![S::ZERO; fout];
                for i in 0..n {
                    for j in 0..fout {
                        db[j] += g[i * fout + j];
                    }
                }
                self.accumulate(b, db);
            }
        }
    }

    fn backward_op(&mut self, id: usize, op: &Op<S>) {
        // The caller guarantees self.nodes[id].grad is Some.
        let g = self.nodes[id].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, xpad, pad_dims } => {
                let [bn, cout, nx, ny, nz] = self.nodes[id].value.dims5().expect("conv output is 5d");
                let wd = self.nodes[*w].value.dims5().expect("conv weight is 5d");
                let (cin, kx, ky, kz) = (wd[1], wd[2], wd[3], wd[4]);
                let (xp, yp, zp) = (pad_dims[2], pad_dims[3], pad_dims[4]);
                let wv = self.nodes[*w].value.data().to_vec();

                if self.nodes[*b].requires {
                    let mut db = vec![S::ZERO; cout];
                    for bi in 0..bn {
                        for co in 0..cout {
                            let obase = nx * ny * nz * (co + cout * bi);
                            let mut acc = S::ZERO;
                            for &v in &g[obase..obase + nx * ny * nz] {
                                acc += v;
                            }
                            db[co] += acc;
                        }
                    }
                    self.accumulate(*b, db);
                }
                if self.nodes[*w].requires {
                    let mut dw = vec![S::ZERO; cout * cin * kx * ky * kz];
                    for bi in 0..bn {
                        for co in 0..cout {
                            let obase = nx * ny * nz * (co + cout * bi);
                            for ci in 0..cin {
                                let pbase = xp * yp * zp * (ci + cin * bi);
                                for dz in 0..kz {
                                    for dy in 0..ky {
                                        for dx in 0..kx {
                                            let mut acc = S::ZERO;
                                            for z in 0..nz {
                                                for y in 0..ny {
                                                    let src = pbase + dx + xp * ((y + dy) + yp * (z + dz));
                                                    let dst = obase + nx * (y + ny * z);
                                                    acc += dot(&g[dst..dst + nx], &xpad[src..src + nx]);
                                                }
                                            }
                                            dw[dx + kx * (dy + ky * (dz + kz * (ci + cin * co)))] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*w, dw);
                }
                if self.nodes[*x].requires {
                    // dX is the padded output gradient gathered with the
                    // axis-flipped kernel, channels transposed.
                    let ksize = kx * ky * kz;
                    let mut wflip = vec![S::ZERO; cin * cout * ksize];
                    for co in 0..cout {
                        for ci in 0..cin {
                            for dz in 0..kz {
                                for dy in 0..ky {
                                    for dx in 0..kx {
                                        let src = dx + kx * (dy + ky * (dz + kz * (ci + cin * co)));
                                        let dst = (kx - 1 - dx)
                                            + kx * ((ky - 1 - dy) + ky * ((kz - 1 - dz) + kz * (co + cout * ci)));
                                        wflip[dst] = wv[src];
                                    }
                                }
                            }
                        }
                    }
                    let (gpad, gdims) =
                        pad_spatial(&g, (bn, cout, nx, ny, nz), (kx / 2, ky / 2, kz / 2));
                    let (gxp, gyp, gzp) = (gdims[2], gdims[3], gdims[4]);
                    let mut dx_full = vec![S::ZERO; bn * cin * nx * ny * nz];
                    for bi in 0..bn {
                        for ci in 0..cin {
                            let obase = nx * ny * nz * (ci + cin * bi);
                            let ochan = &mut dx_full[obase..obase + nx * ny * nz];
                            for co in 0..cout {
                                let pbase = gxp * gyp * gzp * (co + cout * bi);
                                let wbase = ksize * (co + cout * ci);
                                conv_gather_channel(
                                    &gpad[pbase..pbase + gxp * gyp * gzp],
                                    (gxp, gyp),
                                    &wflip[wbase..wbase + ksize],
                                    (kx, ky, kz),
                                    ochan,
                                    (nx, ny, nz),
                                );
                            }
                        }
                    }
                    self.accumulate(*x, dx_full);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![S::ZERO; self.nodes[*x].value.len()];
                for (j, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += g[j];
                }
                self.accumulate(*x, dx);
            }
            Op::UpsampleNn2 { x } => {
                let [bn, c, nx, ny, nz] = self.nodes[*x].value.dims5().expect("upsample input is 5d");
                let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
                let mut dx = vec![S::ZERO; self.nodes[*x].value.len()];
                for bi in 0..bn {
                    for ci in 0..c {
                        let ibase = nx * ny * nz * (ci + c * bi);
                        let obase = ox * oy * oz * (ci + c * bi);
                        for z in 0..oz {
                            for y in 0..oy {
                                let irow = ibase + nx * ((y / 2) + ny * (z / 2));
                                let orow = obase + ox * (y + oy * z);
                                for xo in 0..ox {
                                    dx[irow + xo / 2] += g[orow + xo];
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::ConcatChannels { a, b } => {
                let [bn, ca, nx, ny, nz] = self.nodes[*a].value.dims5().expect("concat lhs is 5d");
                let cb = self.nodes[*b].value.dims5().expect("concat rhs is 5d")[1];
                let spatial = nx * ny * nz;
                let mut da = vec![S::ZERO; self.nodes[*a].value.len()];
                let mut db = vec![S::ZERO; self.nodes[*b].value.len()];
                for bi in 0..bn {
                    let src = (ca + cb) * spatial * bi;
                    da[ca * spatial * bi..ca * spatial * (bi + 1)]
                        .copy_from_slice(&g[src..src + ca * spatial]);
                    db[cb * spatial * bi..cb * spatial * (bi + 1)]
                        .copy_from_slice(&g[src + ca * spatial..src + (ca + cb) * spatial]);
                }
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Matmul { x, w } => {
                self.backward_matmul(*x, *w, None, &g);
            }
            Op::Dense { x, w, b } => {
                self.backward_matmul(*x, *w, Some(*b), &g);
            }
            Op::MeanRows { x } => {
                let [n, f] = self.nodes[*x].value.dims2().expect("mean_rows input is 2d");
                let inv = S::from_f64(1.0 / n as f64);
                let mut dx = vec![S::ZERO; n * f];
                for i in 0..n {
                    for j in 0..f {
                        dx[i * f + j] = g[j] * inv;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::AddRowBroadcast { x, row } => {
                let [n, f] = self.nodes[*x].value.dims2().expect("broadcast input is 2d");
                self.accumulate(*x, g.clone());
                if self.nodes[*row].requires {
                    let mut dr = vec![S::ZERO; f];
                    for i in 0..n {
                        for j in 0..f {
                            dr[j] += g[i * f + j];
                        }
                    }
                    self.accumulate(*row, dr);
                }
            }
            Op::Relu { x } => {
                let yv = self.nodes[id].value.data();
                let dx: Vec<S> = g
                    .iter()
                    .zip(yv.iter())
                    .map(|(&gi, &yi)| if yi > S::ZERO { gi } else { S::ZERO })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Tanh { x } => {
                let yv = self.nodes[id].value.data();
                let dx: Vec<S> = g
                    .iter()
                    .zip(yv.iter())
                    .map(|(&gi, &yi)| gi * (S::ONE - yi * yi))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::SoftmaxRows { x } => {
                let [n, c] = self.nodes[id].value.dims2().expect("softmax output is 2d");
                let pv = self.nodes[id].value.data();
                let mut dx = vec![S::ZERO; n * c];
                for i in 0..n {
                    let p = &pv[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let inner = dot(gr, p);
                    for j in 0..c {
                        dx[i * c + j] = p[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::MaskedMse { pred, target, mask, count } => {
                let gs = g[0];
                let pv = self.nodes[*pred].value.data();
                let tv = self.nodes[*target].value.data();
                let mv = self.nodes[*mask].value.data();
                let two_over_m = S::from_f64(2.0 / *count as f64);
                let dx: Vec<S> = (0..pv.len())
                    .map(|i| {
                        if mv[i] != S::ZERO {
                            gs * two_over_m * (pv[i] - tv[i])
                        } else {
                            S::ZERO
                        }
                    })
                    .collect();
                self.accumulate(*pred, dx);
            }
            Op::CrossEntropy { logits, classes, probs } => {
                let gs = g[0];
                let [n, c] = self.nodes[*logits].value.dims2().expect("logits are 2d");
                let inv_n = S::from_f64(1.0 / n as f64);
                let mut dx = vec![S::ZERO; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let indicator = if classes[i] == j { S::ONE } else { S::ZERO };
                        dx[i * c + j] = gs * inv_n * (probs[i * c + j] - indicator);
                    }
                }
                self.accumulate(*logits, dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    let slice = g[offset..offset + len].to_vec();
                    self.accumulate(p, slice);
                    offset += len;
                }
            }
            Op::WeightedSum { x, weights } => {
                let gs = g[0];
                let dx: Vec<S> = weights.data().iter().map(|&w| gs * w).collect();
                self.accumulate(*x, dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<S> = g.iter().map(|&gi| gi * *c).collect();
                self.accumulate(*x, dx);
            }
            Op::AddN { parts } => {
                for &p in parts {
                    self.accumulate(p, g.clone());
                }
            }
        }
    }
}
