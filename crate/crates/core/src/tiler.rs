//! Patch-grid planning, patch extraction, and overlap-averaged reassembly.
//!
//! A grid places `k^3` equal-sized overlapping patches across a volume so
//! that every voxel is covered; reassembly averages all predictions covering
//! a voxel, summing in ascending location order with f64 accumulation so the
//! result is bit-stable regardless of scheduling.

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Deterministic layout of `k^3` overlapping patch origins. The location
/// index runs x-fastest: `loc = ix + k * (iy + k * iz)`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchGrid {
    pub k: usize,
    pub patch_dims: [usize; 3],
    pub volume_dims: [usize; 3],
    origins: Vec<[usize; 3]>,
}

impl PatchGrid {
    /// Number of patch locations, `k^3`.
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[[usize; 3]] {
        &self.origins
    }

    pub fn origin(&self, loc: usize) -> Result<[usize; 3]> {
        self.origins
            .get(loc)
            .copied()
            .ok_or_else(|| Error::Validation(format!("location {loc} out of range 0..{}", self.origins.len())))
    }
}

/// Rounded linear spacing including both extremes; `k = 1` centers the
/// single patch.
fn axis_origins(dim: usize, patch: usize, k: usize) -> Vec<usize> {
    let slack = (dim - patch) as f64;
    if k == 1 {
        return vec![(slack / 2.0).round() as usize];
    }
    (0..k)
        .map(|i| (i as f64 * slack / (k - 1) as f64).round() as usize)
        .collect()
}

/// Plans a `k^3` grid of `patch_dims` patches over `volume_dims`.
///
/// Per axis, origin `i` is `round(i * (D - P) / (k - 1))` (the single `k = 1`
/// patch is centered). Fails with a coverage error naming the first
/// uncovered voxel when the stride exceeds the patch size.
pub fn plan_grid(volume_dims: [usize; 3], patch_dims: [usize; 3], k: usize) -> Result<PatchGrid> {
    if k < 1 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    for a in 0..3 {
        if patch_dims[a] == 0 || patch_dims[a] > volume_dims[a] {
            return Err(Error::Validation(format!(
                "patch dims {:?} must be in 1..={:?} per axis",
                patch_dims, volume_dims
            )));
        }
    }
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_origins(volume_dims[a], patch_dims[a], k))
        .collect();
    // Origins are monotone per axis, so a gap is a stride larger than P.
    for a in 0..3 {
        for w in per_axis[a].windows(2) {
            if w[1] > w[0] + patch_dims[a] {
                let mut voxel = [0usize; 3];
                voxel[a] = w[0] + patch_dims[a];
                return Err(Error::Coverage(voxel[0], voxel[1], voxel[2]));
            }
        }
    }
    let mut origins = Vec::with_capacity(k * k * k);
    for &oz in &per_axis[2] {
        for &oy in &per_axis[1] {
            for &ox in &per_axis[0] {
                origins.push([ox, oy, oz]);
            }
        }
    }
    Ok(PatchGrid {
        k,
        patch_dims,
        volume_dims,
        origins,
    })
}

/// Copies the patch at location `loc` out of `v`.
pub fn extract_patch(v: &Volume3D, grid: &PatchGrid, loc: usize) -> Result<Volume3D> {
    if v.dims() != grid.volume_dims {
        return Err(Error::Shape(format!(
            "volume dims {:?} do not match grid dims {:?}",
            v.dims(),
            grid.volume_dims
        )));
    }
    let o = grid.origin(loc)?;
    let p = grid.patch_dims;
    let mut data = Vec::with_capacity(p[0] * p[1] * p[2]);
    for z in 0..p[2] {
        for y in 0..p[1] {
            let row = v.index(o[0], o[1] + y, o[2] + z);
            data.extend_from_slice(&v.data()[row..row + p[0]]);
        }
    }
    Volume3D::new(p, v.spacing(), data)
}

/// Reassembles per-location predictions into a full-volume map.
///
/// Every output voxel is the arithmetic mean of the predictions of all
/// patches covering it; sums accumulate in f64 in ascending location order.
pub fn assemble(predictions: &[Volume3D], grid: &PatchGrid) -> Result<Volume3D> {
    if predictions.len() != grid.len() {
        return Err(Error::Validation(format!(
            "expected {} predictions, got {}",
            grid.len(),
            predictions.len()
        )));
    }
    let p = grid.patch_dims;
    for (loc, pred) in predictions.iter().enumerate() {
        if pred.dims() != p {
            return Err(Error::Shape(format!(
                "prediction at location {loc} has dims {:?}, expected {:?}",
                pred.dims(),
                p
            )));
        }
    }
    let d = grid.volume_dims;
    let n = d[0] * d[1] * d[2];
    let mut sums = vec![0f64; n];
    let mut counts = vec![0u32; n];
    for (loc, pred) in predictions.iter().enumerate() {
        let o = grid.origins[loc];
        for z in 0..p[2] {
            for y in 0..p[1] {
                let src = pred.index(0, y, z);
                let dst = o[0] + d[0] * ((o[1] + y) + d[1] * (o[2] + z));
                let row = &pred.data()[src..src + p[0]];
                for (x, &v) in row.iter().enumerate() {
                    sums[dst + x] += f64::from(v);
                    counts[dst + x] += 1;
                }
            }
        }
    }
    debug_assert!(counts.iter().all(|&c| c > 0), "grid coverage is checked at planning time");
    let data = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| (s / f64::from(c)) as f32)
        .collect();
    // Spacing of the assembled map matches the patch spacing.
    Volume3D::new(d, predictions[0].spacing(), data)
}
