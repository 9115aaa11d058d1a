//! Minimal reverse-mode network engine: enough ops for small 3D U-Nets,
//! dense/graph layers, and their Adam training, with an f64 mode for
//! finite-difference gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use optim::{AdamHyper, AdamState};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use unet::{UNet, UNetConfig};

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, random_tensor, random_tensor_away_from_zero, random_tensor_distinct, GradCheckSettings};
    use super::*;
    use crate::seeds;
    use rand::Rng;

    /// Direct 7-loop convolution oracle, f64, same padding.
    fn conv3d_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
    ) -> Tensor<f64> {
        let [bn, cin, nx, ny, nz] = x.dims5().unwrap();
        let wd = w.dims5().unwrap();
        let (cout, kx, ky, kz) = (wd[0], wd[2], wd[3], wd[4]);
        let (px, py, pz) = (kx / 2, ky / 2, kz / 2);
        let xat = |bi: usize, ci: usize, xi: i64, yi: i64, zi: i64| -> f64 {
            if xi < 0 || yi < 0 || zi < 0 || xi >= nx as i64 || yi >= ny as i64 || zi >= nz as i64 {
                0.0
            } else {
                x.data()[xi as usize + nx * (yi as usize + ny * (zi as usize + nz * (ci + cin * bi)))]
            }
        };
        let mut out = Tensor::zeros(vec![bn, cout, nx, ny, nz]);
        for bi in 0..bn {
            for co in 0..cout {
                for z in 0..nz {
                    for y in 0..ny {
                        for xo in 0..nx {
                            let mut acc = b.data()[co];
                            for ci in 0..cin {
                                for dz in 0..kz {
                                    for dy in 0..ky {
                                        for dx in 0..kx {
                                            let wv = w.data()
                                                [dx + kx * (dy + ky * (dz + kz * (ci + cin * co)))];
                                            acc += wv
                                                * xat(
                                                    bi,
                                                    ci,
                                                    xo as i64 + dx as i64 - px as i64,
                                                    y as i64 + dy as i64 - py as i64,
                                                    z as i64 + dz as i64 - pz as i64,
                                                );
                                        }
                                    }
                                }
                            }
                            out.data_mut()[xo + nx * (y + ny * (z + nz * (co + cout * bi)))] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_identity_kernel_passes_input_through() {
        let mut tape = Tape::<f64>::new();
        let mut rng = seeds::rng(&[21]);
        let x = random_tensor(vec![1, 1, 4, 4, 4], &mut rng);
        let mut w = Tensor::zeros(vec![1, 1, 3, 3, 3]);
        w.data_mut()[1 + 3 * (1 + 3 * 1)] = 1.0; // center tap
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w, false);
        let bv = tape.leaf(Tensor::zeros(vec![1]), false);
        let y = tape.conv3d(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv3d_matches_direct_oracle() {
        let mut rng = seeds::rng(&[22]);
        for trial in 0..10 {
            let (cin, cout) = (1 + trial % 3, 1 + (trial / 2) % 3);
            let x = random_tensor(vec![2, cin, 4, 4, 4], &mut rng);
            let w = random_tensor(vec![cout, cin, 3, 3, 3], &mut rng);
            let b = random_tensor(vec![cout], &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let wv = tape.leaf(w.clone(), false);
            let bv = tape.leaf(b.clone(), false);
            let y = tape.conv3d(xv, wv, bv).unwrap();
            let want = conv3d_oracle(&x, &w, &b);
            for (got, want) in tape.value(y).data().iter().zip(want.data()) {
                assert!((got - want).abs() < 1e-5, "conv mismatch: {got} vs {want}");
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(), false);
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_mse_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), false);
        let t = tape.leaf(Tensor::new(vec![2], vec![-1.0, -1.0]).unwrap(), false);
        let m = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), false);
        let l = tape.masked_mse_loss(p, t, m).unwrap();
        assert!((tape.scalar(l).unwrap() - 2.0).abs() < 1e-12);

        // pred == target gives zero.
        let l2 = tape.masked_mse_loss(t, t, m).unwrap();
        assert_eq!(tape.scalar(l2).unwrap(), 0.0);

        // All-zero mask is degenerate.
        let zeros = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        assert!(tape.masked_mse_loss(p, t, zeros).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(), false);
        let l = tape.cross_entropy_loss(uniform, &[0]).unwrap();
        assert!((tape.scalar(l).unwrap() - 3f64.ln()).abs() < 1e-12);

        let confident = tape.leaf(Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap(), false);
        let l2 = tape.cross_entropy_loss(confident, &[0]).unwrap();
        assert!(tape.scalar(l2).unwrap() < 1e-4);

        let bad = tape.cross_entropy_loss(confident, &[5]);
        assert!(bad.is_err());
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.tanh(x).unwrap();
        let w = Tensor::scalar(1.0);
        let l = tape.weighted_sum(y, &w).unwrap();
        tape.backward(l).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    /// Gradient checks for every differentiable op on a handful of random
    /// shapes; the full >=20-shape suite lives in the acceptance tests.
    #[test]
    fn gradcheck_each_op_smoke() {
        let mut rng = seeds::rng(&[100]);
        let settings = GradCheckSettings::default();

        // conv3d: check x, w, b jointly.
        for _ in 0..2 {
            let inputs = vec![
                random_tensor(vec![1, 2, 4, 2, 2], &mut rng),
                random_tensor(vec![2, 2, 3, 3, 3], &mut rng),
                random_tensor(vec![2], &mut rng),
            ];
            let proj = random_tensor(vec![1, 2, 4, 2, 2], &mut rng);
            let r = check_gradients(&inputs, settings, |t, v| {
                let y = t.conv3d(v[0], v[1], v[2])?;
                t.weighted_sum(y, &proj)
            })
            .unwrap();
            assert!(r.passed(settings.tolerance), "conv3d rel err {}", r.max_rel_error);
        }

        // maxpool2 on tie-free input.
        let x = random_tensor_distinct(vec![1, 2, 4, 4, 2], &mut rng);
        let proj = random_tensor(vec![1, 2, 2, 2, 1], &mut rng);
        let r = check_gradients(&[x], settings, |t, v| {
            let y = t.maxpool2(v[0])?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "maxpool2 rel err {}", r.max_rel_error);

        // upsample_nn2.
        let x = random_tensor(vec![1, 2, 2, 2, 2], &mut rng);
        let proj = random_tensor(vec![1, 2, 4, 4, 4], &mut rng);
        let r = check_gradients(&[x], settings, |t, v| {
            let y = t.upsample_nn2(v[0])?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "upsample rel err {}", r.max_rel_error);

        // concat_channels.
        let a = random_tensor(vec![2, 2, 2, 2, 2], &mut rng);
        let b = random_tensor(vec![2, 3, 2, 2, 2], &mut rng);
        let proj = random_tensor(vec![2, 5, 2, 2, 2], &mut rng);
        let r = check_gradients(&[a, b], settings, |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "concat rel err {}", r.max_rel_error);

        // dense.
        let inputs = vec![
            random_tensor(vec![3, 4], &mut rng),
            random_tensor(vec![4, 2], &mut rng),
            random_tensor(vec![2], &mut rng),
        ];
        let proj = random_tensor(vec![3, 2], &mut rng);
        let r = check_gradients(&inputs, settings, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "dense rel err {}", r.max_rel_error);

        // relu away from the kink.
        let x = random_tensor_away_from_zero(vec![3, 5], 1e-3, &mut rng);
        let proj = random_tensor(vec![3, 5], &mut rng);
        let r = check_gradients(&[x], settings, |t, v| {
            let y = t.relu(v[0])?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "relu rel err {}", r.max_rel_error);

        // tanh.
        let x = random_tensor(vec![2, 3], &mut rng);
        let proj = random_tensor(vec![2, 3], &mut rng);
        let r = check_gradients(&[x], settings, |t, v| {
            let y = t.tanh(v[0])?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "tanh rel err {}", r.max_rel_error);

        // softmax_rows.
        let x = random_tensor(vec![3, 4], &mut rng);
        let proj = random_tensor(vec![3, 4], &mut rng);
        let r = check_gradients(&[x], settings, |t, v| {
            let y = t.softmax_rows(v[0])?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "softmax rel err {}", r.max_rel_error);

        // masked mse w.r.t. predictions.
        let pred = random_tensor(vec![2, 6], &mut rng);
        let target = random_tensor(vec![2, 6], &mut rng);
        let mask_data: Vec<f64> = (0..12).map(|i| f64::from(u8::from(i % 3 != 0))).collect();
        let mask = Tensor::new(vec![2, 6], mask_data).unwrap();
        let r = check_gradients(&[pred], settings, |t, v| {
            let tv = t.leaf(target.clone(), false);
            let mv = t.leaf(mask.clone(), false);
            t.masked_mse_loss(v[0], tv, mv)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "masked mse rel err {}", r.max_rel_error);

        // cross entropy w.r.t. logits.
        let logits = random_tensor(vec![4, 3], &mut rng);
        let classes = [0usize, 2, 1, 1];
        let r = check_gradients(&[logits], settings, |t, v| t.cross_entropy_loss(v[0], &classes)).unwrap();
        assert!(r.passed(settings.tolerance), "cross entropy rel err {}", r.max_rel_error);

        // mean_rows + add_row_broadcast + matmul composite (the graph-layer path).
        let inputs = vec![
            random_tensor(vec![4, 3], &mut rng),
            random_tensor(vec![3, 2], &mut rng),
            random_tensor(vec![3, 2], &mut rng),
        ];
        let proj = random_tensor(vec![4, 2], &mut rng);
        let r = check_gradients(&inputs, settings, |t, v| {
            let self_term = t.matmul(v[0], v[1])?;
            let mean = t.mean_rows(v[0])?;
            let neigh = t.matmul(mean, v[2])?;
            let y = t.add_row_broadcast(self_term, neigh)?;
            t.weighted_sum(y, &proj)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "graph layer rel err {}", r.max_rel_error);
    }

    #[test]
    fn gradcheck_whole_unet() {
        // End-to-end through every structural element of the net.
        let mut rng = seeds::rng(&[101]);
        let cfg = UNetConfig {
            in_channels: 1,
            levels: 2,
            base_channels: 2,
        };
        let net = UNet::<f64>::seeded(cfg, 77).unwrap();
        let x = random_tensor(vec![1, 1, 2, 4, 2], &mut rng);
        let target = random_tensor(vec![1, 1, 2, 4, 2], &mut rng);
        let mask = Tensor::new(vec![1, 1, 2, 4, 2], vec![1.0; 16]).unwrap();
        let inputs: Vec<Tensor<f64>> = std::iter::once(x.clone()).chain(net.params().iter().cloned()).collect();
        let settings = GradCheckSettings::default();
        let r = check_gradients(&inputs, settings, |t, v| {
            let pvars = &v[1..];
            let out = net.forward_from(t, v[0], pvars)?;
            let tv = t.leaf(target.clone(), false);
            let mv = t.leaf(mask.clone(), false);
            t.masked_mse_loss(out, tv, mv)
        })
        .unwrap();
        assert!(r.passed(settings.tolerance), "unet rel err {}", r.max_rel_error);
    }

    #[test]
    fn overfit_single_pair_under_500_steps() {
        // Training on one fixed (patch, target) pair drives masked MSE
        // below 1e-3 within 500 Adam steps at the default learning rate.
        let cfg = UNetConfig::default();
        let mut net = UNet::<f32>::seeded(cfg, 3).unwrap();
        let mut rng = seeds::rng(&[55]);
        let dims = vec![1usize, 1, 4, 4, 4];
        let x = Tensor::<f32>::uniform(dims.clone(), 1.0, &mut rng);
        // Mixed +-1/0 target as the grading task produces.
        let target_data: Vec<f32> = (0..64)
            .map(|i| match i % 3 {
                0 => 1.0,
                1 => -1.0,
                _ => 0.0,
            })
            .collect();
        let target = Tensor::new(dims.clone(), target_data).unwrap();
        let mask = Tensor::new(dims.clone(), vec![1.0; 64]).unwrap();
        let mut adam = AdamState::new(net.params(), AdamHyper::default());
        let mut last = f64::INFINITY;
        for step in 0..500 {
            let mut tape = Tape::new();
            let pvars = net.params_on_tape(&mut tape, true);
            let xv = tape.leaf(x.clone(), false);
            let out = net.forward_from(&mut tape, xv, &pvars).unwrap();
            let tv = tape.leaf(target.clone(), false);
            let mv = tape.leaf(mask.clone(), false);
            let loss = tape.masked_mse_loss(out, tv, mv).unwrap();
            last = tape.scalar(loss).unwrap();
            if last < 1e-3 {
                eprintln!("overfit reached {last:.2e} at step {step}");
                return;
            }
            tape.backward(loss).unwrap();
            let grads: Vec<Option<Tensor<f32>>> = pvars.iter().map(|&v| tape.grad(v)).collect();
            adam.step(net.params_mut(), &grads).unwrap();
        }
        panic!("masked MSE still {last:.3e} after 500 steps");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = || {
            let mut net = UNet::<f32>::seeded(UNetConfig::default(), 11).unwrap();
            let mut rng = seeds::rng(&[77]);
            let x = Tensor::<f32>::uniform(vec![1, 1, 2, 2, 2], 1.0, &mut rng);
            let t0 = Tensor::<f32>::uniform(vec![1, 1, 2, 2, 2], 1.0, &mut rng);
            let mask = Tensor::new(vec![1, 1, 2, 2, 2], vec![1.0; 8]).unwrap();
            let mut adam = AdamState::new(net.params(), AdamHyper::default());
            for _ in 0..5 {
                let mut tape = Tape::new();
                let pvars = net.params_on_tape(&mut tape, true);
                let xv = tape.leaf(x.clone(), false);
                let out = net.forward_from(&mut tape, xv, &pvars).unwrap();
                let tv = tape.leaf(t0.clone(), false);
                let mv = tape.leaf(mask.clone(), false);
                let loss = tape.masked_mse_loss(out, tv, mv).unwrap();
                tape.backward(loss).unwrap();
                let grads: Vec<Option<Tensor<f32>>> = pvars.iter().map(|&v| tape.grad(v)).collect();
                adam.step(net.params_mut(), &grads).unwrap();
            }
            net.params().to_vec()
        };
        assert_eq!(run(), run());
    }
}
