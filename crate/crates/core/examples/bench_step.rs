use deepgrade::neural::*;
use std::time::Instant;
fn main() {
    let cfg = UNetConfig::default();
    let mut net = UNet::<f32>::seeded(cfg, 3).unwrap();
    let dims = vec![8usize, 1, 12, 16, 12];
    let n: usize = dims.iter().product();
    let x = Tensor::<f32>::new(dims.clone(), (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let target = Tensor::<f32>::new(dims.clone(), vec![1.0; n]).unwrap();
    let mask = Tensor::new(dims.clone(), vec![1.0; n]).unwrap();
    let mut adam = AdamState::new(net.params(), AdamHyper::default());
    let t0 = Instant::now();
    let steps = 20;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let pvars = net.params_on_tape(&mut tape, true);
        let xv = tape.leaf(x.clone(), false);
        let out = net.forward_from(&mut tape, xv, &pvars).unwrap();
        let tv = tape.leaf(target.clone(), false);
        let mv = tape.leaf(mask.clone(), false);
        let loss = tape.masked_mse_loss(out, tv, mv).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Option<Tensor<f32>>> = pvars.iter().map(|&v| tape.grad(v)).collect();
        adam.step(net.params_mut(), &grads).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("batch-8 train step: {:.1} ms  ({:.2} s / 100 steps)", dt / steps as f64 * 1e3, dt / steps as f64 * 100.0);
    // inference fwd only
    let t0 = Instant::now();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let _ = net.infer(&mut tape, xv).unwrap();
    }
    println!("batch-8 fwd: {:.1} ms", t0.elapsed().as_secs_f64() / steps as f64 * 1e3);
}
