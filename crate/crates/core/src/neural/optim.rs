//! Adam optimizer with bias-corrected moments.

use crate::error::{Error, Result};
use crate::neural::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step count.
pub struct AdamState<S: Scalar> {
    hyper: AdamHyper,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>], hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: params.iter().map(|p| Tensor::zeros(p.dims().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dims().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Gradients must be index-aligned with
    /// the parameter list given at construction; missing gradients (None)
    /// leave the parameter and its moments untouched.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Option<Tensor<S>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Validation(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let corr1 = 1.0 - b1.powi(t);
        let corr2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            if g.dims() != params[i].dims() {
                return Err(Error::Shape(format!(
                    "gradient dims {:?} do not match parameter dims {:?}",
                    g.dims(),
                    params[i].dims()
                )));
            }
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for e in 0..p.len() {
                let ge = g.data()[e].to_f64();
                let me = b1 * m[e].to_f64() + (1.0 - b1) * ge;
                let ve = b2 * v[e].to_f64() + (1.0 - b2) * ge * ge;
                m[e] = S::from_f64(me);
                v[e] = S::from_f64(ve);
                let m_hat = me / corr1;
                let v_hat = ve / corr2;
                p[e] = S::from_f64(p[e].to_f64() - self.hyper.lr * m_hat / (v_hat.sqrt() + self.hyper.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first step exactly lr / (1 + eps) for
        // a unit gradient.
        let mut params = vec![Tensor::<f64>::scalar(0.0)];
        let mut state = AdamState::new(&params, AdamHyper::default());
        let grads = vec![Some(Tensor::scalar(1.0))];
        state.step(&mut params, &grads).unwrap();
        let got = params[0].data()[0];
        assert!((got + 1e-3).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (p - 3)^2 by feeding its gradient.
        let mut params = vec![Tensor::<f64>::scalar(0.0)];
        let mut state = AdamState::new(
            &params,
            AdamHyper {
                lr: 0.1,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let p = params[0].data()[0];
            let grads = vec![Some(Tensor::scalar(2.0 * (p - 3.0)))];
            state.step(&mut params, &grads).unwrap();
        }
        assert!((params[0].data()[0] - 3.0).abs() < 1e-3);
    }
}
