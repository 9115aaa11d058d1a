//! Central finite-difference gradient verification.
//!
//! Runs the engine in f64 so the check tolerance is meaningful: with
//! `h = 1e-5` the truncation and roundoff errors sit far below the 1e-5
//! relative-error bound.

use crate::error::Result;
use crate::neural::tape::{Tape, Var};
use crate::neural::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_element: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks analytic gradients of `build` (a scalar-valued graph over the
/// given inputs) against central finite differences, perturbing every
/// element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], settings: GradCheckSettings, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).dims().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &vs)?;
        t.scalar(l)
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_input: 0,
        worst_element: 0,
    };
    let h = settings.step;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - h;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti].data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = ti;
                report.worst_element = e;
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor with entries in `(-1, 1)`.
pub fn random_tensor(dims: Vec<usize>, rng: &mut impl rand::Rng) -> Tensor<f64> {
    Tensor::uniform(dims, 1.0, rng)
}

/// Random tensor whose entries stay at least `margin` away from zero, so
/// kinked ops (relu) see no sign flips under perturbation.
pub fn random_tensor_away_from_zero(dims: Vec<usize>, margin: f64, rng: &mut impl rand::Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(margin..1.0)
        })
        .collect();
    Tensor::new(dims, data).expect("dims and data agree")
}

/// Random tensor with pairwise-distinct entries separated by more than the
/// finite-difference step, so max-pool argmax choices are stable.
pub fn random_tensor_distinct(dims: Vec<usize>, rng: &mut impl rand::Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 1e-2).collect();
    use rand::seq::SliceRandom;
    values.shuffle(rng);
    let offset = rng.gen_range(-0.5..0.5);
    for v in &mut values {
        *v += offset;
    }
    Tensor::new(dims, values).expect("dims and data agree")
}
