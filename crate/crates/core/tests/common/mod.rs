//! Shared helpers for integration tests: a central finite-difference oracle
//! that only ever calls forward passes.

#![allow(dead_code)]

pub mod grad_suite;

use movingparts::autodiff::{Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// ‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖), over all checked inputs.
    pub rel_error: f64,
    /// Largest per-component error scaled by max(|a|, |b|, 1).
    pub max_component: f64,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.rel_error <= GRAD_REL_TOL && self.max_component <= GRAD_REL_TOL
    }
}

/// Builds `f` on a fresh tape from `inputs` and returns its scalar value.
fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone().into(), false)).collect();
    f(&tape, &vars).value().item()
}

/// Compares the backward pass of `f` with central differences over every
/// element of the inputs whose `check` flag is set.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], check: &[bool]) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .zip(check)
        .map(|(t, &c)| tape.leaf(t.clone().into(), c))
        .collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).expect("scalar output");

    let mut diff2 = 0.0;
    let mut ad2 = 0.0;
    let mut fd2 = 0.0;
    let mut max_component = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        if !check[k] {
            continue;
        }
        let ad = grads.get_or_zeros(vars[k]);
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let fd = (eval(&f, &plus) - eval(&f, &minus)) / (2.0 * FD_STEP);
            let a = ad.data()[e];
            diff2 += (a - fd).powi(2);
            ad2 += a * a;
            fd2 += fd * fd;
            max_component = max_component.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
        }
    }
    let denom = ad2.sqrt().max(fd2.sqrt());
    let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    GradReport {
        rel_error,
        max_component,
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes to the checked gradient.
pub fn project<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Var<'t, f64> {
    let w = out.tape().constant(
        Tensor::new(out.shape(), weights.data()[..out.value().len()].to_vec()).unwrap(),
    );
    out.mul(w).sum()
}
