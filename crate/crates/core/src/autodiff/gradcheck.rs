//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::graph::{Graph, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input (chosen by `seed`);
    /// `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
}

/// Relative error with the floor `max(|a|, |b|, 1e-8)` in the denominator.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares autodiff gradients of the scalar returned by `f` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, at 64-bit.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = input.data()[j];
            probe[ii].data_mut()[j] = x0 + opts.eps;
            let fp = eval(&probe)?;
            probe[ii].data_mut()[j] = x0 - opts.eps;
            let fm = eval(&probe)?;
            probe[ii].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[ii].data()[j];
            let err = rel_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ii, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Weighted-sum projection `sum(y * w)` used to turn any tensor output into a
/// generic scalar loss for checking; `w` is deterministic in `seed`.
pub fn random_projection(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let wv = g.constant(w);
    let prod = g.mul(y, wv)?;
    g.sum(prod)
}

/// Uniform random tensor in `[-1, 1)`.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
