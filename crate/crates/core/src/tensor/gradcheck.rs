//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on probed coordinates across all leaves. When the leaves
    /// hold more coordinates than this, a seeded random subset is probed.
    pub max_probes: usize,
    /// Relative errors are measured against `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_probes: 256,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub failures: Vec<Probe>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && !self.probes.is_empty()
    }
}

fn probe_coordinates(leaves: &[Tensor<f64>], opts: &GradCheckOptions) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(l, t)| (0..t.len()).map(move |i| (l, i)))
        .collect();
    if all.len() <= opts.max_probes {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked: Vec<(usize, usize)> = sample(&mut rng, all.len(), opts.max_probes)
        .into_iter()
        .map(|i| all[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Compares `analytic` (one gradient tensor per leaf) against central
/// differences of `loss`. Failures are reported, not raised; only errors
/// from `loss` itself propagate.
pub fn grad_check<F>(
    leaves: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    assert_eq!(leaves.len(), analytic.len(), "one analytic gradient per leaf");
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    let mut report = GradCheckReport {
        tol: opts.tol,
        ..Default::default()
    };
    for (leaf, index) in probe_coordinates(leaves, &opts) {
        let orig = work[leaf].data()[index];
        work[leaf].data_mut()[index] = orig + opts.eps;
        let plus = loss(&work)?;
        work[leaf].data_mut()[index] = orig - opts.eps;
        let minus = loss(&work)?;
        work[leaf].data_mut()[index] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[leaf].data()[index];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel_error = (a - numeric).abs() / denom;
        let probe = Probe {
            leaf,
            index,
            analytic: a,
            numeric,
            rel_error,
        };
        if !(rel_error <= opts.tol) {
            report.failures.push(probe);
        }
        if rel_error > report.max_rel_error || rel_error.is_nan() {
            report.max_rel_error = rel_error;
        }
        report.probes.push(probe);
    }
    Ok(report)
}

/// Runs [`grad_check`] on a computation recorded through a [`Tape`]: the
/// analytic side comes from [`Tape::backward`], the numeric side from
/// re-running `build` on perturbed leaves.
pub fn grad_check_tape<F>(
    leaves: &[Tensor<f64>],
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(tape);
    grad_check(
        leaves,
        &analytic,
        |values| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars)?;
            Ok(tape.value(out).data()[0])
        },
        opts,
    )
}
