//! Central finite-difference gradient checks, run in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Perturbation used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
const RELATIVE_FLOOR: f64 = 1e-5;
/// Smallest step tried when a probe straddles a kink.
pub const MIN_STEP: f64 = 1e-7;

fn rel_error(a: f64, b: f64) -> f64 {
    let rel = (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR);
    if rel.is_finite() {
        rel
    } else {
        f64::INFINITY
    }
}

/// Derivative estimate at `base`, normally a central difference.
///
/// When the central difference disagrees with `analytic`, a ReLU or
/// max-pool kink may lie inside the step. The step then shrinks (down to
/// [`MIN_STEP`]) and a one-sided slope that stays put as the step shrinks
/// is used instead, since it measures the linear piece the point sits on.
/// A wrong gradient matches no piece, so it still fails.
fn numeric_derivative(
    mut f: impl FnMut(f64) -> Result<f64>,
    base: f64,
    f0: f64,
    analytic: f64,
    tolerance: f64,
) -> Result<f64> {
    let mut h = DEFAULT_STEP;
    let mut previous: Option<(f64, f64)> = None;
    loop {
        let plus = f(base + h)?;
        let minus = f(base - h)?;
        let central = (plus - minus) / (2.0 * h);
        let (fwd, bwd) = ((plus - f0) / h, (f0 - minus) / h);
        if rel_error(analytic, central) <= tolerance {
            return Ok(central);
        }
        if let Some((pf, pb)) = previous {
            let stable: Vec<f64> = [(pf, fwd), (pb, bwd)]
                .into_iter()
                .filter(|&(wide, narrow)| rel_error(wide, narrow) <= tolerance)
                .map(|(_, narrow)| narrow)
                .collect();
            // Both sides stable means the kink is at `base` itself; either
            // slope is a valid one-sided derivative there.
            if let Some(best) = stable.into_iter().min_by(|a, b| {
                rel_error(analytic, *a).total_cmp(&rel_error(analytic, *b))
            }) {
                return Ok(best);
            }
        }
        if h / 10.0 < MIN_STEP {
            return Ok(central);
        }
        previous = Some((fwd, bwd));
        h /= 10.0;
    }
}

/// One coordinate whose analytic and numeric gradients disagree.
#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        GradCheckReport {
            tolerance,
            checked: 0,
            max_rel_error: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, input: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = rel_error(analytic, numeric);
        self.checked += 1;
        self.max_rel_error = self.max_rel_error.max(rel);
        if rel > self.tolerance {
            self.failures.push(GradCheckFailure {
                input: input.to_string(),
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
}

fn scalar_of(v: &Var<'_, f64>) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::usage("gradient check needs a scalar-valued function"));
    }
    Ok(v.value().item())
}

/// Compare the tape's gradients of `f` with central differences at every
/// coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        scalar_of(&f(&tape, &vars)?)
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let f0 = scalar_of(&out)?;
    let grads = tape.backward(&out)?;

    let mut report = GradCheckReport::new(tolerance);
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.wrt(var).unwrap_or(&zeros);
        for i in 0..inputs[k].numel() {
            let base = inputs[k].data()[i];
            let a = analytic.data()[i];
            let numeric = numeric_derivative(
                |v| {
                    probe[k].data_mut()[i] = v;
                    eval(&probe)
                },
                base,
                f0,
                a,
                tolerance,
            )?;
            probe[k].data_mut()[i] = base;
            report.record(&format!("input{k}"), i, a, numeric);
        }
    }
    Ok(report)
}

/// Gradient check of a loss with respect to the parameters in `store`,
/// probing up to `per_param` seeded coordinates of each parameter.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    per_param: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    let f0 = scalar_of(&out)?;
    let grads = tape.backward(&out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport::new(tolerance);
    for (id, p) in store.iter() {
        let n = p.value().numel();
        let zeros = Tensor::zeros(p.value().shape());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        let picks = sample(&mut rng, n, per_param.min(n));
        for i in picks.iter() {
            let base = p.value().data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.get_mut(id).value_mut().data_mut()[i] = v;
                let tape = Tape::inference();
                scalar_of(&f(&tape, &probe)?)
            };
            let a = analytic.data()[i];
            let numeric = numeric_derivative(&mut eval_at, base, f0, a, tolerance)?;
            probe.get_mut(id).value_mut().data_mut()[i] = base;
            report.record(&p.name, i, a, numeric);
        }
    }
    Ok(report)
}
