use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::params::{ParamVars, ParameterStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_tensor: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("objective is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("objective did not produce a scalar")]
    NonScalar,
    #[error("objective failed: {0}")]
    Objective(#[from] crate::Error),
}

fn evaluate<F>(params: &ParameterStore, f: &F) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &ParamVars<'_>) -> Result<Var, crate::Error>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars)?;
    tape.value(out).item().ok_or(GradCheckError::NonScalar)
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// The relative error of each coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`; the maximum over all checked
/// coordinates is reported.
pub fn grad_check<F>(
    params: &ParameterStore,
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &ParamVars<'_>) -> Result<Var, crate::Error>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item().ok_or(GradCheckError::NonScalar)?;
    tape.backward(loss).map_err(crate::Error::from)?;
    let analytic = vars.grads(&tape);

    let again = evaluate(params, &f)?;
    if again.to_bits() != base.to_bits() {
        return Err(GradCheckError::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    for (slot, (name, tensor)) in params.iter().enumerate() {
        let len = tensor.len();
        let coords: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut picked = sample(&mut rng, len, cfg.samples_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        for idx in coords {
            let original = tensor.data()[idx];
            probe.tensor_mut(slot).data_mut()[idx] = original + cfg.eps;
            let plus = evaluate(&probe, &f)?;
            probe.tensor_mut(slot).data_mut()[idx] = original - cfg.eps;
            let minus = evaluate(&probe, &f)?;
            probe.tensor_mut(slot).data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[slot].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.to_string();
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
