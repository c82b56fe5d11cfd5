//! ELBO and importance-weighted ELBO estimates of `log Z`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{simulate_forward, BackwardPolicy, ForwardPolicy, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::model::SamplerModel;
use crate::objectives::log_rnd_from_cache;
use crate::targets::EnergyTarget;
use crate::timegrid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub elbo: f64,
    pub elbo_is: f64,
    /// `log Z - elbo` when the target's `log Z` is known.
    pub elbo_gap: Option<f64>,
    pub k: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "elbo,elbo_is,elbo_gap,k,n_eval,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            fmt_f64(self.elbo),
            fmt_f64(self.elbo_is),
            self.elbo_gap.map(fmt_f64).unwrap_or_default(),
            self.k,
            self.n_eval,
            self.seed
        )
    }
}

/// Round-trip formatting with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `log(mean(exp(values)))`, shifted by the maximum for stability.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// ELBO summaries of per-sample log-weights `log w_k = -log_rnd_k`.
pub fn summarize(log_weights: &[f64], log_z: Option<f64>, n_eval: usize, seed: u64) -> Result<EvalResult> {
    if log_weights.is_empty() {
        return Err(Error::invalid("ELBO needs at least one sample"));
    }
    let elbo = log_weights.iter().sum::<f64>() / log_weights.len() as f64;
    let elbo_is = if log_weights.len() == 1 { elbo } else { log_mean_exp(log_weights) };
    Ok(EvalResult {
        elbo,
        elbo_is,
        elbo_gap: log_z.map(|z| z - elbo),
        k: log_weights.len(),
        n_eval,
        seed,
    })
}

/// Per-sample log importance weights `log Q(x|x_N) - E(x_N) - log P(x)` of a batch
/// whose caches were filled by the evaluation policies.
pub fn log_weights(batch: &TrajectoryBatch, target: &dyn EnergyTarget) -> Result<Vec<f64>> {
    Ok(log_rnd_from_cache(batch, target)?.into_iter().map(|v| -v).collect())
}

/// Simulates `k` on-policy trajectories on `uniform(n_eval)` and summarizes
/// their log-weights. Uses the model's learned reverse kernel if it has one,
/// else the Brownian bridge.
pub fn elbo(model: &SamplerModel, target: &dyn EnergyTarget, n_eval: usize, k: usize, seed: u64) -> Result<EvalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    elbo_with_rng(model, target, n_eval, k, &mut rng, seed)
}

pub fn elbo_with_rng(
    model: &SamplerModel,
    target: &dyn EnergyTarget,
    n_eval: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<EvalResult> {
    if k == 0 {
        return Err(Error::invalid("ELBO needs K >= 1 samples"));
    }
    let grid = TimeGrid::uniform(n_eval)?;
    let drift = model.forward_drift(Some(target))?;
    let fwd = ForwardPolicy::new(&drift, model.sigma(), grid.clone())?;
    let reverse = model.reverse_drift();
    let bwd = match &reverse {
        Some(r) => BackwardPolicy::learned(r, model.sigma(), grid)?,
        None => BackwardPolicy::bridge(model.sigma(), grid)?,
    };
    let mut batch = simulate_forward(&fwd, k, rng, 0.0)?;
    batch.fill_log_probs(None, Some(&bwd))?;
    let lw = log_weights(&batch, target)?;
    if lw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("log importance weight"));
    }
    summarize(&lw, target.exact_log_z(), n_eval, seed)
}
