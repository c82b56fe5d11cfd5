//! Trajectory-level training losses.
//!
//! Every loss is built on the per-trajectory log-ratio
//! `log_rnd = sum_n log pi_fwd(x_{n+1}|x_n) + E(x_N) - sum_n log pi_bwd(x_n|x_{n+1})`,
//! which equals `log dP/dQ - log Z` for the forward path measure `P` and the
//! target-started backward measure `Q`. The Dirac prior at the origin
//! contributes no density on either side.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::dynamics::{standard_normal, BackwardPolicy, ForwardPolicy, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::model::{FlowMode, SamplerModel};
use crate::targets::{energy_and_grad_batch, energy_batch, EnergyTarget};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubTbWeighting {
    Uniform,
    /// Subtrajectory of length `k` weighted by `lambda^k`.
    Geometric(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Pis,
    Tb,
    VarGrad,
    Db { flow: FlowMode },
    SubTb { flow: FlowMode, weighting: SubTbWeighting },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Pis => "pis",
            Objective::Tb => "tb",
            Objective::VarGrad => "vargrad",
            Objective::Db { flow: FlowMode::ForwardLooking } => "fldb",
            Objective::Db { .. } => "db",
            Objective::SubTb { .. } => "subtb",
        }
    }

    /// Whether training batches may come from a noise-inflated policy.
    pub fn off_policy(&self) -> bool {
        !matches!(self, Objective::Pis)
    }
}

/// Per-trajectory pieces of `log_rnd`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossComponents {
    pub sum_fwd_logprob: Vec<f64>,
    pub sum_bwd_logprob: Vec<f64>,
    pub terminal_energy: Vec<f64>,
    pub log_z_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// TB: `log Z_hat + log_rnd`; VarGrad: `log_rnd - mean(log_rnd)`;
    /// PIS: `log_rnd`; DB/SubTB: sum of the per-step discrepancies.
    pub per_traj_delta: Vec<f64>,
    /// `[B, N]` per-step discrepancies for DB-type losses.
    pub step_deltas: Option<Array2<f64>>,
    pub components: LossComponents,
}

fn column(v: &Array2<f64>) -> Vec<f64> {
    v.column(0).to_vec()
}

/// Plain per-trajectory `log_rnd`.
pub fn log_rnd(
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
) -> Result<Vec<f64>> {
    Ok(log_rnd_components(batch, fwd, bwd, target)?.0)
}

/// `log_rnd` together with its components.
pub fn log_rnd_components(
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
) -> Result<(Vec<f64>, LossComponents)> {
    let b = batch.batch_size();
    let mut sf = vec![0.0; b];
    let mut sb = vec![0.0; b];
    for n in 0..batch.steps() {
        let lf = fwd.log_prob_batch(&batch.states[n], &batch.states[n + 1], n)?;
        let lb = bwd.log_prob_batch(&batch.states[n + 1], &batch.states[n], n)?;
        for i in 0..b {
            sf[i] += lf[[i, 0]];
            sb[i] += lb[[i, 0]];
        }
    }
    let energy = column(&energy_batch(target, batch.terminal())?);
    let lr: Vec<f64> = (0..b).map(|i| sf[i] + energy[i] - sb[i]).collect();
    if lr.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("log_rnd"));
    }
    let comps = LossComponents { sum_fwd_logprob: sf, sum_bwd_logprob: sb, terminal_energy: energy, log_z_used: 0.0 };
    Ok((lr, comps))
}

/// `log_rnd` computed from the cached log-probabilities of a batch.
pub fn log_rnd_from_cache(batch: &TrajectoryBatch, target: &dyn EnergyTarget) -> Result<Vec<f64>> {
    let (Some(f), Some(b)) = (&batch.fwd_logprob, &batch.bwd_logprob) else {
        return Err(Error::invalid("batch has no cached log-probabilities"));
    };
    let energy = energy_batch(target, batch.terminal())?;
    Ok((0..batch.batch_size())
        .map(|i| f.row(i).sum() + energy[[i, 0]] - b.row(i).sum())
        .collect())
}

/// Recorded per-step log-probabilities on detached states.
struct StepTerms {
    states: Vec<Var>,
    fwd: Vec<Var>,
    bwd: Vec<Var>,
}

fn record_steps(
    g: &mut Graph,
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
) -> Result<StepTerms> {
    let states: Vec<Var> = batch.states.iter().map(|s| g.constant(s.clone())).collect();
    let mut lf = Vec::with_capacity(batch.steps());
    let mut lb = Vec::with_capacity(batch.steps());
    for n in 0..batch.steps() {
        lf.push(fwd.log_prob_var(g, states[n], states[n + 1], n)?);
        lb.push(bwd.log_prob_var(g, states[n + 1], states[n], n)?);
    }
    Ok(StepTerms { states, fwd: lf, bwd: lb })
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Records `log_rnd` as a `[B, 1]` node over detached states.
fn record_log_rnd(
    g: &mut Graph,
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
) -> Result<(Var, LossComponents)> {
    check_batch(batch, fwd)?;
    let terms = record_steps(g, batch, fwd, bwd)?;
    let sf = sum_vars(g, &terms.fwd);
    let sb = sum_vars(g, &terms.bwd);
    let energy = energy_batch(target, batch.terminal())?;
    let comps = LossComponents {
        sum_fwd_logprob: column(g.value(sf)),
        sum_bwd_logprob: column(g.value(sb)),
        terminal_energy: column(&energy),
        log_z_used: 0.0,
    };
    let e = g.constant(energy);
    let diff = g.sub(sf, sb);
    Ok((g.add(diff, e), comps))
}

fn check_batch(batch: &TrajectoryBatch, fwd: &ForwardPolicy<'_>) -> Result<()> {
    if batch.dim() != fwd.dim() {
        return Err(Error::DimensionMismatch { expected: fwd.dim(), got: batch.dim() });
    }
    if batch.grid != fwd.grid {
        return Err(Error::invalid("batch grid differs from the policy grid"));
    }
    if batch.states.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteValue("trajectory state"));
    }
    Ok(())
}

fn finish(g: &Graph, loss: Var) -> Result<(f64, Gradients)> {
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteValue("loss"));
    }
    Ok((value, g.backward(loss)?))
}

/// `mean_b (log Z_hat + log_rnd_b)^2` with the model's learned `log Z_hat`.
pub fn tb_loss(
    model: &SamplerModel,
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
) -> Result<(LossReport, Gradients)> {
    let mut g = Graph::new();
    let (lr, mut comps) = record_log_rnd(&mut g, batch, fwd, bwd, target)?;
    let lz = model.record_log_z(&mut g);
    let delta = g.add_scalar(lr, lz);
    let sq = g.square(delta);
    let loss = g.mean(sq);
    comps.log_z_used = model.log_z_hat();
    let per_traj_delta = column(g.value(delta));
    let (value, grads) = finish(&g, loss)?;
    Ok((LossReport { loss: value, per_traj_delta, step_deltas: None, components: comps }, grads))
}

/// Batch variance of `log_rnd` (divisor `B`).
pub fn vargrad_loss(
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
) -> Result<(LossReport, Gradients)> {
    if batch.batch_size() < 2 {
        return Err(Error::invalid("VarGrad needs a batch of at least two trajectories"));
    }
    let mut g = Graph::new();
    let (lr, mut comps) = record_log_rnd(&mut g, batch, fwd, bwd, target)?;
    let m = g.mean(lr);
    let neg = g.scale(m, -1.0);
    let centered = g.add_scalar(lr, neg);
    let sq = g.square(centered);
    let loss = g.mean(sq);
    comps.log_z_used = -g.scalar(m);
    let per_traj_delta = column(g.value(centered));
    let (value, grads) = finish(&g, loss)?;
    Ok((LossReport { loss: value, per_traj_delta, step_deltas: None, components: comps }, grads))
}

/// Builds the log-flow columns `F_0..F_N`: `F_0 = log Z_hat` (the mass of the
/// Dirac start), interior flows from the model, `F_N = -E(x_N)`.
fn record_flows(
    g: &mut Graph,
    model: &SamplerModel,
    batch: &TrajectoryBatch,
    states: &[Var],
    target: &dyn EnergyTarget,
    mode: FlowMode,
) -> Result<Vec<Var>> {
    let n_steps = batch.steps();
    let rows = batch.batch_size();
    let mut flows = Vec::with_capacity(n_steps + 1);
    let lz = model.record_log_z(g);
    let zeros = g.constant(Array2::zeros((rows, 1)));
    flows.push(g.add_scalar(zeros, lz));
    for (n, &x) in states.iter().enumerate().take(n_steps).skip(1) {
        flows.push(model.record_flow(g, x, batch.grid.t(n), target, mode)?);
    }
    let energy = energy_batch(target, batch.terminal())?;
    flows.push(g.constant(-energy));
    Ok(flows)
}

/// Mean over batch and steps of the squared detailed-balance discrepancy
/// `F_n + log pi_fwd - F_{n+1} - log pi_bwd`.
pub fn db_loss(
    model: &SamplerModel,
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
    mode: FlowMode,
) -> Result<(LossReport, Gradients)> {
    check_batch(batch, fwd)?;
    let mut g = Graph::new();
    let terms = record_steps(&mut g, batch, fwd, bwd)?;
    let flows = record_flows(&mut g, model, batch, &terms.states, target, mode)?;
    let mut deltas = Vec::with_capacity(batch.steps());
    for n in 0..batch.steps() {
        let a = g.add(flows[n], terms.fwd[n]);
        let b = g.add(flows[n + 1], terms.bwd[n]);
        deltas.push(g.sub(a, b));
    }
    let all = g.concat_cols(&deltas);
    let sq = g.square(all);
    let loss = g.mean(sq);
    let step_deltas = g.value(all).clone();
    let per_traj_delta = step_deltas.rows().into_iter().map(|r| r.sum()).collect();
    let comps = components_from_terms(&g, &terms, batch, target, model.log_z_hat())?;
    let (value, grads) = finish(&g, loss)?;
    Ok((LossReport { loss: value, per_traj_delta, step_deltas: Some(step_deltas), components: comps }, grads))
}

fn components_from_terms(
    g: &Graph,
    terms: &StepTerms,
    batch: &TrajectoryBatch,
    target: &dyn EnergyTarget,
    log_z: f64,
) -> Result<LossComponents> {
    let b = batch.batch_size();
    let mut sf = vec![0.0; b];
    let mut sb = vec![0.0; b];
    for (f, r) in terms.fwd.iter().zip(&terms.bwd) {
        for i in 0..b {
            sf[i] += g.value(*f)[[i, 0]];
            sb[i] += g.value(*r)[[i, 0]];
        }
    }
    Ok(LossComponents {
        sum_fwd_logprob: sf,
        sum_bwd_logprob: sb,
        terminal_energy: column(&energy_batch(target, batch.terminal())?),
        log_z_used: log_z,
    })
}

/// Weight matrix `w[n, m]` (upper triangle) over subtrajectories `n -> m`.
pub fn subtb_weights(steps: usize, weighting: SubTbWeighting) -> Result<Array2<f64>> {
    if let SubTbWeighting::Geometric(lambda) = weighting {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("geometric weighting needs lambda > 0, got {lambda}")));
        }
    }
    let mut w = Array2::zeros((steps + 1, steps + 1));
    for n in 0..=steps {
        for m in (n + 1)..=steps {
            w[[n, m]] = match weighting {
                SubTbWeighting::Uniform => 1.0,
                SubTbWeighting::Geometric(lambda) => lambda.powi((m - n) as i32),
            };
        }
    }
    Ok(w)
}

/// Weighted mean of squared subtrajectory discrepancies over all `0 <= n < m <= N`.
///
/// With `G_k = F_k - sum_{j<k} (log pi_fwd_j - log pi_bwd_j)` the discrepancy of
/// `n -> m` is `G_n - G_m`, so all pairs come from one pass of prefix sums.
pub fn subtb_loss(
    model: &SamplerModel,
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
    mode: FlowMode,
    weighting: SubTbWeighting,
) -> Result<(LossReport, Gradients)> {
    check_batch(batch, fwd)?;
    let steps = batch.steps();
    let weights = subtb_weights(steps, weighting)?;
    let norm = weights.sum() * batch.batch_size() as f64;
    let mut g = Graph::new();
    let terms = record_steps(&mut g, batch, fwd, bwd)?;
    let flows = record_flows(&mut g, model, batch, &terms.states, target, mode)?;
    let mut cols = Vec::with_capacity(steps + 1);
    cols.push(flows[0]);
    let mut prefix: Option<Var> = None;
    for n in 0..steps {
        let step = g.sub(terms.fwd[n], terms.bwd[n]);
        let p = match prefix {
            None => step,
            Some(p) => g.add(p, step),
        };
        prefix = Some(p);
        cols.push(g.sub(flows[n + 1], p));
    }
    let gmat = g.concat_cols(&cols);
    let loss = g.pairwise_sq(gmat, weights, norm);
    let gv = g.value(gmat).clone();
    let step_deltas = Array2::from_shape_fn((gv.nrows(), steps), |(b, n)| gv[[b, n]] - gv[[b, n + 1]]);
    let per_traj_delta = (0..gv.nrows()).map(|b| gv[[b, 0]] - gv[[b, steps]]).collect();
    let comps = components_from_terms(&g, &terms, batch, target, model.log_z_hat())?;
    let (value, grads) = finish(&g, loss)?;
    Ok((LossReport { loss: value, per_traj_delta, step_deltas: Some(step_deltas), components: comps }, grads))
}

/// Forward trajectories whose states stay differentiable in the drift parameters.
pub struct RecordedTrajectories {
    pub states: Vec<Var>,
    pub noises: Vec<Array2<f64>>,
}

/// Simulates on-policy paths inside `g`; the draws match [`crate::dynamics::simulate_forward`]
/// with the same rng state and zero exploration.
pub fn simulate_forward_recorded<R: Rng + ?Sized>(
    g: &mut Graph,
    fwd: &ForwardPolicy<'_>,
    batch: usize,
    rng: &mut R,
) -> Result<RecordedTrajectories> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let d = fwd.dim();
    let mut states = Vec::with_capacity(fwd.grid.steps() + 1);
    let mut noises = Vec::with_capacity(fwd.grid.steps());
    states.push(g.constant(Array2::zeros((batch, d))));
    for n in 0..fwd.grid.steps() {
        let dt = fwd.grid.dt(n);
        let x = states[n];
        let mu = fwd.drift.record(g, x, fwd.grid.t(n))?;
        let xi = standard_normal(rng, batch, d);
        let step = g.scale(mu, dt);
        let moved = g.add(x, step);
        let noise = g.constant(&xi * (fwd.sigma * dt.sqrt()));
        let next = g.add(moved, noise);
        if let Some(index) = g.value(next).rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { step: n + 1, index });
        }
        states.push(next);
        noises.push(xi);
    }
    Ok(RecordedTrajectories { states, noises })
}

impl RecordedTrajectories {
    /// Detached copy of the simulated paths.
    pub fn to_batch(&self, g: &Graph, fwd: &ForwardPolicy<'_>) -> TrajectoryBatch {
        TrajectoryBatch {
            grid: fwd.grid.clone(),
            states: self.states.iter().map(|&s| g.value(s).clone()).collect(),
            noises: self.noises.clone(),
            fwd_logprob: None,
            bwd_logprob: None,
        }
    }
}

/// Reparametrized KL objective `mean_b log_rnd_b`, differentiated through the
/// simulated states. On-policy only.
pub fn pis_kl_loss<R: Rng + ?Sized>(
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
    batch: usize,
    rng: &mut R,
    exploration_std: f64,
) -> Result<(LossReport, Gradients)> {
    if exploration_std != 0.0 {
        return Err(Error::invalid("the reparametrized KL objective is on-policy; exploration must be 0"));
    }
    let mut g = Graph::new();
    let sim = simulate_forward_recorded(&mut g, fwd, batch, rng)?;
    let d = fwd.dim();
    let mut sf = vec![0.0; batch];
    let mut bwd_terms = Vec::with_capacity(sim.noises.len());
    for (n, xi) in sim.noises.iter().enumerate() {
        // Under the reparametrization the forward residual is exactly the
        // injected noise, so these terms carry no parameter dependence.
        let var = fwd.sigma * fwd.sigma * fwd.grid.dt(n);
        for (i, row) in xi.rows().into_iter().enumerate() {
            sf[i] += crate::dynamics::gaussian_log_density(row.dot(&row) * var, var, d);
        }
        bwd_terms.push(bwd.log_prob_var(&mut g, sim.states[n + 1], sim.states[n], n)?);
    }
    let sb = sum_vars(&mut g, &bwd_terms);
    let terminal = sim.states[sim.states.len() - 1];
    let (energy, jac) = energy_and_grad_batch(target, g.value(terminal))?;
    let e = g.row_scalar(terminal, energy.clone(), jac);
    let sf_var = g.constant(Array2::from_shape_vec((batch, 1), sf.clone()).expect("column"));
    let a = g.add(sf_var, e);
    let lr = g.sub(a, sb);
    let loss = g.mean(lr);
    let comps = LossComponents {
        sum_fwd_logprob: sf,
        sum_bwd_logprob: column(g.value(sb)),
        terminal_energy: column(&energy),
        log_z_used: 0.0,
    };
    let per_traj_delta = column(g.value(lr));
    let (value, grads) = finish(&g, loss)?;
    Ok((LossReport { loss: value, per_traj_delta, step_deltas: None, components: comps }, grads))
}

/// Evaluates an off-policy objective on a detached batch.
pub fn batch_loss(
    objective: Objective,
    model: &SamplerModel,
    batch: &TrajectoryBatch,
    fwd: &ForwardPolicy<'_>,
    bwd: &BackwardPolicy<'_>,
    target: &dyn EnergyTarget,
) -> Result<(LossReport, Gradients)> {
    match objective {
        Objective::Tb => tb_loss(model, batch, fwd, bwd, target),
        Objective::VarGrad => vargrad_loss(batch, fwd, bwd, target),
        Objective::Db { flow } => db_loss(model, batch, fwd, bwd, target, flow),
        Objective::SubTb { flow, weighting } => subtb_loss(model, batch, fwd, bwd, target, flow, weighting),
        Objective::Pis => Err(Error::invalid("the KL objective simulates its own batch; use pis_kl_loss")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_forward, LinearDrift, ZeroDrift};
    use crate::model::{Arch, ModelOptions};
    use crate::targets::Gaussian;
    use crate::timegrid::TimeGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(dim: usize, seed: u64) -> SamplerModel {
        let arch = Arch { hidden_layers: 2, hidden_width: 8, time_embed_dim: 4 };
        let mut m = SamplerModel::new(dim, 1.0, arch, ModelOptions::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (_, p) in m.params_mut() {
            p.value.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        m
    }

    #[test]
    fn single_step_log_rnd_expansion() {
        let zero = ZeroDrift { dim: 1 };
        let grid = TimeGrid::uniform(1).unwrap();
        let fwd = ForwardPolicy::new(&zero, 1.0, grid.clone()).unwrap();
        let bwd = BackwardPolicy::bridge(1.0, grid).unwrap();
        let target = Gaussian::new(1, 2.0);
        let batch = simulate_forward(&fwd, 5, &mut ChaCha8Rng::seed_from_u64(1), 0.0).unwrap();
        let lr = log_rnd(&batch, &fwd, &bwd, &target).unwrap();
        for (i, v) in lr.iter().enumerate() {
            let x = batch.states[1][[i, 0]];
            let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * x * x + x * x / 8.0;
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn matched_gaussian_chain_has_zero_log_rnd() {
        let sigma = 1.4;
        let zero = ZeroDrift { dim: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = TimeGrid::random(12, 10.0, &mut rng).unwrap();
        let fwd = ForwardPolicy::new(&zero, sigma, grid.clone()).unwrap();
        let bwd = BackwardPolicy::bridge(sigma, grid).unwrap();
        let target = Gaussian::normalized(3, sigma);
        let batch = simulate_forward(&fwd, 32, &mut rng, 0.0).unwrap();
        for v in log_rnd(&batch, &fwd, &bwd, &target).unwrap() {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn energy_shift_moves_log_rnd() {
        struct Shifted(Gaussian, f64);
        impl EnergyTarget for Shifted {
            fn name(&self) -> &str {
                "shifted"
            }
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn energy_unchecked(&self, x: &[f64]) -> f64 {
                self.0.energy_unchecked(x) + self.1
            }
            fn grad_energy_unchecked(&self, x: &[f64], out: &mut [f64]) {
                self.0.grad_energy_unchecked(x, out)
            }
            fn exact_log_z(&self) -> Option<f64> {
                None
            }
        }
        let drift = LinearDrift::new(2, |t| -t);
        let grid = TimeGrid::uniform(6).unwrap();
        let fwd = ForwardPolicy::new(&drift, 1.0, grid.clone()).unwrap();
        let bwd = BackwardPolicy::bridge(1.0, grid).unwrap();
        let batch = simulate_forward(&fwd, 8, &mut ChaCha8Rng::seed_from_u64(4), 0.0).unwrap();
        let a = log_rnd(&batch, &fwd, &bwd, &Shifted(Gaussian::standard(2), 0.0)).unwrap();
        let b = log_rnd(&batch, &fwd, &bwd, &Shifted(Gaussian::standard(2), 2.5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn tb_loss_recombines_and_has_closed_form_log_z() {
        let mut model = small_model(2, 3);
        let target = Gaussian::standard(2);
        let grid = TimeGrid::uniform(5).unwrap();
        let bwd = BackwardPolicy::bridge(1.0, grid.clone()).unwrap();
        let (batch, lr) = {
            let drift = model.forward_drift(None).unwrap();
            let fwd = ForwardPolicy::new(&drift, 1.0, grid).unwrap();
            let batch = simulate_forward(&fwd, 16, &mut ChaCha8Rng::seed_from_u64(1), 0.3).unwrap();
            let lr = log_rnd(&batch, &fwd, &bwd, &target).unwrap();
            (batch, lr)
        };
        let mean = lr.iter().sum::<f64>() / lr.len() as f64;
        model.set_log_z_hat(-mean);
        let drift = model.forward_drift(None).unwrap();
        let fwd = ForwardPolicy::new(&drift, 1.0, batch.grid.clone()).unwrap();
        let (rep, grads) = tb_loss(&model, &batch, &fwd, &bwd, &target).unwrap();
        let mean_sq = rep.per_traj_delta.iter().map(|d| d * d).sum::<f64>() / 16.0;
        assert!((rep.loss - mean_sq).abs() < 1e-12);
        // At the batch-optimal log Z_hat the log Z gradient vanishes.
        assert!(grads.get(model.log_z_id()).unwrap()[[0, 0]].abs() < 1e-10);
    }

    #[test]
    fn tb_is_permutation_invariant() {
        let model = small_model(2, 5);
        let target = Gaussian::standard(2);
        let grid = TimeGrid::uniform(4).unwrap();
        let drift = model.forward_drift(None).unwrap();
        let fwd = ForwardPolicy::new(&drift, 1.0, grid.clone()).unwrap();
        let bwd = BackwardPolicy::bridge(1.0, grid).unwrap();
        let batch = simulate_forward(&fwd, 6, &mut ChaCha8Rng::seed_from_u64(2), 0.0).unwrap();
        let mut perm = batch.clone();
        let order = [3usize, 0, 5, 1, 4, 2];
        for s in perm.states.iter_mut() {
            let src = s.clone();
            for (i, &j) in order.iter().enumerate() {
                s.row_mut(i).assign(&src.row(j));
            }
        }
        let a = tb_loss(&model, &batch, &fwd, &bwd, &target).unwrap().0.loss;
        let b = tb_loss(&model, &perm, &fwd, &bwd, &target).unwrap().0.loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn vargrad_requires_two_trajectories() {
        let zero = ZeroDrift { dim: 1 };
        let grid = TimeGrid::uniform(3).unwrap();
        let fwd = ForwardPolicy::new(&zero, 1.0, grid.clone()).unwrap();
        let bwd = BackwardPolicy::bridge(1.0, grid).unwrap();
        let batch = simulate_forward(&fwd, 1, &mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
        assert!(vargrad_loss(&batch, &fwd, &bwd, &Gaussian::standard(1)).is_err());
    }

    #[test]
    fn pis_is_rejected_off_policy_and_zero_when_matched() {
        let zero = ZeroDrift { dim: 2 };
        let grid = TimeGrid::uniform(8).unwrap();
        let fwd = ForwardPolicy::new(&zero, 1.0, grid.clone()).unwrap();
        let bwd = BackwardPolicy::bridge(1.0, grid).unwrap();
        let target = Gaussian::normalized(2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(pis_kl_loss(&fwd, &bwd, &target, 4, &mut rng, 0.1).is_err());
        let (rep, _) = pis_kl_loss(&fwd, &bwd, &target, 64, &mut rng, 0.0).unwrap();
        assert!(rep.loss.abs() < 1e-10);
    }

    #[test]
    fn subtb_weights_shapes() {
        let w = subtb_weights(3, SubTbWeighting::Geometric(0.5)).unwrap();
        assert_eq!(w[[0, 3]], 0.125);
        assert_eq!(w[[2, 3]], 0.5);
        assert_eq!(w[[3, 0]], 0.0);
        assert!(subtb_weights(3, SubTbWeighting::Geometric(0.0)).is_err());
    }
}
