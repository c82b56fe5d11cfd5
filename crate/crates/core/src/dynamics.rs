//! Euler-Maruyama forward kernels, Brownian-bridge and learned reverse
//! kernels, and batched trajectory simulation from a Dirac prior at the origin.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::timegrid::TimeGrid;

/// A time-dependent vector field `mu(x, t)` on batches `[B, d]`.
pub trait DriftField {
    fn dim(&self) -> usize;

    /// Plain evaluation without recording.
    fn eval(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>>;

    /// Records the drift into `g`. Implementations must let gradients flow
    /// through `x` when `x` depends on parameters.
    fn record(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var>;
}

/// `mu = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDrift {
    pub dim: usize,
}

impl DriftField for ZeroDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Array2<f64>, _t: f64) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.dim()))
    }

    fn record(&self, g: &mut Graph, x: Var, _t: f64) -> Result<Var> {
        let shape = g.value(x).dim();
        Ok(g.constant(Array2::zeros(shape)))
    }
}

/// `mu(x, t) = a(t) x + b` for a scalar coefficient function `a` and a constant offset `b`.
pub struct LinearDrift<F: Fn(f64) -> f64> {
    pub dim: usize,
    pub coeff: F,
    pub offset: Vec<f64>,
}

impl<F: Fn(f64) -> f64> LinearDrift<F> {
    pub fn new(dim: usize, coeff: F) -> Self {
        LinearDrift { dim, coeff, offset: vec![0.0; dim] }
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        assert_eq!(offset.len(), self.dim);
        self.offset = offset;
        self
    }

    fn offset_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.dim), self.offset.clone()).expect("offset length")
    }
}

impl<F: Fn(f64) -> f64> DriftField for LinearDrift<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        Ok(x * (self.coeff)(t) + &self.offset_row())
    }

    fn record(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var> {
        let scaled = g.scale(x, (self.coeff)(t));
        let b = g.constant(self.offset_row());
        Ok(g.add_row(scaled, b))
    }
}

/// `log N(x; m, var I)` given `|x - m|^2`.
pub fn gaussian_log_density(sq_dist: f64, var: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * var).ln() - 0.5 * sq_dist / var
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn check_step(grid: &TimeGrid, n: usize) -> Result<f64> {
    if n >= grid.steps() {
        return Err(Error::invalid(format!("step {n} out of range for {} steps", grid.steps())));
    }
    let dt = grid.dt(n);
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("non-positive interval length at step {n}")));
    }
    Ok(dt)
}

fn row_matrix(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// Euler-Maruyama kernel `N(x + mu(x, t_n) dt_n, sigma^2 dt_n I)`.
pub struct ForwardPolicy<'a> {
    pub drift: &'a dyn DriftField,
    pub sigma: f64,
    pub grid: TimeGrid,
}

impl<'a> ForwardPolicy<'a> {
    pub fn new(drift: &'a dyn DriftField, sigma: f64, grid: TimeGrid) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(ForwardPolicy { drift, sigma, grid })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    /// `log pi_fwd(x_next | x)` at step `n`.
    pub fn log_prob(&self, x: &[f64], x_next: &[f64], n: usize) -> Result<f64> {
        let dt = check_step(&self.grid, n)?;
        let d = self.dim();
        for len in [x.len(), x_next.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, got: len });
            }
        }
        let mu = self.drift.eval(&row_matrix(x), self.grid.t(n))?;
        let sq: f64 = (0..d)
            .map(|j| {
                let r = x_next[j] - x[j] - mu[[0, j]] * dt;
                r * r
            })
            .sum();
        Ok(gaussian_log_density(sq, self.sigma * self.sigma * dt, d))
    }

    /// Per-row log-probabilities `[B, 1]` of a batched transition.
    pub fn log_prob_batch(&self, x: &Array2<f64>, x_next: &Array2<f64>, n: usize) -> Result<Array2<f64>> {
        let dt = check_step(&self.grid, n)?;
        let mu = self.drift.eval(x, self.grid.t(n))?;
        let resid = x_next - x - &(mu * dt);
        let sq = resid.mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1));
        let var = self.sigma * self.sigma * dt;
        Ok(sq.mapv(|s| gaussian_log_density(s, var, x.ncols())))
    }

    /// Recorded version of [`Self::log_prob_batch`].
    pub fn log_prob_var(&self, g: &mut Graph, x: Var, x_next: Var, n: usize) -> Result<Var> {
        let dt = check_step(&self.grid, n)?;
        let d = g.value(x).ncols();
        let mu = self.drift.record(g, x, self.grid.t(n))?;
        let step = g.scale(mu, dt);
        let mean = g.add(x, step);
        let resid = g.sub(x_next, mean);
        let sq = g.square(resid);
        let sq = g.sum_cols(sq);
        let var = self.sigma * self.sigma * dt;
        let scaled = g.scale(sq, -0.5 / var);
        Ok(g.shift(scaled, -0.5 * d as f64 * (2.0 * PI * var).ln()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardKind {
    /// Exact discrete reversal of driftless Brownian motion from the origin.
    Bridge,
    /// Reverse Euler-Maruyama with a learned drift evaluated at `t_{n+1}`.
    LearnedReverse,
}

pub struct BackwardPolicy<'a> {
    pub kind: BackwardKind,
    pub sigma: f64,
    pub grid: TimeGrid,
    pub reverse_drift: Option<&'a dyn DriftField>,
}

/// Mean coefficient and variance of a backward step, or `None` for the
/// degenerate step into the Dirac prior.
enum Kernel<'b> {
    Dirac,
    Bridge { coeff: f64, var: f64 },
    Reverse { drift: &'b dyn DriftField, t: f64, dt: f64, var: f64 },
}

impl<'a> BackwardPolicy<'a> {
    pub fn bridge(sigma: f64, grid: TimeGrid) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(BackwardPolicy { kind: BackwardKind::Bridge, sigma, grid, reverse_drift: None })
    }

    pub fn learned(reverse_drift: &'a dyn DriftField, sigma: f64, grid: TimeGrid) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(BackwardPolicy {
            kind: BackwardKind::LearnedReverse,
            sigma,
            grid,
            reverse_drift: Some(reverse_drift),
        })
    }

    fn kernel(&self, n: usize) -> Result<Kernel<'a>> {
        let dt = check_step(&self.grid, n)?;
        let t = self.grid.t(n);
        // The step into t_0 = 0 ends at the Dirac prior; its density is
        // dropped together with the prior term on the forward side.
        if t <= 0.0 {
            return Ok(Kernel::Dirac);
        }
        let s2 = self.sigma * self.sigma;
        match self.kind {
            BackwardKind::Bridge => {
                let ratio = t / (t + dt);
                Ok(Kernel::Bridge { coeff: ratio, var: s2 * ratio * dt })
            }
            BackwardKind::LearnedReverse => {
                let drift = self
                    .reverse_drift
                    .ok_or_else(|| Error::invalid("learned reverse policy has no drift model"))?;
                Ok(Kernel::Reverse { drift, t: self.grid.t(n + 1), dt, var: s2 * dt })
            }
        }
    }

    /// Mean of `x_n` given `x_{n+1}` and the kernel variance; `None` at the prior.
    fn mean_and_var(&self, x_next: &Array2<f64>, n: usize) -> Result<Option<(Array2<f64>, f64)>> {
        Ok(match self.kernel(n)? {
            Kernel::Dirac => None,
            Kernel::Bridge { coeff, var } => Some((x_next * coeff, var)),
            Kernel::Reverse { drift, t, dt, var } => {
                let mu = drift.eval(x_next, t)?;
                Some((x_next - &(mu * dt), var))
            }
        })
    }

    /// `log pi_bwd(x | x_next)` at step `n`; 0 for the step into the prior.
    pub fn log_prob(&self, x_next: &[f64], x: &[f64], n: usize) -> Result<f64> {
        if self.kind == BackwardKind::LearnedReverse && self.reverse_drift.is_none() {
            return Err(Error::invalid("learned reverse policy has no drift model"));
        }
        let d = x.len();
        if x_next.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x_next.len() });
        }
        let lp = self.log_prob_batch(&row_matrix(x_next), &row_matrix(x), n)?;
        Ok(lp[[0, 0]])
    }

    pub fn log_prob_batch(&self, x_next: &Array2<f64>, x: &Array2<f64>, n: usize) -> Result<Array2<f64>> {
        match self.mean_and_var(x_next, n)? {
            None => Ok(Array2::zeros((x.nrows(), 1))),
            Some((mean, var)) => {
                let resid = x - &mean;
                let sq = resid.mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1));
                Ok(sq.mapv(|s| gaussian_log_density(s, var, x.ncols())))
            }
        }
    }

    pub fn log_prob_var(&self, g: &mut Graph, x_next: Var, x: Var, n: usize) -> Result<Var> {
        let rows = g.value(x).nrows();
        let d = g.value(x).ncols();
        let (mean, var) = match self.kernel(n)? {
            Kernel::Dirac => return Ok(g.constant(Array2::zeros((rows, 1)))),
            Kernel::Bridge { coeff, var } => (g.scale(x_next, coeff), var),
            Kernel::Reverse { drift, t, dt, var } => {
                let mu = drift.record(g, x_next, t)?;
                let step = g.scale(mu, dt);
                (g.sub(x_next, step), var)
            }
        };
        let resid = g.sub(x, mean);
        let sq = g.square(resid);
        let sq = g.sum_cols(sq);
        let scaled = g.scale(sq, -0.5 / var);
        Ok(g.shift(scaled, -0.5 * d as f64 * (2.0 * PI * var).ln()))
    }
}

/// `B` discrete paths on a shared grid, stored step-major: `states[n]` is `[B, d]`.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub grid: TimeGrid,
    pub states: Vec<Array2<f64>>,
    /// Standard-normal draws, `noises[n]` drove the transition between `t_n` and `t_{n+1}`.
    pub noises: Vec<Array2<f64>>,
    /// `[B, N]` forward log-probabilities under the unperturbed forward policy.
    pub fwd_logprob: Option<Array2<f64>>,
    /// `[B, N]` backward log-probabilities.
    pub bwd_logprob: Option<Array2<f64>>,
}

impl TrajectoryBatch {
    pub fn batch_size(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn terminal(&self) -> &Array2<f64> {
        &self.states[self.states.len() - 1]
    }

    /// The path of trajectory `b` as `[N+1, d]`.
    pub fn path(&self, b: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.states.len(), self.dim()));
        for (n, s) in self.states.iter().enumerate() {
            out.row_mut(n).assign(&s.row(b));
        }
        out
    }

    /// Evaluates and stores `[B, N]` log-probability caches.
    pub fn fill_log_probs(
        &mut self,
        fwd: Option<&ForwardPolicy<'_>>,
        bwd: Option<&BackwardPolicy<'_>>,
    ) -> Result<()> {
        let (b, steps) = (self.batch_size(), self.steps());
        if let Some(f) = fwd {
            let mut cache = Array2::zeros((b, steps));
            for n in 0..steps {
                let lp = f.log_prob_batch(&self.states[n], &self.states[n + 1], n)?;
                cache.column_mut(n).assign(&lp.column(0));
            }
            self.fwd_logprob = Some(cache);
        }
        if let Some(p) = bwd {
            let mut cache = Array2::zeros((b, steps));
            for n in 0..steps {
                let lp = p.log_prob_batch(&self.states[n + 1], &self.states[n], n)?;
                cache.column_mut(n).assign(&lp.column(0));
            }
            self.bwd_logprob = Some(cache);
        }
        Ok(())
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn first_non_finite(x: &Array2<f64>) -> Option<usize> {
    x.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Simulates `batch` forward paths from the origin. The noise standard
/// deviation is inflated by the factor `1 + exploration_std`; the cached
/// forward log-probabilities always use the unperturbed kernel.
pub fn simulate_forward<R: Rng + ?Sized>(
    pol: &ForwardPolicy<'_>,
    batch: usize,
    rng: &mut R,
    exploration_std: f64,
) -> Result<TrajectoryBatch> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(exploration_std >= 0.0 && exploration_std.is_finite()) {
        return Err(Error::invalid(format!("exploration_std must be >= 0, got {exploration_std}")));
    }
    let d = pol.dim();
    let steps = pol.grid.steps();
    let inflate = 1.0 + exploration_std;
    let mut states = Vec::with_capacity(steps + 1);
    let mut noises = Vec::with_capacity(steps);
    states.push(Array2::zeros((batch, d)));
    for n in 0..steps {
        let dt = pol.grid.dt(n);
        let x = &states[n];
        let mu = pol.drift.eval(x, pol.grid.t(n))?;
        let xi = standard_normal(rng, batch, d);
        let next = x + &(mu * dt) + &(&xi * (pol.sigma * dt.sqrt() * inflate));
        if let Some(index) = first_non_finite(&next) {
            return Err(Error::NonFinite { step: n + 1, index });
        }
        states.push(next);
        noises.push(xi);
    }
    let mut out = TrajectoryBatch {
        grid: pol.grid.clone(),
        states,
        noises,
        fwd_logprob: None,
        bwd_logprob: None,
    };
    out.fill_log_probs(Some(pol), None)?;
    Ok(out)
}

/// Simulates backward chains from the given terminal points down to `t_0`.
pub fn simulate_backward<R: Rng + ?Sized>(
    pol: &BackwardPolicy<'_>,
    terminal: &Array2<f64>,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    if let Some(index) = first_non_finite(terminal) {
        return Err(Error::NonFinite { step: pol.grid.steps(), index });
    }
    let (batch, d) = terminal.dim();
    let steps = pol.grid.steps();
    let mut states = vec![Array2::zeros((batch, d)); steps + 1];
    let mut noises = vec![Array2::zeros((batch, d)); steps];
    states[steps] = terminal.clone();
    for n in (0..steps).rev() {
        let xi = standard_normal(rng, batch, d);
        let prev = match pol.mean_and_var(&states[n + 1], n)? {
            None => Array2::zeros((batch, d)),
            Some((mean, var)) => mean + &(&xi * var.sqrt()),
        };
        if let Some(index) = first_non_finite(&prev) {
            return Err(Error::NonFinite { step: n, index });
        }
        states[n] = prev;
        noises[n] = xi;
    }
    let mut out = TrajectoryBatch {
        grid: pol.grid.clone(),
        states,
        noises,
        fwd_logprob: None,
        bwd_logprob: None,
    };
    out.fill_log_probs(None, Some(pol))?;
    Ok(out)
}
