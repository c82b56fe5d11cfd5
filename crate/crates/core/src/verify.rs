//! Numerical checks of continuous-time limits on processes with closed-form
//! Gaussian marginals: convergence of discretized log Radon-Nikodym
//! derivatives, small-step asymptotics of the detailed-balance discrepancy,
//! Fokker-Planck residuals and the Brownian-bridge equivalence.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{BackwardPolicy, LinearDrift};
use crate::error::{Error, Result};
use crate::quadrature::gauss_hermite;
use crate::timegrid::TimeGrid;

/// Central-difference step for derivatives without a closed form.
const FD_STEP: f64 = 1e-4;

/// A time-dependent log-density `log p(x, t)`.
pub trait LogDensity {
    fn log_p(&self, x: &[f64], t: f64) -> f64;

    fn dt_log_p(&self, x: &[f64], t: f64) -> f64 {
        (self.log_p(x, t + FD_STEP) - self.log_p(x, t - FD_STEP)) / (2.0 * FD_STEP)
    }

    fn grad_log_p(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        (0..x.len())
            .map(|i| {
                y[i] = x[i] + FD_STEP;
                let up = self.log_p(&y, t);
                y[i] = x[i] - FD_STEP;
                let down = self.log_p(&y, t);
                y[i] = x[i];
                (up - down) / (2.0 * FD_STEP)
            })
            .collect()
    }

    fn laplacian_log_p(&self, x: &[f64], t: f64) -> f64 {
        let mut y = x.to_vec();
        let centre = self.log_p(x, t);
        (0..x.len())
            .map(|i| {
                y[i] = x[i] + FD_STEP;
                let up = self.log_p(&y, t);
                y[i] = x[i] - FD_STEP;
                let down = self.log_p(&y, t);
                y[i] = x[i];
                (up - 2.0 * centre + down) / (FD_STEP * FD_STEP)
            })
            .sum()
    }
}

/// A time-dependent vector field on `R^d`.
pub trait VectorField {
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64>;

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let mut y = x.to_vec();
        (0..x.len())
            .map(|i| {
                y[i] = x[i] + FD_STEP;
                let up = self.eval(&y, t)[i];
                y[i] = x[i] - FD_STEP;
                let down = self.eval(&y, t)[i];
                y[i] = x[i];
                (up - down) / (2.0 * FD_STEP)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    Brownian,
    Ou,
}

/// `dX = -theta X dt + sigma dW`, `X_0 ~ N(0, prior_var I)` (a Dirac at the
/// origin when `prior_var = 0`). Brownian motion is the case `theta = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormProcess {
    pub kind: ProcessKind,
    pub theta: f64,
    pub sigma: f64,
    pub prior_var: f64,
}

impl ClosedFormProcess {
    pub fn brownian(sigma: f64, prior_var: f64) -> Self {
        ClosedFormProcess { kind: ProcessKind::Brownian, theta: 0.0, sigma, prior_var }
    }

    pub fn ou(theta: f64, sigma: f64, prior_var: f64) -> Self {
        ClosedFormProcess { kind: ProcessKind::Ou, theta, sigma, prior_var }
    }

    /// The OU process started in its stationary law `N(0, sigma^2 / (2 theta))`.
    pub fn stationary_ou(theta: f64, sigma: f64) -> Self {
        Self::ou(theta, sigma, sigma * sigma / (2.0 * theta))
    }

    fn theta(&self) -> f64 {
        match self.kind {
            ProcessKind::Brownian => 0.0,
            ProcessKind::Ou => self.theta,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("process sigma must be positive"));
        }
        if !(self.prior_var >= 0.0 && self.prior_var.is_finite()) {
            return Err(Error::invalid("prior variance must be >= 0"));
        }
        if self.kind == ProcessKind::Ou && !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::invalid("OU mean reversion must be positive"));
        }
        Ok(())
    }

    /// Marginal variance per coordinate.
    pub fn variance(&self, t: f64) -> f64 {
        let theta = self.theta();
        let s2 = self.sigma * self.sigma;
        if theta == 0.0 {
            self.prior_var + s2 * t
        } else {
            let stat = s2 / (2.0 * theta);
            stat + (self.prior_var - stat) * (-2.0 * theta * t).exp()
        }
    }

    pub fn dvariance(&self, t: f64) -> f64 {
        -2.0 * self.theta() * self.variance(t) + self.sigma * self.sigma
    }

    pub fn drift(&self) -> ForwardDrift {
        ForwardDrift { theta: self.theta() }
    }

    /// Reverse drift from Nelson's identity, `mu_fwd - sigma^2 grad log p`.
    pub fn nelson_reverse(&self) -> NelsonReverse {
        NelsonReverse { process: *self }
    }

    /// Marginal density with its variance multiplied by `scale`.
    pub fn marginal(&self, scale: f64) -> GaussianMarginal {
        GaussianMarginal { process: *self, scale }
    }
}

impl LogDensity for ClosedFormProcess {
    fn log_p(&self, x: &[f64], t: f64) -> f64 {
        self.marginal(1.0).log_p(x, t)
    }

    fn dt_log_p(&self, x: &[f64], t: f64) -> f64 {
        self.marginal(1.0).dt_log_p(x, t)
    }

    fn grad_log_p(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.marginal(1.0).grad_log_p(x, t)
    }

    fn laplacian_log_p(&self, x: &[f64], t: f64) -> f64 {
        self.marginal(1.0).laplacian_log_p(x, t)
    }
}

/// `N(0, scale * v(t) I)` for a process with marginal variance `v(t)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianMarginal {
    process: ClosedFormProcess,
    scale: f64,
}

impl GaussianMarginal {
    fn var(&self, t: f64) -> f64 {
        self.scale * self.process.variance(t)
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

impl LogDensity for GaussianMarginal {
    fn log_p(&self, x: &[f64], t: f64) -> f64 {
        let v = self.var(t);
        -0.5 * x.len() as f64 * (2.0 * PI * v).ln() - 0.5 * sq_norm(x) / v
    }

    fn dt_log_p(&self, x: &[f64], t: f64) -> f64 {
        let v = self.var(t);
        let dv = self.scale * self.process.dvariance(t);
        -0.5 * x.len() as f64 * dv / v + 0.5 * sq_norm(x) * dv / (v * v)
    }

    fn grad_log_p(&self, x: &[f64], t: f64) -> Vec<f64> {
        let v = self.var(t);
        x.iter().map(|xi| -xi / v).collect()
    }

    fn laplacian_log_p(&self, x: &[f64], t: f64) -> f64 {
        -(x.len() as f64) / self.var(t)
    }
}

/// `mu(x, t) = -theta x`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardDrift {
    theta: f64,
}

impl VectorField for ForwardDrift {
    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        x.iter().map(|v| -self.theta * v).collect()
    }

    fn divergence(&self, x: &[f64], _t: f64) -> f64 {
        -self.theta * x.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelsonReverse {
    process: ClosedFormProcess,
}

impl NelsonReverse {
    fn coeff(&self, t: f64) -> f64 {
        let p = &self.process;
        -p.theta() + p.sigma * p.sigma / p.variance(t)
    }
}

impl VectorField for NelsonReverse {
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = self.coeff(t);
        x.iter().map(|v| c * v).collect()
    }

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        self.coeff(t) * x.len() as f64
    }
}

/// A field plus a constant vector.
pub struct Shifted<'a> {
    pub field: &'a dyn VectorField,
    pub shift: Vec<f64>,
}

impl VectorField for Shifted<'_> {
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.field.eval(x, t).iter().zip(&self.shift).map(|(a, b)| a + b).collect()
    }

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        self.field.divergence(x, t)
    }
}

/// Logarithmic Fokker-Planck residual
/// `d_t log p + div mu + <mu, grad log p> - sigma^2/2 (lap log p + |grad log p|^2)`.
pub fn fpe_residual(logp: &dyn LogDensity, drift: &dyn VectorField, sigma: f64, x: &[f64], t: f64) -> f64 {
    let g = logp.grad_log_p(x, t);
    let mu = drift.eval(x, t);
    logp.dt_log_p(x, t) + drift.divergence(x, t) + dot(&mu, &g)
        - 0.5 * sigma * sigma * (logp.laplacian_log_p(x, t) + sq_norm(&g))
}

fn gauss_log(sq: f64, var: f64, d: usize) -> f64 {
    -0.5 * d as f64 * (2.0 * PI * var).ln() - 0.5 * sq / var
}

/// Forward kernel, reverse kernel and density estimate defining a
/// detailed-balance discrepancy at constant `sigma`.
pub struct DbSetup<'a> {
    pub fwd: &'a dyn VectorField,
    pub bwd: &'a dyn VectorField,
    pub logp: &'a dyn LogDensity,
    pub sigma: f64,
}

impl DbSetup<'_> {
    /// `log [p(x, t) pi_fwd(x' | x)] - log [p(x', t+h) pi_bwd(x | x')]` with
    /// `x' = x + mu_fwd(x, t) h + sigma sqrt(h) z`.
    pub fn discrepancy(&self, x: &[f64], t: f64, h: f64, z: &[f64]) -> f64 {
        let d = x.len();
        let s2 = self.sigma * self.sigma;
        let mu = self.fwd.eval(x, t);
        let xn: Vec<f64> = (0..d).map(|i| x[i] + mu[i] * h + self.sigma * h.sqrt() * z[i]).collect();
        // The forward residual is sigma sqrt(h) z by construction.
        let lp_fwd = gauss_log(s2 * h * sq_norm(z), s2 * h, d);
        let mb = self.bwd.eval(&xn, t + h);
        let resid: Vec<f64> = (0..d).map(|i| x[i] - (xn[i] - mb[i] * h)).collect();
        let lp_bwd = gauss_log(sq_norm(&resid), s2 * h, d);
        self.logp.log_p(x, t) + lp_fwd - self.logp.log_p(&xn, t + h) - lp_bwd
    }

    /// Limit of `discrepancy / sqrt(h)` at fixed `z`:
    /// `sigma^{-1} <z, (mu_fwd - mu_bwd) - sigma^2 grad log p>`.
    pub fn sqrt_h_coefficient(&self, x: &[f64], t: f64, z: &[f64]) -> f64 {
        let mf = self.fwd.eval(x, t);
        let mb = self.bwd.eval(x, t);
        let g = self.logp.grad_log_p(x, t);
        let s2 = self.sigma * self.sigma;
        let v: Vec<f64> = (0..x.len()).map(|i| mf[i] - mb[i] - s2 * g[i]).collect();
        dot(z, &v) / self.sigma
    }

    /// Limit of `E_z[discrepancy] / h`:
    /// `-(d_t log p + <mu_fwd, grad log p> + div mu_bwd + sigma^2/2 (lap log p - |mu_fwd - mu_bwd|^2 / sigma^4))`.
    pub fn h_coefficient(&self, x: &[f64], t: f64) -> f64 {
        let mf = self.fwd.eval(x, t);
        let mb = self.bwd.eval(x, t);
        let g = self.logp.grad_log_p(x, t);
        let s2 = self.sigma * self.sigma;
        let diff: Vec<f64> = (0..x.len()).map(|i| (mf[i] - mb[i]) / s2).collect();
        -(self.logp.dt_log_p(x, t)
            + dot(&mf, &g)
            + self.bwd.divergence(x, t)
            + 0.5 * s2 * (self.logp.laplacian_log_p(x, t) - sq_norm(&diff)))
    }
}

/// Largest dimension for tensor-product Gauss-Hermite expectations.
pub const MAX_GH_DIM: usize = 3;
pub const GH_NODES: usize = 21;

/// `E[f(z)]` for `z ~ N(0, I_d)` by tensor-product Gauss-Hermite quadrature.
pub fn gaussian_expectation(d: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> Result<f64> {
    if d == 0 || d > MAX_GH_DIM {
        return Err(Error::invalid(format!("Gauss-Hermite expectations support 1..={MAX_GH_DIM} dimensions, got {d}")));
    }
    let (nodes, weights) = gauss_hermite(GH_NODES);
    let mut idx = vec![0usize; d];
    let mut z = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for k in 0..d {
            z[k] = nodes[idx[k]];
            w *= weights[idx[k]];
        }
        total += w * f(&z);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < GH_NODES {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == d {
                return Ok(total);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbAsymptoticsReport {
    pub h: Vec<f64>,
    /// `discrepancy / sqrt(h)` at the given `z`.
    pub scaled_sqrt: Vec<f64>,
    pub sqrt_limit: f64,
    /// `E_z[discrepancy] / h`.
    pub expected_scaled: Vec<f64>,
    pub h_limit: f64,
}

pub fn db_asymptotics_check(setup: &DbSetup<'_>, x: &[f64], t: f64, z: &[f64], h_list: &[f64]) -> Result<DbAsymptoticsReport> {
    if x.len() != z.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: z.len() });
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1), got {t}")));
    }
    if h_list.is_empty() {
        return Err(Error::invalid("h_list must not be empty"));
    }
    if let Some(h) = h_list.iter().find(|h| !(**h > 0.0)) {
        return Err(Error::invalid(format!("step sizes must be positive, got {h}")));
    }
    let mut scaled_sqrt = Vec::with_capacity(h_list.len());
    let mut expected_scaled = Vec::with_capacity(h_list.len());
    for &h in h_list {
        scaled_sqrt.push(setup.discrepancy(x, t, h, z) / h.sqrt());
        let e = gaussian_expectation(x.len(), &mut |zz| setup.discrepancy(x, t, h, zz))?;
        expected_scaled.push(e / h);
    }
    Ok(DbAsymptoticsReport {
        h: h_list.to_vec(),
        scaled_sqrt,
        sqrt_limit: setup.sqrt_h_coefficient(x, t, z),
        expected_scaled,
        h_limit: setup.h_coefficient(x, t),
    })
}

/// Least-squares slope of `log err` against `log h`.
pub fn fitted_slope(h: &[f64], err: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = h.iter().zip(err).map(|(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Points used for order fits, counted from the finest grid.
pub const FIT_POINTS: usize = 4;

fn tail_slope(h: &[f64], err: &[f64]) -> f64 {
    let k = h.len().saturating_sub(FIT_POINTS);
    fitted_slope(&h[k..], &err[k..])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RndConvergenceReport {
    pub n: Vec<usize>,
    pub n_ref: usize,
    pub max_dt: Vec<f64>,
    /// `mean |discrete - continuous|` over paths.
    pub strong_error: Vec<f64>,
    /// `|mean(discrete - continuous)|` over paths.
    pub weak_error: Vec<f64>,
    pub strong_slope: f64,
    pub weak_slope: f64,
    /// Mean discrete log-RND per grid.
    pub discrete_mean: Vec<f64>,
    pub continuous_mean: f64,
    /// Largest `|discrete - continuous|` over paths and grids.
    pub max_abs_error: f64,
}

/// Fills `path` (one buffer per coordinate, `n_ref + 1` points each) with an
/// Euler-Maruyama path of `reference` on the uniform `n_ref`-step grid.
fn reference_path(reference: &ClosedFormProcess, n_ref: usize, rng: &mut ChaCha8Rng, path: &mut [Vec<f64>]) {
    let dt = 1.0 / n_ref as f64;
    let theta = reference.theta();
    let prior_sd = reference.prior_var.sqrt();
    let noise_sd = reference.sigma * dt.sqrt();
    for c in path.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        c[0] = prior_sd * z;
        for k in 0..n_ref {
            let xi: f64 = StandardNormal.sample(rng);
            c[k + 1] = c[k] - theta * c[k] * dt + noise_sd * xi;
        }
    }
}

/// Discrete `log dP1/dP2` of one path restricted to every `stride`-th point.
fn discrete_log_rnd(p1: &ClosedFormProcess, p2: &ClosedFormProcess, path: &[Vec<f64>], stride: usize, n_ref: usize) -> f64 {
    let d = path.len();
    let s2 = p1.sigma * p1.sigma;
    let (a1, a2) = (p1.theta(), p2.theta());
    let dt = stride as f64 / n_ref as f64;
    let x0: Vec<f64> = path.iter().map(|c| c[0]).collect();
    let mut total = prior_log_ratio(p1, p2, &x0);
    let mut k = 0;
    while k < n_ref {
        for c in path.iter().take(d) {
            let (xa, xb) = (c[k], c[k + stride]);
            let (m1, m2) = (-a1 * xa, -a2 * xa);
            total += -(m1 * m1 - m2 * m2) / (2.0 * s2) * dt + (m1 - m2) / s2 * (xb - xa);
        }
        k += stride;
    }
    total
}

fn prior_log_ratio(p1: &ClosedFormProcess, p2: &ClosedFormProcess, x0: &[f64]) -> f64 {
    if p1.prior_var == 0.0 && p2.prior_var == 0.0 {
        return 0.0;
    }
    let d = x0.len();
    let sq = sq_norm(x0);
    gauss_log(sq, p1.prior_var, d) - gauss_log(sq, p2.prior_var, d)
}

fn check_pair(p1: &ClosedFormProcess, p2: &ClosedFormProcess, n_list: &[usize]) -> Result<()> {
    p1.validate()?;
    p2.validate()?;
    if p1.sigma != p2.sigma {
        return Err(Error::invalid("both processes must share sigma"));
    }
    if (p1.prior_var == 0.0) != (p2.prior_var == 0.0) {
        return Err(Error::invalid("a Dirac prior is singular with respect to a Gaussian prior"));
    }
    if n_list.len() < 3 {
        return Err(Error::invalid(format!("convergence fits need at least 3 step counts, got {}", n_list.len())));
    }
    if n_list.contains(&0) || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("step counts must be positive and strictly increasing"));
    }
    Ok(())
}

/// Per-path discrete log-RNDs on each coarse grid and the fine-grid value.
fn log_rnd_table(
    p1: &ClosedFormProcess,
    p2: &ClosedFormProcess,
    d: usize,
    n_list: &[usize],
    paths: usize,
    seed: u64,
) -> Result<(usize, Vec<Vec<f64>>, Vec<f64>)> {
    check_pair(p1, p2, n_list)?;
    if paths == 0 || d == 0 {
        return Err(Error::invalid("need at least one path and one dimension"));
    }
    let n_ref = 16 * n_list[n_list.len() - 1];
    if let Some(n) = n_list.iter().find(|&&n| !n_ref.is_multiple_of(n)) {
        return Err(Error::invalid(format!("step count {n} does not divide the reference grid {n_ref}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut path = vec![vec![0.0; n_ref + 1]; d];
    let mut coarse = vec![Vec::with_capacity(paths); n_list.len()];
    let mut cont = Vec::with_capacity(paths);
    for _ in 0..paths {
        reference_path(p2, n_ref, &mut rng, &mut path);
        cont.push(discrete_log_rnd(p1, p2, &path, 1, n_ref));
        for (j, &n) in n_list.iter().enumerate() {
            coarse[j].push(discrete_log_rnd(p1, p2, &path, n_ref / n, n_ref));
        }
    }
    Ok((n_ref, coarse, cont))
}

/// Compares the discrete `log dP1/dP2` on uniform `n`-step restrictions of
/// reference paths (simulated under `p2` on `16 max(n_list)` steps) with its
/// fine-grid quadrature.
pub fn rnd_convergence_check(
    p1: &ClosedFormProcess,
    p2: &ClosedFormProcess,
    d: usize,
    n_list: &[usize],
    paths: usize,
    seed: u64,
) -> Result<RndConvergenceReport> {
    let (n_ref, coarse, cont) = log_rnd_table(p1, p2, d, n_list, paths, seed)?;
    let m = paths as f64;
    let mut strong = Vec::new();
    let mut weak = Vec::new();
    let mut means = Vec::new();
    let mut max_abs: f64 = 0.0;
    for vals in &coarse {
        let errs: Vec<f64> = vals.iter().zip(&cont).map(|(a, b)| a - b).collect();
        max_abs = errs.iter().fold(max_abs, |m, e| m.max(e.abs()));
        strong.push(errs.iter().map(|e| e.abs()).sum::<f64>() / m);
        weak.push((errs.iter().sum::<f64>() / m).abs());
        means.push(vals.iter().sum::<f64>() / m);
    }
    let max_dt: Vec<f64> = n_list.iter().map(|&n| 1.0 / n as f64).collect();
    Ok(RndConvergenceReport {
        n: n_list.to_vec(),
        n_ref,
        strong_slope: tail_slope(&max_dt, &strong),
        weak_slope: tail_slope(&max_dt, &weak),
        max_dt,
        strong_error: strong,
        weak_error: weak,
        discrete_mean: means,
        continuous_mean: cont.iter().sum::<f64>() / m,
        max_abs_error: max_abs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbConvergenceReport {
    pub n: Vec<usize>,
    /// `mean((log_rnd - offset)^2)` per grid.
    pub values: Vec<f64>,
    /// `|values[k+1] - values[k]|`.
    pub differences: Vec<f64>,
    /// Fine-grid estimate and its standard error.
    pub limit: f64,
    pub limit_se: f64,
}

impl TbConvergenceReport {
    /// Whether successive differences shrink for grids with at least `from` steps.
    pub fn monotone_from(&self, from: usize) -> bool {
        let idx: Vec<usize> = (0..self.differences.len()).filter(|&k| self.n[k] >= from).collect();
        idx.windows(2).all(|w| self.differences[w[1]] < self.differences[w[0]])
    }
}

/// Second-moment divergence `E[(log dP1/dP2 - offset)^2]` under `p2` on
/// refining uniform grids, with common reference paths across refinements.
pub fn tb_convergence_check(
    p1: &ClosedFormProcess,
    p2: &ClosedFormProcess,
    d: usize,
    offset: f64,
    n_list: &[usize],
    paths: usize,
    seed: u64,
) -> Result<TbConvergenceReport> {
    let (_, coarse, cont) = log_rnd_table(p1, p2, d, n_list, paths, seed)?;
    let m = paths as f64;
    let second = |v: &[f64]| v.iter().map(|l| (l - offset) * (l - offset)).sum::<f64>() / m;
    let values: Vec<f64> = coarse.iter().map(|v| second(v)).collect();
    let differences = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let sq: Vec<f64> = cont.iter().map(|l| (l - offset) * (l - offset)).collect();
    let limit = sq.iter().sum::<f64>() / m;
    let var = if paths > 1 { sq.iter().map(|s| (s - limit) * (s - limit)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    Ok(TbConvergenceReport { n: n_list.to_vec(), values, differences, limit, limit_se: (var / m).sqrt() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeEquivalenceReport {
    pub h: Vec<f64>,
    /// `(log pi_bridge - log pi_reverse) / sqrt(h)` at the given `z`.
    pub diff_over_sqrt_h: Vec<f64>,
    /// `E_z[log pi_bridge - log pi_reverse] / h`.
    pub expected_diff_over_h: Vec<f64>,
    /// `|diff - expansion|` with the leading-order expansion `-(h / 2t)(|z|^2 - d)`.
    pub expansion_error: Vec<f64>,
}

/// Compares the Brownian-bridge backward kernel with the reverse
/// Euler-Maruyama kernel of drift `x / t` (unit `sigma`) on the step
/// `t -> t + h` taken from `x` with noise `z`. Their log-density difference
/// equals the difference of the two detailed-balance discrepancies.
pub fn bridge_equivalence_check(x: &[f64], t: f64, z: &[f64], h_list: &[f64]) -> Result<BridgeEquivalenceReport> {
    let d = x.len();
    if z.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: z.len() });
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1), got {t}")));
    }
    let reverse = LinearDrift::new(d, |s: f64| 1.0 / s);
    let diff = |h: f64, z: &[f64]| -> Result<f64> {
        let grid = TimeGrid::from_times(vec![0.0, t, t + h, 1.0])?;
        let bridge = BackwardPolicy::bridge(1.0, grid.clone())?;
        let learned = BackwardPolicy::learned(&reverse, 1.0, grid)?;
        let xn: Vec<f64> = (0..d).map(|i| x[i] + h.sqrt() * z[i]).collect();
        Ok(bridge.log_prob(&xn, x, 1)? - learned.log_prob(&xn, x, 1)?)
    };
    let mut report = BridgeEquivalenceReport {
        h: h_list.to_vec(),
        diff_over_sqrt_h: Vec::new(),
        expected_diff_over_h: Vec::new(),
        expansion_error: Vec::new(),
    };
    for &h in h_list {
        if !(h > 0.0 && t + h < 1.0) {
            return Err(Error::invalid(format!("step size must lie in (0, 1 - t), got {h}")));
        }
        let dz = diff(h, z)?;
        report.diff_over_sqrt_h.push(dz / h.sqrt());
        let expansion = -0.5 * h / t * (sq_norm(z) - d as f64);
        report.expansion_error.push((dz - expansion).abs());
        let mut err = None;
        let e = gaussian_expectation(d, &mut |zz| match diff(h, zz) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        report.expected_diff_over_h.push(e / h);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: String,
    pub expected: String,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, measured: String, expected: &str, passed: bool) -> Self {
        CheckResult { name: name.to_string(), measured, expected: expected.to_string(), passed }
    }
}

/// Formats suite results as an aligned table.
pub fn format_table(results: &[CheckResult]) -> String {
    let w = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let m = results.iter().map(|r| r.measured.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<w$}  {:<6}  {:<m$}  expected\n", "check", "result", "measured");
    for r in results {
        let status = if r.passed { "pass" } else { "FAIL" };
        out.push_str(&format!("{:<w$}  {:<6}  {:<m$}  {}\n", r.name, status, r.measured, r.expected));
    }
    out
}

fn sample_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let x = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let z = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            (x, z)
        })
        .collect()
}

pub const RND_STEPS: [usize; 5] = [8, 16, 32, 64, 128];

/// Runs every check. Deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let bm = ClosedFormProcess::brownian(1.0, 0.0);
    let ou = ClosedFormProcess::ou(1.0, 1.0, 0.0);

    let same = rnd_convergence_check(&ou, &ou, 2, &RND_STEPS, 200, seed)?;
    let worst = same.max_abs_error.max(same.continuous_mean.abs());
    out.push(CheckResult::new("rnd identical processes", format!("max |log rnd| {worst:.1e}"), "0", worst == 0.0));

    let wide = ClosedFormProcess::brownian(1.0, 2.0);
    let narrow = ClosedFormProcess::brownian(1.0, 0.5);
    let priors = rnd_convergence_check(&wide, &narrow, 2, &RND_STEPS, 200, seed)?;
    out.push(CheckResult::new(
        "rnd zero drift, prior ratio",
        format!("max |discrete - continuous| {:.1e}", priors.max_abs_error),
        "< 1e-12",
        priors.max_abs_error < 1e-12,
    ));

    let conv = rnd_convergence_check(&ou, &bm, 1, &RND_STEPS, 200_000, seed)?;
    out.push(CheckResult::new(
        "rnd strong order, ou vs bm",
        format!("{:.3}", conv.strong_slope),
        "[0.4, 0.6]",
        (0.4..=0.6).contains(&conv.strong_slope),
    ));
    out.push(CheckResult::new(
        "rnd weak order, ou vs bm",
        format!("{:.3}", conv.weak_slope),
        "[0.8, 1.2]",
        (0.8..=1.2).contains(&conv.weak_slope),
    ));

    let tb_same = tb_convergence_check(&ou, &ou, 1, 0.0, &RND_STEPS, 200, seed)?;
    let tb_zero = tb_same.values.iter().chain([&tb_same.limit]).fold(0.0f64, |m, v| m.max(v.abs()));
    out.push(CheckResult::new("tb identical processes", format!("{tb_zero:.1e}"), "0", tb_zero == 0.0));
    let tb = tb_convergence_check(&ou, &bm, 1, 0.0, &RND_STEPS, 4000, seed)?;
    out.push(CheckResult::new(
        "tb successive differences shrink",
        format!("{:.2e}", tb.differences.last().copied().unwrap_or(f64::NAN)),
        "monotone for n >= 16",
        tb.monotone_from(16),
    ));
    let finest = tb.values[tb.values.len() - 1];
    let z_score = (finest - tb.limit).abs() / tb.limit_se;
    out.push(CheckResult::new(
        "tb limit vs continuous estimate",
        format!("{z_score:.2} se"),
        "< 3 se",
        z_score < 3.0,
    ));

    let stat = ClosedFormProcess::stationary_ou(1.0, 1.0);
    let fwd = stat.drift();
    let rev = stat.nelson_reverse();
    let matched = DbSetup { fwd: &fwd, bwd: &rev, logp: &stat, sigma: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h_list = [1e-3, 1e-4, 1e-5, 1e-6];
    let mut worst_matched: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    let b = vec![0.1, -0.05];
    let shifted_rev = Shifted { field: &rev, shift: b.iter().map(|v| -v).collect() };
    let shifted = DbSetup { fwd: &fwd, bwd: &shifted_rev, logp: &stat, sigma: 1.0 };
    for (x, z) in sample_points(&mut rng, 10, 2) {
        let r = db_asymptotics_check(&matched, &x, 0.5, &z, &h_list)?;
        worst_matched = worst_matched.max(r.scaled_sqrt[3].abs());
        let s = db_asymptotics_check(&shifted, &x, 0.5, &z, &h_list)?;
        worst_shift = worst_shift.max((s.scaled_sqrt[3] - dot(&z, &b)).abs());
    }
    out.push(CheckResult::new("db matched pair |D/sqrt h|", format!("{worst_matched:.1e}"), "< 1e-3", worst_matched < 1e-3));
    out.push(CheckResult::new(
        "db shifted pair vs <z,b>/sigma",
        format!("{worst_shift:.1e}"),
        "< 1e-3",
        worst_shift < 1e-3,
    ));
    let r0 = db_asymptotics_check(&shifted, &[0.4, -1.1], 0.5, &[0.0, 0.0], &h_list)?;
    out.push(CheckResult::new("db zero noise coefficient", format!("{:.1e}", r0.sqrt_limit), "0", r0.sqrt_limit == 0.0));

    // Non-stationary marginals with a misspecified density: first- and
    // second-order coefficients are both nonzero.
    let dirac_ou = ClosedFormProcess::ou(1.0, 1.0, 0.0);
    let wrong = dirac_ou.marginal(1.1);
    let fwd2 = dirac_ou.drift();
    let rev2 = dirac_ou.nelson_reverse();
    let mis = DbSetup { fwd: &fwd2, bwd: &rev2, logp: &wrong, sigma: 1.0 };
    let fine_h = [1e-5, 1e-6, 1e-7, 1e-8];
    let mut worst_a: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for (x, z) in sample_points(&mut rng, 5, 2) {
        let r = db_asymptotics_check(&mis, &x, 0.4, &z, &fine_h)?;
        worst_a = worst_a.max((r.scaled_sqrt[3] - r.sqrt_limit).abs());
        // Below h ~ 1e-7 the expectation is dominated by rounding in the log-densities.
        worst_b = worst_b.max((r.expected_scaled[1] - r.h_limit).abs());
    }
    out.push(CheckResult::new("db sqrt(h) coefficient limit", format!("{worst_a:.1e}"), "< 1e-3", worst_a < 1e-3));
    out.push(CheckResult::new("db expected h coefficient limit", format!("{worst_b:.1e}"), "< 1e-3", worst_b < 1e-3));

    let mut worst_fpe: f64 = 0.0;
    let mut least_wrong = f64::INFINITY;
    let bm_prior = ClosedFormProcess::brownian(1.0, 0.3);
    for (x, _) in sample_points(&mut rng, 10, 2) {
        let t = 0.2 + 0.6 * (x[0].abs() % 1.0);
        worst_fpe = worst_fpe.max(fpe_residual(&bm_prior, &bm_prior.drift(), 1.0, &x, t).abs());
        worst_fpe = worst_fpe.max(fpe_residual(&dirac_ou, &fwd2, 1.0, &x, t).abs());
        least_wrong = least_wrong.min(fpe_residual(&wrong, &fwd2, 1.0, &x, t).abs());
    }
    out.push(CheckResult::new("fpe residual, exact marginals", format!("{worst_fpe:.1e}"), "< 1e-10", worst_fpe < 1e-10));
    out.push(CheckResult::new(
        "fpe residual, variance off 10%",
        format!("{least_wrong:.1e}"),
        "> 1e-3",
        least_wrong > 1e-3,
    ));

    let mut worst_sqrt: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    let mut worst_order = f64::INFINITY;
    for (x, z) in sample_points(&mut rng, 5, 2) {
        let r = bridge_equivalence_check(&x, 0.5, &z, &h_list)?;
        worst_sqrt = worst_sqrt.max(r.diff_over_sqrt_h[3].abs());
        worst_mean = worst_mean.max(r.expected_diff_over_h[3].abs());
        worst_order = worst_order.min(tail_slope(&r.h, &r.expansion_error));
    }
    out.push(CheckResult::new("bridge vs reverse, diff/sqrt h", format!("{worst_sqrt:.1e}"), "< 1e-2", worst_sqrt < 1e-2));
    out.push(CheckResult::new("bridge vs reverse, E[diff]/h", format!("{worst_mean:.1e}"), "< 1e-3", worst_mean < 1e-3));
    out.push(CheckResult::new(
        "bridge vs reverse, remainder order",
        format!("{worst_order:.3}"),
        ">= 1.4",
        worst_order >= 1.4,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_variance_solves_its_ode() {
        for p in [ClosedFormProcess::ou(1.3, 0.7, 0.2), ClosedFormProcess::brownian(1.5, 0.0)] {
            for t in [0.1, 0.5, 0.9] {
                let fd = (p.variance(t + 1e-6) - p.variance(t - 1e-6)) / 2e-6;
                assert!((fd - p.dvariance(t)).abs() < 1e-8);
            }
            assert_eq!(p.variance(0.0), p.prior_var);
        }
    }

    #[test]
    fn finite_difference_defaults_match_closed_forms() {
        struct Plain(ClosedFormProcess);
        impl LogDensity for Plain {
            fn log_p(&self, x: &[f64], t: f64) -> f64 {
                self.0.log_p(x, t)
            }
        }
        let p = ClosedFormProcess::ou(1.0, 1.0, 0.1);
        let x = [0.3, -0.8];
        let fd = Plain(p);
        assert!((fd.dt_log_p(&x, 0.4) - p.dt_log_p(&x, 0.4)).abs() < 1e-7);
        assert!((fd.laplacian_log_p(&x, 0.4) - p.laplacian_log_p(&x, 0.4)).abs() < 1e-5);
        for (a, b) in fd.grad_log_p(&x, 0.4).iter().zip(p.grad_log_p(&x, 0.4)) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn fpe_residual_examples() {
        let bm = ClosedFormProcess::brownian(1.0, 0.5);
        let ou = ClosedFormProcess::ou(1.0, 1.0, 0.0);
        let x = [0.7, -0.2];
        assert!(fpe_residual(&bm, &bm.drift(), 1.0, &x, 0.3).abs() < 1e-10);
        assert!(fpe_residual(&ou, &ou.drift(), 1.0, &x, 0.3).abs() < 1e-10);
        assert!(fpe_residual(&ou.marginal(1.1), &ou.drift(), 1.0, &x, 0.3).abs() > 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ou = ClosedFormProcess::ou(1.0, 1.0, 0.0);
        let bm = ClosedFormProcess::brownian(1.0, 0.0);
        assert!(rnd_convergence_check(&ou, &bm, 1, &[8, 16], 10, 0).is_err());
        assert!(rnd_convergence_check(&ou, &ClosedFormProcess::brownian(2.0, 0.0), 1, &[8, 16, 32], 10, 0).is_err());
        let fwd = ou.drift();
        let rev = ou.nelson_reverse();
        let s = DbSetup { fwd: &fwd, bwd: &rev, logp: &ou, sigma: 1.0 };
        assert!(db_asymptotics_check(&s, &[0.1], 0.5, &[0.2], &[1e-3, 0.0]).is_err());
        assert!(db_asymptotics_check(&s, &[0.1], 0.5, &[0.2], &[-1e-3]).is_err());
    }

    #[test]
    fn zero_drift_pair_reduces_to_prior_ratio() {
        let a = ClosedFormProcess::brownian(1.0, 2.0);
        let b = ClosedFormProcess::brownian(1.0, 0.5);
        let r = rnd_convergence_check(&a, &b, 3, &[4, 8, 16], 50, 3).unwrap();
        assert!(r.max_abs_error < 1e-12);
        assert!(r.strong_error.iter().all(|e| *e < 1e-12));
    }

    #[test]
    fn gaussian_expectation_of_quadratic() {
        let e = gaussian_expectation(2, &mut |z| z[0] * z[0] + 3.0 * z[1] * z[1] + z[0]).unwrap();
        assert!((e - 4.0).abs() < 1e-12);
        assert!(gaussian_expectation(4, &mut |_| 1.0).is_err());
    }
}
