//! Unnormalized target densities `exp(-E(x)) / Z`.
//!
//! Each target exposes its energy, the analytic gradient of the energy and,
//! when one is available, the exact log-partition function. Energies used
//! downstream are clamped to `[-ENERGY_CLAMP, ENERGY_CLAMP]` before they
//! reach any exponential.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::quadrature;

pub const ENERGY_CLAMP: f64 = 1e10;

/// An energy model on `R^d`.
pub trait EnergyTarget: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// `E(x)`; `x.len()` must equal `dim()`.
    fn energy_unchecked(&self, x: &[f64]) -> f64;
    /// Writes `grad E(x)` into `out`.
    fn grad_energy_unchecked(&self, x: &[f64], out: &mut [f64]);
    fn exact_log_z(&self) -> Option<f64>;

    fn energy(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.energy_unchecked(x))
    }

    fn grad_energy(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; x.len()];
        self.grad_energy_unchecked(x, &mut out);
        Ok(out)
    }

    /// One-line description of the constants in use, for run logs.
    fn describe(&self) -> String {
        format!("{} (d={})", self.name(), self.dim())
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub fn clamp_energy(e: f64) -> f64 {
    if e.is_nan() {
        e
    } else {
        e.clamp(-ENERGY_CLAMP, ENERGY_CLAMP)
    }
}

fn row_slice<'a>(row: &'a ArrayView1<'a, f64>, buf: &'a mut Vec<f64>) -> &'a [f64] {
    match row.as_slice() {
        Some(s) => s,
        None => {
            buf.clear();
            buf.extend(row.iter().copied());
            buf.as_slice()
        }
    }
}

/// Clamped energies of every row of `x`, as a `B x 1` column.
pub fn energy_batch(target: &dyn EnergyTarget, x: &Array2<f64>) -> Result<Array2<f64>> {
    check_dim(target.dim(), x.ncols())?;
    let mut out = Array2::zeros((x.nrows(), 1));
    let mut buf = Vec::new();
    for (b, row) in x.rows().into_iter().enumerate() {
        out[[b, 0]] = clamp_energy(target.energy_unchecked(row_slice(&row, &mut buf)));
    }
    Ok(out)
}

/// Clamped energies and energy gradients of every row of `x`.
pub fn energy_and_grad_batch(
    target: &dyn EnergyTarget,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dim(target.dim(), x.ncols())?;
    let (rows, d) = x.dim();
    let mut values = Array2::zeros((rows, 1));
    let mut grads = Array2::zeros((rows, d));
    let mut buf = Vec::new();
    let mut g = vec![0.0; d];
    for (b, row) in x.rows().into_iter().enumerate() {
        let xs = row_slice(&row, &mut buf);
        let e = target.energy_unchecked(xs);
        values[[b, 0]] = clamp_energy(e);
        if e.abs() < ENERGY_CLAMP {
            target.grad_energy_unchecked(xs, &mut g);
            for j in 0..d {
                grads[[b, j]] = g[j];
            }
        }
    }
    Ok((values, grads))
}

/// Isotropic Gaussian `N(0, scale^2 I)`.
///
/// With `normalized = false` the energy is `|x|^2 / (2 scale^2)` and
/// `log Z = d/2 log(2 pi scale^2)`; with `normalized = true` the constant is
/// folded into the energy and `log Z = 0`.
#[derive(Debug, Clone)]
pub struct Gaussian {
    dim: usize,
    scale: f64,
    normalized: bool,
}

impl Gaussian {
    pub fn new(dim: usize, scale: f64) -> Self {
        Gaussian { dim, scale, normalized: false }
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(dim, 1.0)
    }

    pub fn normalized(dim: usize, scale: f64) -> Self {
        Gaussian { dim, scale, normalized: true }
    }

    fn log_norm(&self) -> f64 {
        0.5 * self.dim as f64 * (2.0 * PI * self.scale * self.scale).ln()
    }
}

impl EnergyTarget for Gaussian {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn energy_unchecked(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let e = sq / (2.0 * self.scale * self.scale);
        if self.normalized {
            e + self.log_norm()
        } else {
            e
        }
    }

    fn grad_energy_unchecked(&self, x: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (self.scale * self.scale);
        for (o, v) in out.iter_mut().zip(x) {
            *o = v * inv;
        }
    }

    fn exact_log_z(&self) -> Option<f64> {
        Some(if self.normalized { 0.0 } else { self.log_norm() })
    }

    fn describe(&self) -> String {
        format!("gaussian (d={}, scale={}, normalized={})", self.dim, self.scale, self.normalized)
    }
}

/// Equal-weight mixture of isotropic Gaussians in 2-d on the grid
/// `{-10,-5,0,5,10}^2`, component variance 0.3. The energy is the negative
/// log of the normalized mixture density, so `log Z = 0`.
#[derive(Debug, Clone)]
pub struct GaussianMixture25 {
    means: Vec<[f64; 2]>,
    variance: f64,
}

impl Default for GaussianMixture25 {
    fn default() -> Self {
        Self::new(0.3)
    }
}

impl GaussianMixture25 {
    pub fn new(variance: f64) -> Self {
        let grid = [-10.0, -5.0, 0.0, 5.0, 10.0];
        let means = grid
            .iter()
            .flat_map(|&a| grid.iter().map(move |&b| [a, b]))
            .collect();
        GaussianMixture25 { means, variance }
    }

    pub fn means(&self) -> &[[f64; 2]] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Per-component log densities `log(w_k N(x; m_k, v I))`.
    fn component_logs(&self, x: &[f64]) -> Vec<f64> {
        let log_w = -(self.means.len() as f64).ln();
        let log_norm = -(2.0 * PI * self.variance).ln();
        self.means
            .iter()
            .map(|m| {
                let d0 = x[0] - m[0];
                let d1 = x[1] - m[1];
                log_w + log_norm - (d0 * d0 + d1 * d1) / (2.0 * self.variance)
            })
            .collect()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl EnergyTarget for GaussianMixture25 {
    fn name(&self) -> &str {
        "gmm25"
    }

    fn dim(&self) -> usize {
        2
    }

    fn energy_unchecked(&self, x: &[f64]) -> f64 {
        -log_sum_exp(&self.component_logs(x))
    }

    fn grad_energy_unchecked(&self, x: &[f64], out: &mut [f64]) {
        let logs = self.component_logs(x);
        let lse = log_sum_exp(&logs);
        out[0] = 0.0;
        out[1] = 0.0;
        for (m, l) in self.means.iter().zip(&logs) {
            let r = (l - lse).exp();
            out[0] += r * (x[0] - m[0]) / self.variance;
            out[1] += r * (x[1] - m[1]) / self.variance;
        }
    }

    fn exact_log_z(&self) -> Option<f64> {
        Some(0.0)
    }

    fn describe(&self) -> String {
        format!("gmm25 (25 modes on {{-10,-5,0,5,10}}^2, variance={})", self.variance)
    }
}

/// Neal's funnel: `x_1 ~ N(0, 9)`, `x_{2:d} | x_1 ~ N(0, exp(x_1) I)`.
/// The energy is the negative normalized log density, so `log Z = 0`.
#[derive(Debug, Clone)]
pub struct Funnel {
    dim: usize,
    scale: f64,
}

impl Default for Funnel {
    fn default() -> Self {
        Funnel { dim: 10, scale: 3.0 }
    }
}

impl Funnel {
    pub fn new(dim: usize) -> Self {
        Funnel { dim, scale: 3.0 }
    }
}

impl EnergyTarget for Funnel {
    fn name(&self) -> &str {
        "funnel"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn energy_unchecked(&self, x: &[f64]) -> f64 {
        let v = x[0];
        let s2 = self.scale * self.scale;
        let mut e = v * v / (2.0 * s2) + 0.5 * (2.0 * PI * s2).ln();
        let rest = (self.dim - 1) as f64;
        let sq: f64 = x[1..].iter().map(|y| y * y).sum();
        e += 0.5 * sq * (-v).exp() + 0.5 * rest * ((2.0 * PI).ln() + v);
        e
    }

    fn grad_energy_unchecked(&self, x: &[f64], out: &mut [f64]) {
        let v = x[0];
        let inv = (-v).exp();
        let sq: f64 = x[1..].iter().map(|y| y * y).sum();
        out[0] = v / (self.scale * self.scale) - 0.5 * sq * inv + 0.5 * (self.dim - 1) as f64;
        for j in 1..self.dim {
            out[j] = x[j] * inv;
        }
    }

    fn exact_log_z(&self) -> Option<f64> {
        Some(0.0)
    }

    fn describe(&self) -> String {
        format!("funnel (d={}, x1 std={})", self.dim, self.scale)
    }
}

/// Product of independent 2-d double wells with per-pair energy
/// `x1^4 - 6 x1^2 - x1/2 + x2^2/2`.
#[derive(Debug, Clone)]
pub struct ManyWell {
    dim: usize,
    log_z: f64,
}

impl Default for ManyWell {
    fn default() -> Self {
        Self::new(32)
    }
}

impl ManyWell {
    /// `dim` must be even.
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2 && dim.is_multiple_of(2), "manywell dimension must be even");
        let pairs = (dim / 2) as f64;
        ManyWell { dim, log_z: pairs * Self::pair_log_z() }
    }

    /// Energy of one `(x1, x2)` pair.
    pub fn pair_energy(x1: f64, x2: f64) -> f64 {
        Self::well(x1) + 0.5 * x2 * x2
    }

    pub fn well(x: f64) -> f64 {
        let x2 = x * x;
        x2 * x2 - 6.0 * x2 - 0.5 * x
    }

    /// `log` of the pair normalizer: quadrature for the well coordinate plus
    /// the Gaussian integral for the quadratic one.
    pub fn pair_log_z() -> f64 {
        // exp(-w) is negligible outside [-6, 6]: w(6) > 1000.
        let shift = Self::well_minimum();
        let z = quadrature::integrate(|x| (-(Self::well(x) - shift)).exp(), -6.0, 6.0, 1e-10);
        z.ln() - shift + 0.5 * (2.0 * PI).ln()
    }

    fn well_minimum() -> f64 {
        // Deeper minimum lies near x = 1.75; refine with Newton on w'(x) = 4x^3 - 12x - 1/2.
        let mut x = 1.75;
        for _ in 0..50 {
            let d1 = 4.0 * x * x * x - 12.0 * x - 0.5;
            let d2 = 12.0 * x * x - 12.0;
            x -= d1 / d2;
        }
        Self::well(x)
    }
}

impl EnergyTarget for ManyWell {
    fn name(&self) -> &str {
        "manywell"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn energy_unchecked(&self, x: &[f64]) -> f64 {
        x.chunks_exact(2).map(|p| Self::pair_energy(p[0], p[1])).sum()
    }

    fn grad_energy_unchecked(&self, x: &[f64], out: &mut [f64]) {
        for (p, o) in x.chunks_exact(2).zip(out.chunks_exact_mut(2)) {
            let a = p[0];
            o[0] = 4.0 * a * a * a - 12.0 * a - 0.5;
            o[1] = p[1];
        }
    }

    fn exact_log_z(&self) -> Option<f64> {
        Some(self.log_z)
    }

    fn describe(&self) -> String {
        format!("manywell (d={}, {} wells of x^4 - 6x^2 - x/2 + y^2/2)", self.dim, self.dim / 2)
    }
}

/// Looks up a built-in target by its configuration name.
pub fn by_name(name: &str, dim: Option<usize>) -> Result<Box<dyn EnergyTarget>> {
    match (name, dim) {
        (_, Some(0)) => return Err(Error::invalid("target dimension must be positive")),
        ("funnel", Some(1)) => return Err(Error::invalid("the funnel needs dimension >= 2")),
        ("manywell", Some(d)) if !d.is_multiple_of(2) => {
            return Err(Error::invalid(format!("manywell dimension must be even, got {d}")))
        }
        _ => {}
    }
    Ok(match name {
        "gaussian" => Box::new(Gaussian::standard(dim.unwrap_or(2))),
        "gmm25" | "25gmm" => match dim {
            None | Some(2) => Box::new(GaussianMixture25::default()),
            Some(d) => return Err(Error::invalid(format!("the 25-mode mixture is 2-dimensional, got dim {d}"))),
        },
        "funnel" => Box::new(Funnel::new(dim.unwrap_or(10))),
        "manywell" => Box::new(ManyWell::new(dim.unwrap_or(32))),
        other => return Err(Error::UnknownTarget(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(t: &dyn EnergyTarget, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                (t.energy_unchecked(&xp) - t.energy_unchecked(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn all_targets() -> Vec<Box<dyn EnergyTarget>> {
        vec![
            Box::new(Gaussian::standard(3)),
            Box::new(Gaussian::normalized(2, 2.0)),
            Box::new(GaussianMixture25::default()),
            Box::new(Funnel::default()),
            Box::new(ManyWell::default()),
        ]
    }

    #[test]
    fn gaussian_energy_examples() {
        let g = Gaussian::standard(2);
        assert_eq!(g.energy(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(g.energy(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(g.grad_energy(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
        assert!((g.exact_log_z().unwrap() - 1.837_877_066_409_345_5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = Gaussian::standard(2);
        assert!(matches!(g.energy(&[1.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
        assert!(g.grad_energy(&[1.0, 2.0, 3.0]).is_err());
        assert!(energy_batch(&g, &Array2::zeros((4, 3))).is_err());
    }

    #[test]
    fn gmm_energy_at_mode_matches_direct_mixture_sum() {
        let gmm = GaussianMixture25::default();
        let x = [5.0, -10.0];
        // Direct evaluation: sum of the 25 weighted densities.
        let mut density = 0.0;
        for &a in &[-10.0, -5.0, 0.0, 5.0, 10.0] {
            for &b in &[-10.0, -5.0, 0.0, 5.0, 10.0] {
                let r2: f64 = (x[0] - a) * (x[0] - a) + (x[1] - b) * (x[1] - b);
                density += (1.0 / 25.0) * (-r2 / 0.6).exp() / (2.0 * PI * 0.3);
            }
        }
        let e = gmm.energy(&x).unwrap();
        assert!((e + density.ln()).abs() < 1e-12, "{e} vs {}", -density.ln());
    }

    #[test]
    fn gmm_is_symmetric_under_reflections() {
        let gmm = GaussianMixture25::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)];
            let e = gmm.energy_unchecked(&x);
            for y in [[-x[0], x[1]], [x[0], -x[1]], [-x[0], -x[1]], [x[1], x[0]]] {
                assert!((gmm.energy_unchecked(&y) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in all_targets() {
            for _ in 0..100 {
                let x: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let g = t.grad_energy(&x).unwrap();
                let fd = fd_grad(t.as_ref(), &x, 1e-5);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() / (1.0 + b.abs()) < 1e-5, "{}: {a} vs {b}", t.name());
                }
            }
        }
    }

    #[test]
    fn funnel_gradient_at_origin() {
        let f = Funnel::default();
        let x = vec![0.0; 10];
        let g = f.grad_energy(&x).unwrap();
        let fd = fd_grad(&f, &x, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        // Only the x1 component is nonzero at the origin: (d-1)/2.
        assert!((g[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn manywell_gradient_on_symmetric_point() {
        let mw = ManyWell::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = vec![0.0; 32];
        for p in x.chunks_exact_mut(2) {
            p[1] = rng.random_range(-2.0..2.0);
        }
        let g = mw.grad_energy(&x).unwrap();
        for (j, gj) in g.iter().enumerate() {
            if j % 2 == 0 {
                // d/dx (x^4 - 6x^2 - x/2) at 0.
                assert_eq!(*gj, -0.5);
            } else {
                assert_eq!(*gj, x[j]);
            }
        }
    }

    #[test]
    fn manywell_energy_decomposes_into_pairs() {
        let mw = ManyWell::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-2.5..2.5)).collect();
            let sum: f64 = x.chunks_exact(2).map(|p| ManyWell::pair_energy(p[0], p[1])).sum();
            assert!((mw.energy_unchecked(&x) - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn manywell_log_z_matches_composite_simpson() {
        // Independent oracle: composite Simpson on a fine grid.
        let n = 200_000;
        let (a, b) = (-8.0, 8.0);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * (-ManyWell::well(x)).exp();
        }
        let well_z = s * h / 3.0;
        let expected = 16.0 * (well_z.ln() + 0.5 * (2.0 * PI).ln());
        let got = ManyWell::default().exact_log_z().unwrap();
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }

    #[test]
    fn normalized_targets_report_zero_log_z() {
        assert_eq!(GaussianMixture25::default().exact_log_z(), Some(0.0));
        assert_eq!(Funnel::default().exact_log_z(), Some(0.0));
        assert_eq!(Gaussian::normalized(3, 1.5).exact_log_z(), Some(0.0));
    }

    #[test]
    fn funnel_and_gmm_are_normalized_in_low_dimension() {
        // Funnel in d=2 integrates to one; the inner variable is rescaled by
        // the conditional std so the quadrature sees the same shape for every v.
        let f = Funnel::new(2);
        let z = quadrature::integrate(
            |v| {
                let s = (0.5 * v).exp();
                s * quadrature::integrate(|u| (-f.energy_unchecked(&[v, s * u])).exp(), -12.0, 12.0, 1e-11)
            },
            -25.0,
            25.0,
            1e-10,
        );
        assert!((z - 1.0).abs() < 1e-6, "{z}");
        let gmm = GaussianMixture25::default();
        let z = quadrature::integrate(
            |a| quadrature::integrate(|b| (-gmm.energy_unchecked(&[a, b])).exp(), -16.0, 16.0, 1e-11),
            -16.0,
            16.0,
            1e-10,
        );
        assert!((z - 1.0).abs() < 1e-6, "{z}");
    }

    #[test]
    fn energy_is_finite_and_clamped() {
        let f = Funnel::default();
        let mut x = vec![0.0; 10];
        x[0] = -60.0;
        x[1] = 50.0;
        let e = energy_batch(&f, &Array2::from_shape_vec((1, 10), x).unwrap()).unwrap();
        assert_eq!(e[[0, 0]], ENERGY_CLAMP);
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(by_name("gmm25", None).unwrap().dim(), 2);
        assert_eq!(by_name("manywell", None).unwrap().dim(), 32);
        assert_eq!(by_name("gaussian", Some(5)).unwrap().dim(), 5);
        assert!(matches!(by_name("lgcp", None), Err(Error::UnknownTarget(_))));
        for (name, dim) in [("manywell", 3), ("funnel", 1), ("gaussian", 0), ("gmm25", 3)] {
            assert!(matches!(by_name(name, Some(dim)), Err(Error::InvalidArgument(_))), "{name} {dim}");
        }
    }
}
