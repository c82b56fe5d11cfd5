//! Partitions `0 = t_0 < t_1 < ... < t_N = 1` of the unit time interval.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

/// How training grids are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Uniform,
    /// Interval lengths proportional to i.i.d. `U[1, c]` draws.
    Random { c: f64 },
    /// Equal interior intervals with a random offset of the first point.
    Equidistant { eps: f64 },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Uniform => "uniform",
            Scheme::Random { .. } => "random",
            Scheme::Equidistant { .. } => "equidistant",
        }
    }

    /// Draws a grid with `n` steps. Uniform grids ignore `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<TimeGrid> {
        match *self {
            Scheme::Uniform => TimeGrid::uniform(n),
            Scheme::Random { c } => TimeGrid::random(n, c, rng),
            Scheme::Equidistant { eps } => TimeGrid::equidistant(n, eps, rng),
        }
    }
}

impl TimeGrid {
    /// Validates and wraps explicit time points.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a time grid needs at least two points"));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(Error::invalid("a time grid must start at 0 and end at 1"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("time points must be strictly increasing"));
        }
        Ok(TimeGrid { times })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("uniform grid needs at least one step"));
        }
        let mut times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        times[n] = 1.0;
        Ok(TimeGrid { times })
    }

    /// Interval lengths `z_i / sum(z)` with `z_i ~ U[1, c]`, so no two
    /// intervals differ in length by more than a factor `c`.
    pub fn random<R: Rng + ?Sized>(n: usize, c: f64, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("random grid needs at least one step"));
        }
        if !(c > 1.0) || !c.is_finite() {
            return Err(Error::invalid(format!("random grid ratio c must exceed 1, got {c}")));
        }
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..=c)).collect();
        let total: f64 = z.iter().sum();
        let mut times = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        times.push(0.0);
        for zi in &z[..n - 1] {
            acc += zi;
            times.push(acc / total);
        }
        times.push(1.0);
        Ok(TimeGrid { times })
    }

    /// First point `t_1 ~ U[eps, 2/N - eps]`, then steps of exactly `1/N`
    /// until the last interval, which absorbs the remainder.
    pub fn equidistant<R: Rng + ?Sized>(n: usize, eps: f64, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("equidistant grid needs at least two steps"));
        }
        let step = 1.0 / n as f64;
        if !(eps > 0.0 && eps < step) {
            return Err(Error::invalid(format!("eps must lie in (0, 1/N), got {eps}")));
        }
        let t1 = rng.random_range(eps..=(2.0 * step - eps));
        Self::equidistant_from_first(n, t1)
    }

    /// Equidistant grid with a given first point `t_1 in (0, 2/N)`.
    pub fn equidistant_from_first(n: usize, t1: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("equidistant grid needs at least two steps"));
        }
        let step = 1.0 / n as f64;
        if !(t1 > 0.0 && t1 < 2.0 * step) {
            return Err(Error::invalid(format!("first point must lie in (0, 2/N), got {t1}")));
        }
        let mut times = Vec::with_capacity(n + 1);
        times.push(0.0);
        for i in 1..n {
            times.push(t1 + (i - 1) as f64 * step);
        }
        times.push(1.0);
        Ok(TimeGrid { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self, n: usize) -> f64 {
        self.times[n]
    }

    /// `t_{n+1} - t_n`.
    pub fn dt(&self, n: usize) -> f64 {
        self.times[n + 1] - self.times[n]
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn max_dt(&self) -> f64 {
        self.deltas().into_iter().fold(0.0, f64::max)
    }
}
