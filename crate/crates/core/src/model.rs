//! Drift, flow and scale networks of a sampler, the learned log-partition
//! scalar, and checkpoint I/O.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Matrix, ParamId, Var};
use crate::dynamics::DriftField;
use crate::error::{Error, Result};
use crate::targets::{energy_and_grad_batch, energy_batch, EnergyTarget};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trainable matrix with a stable identity.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub value: Matrix,
}

impl Param {
    fn new(value: Matrix) -> Self {
        Param { id: ParamId::fresh(), value }
    }

    fn record(&self, g: &mut Graph) -> Var {
        g.param(self.id, &self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub time_embed_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch { hidden_layers: 2, hidden_width: 64, time_embed_dim: 64 }
    }
}

impl Arch {
    fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("network needs at least one hidden layer of nonzero width"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time embedding dimension must be even and at least 2"));
        }
        Ok(())
    }
}

/// Sinusoidal features `sin(k pi t), cos(k pi t)` for `k = 1..=dim/2`, as a `1 x dim` row.
/// The `k = 1` cosine alone is strictly monotone on `[0, 1]`, so the map is injective there.
pub fn time_embedding(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for k in 0..half {
        let a = (k + 1) as f64 * PI * t;
        out[[0, k]] = a.sin();
        out[[0, half + k]] = a.cos();
    }
    out
}

fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// MLP on `(x, embed(t))` with SiLU activations. The spatial input is
/// optional so the same type serves time-only networks.
#[derive(Debug, Clone)]
pub struct Mlp {
    embed_dim: usize,
    x_in: Option<Param>,
    t_in: Param,
    b_in: Param,
    hidden: Vec<(Param, Param)>,
    w_out: Param,
    b_out: Param,
}

impl Mlp {
    /// Output layer starts at zero weights and bias `out_bias`.
    pub fn new(in_dim: usize, out_dim: usize, arch: &Arch, out_bias: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = arch.hidden_width;
        let e = arch.time_embed_dim;
        let fan_in = in_dim + e;
        let x_in = (in_dim > 0).then(|| Param::new(uniform_init(rng, in_dim, w, fan_in)));
        let t_in = Param::new(uniform_init(rng, e, w, fan_in));
        let b_in = Param::new(uniform_init(rng, 1, w, fan_in));
        let hidden = (1..arch.hidden_layers)
            .map(|_| (Param::new(uniform_init(rng, w, w, w)), Param::new(uniform_init(rng, 1, w, w))))
            .collect();
        Mlp {
            embed_dim: e,
            x_in,
            t_in,
            b_in,
            hidden,
            w_out: Param::new(Array2::zeros((w, out_dim))),
            b_out: Param::new(Array2::from_elem((1, out_dim), out_bias)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.b_out.value.ncols()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.x_in.iter().collect();
        v.push(&self.t_in);
        v.push(&self.b_in);
        for (w, b) in &self.hidden {
            v.push(w);
            v.push(b);
        }
        v.push(&self.w_out);
        v.push(&self.b_out);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.x_in.iter_mut().collect();
        v.push(&mut self.t_in);
        v.push(&mut self.b_in);
        for (w, b) in &mut self.hidden {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Sets the output layer to zero weights and the given bias.
    pub fn zero_output(&mut self, bias: f64) {
        self.w_out.value.fill(0.0);
        self.b_out.value.fill(bias);
    }

    fn time_row(&self, t: f64) -> Matrix {
        time_embedding(t, self.embed_dim).dot(&self.t_in.value) + &self.b_in.value
    }

    /// Plain evaluation on a batch `[B, in_dim]`; for time-only networks `rows`
    /// gives the batch size and `x` is ignored.
    pub fn forward(&self, x: Option<&Matrix>, t: f64) -> Matrix {
        let trow = self.time_row(t);
        let mut h = match (&self.x_in, x) {
            (Some(w), Some(x)) => x.dot(&w.value) + &trow,
            _ => trow,
        };
        h.mapv_inplace(silu);
        for (w, b) in &self.hidden {
            h = h.dot(&w.value) + &b.value;
            h.mapv_inplace(silu);
        }
        h.dot(&self.w_out.value) + &self.b_out.value
    }

    pub fn record(&self, g: &mut Graph, x: Option<Var>, t: f64) -> Var {
        let e = g.constant(time_embedding(t, self.embed_dim));
        let wt = self.t_in.record(g);
        let b = self.b_in.record(g);
        let tw = g.matmul(e, wt);
        let trow = g.add(tw, b);
        let mut h = match (&self.x_in, x) {
            (Some(w), Some(x)) => {
                let wx = w.record(g);
                let xw = g.matmul(x, wx);
                g.add_row(xw, trow)
            }
            _ => trow,
        };
        h = g.silu(h);
        for (w, b) in &self.hidden {
            let wv = w.record(g);
            let bv = b.record(g);
            let hw = g.matmul(h, wv);
            h = g.add_row(hw, bv);
            h = g.silu(h);
        }
        let wo = self.w_out.record(g);
        let bo = self.b_out.record(g);
        let o = g.matmul(h, wo);
        g.add_row(o, bo)
    }

    fn flat(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn set_flat(&mut self, data: &[f64]) -> Result<()> {
        let total = self.num_params();
        if data.len() != total {
            return Err(Error::Checkpoint(format!("expected {total} parameters, found {}", data.len())));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            for (dst, src) in p.value.iter_mut().zip(&data[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }
}

/// Parametrization of the learned log-marginal `log p_hat(x, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// Raw network output.
    Learned,
    /// `-t E(x) + (1 - t) log N(x; 0, sigma^2 t I) + net(x, t)`.
    ForwardLooking,
    /// `log N(x; 0, sigma^2 t I) + net(x, t)`: the uncontrolled marginal plus a correction.
    Reference,
}

impl FlowMode {
    pub fn name(&self) -> &'static str {
        match self {
            FlowMode::Learned => "learned",
            FlowMode::ForwardLooking => "forward_looking",
            FlowMode::Reference => "reference",
        }
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Drift,
    Flow,
    LogZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub langevin: bool,
    pub learned_backward: bool,
    /// Per-sample norm bound on the target score used by the Langevin term.
    pub langevin_clip: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { langevin: false, learned_backward: false, langevin_clip: 1e2 }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerModel {
    dim: usize,
    sigma: f64,
    arch: Arch,
    options: ModelOptions,
    drift: Mlp,
    flow: Mlp,
    backward: Option<Mlp>,
    scale: Option<Mlp>,
    log_z: Param,
}

impl SamplerModel {
    pub fn new(dim: usize, sigma: f64, arch: Arch, options: ModelOptions, seed: u64) -> Result<Self> {
        arch.validate()?;
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drift = Mlp::new(dim, dim, &arch, 0.0, &mut rng);
        let flow = Mlp::new(dim, 1, &arch, 0.0, &mut rng);
        let backward = options.learned_backward.then(|| Mlp::new(dim, dim, &arch, 0.0, &mut rng));
        let scale = options.langevin.then(|| Mlp::new(0, dim, &arch, 1.0, &mut rng));
        Ok(SamplerModel {
            dim,
            sigma,
            arch,
            options,
            drift,
            flow,
            backward,
            scale,
            log_z: Param::new(Array2::zeros((1, 1))),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn options(&self) -> &ModelOptions {
        &self.options
    }

    pub fn log_z_hat(&self) -> f64 {
        self.log_z.value[[0, 0]]
    }

    pub fn set_log_z_hat(&mut self, v: f64) {
        self.log_z.value[[0, 0]] = v;
    }

    pub fn log_z_id(&self) -> ParamId {
        self.log_z.id
    }

    pub fn record_log_z(&self, g: &mut Graph) -> Var {
        self.log_z.record(g)
    }

    pub fn drift_net(&self) -> &Mlp {
        &self.drift
    }

    pub fn drift_net_mut(&mut self) -> &mut Mlp {
        &mut self.drift
    }

    pub fn flow_net(&self) -> &Mlp {
        &self.flow
    }

    pub fn flow_net_mut(&mut self) -> &mut Mlp {
        &mut self.flow
    }

    pub fn backward_net(&self) -> Option<&Mlp> {
        self.backward.as_ref()
    }

    pub fn scale_net(&self) -> Option<&Mlp> {
        self.scale.as_ref()
    }

    pub fn scale_net_mut(&mut self) -> Option<&mut Mlp> {
        self.scale.as_mut()
    }

    /// All parameters with their optimizer groups, in a fixed order.
    pub fn params(&self) -> Vec<(ParamGroup, &Param)> {
        let mut v: Vec<(ParamGroup, &Param)> = Vec::new();
        v.extend(self.drift.params().into_iter().map(|p| (ParamGroup::Drift, p)));
        if let Some(s) = &self.scale {
            v.extend(s.params().into_iter().map(|p| (ParamGroup::Drift, p)));
        }
        if let Some(b) = &self.backward {
            v.extend(b.params().into_iter().map(|p| (ParamGroup::Drift, p)));
        }
        v.extend(self.flow.params().into_iter().map(|p| (ParamGroup::Flow, p)));
        v.push((ParamGroup::LogZ, &self.log_z));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Param)> {
        let mut v: Vec<(ParamGroup, &mut Param)> = Vec::new();
        v.extend(self.drift.params_mut().into_iter().map(|p| (ParamGroup::Drift, p)));
        if let Some(s) = &mut self.scale {
            v.extend(s.params_mut().into_iter().map(|p| (ParamGroup::Drift, p)));
        }
        if let Some(b) = &mut self.backward {
            v.extend(b.params_mut().into_iter().map(|p| (ParamGroup::Drift, p)));
        }
        v.extend(self.flow.params_mut().into_iter().map(|p| (ParamGroup::Flow, p)));
        v.push((ParamGroup::LogZ, &mut self.log_z));
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// The forward drift as a [`DriftField`]. A target is required in Langevin mode.
    pub fn forward_drift<'a>(&'a self, target: Option<&'a dyn EnergyTarget>) -> Result<ModelDrift<'a>> {
        if self.options.langevin && target.is_none() {
            return Err(Error::invalid("Langevin drift needs the target energy"));
        }
        if let Some(t) = target {
            if t.dim() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: t.dim() });
            }
        }
        Ok(ModelDrift { model: self, target: if self.options.langevin { target } else { None } })
    }

    /// The learned reverse drift, if the model has one.
    pub fn reverse_drift(&self) -> Option<ReverseDrift<'_>> {
        self.backward.as_ref().map(|net| ReverseDrift { net, dim: self.dim })
    }

    /// `mu(x, t)` for a single point.
    pub fn drift(&self, x: &[f64], t: f64, target: Option<&dyn EnergyTarget>) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let field = self.forward_drift(target)?;
        let row = Array2::from_shape_vec((1, self.dim), x.to_vec()).expect("row shape");
        Ok(field.eval(&row, t)?.into_raw_vec_and_offset().0)
    }

    fn check_flow_time(t: f64) -> Result<()> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::invalid(format!("flow is only defined for t in (0, 1), got {t}")));
        }
        Ok(())
    }

    fn flow_prior(&self, x: &Matrix, t: f64, target: &dyn EnergyTarget, mode: FlowMode) -> Result<Matrix> {
        let d = self.dim as f64;
        let var = self.sigma * self.sigma * t;
        let reference = || {
            let sq = x.map_axis(ndarray::Axis(1), |r| r.dot(&r)).insert_axis(ndarray::Axis(1));
            sq.mapv(|s| -0.5 * d * (2.0 * PI * var).ln() - 0.5 * s / var)
        };
        Ok(match mode {
            FlowMode::Learned => Array2::zeros((x.nrows(), 1)),
            FlowMode::Reference => reference(),
            FlowMode::ForwardLooking => {
                let e = energy_batch(target, x)?;
                reference() * (1.0 - t) - e * t
            }
        })
    }

    /// `log p_hat(x, t)` for each row of `x`, as `[B, 1]`.
    pub fn flow_batch(&self, x: &Matrix, t: f64, target: &dyn EnergyTarget, mode: FlowMode) -> Result<Matrix> {
        Self::check_flow_time(t)?;
        Ok(self.flow_prior(x, t, target, mode)? + self.flow.forward(Some(x), t))
    }

    pub fn flow_log_density(&self, x: &[f64], t: f64, target: &dyn EnergyTarget, mode: FlowMode) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let row = Array2::from_shape_vec((1, self.dim), x.to_vec()).expect("row shape");
        Ok(self.flow_batch(&row, t, target, mode)?[[0, 0]])
    }

    /// Recorded flow on detached states `x` (a constant node).
    pub fn record_flow(
        &self,
        g: &mut Graph,
        x: Var,
        t: f64,
        target: &dyn EnergyTarget,
        mode: FlowMode,
    ) -> Result<Var> {
        Self::check_flow_time(t)?;
        let prior = self.flow_prior(g.value(x), t, target, mode)?;
        let net = self.flow.record(g, Some(x), t);
        let prior = g.constant(prior);
        Ok(g.add(net, prior))
    }

    pub fn save(&self, path: &Path, iteration: u64) -> Result<()> {
        let ck = self.to_checkpoint(iteration);
        std::fs::write(path, serde_json::to_string_pretty(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ck)
    }

    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            dim: self.dim,
            sigma: self.sigma,
            arch: self.arch,
            options: self.options,
            iteration,
            log_z_hat: self.log_z_hat(),
            drift_params: self.drift.flat(),
            flow_params: self.flow.flat(),
            backward_params: self.backward.as_ref().map(Mlp::flat),
            scale_params: self.scale.as_ref().map(Mlp::flat),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, u64)> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        let mut model = SamplerModel::new(ck.dim, ck.sigma, ck.arch, ck.options, 0)?;
        model.drift.set_flat(&ck.drift_params)?;
        model.flow.set_flat(&ck.flow_params)?;
        match (&mut model.backward, &ck.backward_params) {
            (Some(net), Some(p)) => net.set_flat(p)?,
            (None, None) => {}
            _ => return Err(Error::Checkpoint("backward network presence disagrees with options".into())),
        }
        match (&mut model.scale, &ck.scale_params) {
            (Some(net), Some(p)) => net.set_flat(p)?,
            (None, None) => {}
            _ => return Err(Error::Checkpoint("scale network presence disagrees with options".into())),
        }
        model.set_log_z_hat(ck.log_z_hat);
        Ok((model, ck.iteration))
    }
}

/// On-disk model layout. Parameter vectors are the row-major concatenation
/// of each network's matrices in construction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dim: usize,
    pub sigma: f64,
    pub arch: Arch,
    pub options: ModelOptions,
    pub iteration: u64,
    pub log_z_hat: f64,
    pub drift_params: Vec<f64>,
    pub flow_params: Vec<f64>,
    pub backward_params: Option<Vec<f64>>,
    pub scale_params: Option<Vec<f64>>,
}

fn check_time(t: f64) -> Result<()> {
    if !(-1e-12..=1.0 + 1e-12).contains(&t) {
        return Err(Error::invalid(format!("drift time must lie in [0, 1], got {t}")));
    }
    Ok(())
}

fn check_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(what))
    }
}

/// The model's forward drift, optionally with the Langevin term
/// `s(t) * clip(grad log p_target(x))`.
pub struct ModelDrift<'a> {
    model: &'a SamplerModel,
    target: Option<&'a dyn EnergyTarget>,
}

impl ModelDrift<'_> {
    /// Clipped target score `-grad E(x)` per row. Treated as data: no
    /// gradient flows through it into `x`.
    fn clipped_score(&self, x: &Matrix) -> Result<Option<Matrix>> {
        let Some(target) = self.target else { return Ok(None) };
        let (_, grad) = energy_and_grad_batch(target, x)?;
        let mut score = -grad;
        let clip = self.model.options.langevin_clip;
        for mut row in score.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > clip {
                row *= clip / norm;
            }
        }
        Ok(Some(score))
    }
}

impl DriftField for ModelDrift<'_> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn eval(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        check_time(t)?;
        let mut out = self.model.drift.forward(Some(x), t);
        if let (Some(score), Some(scale)) = (self.clipped_score(x)?, &self.model.scale) {
            out += &(score * &scale.forward(None, t));
        }
        check_finite(&out, "drift output")?;
        Ok(out)
    }

    fn record(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var> {
        check_time(t)?;
        let mut out = self.model.drift.record(g, Some(x), t);
        if let (Some(score), Some(scale)) = (self.clipped_score(g.value(x))?, &self.model.scale) {
            let s = scale.record(g, None, t);
            let score = g.constant(score);
            let term = g.mul_row(score, s);
            out = g.add(out, term);
        }
        check_finite(g.value(out), "drift output")?;
        Ok(out)
    }
}

/// Learned reverse drift `mu_bwd(x, t)`.
pub struct ReverseDrift<'a> {
    net: &'a Mlp,
    dim: usize,
}

impl DriftField for ReverseDrift<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        check_time(t)?;
        let out = self.net.forward(Some(x), t);
        check_finite(&out, "reverse drift output")?;
        Ok(out)
    }

    fn record(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var> {
        check_time(t)?;
        Ok(self.net.record(g, Some(x), t))
    }
}
