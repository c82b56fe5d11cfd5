//! Training loop, run directories and discretization sweeps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::config::{ObjectiveKind, RunConfig, SchemeKind};
use crate::dynamics::{simulate_forward, BackwardPolicy, ForwardPolicy};
use crate::error::{Error, Result};
use crate::metrics::{elbo_with_rng, fmt_f64, EvalResult};
use crate::model::SamplerModel;
use crate::objectives::{batch_loss, pis_kl_loss, Objective};
use crate::optim::Adam;
use crate::targets::EnergyTarget;

/// Consecutive non-finite iterations tolerated before a run is aborted.
pub const MAX_CONSECUTIVE_SKIPS: usize = 100;

pub const METRICS_HEADER: &str = "iter,loss,elbo,elbo_is,elbo_gap,logz_hat,grad_norm,wall_time_s";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "run.log";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    /// Loss of the most recent iteration; NaN if it was skipped.
    pub loss: f64,
    pub elbo: f64,
    pub elbo_is: f64,
    pub elbo_gap: Option<f64>,
    pub logz_hat: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            fmt_f64(self.loss),
            fmt_f64(self.elbo),
            fmt_f64(self.elbo_is),
            self.elbo_gap.map(fmt_f64).unwrap_or_default(),
            fmt_f64(self.logz_hat),
            fmt_f64(self.grad_norm),
            fmt_f64(self.wall_time_s)
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SamplerModel,
    pub rows: Vec<MetricsRow>,
    /// Iterations whose loss or gradient was non-finite.
    pub skipped: usize,
    pub final_eval: Option<EvalResult>,
    /// Mean wall time per training iteration, evaluation excluded.
    pub seconds_per_iter: f64,
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Evaluation randomness depends only on the seed and the iteration.
pub fn eval_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + iter as u64);
    rng
}

/// Exploration noise at iteration `i`, decayed linearly to zero.
pub fn exploration_at(cfg: &RunConfig, i: usize) -> f64 {
    if cfg.exploration_std == 0.0 || cfg.iterations == 0 {
        return 0.0;
    }
    let horizon = cfg.exploration_decay_frac * cfg.iterations as f64;
    cfg.exploration_std * (1.0 - i as f64 / horizon).max(0.0)
}

pub fn init_model(cfg: &RunConfig, target: &dyn EnergyTarget) -> Result<SamplerModel> {
    SamplerModel::new(target.dim(), cfg.resolved_sigma(), cfg.arch(), cfg.model_options(), cfg.seed)
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteValue(_))
}

enum Step {
    Done { loss: f64, grad_norm: f64 },
    Skipped,
}

fn train_step(
    cfg: &RunConfig,
    objective: Objective,
    model: &mut SamplerModel,
    opt: &mut Adam,
    target: &dyn EnergyTarget,
    rng: &mut ChaCha8Rng,
    iter: usize,
) -> Result<Step> {
    let grid = cfg.scheme().sample(cfg.n_train, rng)?;
    let computed = {
        let drift = model.forward_drift(Some(target))?;
        let fwd = ForwardPolicy::new(&drift, model.sigma(), grid.clone())?;
        let reverse = model.reverse_drift();
        let bwd = match &reverse {
            Some(r) => BackwardPolicy::learned(r, model.sigma(), grid)?,
            None => BackwardPolicy::bridge(model.sigma(), grid)?,
        };
        if objective == Objective::Pis {
            pis_kl_loss(&fwd, &bwd, target, cfg.batch_size, rng, 0.0)
        } else {
            simulate_forward(&fwd, cfg.batch_size, rng, exploration_at(cfg, iter))
                .and_then(|batch| batch_loss(objective, model, &batch, &fwd, &bwd, target))
        }
    };
    let (report, grads) = match computed {
        Ok(v) => v,
        Err(e) if is_non_finite(&e) => return Ok(Step::Skipped),
        Err(e) => return Err(e),
    };
    match opt.step(model, &grads) {
        Ok(grad_norm) => Ok(Step::Done { loss: report.loss, grad_norm }),
        Err(e) if is_non_finite(&e) => Ok(Step::Skipped),
        Err(e) => Err(e),
    }
}

/// Evaluates the model with the run's evaluation settings.
pub fn evaluate(cfg: &RunConfig, model: &SamplerModel, target: &dyn EnergyTarget, iter: usize) -> Result<EvalResult> {
    let mut rng = eval_rng(cfg.seed, iter);
    elbo_with_rng(model, target, cfg.n_eval, cfg.eval_k, &mut rng, cfg.seed)
}

struct RunFiles {
    metrics: BufWriter<File>,
    log: BufWriter<File>,
    checkpoint: PathBuf,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &RunConfig, target: &dyn EnergyTarget, model: &SamplerModel) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
        let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        metrics.flush()?;
        let mut log = BufWriter::new(File::create(dir.join(LOG_FILE))?);
        writeln!(log, "diffsamp {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(log, "seed {}", cfg.seed)?;
        writeln!(log, "target {}", target.describe())?;
        writeln!(log, "objective {}", cfg.objective().name())?;
        writeln!(log, "parameters {}", model.num_params())?;
        log.flush()?;
        Ok(RunFiles { metrics, log, checkpoint: dir.join(&cfg.checkpoint) })
    }
}

/// Trains a model according to `cfg`. With `out_dir`, writes the resolved
/// config, metrics CSV, final checkpoint and a run log there.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, out_dir, &mut |_| {})
}

/// As [`train`], calling `on_row` for every metrics row as it is produced.
pub fn train_with(cfg: &RunConfig, out_dir: Option<&Path>, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let target = cfg.build_target()?;
    let target = target.as_ref();
    let objective = cfg.objective();
    let mut model = init_model(cfg, target)?;
    let mut files = match out_dir {
        Some(dir) => Some(RunFiles::create(dir, cfg, target, &model)?),
        None => None,
    };
    let mut opt = Adam::new(cfg.adam());
    let mut rng = training_rng(cfg.seed);
    let start = Instant::now();
    let mut train_secs = 0.0;
    let mut rows = Vec::new();
    let mut final_eval = None;
    let (mut skipped, mut consecutive) = (0usize, 0usize);
    let mut grad_norm = f64::NAN;

    for i in 0..cfg.iterations {
        let t0 = Instant::now();
        let step = train_step(cfg, objective, &mut model, &mut opt, target, &mut rng, i)?;
        train_secs += t0.elapsed().as_secs_f64();
        let loss = match step {
            Step::Done { loss, grad_norm: g } => {
                grad_norm = g;
                consecutive = 0;
                loss
            }
            Step::Skipped => {
                skipped += 1;
                consecutive += 1;
                if let Some(f) = files.as_mut() {
                    writeln!(f.log, "iter {} skipped: non-finite loss or gradient", i + 1)?;
                }
                if consecutive >= MAX_CONSECUTIVE_SKIPS {
                    if let Some(f) = files.as_mut() {
                        writeln!(f.log, "aborted after {consecutive} consecutive skipped iterations")?;
                        f.log.flush()?;
                    }
                    return Err(Error::Diverged(i + 1));
                }
                f64::NAN
            }
        };
        let done = i + 1;
        let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.iterations;
        if !due {
            continue;
        }
        let eval = match evaluate(cfg, &model, target, done) {
            Ok(e) => Some(e),
            Err(e) if is_non_finite(&e) => {
                if let Some(f) = files.as_mut() {
                    writeln!(f.log, "iter {done} evaluation failed: {e}")?;
                }
                None
            }
            Err(e) => return Err(e),
        };
        let row = MetricsRow {
            iter: done,
            loss,
            elbo: eval.map_or(f64::NAN, |e| e.elbo),
            elbo_is: eval.map_or(f64::NAN, |e| e.elbo_is),
            elbo_gap: eval.and_then(|e| e.elbo_gap),
            logz_hat: model.log_z_hat(),
            grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = files.as_mut() {
            writeln!(f.metrics, "{}", row.csv_row())?;
            f.metrics.flush()?;
        }
        on_row(&row);
        rows.push(row);
        final_eval = eval;
    }

    if let Some(f) = files.as_mut() {
        model.save(&f.checkpoint, cfg.iterations as u64)?;
        writeln!(f.log, "skipped {skipped}")?;
        writeln!(f.log, "iterations {}", cfg.iterations)?;
        writeln!(f.log, "wall_time_s {}", fmt_f64(start.elapsed().as_secs_f64()))?;
        f.log.flush()?;
    }
    let seconds_per_iter = if cfg.iterations > 0 { train_secs / cfg.iterations as f64 } else { 0.0 };
    Ok(TrainOutcome { model, rows, skipped, final_eval, seconds_per_iter })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scheme: SchemeKind,
    pub n_train: usize,
    /// Final ELBO gap per seed, in seed order.
    pub gaps: Vec<f64>,
    pub elbos: Vec<f64>,
    /// First error of a failed cell.
    pub error: Option<String>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "scheme,n_train,seeds,elbo_gap_mean,elbo_gap_std,elbo_mean,status";

    pub fn mean_gap(&self) -> Option<f64> {
        mean(&self.gaps)
    }

    pub fn csv_row(&self) -> String {
        let gap_std = if self.gaps.len() > 1 {
            let m = mean(&self.gaps).unwrap_or(0.0);
            let var = self.gaps.iter().map(|g| (g - m) * (g - m)).sum::<f64>() / (self.gaps.len() - 1) as f64;
            fmt_f64(var.sqrt())
        } else {
            String::new()
        };
        let status = match &self.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.scheme.name(),
            self.n_train,
            self.elbos.len(),
            self.mean_gap().map(fmt_f64).unwrap_or_default(),
            gap_std,
            mean(&self.elbos).map(fmt_f64).unwrap_or_default(),
            status
        )
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains one run per (scheme, n_train, seed) and reports the final ELBO gap
/// of each (scheme, n_train) cell averaged over seeds. A failing run marks
/// its cell failed without stopping the sweep.
pub fn sweep(
    base: &RunConfig,
    n_train_values: &[usize],
    schemes: &[SchemeKind],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if n_train_values.is_empty() || schemes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one scheme, one n_train value and one seed".into()));
    }
    base.validate()?;
    let target = base.build_target()?;
    let mut files = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(CONFIG_FILE), base.to_text())?;
            let mut csv = BufWriter::new(File::create(dir.join(SWEEP_FILE))?);
            writeln!(csv, "{}", SweepRow::CSV_HEADER)?;
            let mut log = BufWriter::new(File::create(dir.join(LOG_FILE))?);
            writeln!(log, "diffsamp {}", env!("CARGO_PKG_VERSION"))?;
            writeln!(log, "seeds {seeds:?}")?;
            writeln!(log, "target {}", target.describe())?;
            Some((csv, log, dir.to_path_buf()))
        }
        None => None,
    };
    let mut rows = Vec::new();
    for &scheme in schemes {
        for &n in n_train_values {
            let mut row = SweepRow { scheme, n_train: n, gaps: Vec::new(), elbos: Vec::new(), error: None };
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.discretization = scheme;
                cfg.n_train = n;
                cfg.seed = seed;
                let result = cfg.validate().and_then(|_| train(&cfg, None)).and_then(|o| {
                    let eval = o.final_eval.ok_or(Error::NonFiniteValue("final evaluation"))?;
                    Ok((o.model, eval))
                });
                match result {
                    Ok((model, eval)) => {
                        row.elbos.push(eval.elbo);
                        if let Some(g) = eval.elbo_gap {
                            row.gaps.push(g);
                        }
                        if let Some((_, log, dir)) = files.as_mut() {
                            let name = format!("checkpoint_{}_{}_seed{}.json", scheme.name(), n, seed);
                            model.save(&dir.join(name), cfg.iterations as u64)?;
                            writeln!(log, "{} n_train={} seed={} elbo={}", scheme.name(), n, seed, fmt_f64(eval.elbo))?;
                        }
                    }
                    Err(e) => {
                        if let Some((_, log, _)) = files.as_mut() {
                            writeln!(log, "{} n_train={} seed={} failed: {}", scheme.name(), n, seed, e)?;
                        }
                        row.error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            if let Some((csv, log, _)) = files.as_mut() {
                writeln!(csv, "{}", row.csv_row())?;
                csv.flush()?;
                log.flush()?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
