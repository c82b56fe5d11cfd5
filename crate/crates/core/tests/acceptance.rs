//! One test per acceptance criterion. Each prints a single
//! `[criterion N] ... PASS|FAIL` line (visible with `--nocapture`) and
//! asserts the criterion. The tests share a lock so that the timing
//! criterion never measures under contention.

mod common;

use std::sync::Mutex;
use std::time::Instant;

use diffsamp::config::{RunConfig, SchemeKind};
use diffsamp::dynamics::{simulate_forward, BackwardPolicy, ForwardPolicy};
use diffsamp::metrics::elbo;
use diffsamp::model::{FlowMode, ModelOptions, SamplerModel};
use diffsamp::objectives::{db_loss, log_rnd, subtb_loss, tb_loss, vargrad_loss, SubTbWeighting};
use diffsamp::targets::{Gaussian, GaussianMixture25};
use diffsamp::timegrid::TimeGrid;
use diffsamp::trainer::{sweep, train};
use diffsamp::verify::{db_asymptotics_check, fpe_residual, rnd_convergence_check, ClosedFormProcess, DbSetup, Shifted};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: usize, name: &str, passed: bool, detail: String) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("[criterion {n:>2}] {name}: {status} ({detail})");
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for seed in 0..50 {
        let r = common::gradient_check(seed, 1e-6);
        worst = worst.max(r.rel_error);
        largest = largest.max(r.params);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient correctness",
        worst < 1e-5 && largest <= 1000 && secs < 60.0,
        format!("max relative error {worst:.2e} over 50 seeds, up to {largest} parameters, {secs:.1} s"),
    );
}

#[test]
fn criterion_02_exact_reversal_has_zero_discrepancy() {
    let _g = serial();
    let (d, sigma) = (2, 1.0);
    let model = SamplerModel::new(d, sigma, common::tiny_arch(), ModelOptions::default(), 0).unwrap();
    let target = Gaussian::normalized(d, sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut delta, mut loss, mut rnd): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for n in [5, 17, 100] {
        let grids = [
            TimeGrid::uniform(n).unwrap(),
            TimeGrid::random(n, 10.0, &mut rng).unwrap(),
            TimeGrid::equidistant(n, 1e-4, &mut rng).unwrap(),
        ];
        for grid in grids {
            let drift = model.forward_drift(None).unwrap();
            let fwd = ForwardPolicy::new(&drift, sigma, grid.clone()).unwrap();
            let bwd = BackwardPolicy::bridge(sigma, grid).unwrap();
            let batch = simulate_forward(&fwd, 64, &mut rng, 0.0).unwrap();
            let (db, _) = db_loss(&model, &batch, &fwd, &bwd, &target, FlowMode::Reference).unwrap();
            let (sub, _) =
                subtb_loss(&model, &batch, &fwd, &bwd, &target, FlowMode::Reference, SubTbWeighting::Uniform).unwrap();
            delta = db.step_deltas.unwrap().iter().fold(delta, |m, v| m.max(v.abs()));
            loss = loss.max(db.loss).max(sub.loss);
            rnd = log_rnd(&batch, &fwd, &bwd, &target).unwrap().iter().fold(rnd, |m, v| m.max(v.abs()));
        }
    }
    report(
        2,
        "exact-reversal zero",
        delta < 1e-10 && loss < 1e-18 && rnd < 1e-10,
        format!("max |delta| {delta:.1e}, max db/subtb loss {loss:.1e}, max |log_rnd| {rnd:.1e}"),
    );
}

#[test]
fn criterion_03_rnd_strong_convergence_order() {
    let _g = serial();
    let start = Instant::now();
    let ou = ClosedFormProcess::ou(1.0, 1.0, 0.0);
    let bm = ClosedFormProcess::brownian(1.0, 0.0);
    let r = rnd_convergence_check(&ou, &bm, 1, &[8, 16, 32, 64, 128], 200_000, 3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "rnd strong convergence order",
        (0.8..=1.2).contains(&r.strong_slope) && secs < 60.0,
        format!("strong slope {:.3} (weak slope {:.3}), expected [0.8, 1.2], {secs:.1} s", r.strong_slope, r.weak_slope),
    );
}

#[test]
fn criterion_04_db_asymptotics() {
    let _g = serial();
    let stat = ClosedFormProcess::stationary_ou(1.0, 1.0);
    let fwd = stat.drift();
    let rev = stat.nelson_reverse();
    let b = [0.1, -0.05];
    let shifted_rev = Shifted { field: &rev, shift: b.iter().map(|v| -v).collect() };
    let matched = DbSetup { fwd: &fwd, bwd: &rev, logp: &stat, sigma: 1.0 };
    let shifted = DbSetup { fwd: &fwd, bwd: &shifted_rev, logp: &stat, sigma: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let (mut worst_matched, mut worst_shift, mut worst_fpe): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let dirac_ou = ClosedFormProcess::ou(1.0, 1.0, 0.0);
    for i in 0..10 {
        let (x, z) = (draw(2), draw(2));
        let r = db_asymptotics_check(&matched, &x, 0.5, &z, &[1e-6]).unwrap();
        worst_matched = worst_matched.max(r.scaled_sqrt[0].abs());
        let s = db_asymptotics_check(&shifted, &x, 0.5, &z, &[1e-6]).unwrap();
        let expected = z[0] * b[0] + z[1] * b[1];
        worst_shift = worst_shift.max((s.scaled_sqrt[0] - expected).abs());
        let t = 0.05 + 0.09 * i as f64;
        worst_fpe = worst_fpe.max(fpe_residual(&stat, &fwd, 1.0, &x, t).abs());
        worst_fpe = worst_fpe.max(fpe_residual(&dirac_ou, &dirac_ou.drift(), 1.0, &x, t).abs());
    }
    report(
        4,
        "db asymptotics",
        worst_matched < 1e-3 && worst_shift < 1e-3 && worst_fpe < 1e-10,
        format!(
            "matched |D/sqrt h| {worst_matched:.1e}, shifted error {worst_shift:.1e}, fpe residual {worst_fpe:.1e}"
        ),
    );
}

#[test]
fn criterion_05_vargrad_tb_identities() {
    let _g = serial();
    let target = GaussianMixture25::default();
    let (mut worst_value, mut worst_grad): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        let mut model = common::random_model(2, 2.0, ModelOptions::default(), seed, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::random(8, 10.0, &mut rng).unwrap();
        let (batch, lr) = {
            let drift = model.forward_drift(None).unwrap();
            let fwd = ForwardPolicy::new(&drift, model.sigma(), grid.clone()).unwrap();
            let bwd = BackwardPolicy::bridge(model.sigma(), grid.clone()).unwrap();
            let batch = simulate_forward(&fwd, 32, &mut rng, 0.0).unwrap();
            let lr = log_rnd(&batch, &fwd, &bwd, &target).unwrap();
            (batch, lr)
        };
        let mean = lr.iter().sum::<f64>() / lr.len() as f64;
        let min_over_c = lr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lr.len() as f64;
        model.set_log_z_hat(-mean);

        let drift = model.forward_drift(None).unwrap();
        let fwd = ForwardPolicy::new(&drift, model.sigma(), grid.clone()).unwrap();
        let bwd = BackwardPolicy::bridge(model.sigma(), grid.clone()).unwrap();
        let (vg, vg_grads) = vargrad_loss(&batch, &fwd, &bwd, &target).unwrap();
        let (_, tb_grads) = tb_loss(&model, &batch, &fwd, &bwd, &target).unwrap();
        worst_value = worst_value.max((vg.loss - min_over_c).abs());
        let a = common::flat_grads(&model, &vg_grads);
        let b = common::flat_grads(&model, &tb_grads);
        worst_grad = a.iter().zip(&b).fold(worst_grad, |m, (x, y)| m.max((x - y).abs()));
    }
    report(
        5,
        "vargrad/tb identities",
        worst_value < 1e-10 && worst_grad < 1e-8,
        format!("max |vargrad - min_c| {worst_value:.1e}, max gradient difference {worst_grad:.1e}"),
    );
}

#[test]
fn criterion_06_elbo_ordering() {
    let _g = serial();
    let target = GaussianMixture25::default();
    let mut violations = 0;
    let mut worst_k1: f64 = 0.0;
    let mut batches = 0;
    for seed in 0..50 {
        let model = common::random_model(2, 3.0, ModelOptions::default(), seed, 0.3);
        for k in [2, 16, 256] {
            let r = elbo(&model, &target, 20, k, seed).unwrap();
            batches += 1;
            if r.elbo_is < r.elbo {
                violations += 1;
            }
        }
        let one = elbo(&model, &target, 20, 1, seed).unwrap();
        worst_k1 = worst_k1.max((one.elbo_is - one.elbo).abs());
    }
    report(
        6,
        "elbo ordering",
        violations == 0 && worst_k1 <= 1e-12,
        format!("{violations} violations in {batches} batches, K=1 max difference {worst_k1:.1e}"),
    );
}

#[test]
fn criterion_07_gaussian_desk_training() {
    let _g = serial();
    let mut cfg = RunConfig::new("gaussian");
    cfg.dim = Some(2);
    cfg.n_train = 10;
    cfg.discretization = SchemeKind::Random;
    cfg.batch_size = 256;
    cfg.iterations = 5000;
    cfg.eval_every = 0;
    cfg.n_eval = 100;
    cfg.eval_k = 2000;
    let start = Instant::now();
    let out = train(&cfg, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let gap = out.final_eval.unwrap().elbo_gap.unwrap();
    report(
        7,
        "gaussian desk training",
        gap < 0.1 && secs <= 600.0,
        format!("elbo gap {gap:.2e} (< 0.1), {secs:.0} s"),
    );
}

/// 25GMM with the diffusion rate of the reference implementation (sigma^2 = 5).
fn gmm_config() -> RunConfig {
    let mut cfg = RunConfig::new("gmm25");
    cfg.sigma = Some(5f64.sqrt());
    cfg.n_train = 10;
    cfg.discretization = SchemeKind::Random;
    cfg.eval_every = 0;
    cfg.n_eval = 100;
    cfg.eval_k = 2000;
    cfg
}

#[test]
fn criterion_08_gmm_gap_reproduction() {
    let _g = serial();
    let mut cfg = gmm_config();
    cfg.iterations = 25_000;
    let start = Instant::now();
    let out = train(&cfg, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let gap = out.final_eval.unwrap().elbo_gap.unwrap();
    report(
        8,
        "25gmm tb random-10 gap",
        (0.7..=1.8).contains(&gap) && secs <= 7200.0,
        format!("elbo gap {gap:.3} with 100-step evaluation, expected [0.7, 1.8], {secs:.0} s"),
    );
}

#[test]
fn criterion_09_random_not_worse_than_uniform() {
    let _g = serial();
    let mut cfg = gmm_config();
    cfg.iterations = 5000;
    let rows = sweep(&cfg, &[5, 10], &[SchemeKind::Uniform, SchemeKind::Random], &[0, 1, 2], None).unwrap();
    let gap = |scheme: SchemeKind, n: usize| {
        let row = rows.iter().find(|r| r.scheme == scheme && r.n_train == n).unwrap();
        assert!(row.error.is_none(), "{:?}", row.error);
        row.mean_gap().unwrap()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [5, 10] {
        let (u, r) = (gap(SchemeKind::Uniform, n), gap(SchemeKind::Random, n));
        ok &= r <= u + 0.1;
        parts.push(format!("N={n}: random {r:.3} vs uniform {u:.3}"));
    }
    report(9, "random vs uniform trend", ok, parts.join(", "));
}

#[test]
fn criterion_10_time_scales_linearly_in_steps() {
    let _g = serial();
    let per_iter = |n: usize| {
        let mut cfg = RunConfig::new("manywell");
        cfg.n_train = n;
        cfg.discretization = SchemeKind::Uniform;
        cfg.iterations = 8;
        cfg.eval_every = 0;
        cfg.n_eval = 1;
        cfg.eval_k = 1;
        // Warm-up run, then the measured one.
        train(&RunConfig { iterations: 2, ..cfg.clone() }, None).unwrap();
        train(&cfg, None).unwrap().seconds_per_iter
    };
    let (t10, t100) = (per_iter(10), per_iter(100));
    let ratio = t100 / t10;
    report(
        10,
        "time scaling in n_train",
        (5.0..=20.0).contains(&ratio),
        format!("{:.1} ms vs {:.1} ms per iteration, ratio {ratio:.2}", t10 * 1e3, t100 * 1e3),
    );
}
