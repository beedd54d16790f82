//! Property suites behind `spcon verify`: closed-form weights against grid
//! search, loss bounds, gradient checks, equivalences, pace dynamics, and
//! determinism.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    meta_contrastive_loss, meta_contrastive_on_tape, pair_loss, pair_losses, unsup_contrastive_loss,
    unsup_contrastive_on_tape, AugmentedBatch,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckConfig};
use crate::model::ema_update;
use crate::self_paced::{
    loss_bounds, optimal_weight, pace_schedule, sp_contrastive_loss, sp_objective_on_tape, weight_objective,
    Regularizer, SelfPacedConfig,
};
use crate::tensor::{l2_normalize, Tensor};
use crate::train::{consistency_loss_on_tape, supervised_loss_on_tape};

/// Signature of a closed-form weight solver.
pub type WeightFn = fn(f64, f64, Regularizer) -> f64;

/// What the suites run against. Tests swap in a broken solver to confirm
/// the closed-form suite notices.
#[derive(Clone, Copy, Debug)]
pub struct VerifyContext {
    pub weight_fn: WeightFn,
    pub seed: u64,
}

impl Default for VerifyContext {
    fn default() -> Self {
        Self {
            weight_fn: optimal_weight,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub checks: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failed_names(&self) -> Vec<String> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name.clone()).collect()
    }

    pub fn into_result(self) -> Result<VerifyReport> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::VerificationFailure(self.failed_names()))
        }
    }
}

/// Collects failures for one suite, keeping the first few messages.
struct Checker {
    checks: usize,
    failures: Vec<String>,
    dropped: usize,
}

impl Checker {
    fn new() -> Self {
        Self {
            checks: 0,
            failures: Vec::new(),
            dropped: 0,
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            if self.failures.len() < 10 {
                self.failures.push(msg());
            } else {
                self.dropped += 1;
            }
        }
    }

    fn finish(mut self, name: &str, start: Instant) -> SuiteResult {
        if self.dropped > 0 {
            self.failures.push(format!("... and {} more", self.dropped));
        }
        SuiteResult {
            name: name.to_string(),
            passed: self.failures.is_empty(),
            checks: self.checks,
            failures: self.failures,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

pub const SUITES: [&str; 7] = [
    "closed-form-weights",
    "loss-bounds",
    "gradients",
    "equivalences",
    "pace-schedule",
    "ema",
    "determinism",
];

pub fn run_all(ctx: &VerifyContext) -> VerifyReport {
    VerifyReport {
        suites: vec![
            closed_form_suite(ctx),
            bounds_suite(ctx),
            gradient_suite(ctx),
            equivalence_suite(ctx),
            pace_suite(ctx),
            ema_suite(),
            determinism_suite(ctx),
        ],
    }
}

/// Brute-force minimizer of `w·ℓ + R_γ(w)` over `w ∈ {0, 1e-4, ..., 1}`.
pub fn grid_argmin(loss: f64, gamma: f64, reg: Regularizer) -> (f64, f64) {
    (0..=10_000)
        .map(|k| k as f64 * 1e-4)
        .map(|w| (w, weight_objective(w, loss, gamma, reg)))
        .fold((0.0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Slack on "objective ≤ every grid point" for floating-point rounding.
pub const OBJECTIVE_SLACK: f64 = 1e-12;

/// 1000 random `(ℓ, γ)` per regularizer with `ℓ ∈ [0, 2ℓ_max]` and
/// `γ ∈ [0.1, 2ℓ_max]` for the default batch size and temperature.
pub fn closed_form_suite(ctx: &VerifyContext) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let sp = SelfPacedConfig::default();
    let (_, l_max) = loss_bounds(16, sp.tau);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    for reg in [Regularizer::Hard, Regularizer::Linear] {
        for _ in 0..1000 {
            let loss = rng.gen_range(0.0..=2.0 * l_max);
            let gamma = rng.gen_range(0.1..=2.0 * l_max);
            let w = (ctx.weight_fn)(loss, gamma, reg);
            let (gw, gobj) = grid_argmin(loss, gamma, reg);
            let obj = weight_objective(w, loss, gamma, reg);
            c.check((0.0..=1.0).contains(&w), || format!("{reg}: w={w} outside [0,1]"));
            c.check(obj <= gobj + OBJECTIVE_SLACK, || {
                format!("{reg} ℓ={loss:.4} γ={gamma:.4}: objective {obj} above grid {gobj}")
            });
            c.check((w - gw).abs() <= 1e-3, || format!("{reg} ℓ={loss:.4} γ={gamma:.4}: w={w} grid={gw}"));
        }
    }
    c.finish("closed-form-weights", start)
}

fn random_unit_rows(rng: &mut impl Rng, rows: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if let Ok(u) = l2_normalize(&Tensor::from_raw(vec![d], v)) {
                data.extend(u.into_data());
                break;
            }
        }
    }
    Tensor::from_raw(vec![rows, d], data)
}

/// Batch of `2n` rows where `pair_of(i) = i ± n` and every image has its
/// own label.
fn twin_batch(z: Tensor, n: usize) -> Result<AugmentedBatch> {
    let pair_of = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
    let labels = (0..2 * n).map(|i| i % n).collect();
    AugmentedBatch::new(z, pair_of, vec![labels])
}

/// Anchor `0` and its twin at `anchor_twin`, every other row at `rest`.
fn extreme_batch(n: usize, d: usize, twin_sign: f64, rest_sign: f64) -> Result<AugmentedBatch> {
    let mut data = vec![0.0; 2 * n * d];
    for i in 0..2 * n {
        let s = if i == 0 {
            1.0
        } else if i == n {
            twin_sign
        } else {
            rest_sign
        };
        data[i * d] = s;
    }
    twin_batch(Tensor::from_raw(vec![2 * n, d], data), n)
}

/// Every pair term of 1000 random batches lies within the bounds, and the
/// extreme configurations reach them.
pub fn bounds_suite(ctx: &VerifyContext) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0xb0);
    let ns = [2, 4, 8, 16];
    let taus = [0.07, 0.1, 0.5, 1.0];
    for t in 0..1000 {
        let n = ns[t % 4];
        let tau = taus[(t / 4) % 4];
        let d = rng.gen_range(2..=8);
        let z = random_unit_rows(&mut rng, 2 * n, d);
        let labels = (0..2 * n).map(|i| (i % n) % 3).collect();
        let pair_of = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
        let batch = match AugmentedBatch::new(z, pair_of, vec![labels]) {
            Ok(b) => b,
            Err(e) => {
                c.check(false, || format!("batch construction failed: {e}"));
                continue;
            }
        };
        let (lo, hi) = loss_bounds(n, tau);
        for (i, j, l) in pair_losses(&batch, 0, tau).iter() {
            c.check(l >= lo && l <= hi, || format!("N={n} τ={tau} ℓ({i},{j})={l} not in [{lo}, {hi}]"));
        }
    }
    for &n in &ns {
        for &tau in &taus {
            let (lo, hi) = loss_bounds(n, tau);
            let low = extreme_batch(n, 3, 1.0, -1.0).map(|b| pair_loss(&b, 0, n, tau));
            let high = extreme_batch(n, 3, -1.0, 1.0).map(|b| pair_loss(&b, 0, n, tau));
            match (low, high) {
                (Ok(a), Ok(b)) => {
                    c.check((a - lo).abs() <= 1e-6, || format!("N={n} τ={tau}: lower extreme {a} vs {lo}"));
                    c.check((b - hi).abs() <= 1e-6, || format!("N={n} τ={tau}: upper extreme {b} vs {hi}"));
                }
                _ => c.check(false, || "extreme batch construction failed".into()),
            }
        }
    }
    c.finish("loss-bounds", start)
}

/// One random small configuration: raw embeddings, labels, and `τ`.
struct GradCase {
    raw: Tensor,
    n: usize,
    labels: Vec<usize>,
    tau: f64,
}

fn grad_case(rng: &mut impl Rng) -> GradCase {
    let n = rng.gen_range(2..=4);
    let d = rng.gen_range(3..=5);
    let raw = Tensor::from_raw(vec![2 * n, d], (0..2 * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let base: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let labels = (0..2 * n).map(|i| base[i % n]).collect();
    let tau = [0.1, 0.5, 1.0][rng.gen_range(0..3)];
    GradCase { raw, n, labels, tau }
}

fn case_batch(case: &GradCase, z: &Tensor) -> Result<AugmentedBatch> {
    let n = case.n;
    let pair_of = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
    AugmentedBatch::new(z.clone(), pair_of, vec![case.labels.clone()])
}

/// Maximum relative errors of each loss's analytic gradient on 20 random
/// configurations, in the order unsup, meta, SP (frozen weights), CE,
/// consistency.
pub fn gradient_errors(seed: u64, cases: usize) -> Result<Vec<(&'static str, f64)>> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
    let mut worst = [("unsup-con", 0.0f64), ("meta-con", 0.0), ("sp-con", 0.0), ("cross-entropy", 0.0), ("consistency", 0.0)];
    for _ in 0..cases {
        let case = grad_case(&mut rng);
        let normalize = |t: &mut crate::autodiff::Tape, v| t.normalize_rows(v);
        let r = check_gradients(&[case.raw.clone()], &cfg, |t, p| {
            let z = normalize(t, p[0])?;
            let b = case_batch(&case, t.value(z))?;
            Ok(unsup_contrastive_on_tape(t, z, &b, case.tau))
        })?;
        worst[0].1 = worst[0].1.max(r.max_rel_error);
        let r = check_gradients(&[case.raw.clone()], &cfg, |t, p| {
            let z = normalize(t, p[0])?;
            let b = case_batch(&case, t.value(z))?;
            Ok(meta_contrastive_on_tape(t, z, &b, 0, case.tau))
        })?;
        worst[1].1 = worst[1].1.max(r.max_rel_error);
        // weights solved once at the base point, then frozen
        let z0 = {
            let mut t = crate::autodiff::Tape::new();
            let v = t.constant(case.raw.clone());
            let z = t.normalize_rows(v)?;
            t.value(z).clone()
        };
        let b0 = case_batch(&case, &z0)?;
        let (_, l_max) = loss_bounds(case.n, case.tau);
        let gamma = rng.gen_range(0.2..l_max);
        let reg = if rng.gen_bool(0.5) { Regularizer::Linear } else { Regularizer::Hard };
        let sp = SelfPacedConfig {
            regularizer: reg,
            tau: case.tau,
            lambdas: vec![1.0],
            ..Default::default()
        };
        let coeffs = sp_contrastive_loss(&b0, 0, gamma, &sp).coefficients();
        let r = check_gradients(&[case.raw.clone()], &cfg, |t, p| {
            let z = normalize(t, p[0])?;
            Ok(sp_objective_on_tape(t, z, case.tau, &coeffs))
        })?;
        worst[2].1 = worst[2].1.max(r.max_rel_error);

        let rows = rng.gen_range(4..=12);
        let classes = rng.gen_range(2..=4);
        let logits = Tensor::from_raw(vec![rows, classes], (0..rows * classes).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let teacher = Tensor::from_raw(vec![rows, classes], (0..rows * classes).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let mask: Vec<u8> = (0..rows).map(|_| rng.gen_range(0..classes as u8)).collect();
        let r = check_gradients(&[logits.clone()], &cfg, |t, p| supervised_loss_on_tape(t, p[0], &mask))?;
        worst[3].1 = worst[3].1.max(r.max_rel_error);
        let r = check_gradients(&[logits], &cfg, |t, p| consistency_loss_on_tape(t, p[0], &teacher))?;
        worst[4].1 = worst[4].1.max(r.max_rel_error);
    }
    Ok(worst.to_vec())
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub fn gradient_suite(ctx: &VerifyContext) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    match gradient_errors(ctx.seed, 20) {
        Ok(errs) => {
            for (name, e) in errs {
                c.check(e < GRADIENT_TOLERANCE, || format!("{name}: max relative error {e:e}"));
            }
        }
        Err(e) => c.check(false, || format!("gradient check failed to run: {e}")),
    }
    c.finish("gradients", start)
}

/// Meta loss with one label per image equals the unsupervised loss; the
/// hard regularizer with `γ > ℓ_max` reproduces the meta loss.
pub fn equivalence_suite(ctx: &VerifyContext) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0xe9);
    for t in 0..100 {
        let n = [2, 4, 8][t % 3];
        let tau = [0.07, 0.1, 0.5][t % 3];
        let z = random_unit_rows(&mut rng, 2 * n, 6);
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let labels = (0..2 * n).map(|i| classes[i % n]).collect();
        let pair_of: Vec<usize> = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
        let Ok(b) = AugmentedBatch::new(z, pair_of, vec![labels]) else {
            c.check(false, || "batch construction failed".into());
            continue;
        };
        let ids = b.image_identity_labels();
        let Ok(solo) = b.with_labels(vec![ids]) else {
            c.check(false, || "relabel failed".into());
            continue;
        };
        let (meta, _) = meta_contrastive_loss(&solo, 0, tau);
        let unsup = unsup_contrastive_loss(&b, tau);
        c.check(meta == unsup, || format!("one-class-per-image meta {meta} != unsup {unsup}"));

        let (_, hi) = loss_bounds(n, tau);
        let sp = SelfPacedConfig {
            regularizer: Regularizer::Hard,
            tau,
            lambdas: vec![1.0],
            ..Default::default()
        };
        let spl = sp_contrastive_loss(&b, 0, hi * 1.01, &sp);
        let (plain, _) = meta_contrastive_loss(&b, 0, tau);
        c.check((spl.weighted - plain).abs() <= 1e-10, || {
            format!("hard γ>ℓ_max weighted part {} vs meta {plain}", spl.weighted)
        });
    }
    c.finish("equivalences", start)
}

/// Schedule endpoints and the ordering of mid-training weights across `p`
/// on fixed embeddings.
pub fn pace_suite(ctx: &VerifyContext) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x9ace);
    for _ in 0..200 {
        let gs = rng.gen_range(0.0..5.0);
        let ge = gs + rng.gen_range(0.0..20.0);
        let p = rng.gen_range(0.1..4.0);
        let max = rng.gen_range(1..100);
        c.check(pace_schedule(gs, ge, p, 0, max) == gs, || format!("γ(0) != {gs}"));
        c.check(pace_schedule(gs, ge, p, max, max) == ge, || format!("γ(max) != {ge}"));
        let mut prev = gs;
        for e in 0..=max {
            let g = pace_schedule(gs, ge, p, e, max);
            c.check(g >= prev, || format!("schedule decreased at epoch {e}"));
            prev = g;
        }
    }
    let n = 8;
    let z = random_unit_rows(&mut rng, 2 * n, 6);
    let labels = (0..2 * n).map(|i| (i % n) % 2).collect();
    let pair_of = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
    match AugmentedBatch::new(z, pair_of, vec![labels]) {
        Ok(b) => {
            let sp = SelfPacedConfig {
                lambdas: vec![1.0],
                ..Default::default()
            };
            let (gs, ge) = sp.pace_endpoints(n);
            let losses = pair_losses(&b, 0, sp.tau);
            let mean_w = |p: f64| {
                let g = pace_schedule(gs, ge, p, 10, 20);
                let ws: Vec<f64> = losses.iter().map(|(_, _, l)| (ctx.weight_fn)(l, g, sp.regularizer)).collect();
                ws.iter().sum::<f64>() / ws.len() as f64
            };
            let (a, m, z) = (mean_w(0.5), mean_w(1.0), mean_w(2.0));
            c.check(a > m && m > z, || format!("mid-training mean w not ordered: {a} {m} {z}"));
        }
        Err(e) => c.check(false, || format!("batch construction failed: {e}")),
    }
    c.finish("pace-schedule", start)
}

pub fn ema_suite() -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let mut t = vec![Tensor::scalar(1.0)];
    let s = vec![Tensor::scalar(0.0)];
    let ok = ema_update(&mut t, &s, 0.99).is_ok();
    c.check(ok && (t[0].item() - 0.99).abs() < 1e-15, || format!("α=0.99 step gave {}", t[0].item()));
    let mut t = vec![Tensor::from_raw(vec![3], vec![4.0, -1.0, 2.0])];
    let s = vec![Tensor::from_raw(vec![3], vec![0.5, 0.25, -3.0])];
    let ok = ema_update(&mut t, &s, 0.0).is_ok();
    c.check(ok && t == s, || "α=0 did not copy the student".into());
    let mut t = vec![Tensor::scalar(2.0)];
    let s = vec![Tensor::scalar(1.0)];
    for k in 1..=40 {
        let _ = ema_update(&mut t, &s, 0.8);
        let expect = 1.0 + 0.8f64.powi(k);
        c.check((t[0].item() - expect).abs() < 1e-12, || format!("step {k}: {} vs {expect}", t[0].item()));
    }
    c.check(ema_update(&mut t, &[Tensor::zeros(&[2])], 0.5).is_err(), || "shape mismatch accepted".into());
    c.finish("ema", start)
}

/// Dataset generation and a short training run repeat bit for bit.
pub fn determinism_suite(ctx: &VerifyContext) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let run = || -> Result<_> {
        let mut cfg = crate::config::ExperimentConfig::default();
        cfg.data.train_patients = 3;
        cfg.data.val_patients = 0;
        cfg.data.test_patients = 1;
        cfg.data.labeled_patients = 1;
        cfg.data.slices = 6;
        cfg.semisup.epochs = 1;
        cfg.semisup.labeled_batch = 3;
        cfg.semisup.unlabeled_batch = 4;
        let data = crate::synth::generate_dataset(&cfg.data, ctx.seed)?;
        let model = crate::model::ParamModel::new(cfg.model.clone(), ctx.seed)?;
        let state = crate::train::train_segmentation(model, &data, &cfg.semisup, &cfg.self_paced, ctx.seed)?;
        Ok((data, state.history, state.model))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            c.check(a.0 == b.0, || "datasets differ".into());
            let same_history = a.1.len() == b.1.len()
                && a.1.iter().zip(&b.1).all(|(x, y)| format!("{x:?}") == format!("{y:?}"));
            c.check(same_history, || "loss histories differ".into());
            c.check(a.2 == b.2, || "final parameters differ".into());
        }
        (Err(e), _) | (_, Err(e)) => c.check(false, || format!("run failed: {e}")),
    }
    c.finish("determinism", start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes_every_suite() {
        let report = run_all(&VerifyContext::default());
        for s in &report.suites {
            assert!(s.passed, "{}: {:?}", s.name, s.failures);
        }
        assert!(report.suites.len() >= 6);
        assert_eq!(report.suites.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), SUITES);
    }

    fn mutated_weight(loss: f64, gamma: f64, reg: Regularizer) -> f64 {
        match reg {
            // drops the clamp at zero
            Regularizer::Linear => (1.0 - loss / gamma).min(1.0),
            Regularizer::Hard => optimal_weight(loss, gamma, reg),
        }
    }

    #[test]
    fn mutated_weight_formula_fails_closed_form_suite() {
        let ctx = VerifyContext {
            weight_fn: mutated_weight,
            ..Default::default()
        };
        let s = closed_form_suite(&ctx);
        assert!(!s.passed);
        let err = VerifyReport { suites: vec![s] }.into_result().unwrap_err();
        assert!(matches!(err, Error::VerificationFailure(ref names) if names == &["closed-form-weights"]));
    }

    #[test]
    fn extreme_batches_hit_bounds_exactly() {
        let (lo, hi) = loss_bounds(4, 0.5);
        let a = pair_loss(&extreme_batch(4, 3, 1.0, -1.0).unwrap(), 0, 4, 0.5);
        let b = pair_loss(&extreme_batch(4, 3, -1.0, 1.0).unwrap(), 0, 4, 0.5);
        assert!((a - lo).abs() < 1e-12 && (b - hi).abs() < 1e-12);
    }

    #[test]
    fn report_serializes() {
        let r = VerifyReport {
            suites: vec![ema_suite()],
        };
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<VerifyReport>(&text).unwrap(), r);
    }
}
