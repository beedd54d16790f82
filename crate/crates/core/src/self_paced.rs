//! Self-paced weighting of contrastive pairs.
//!
//! Each positive pair `(i, j)` gets an importance weight `w_ij ∈ [0, 1]`.
//! With the encoder held fixed the weights solve
//!
//! ```text
//! min_{w ∈ [0,1]}  w·ℓ + R_γ(w)
//! R_hard(w)   = −γ w                 ⇒ w* = 1[ℓ ≤ γ]
//! R_linear(w) = γ (w²/2 − w)         ⇒ w* = max(1 − ℓ/γ, 0)
//! ```
//!
//! and with the weights held fixed the encoder descends `Σ w_ij ∇ℓ_ij`
//! (scaled by the same normalizers as the unweighted loss). The pace `γ`
//! follows a power schedule between two endpoints; the natural endpoints
//! are the extreme values a pair term can take, see [`loss_bounds`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrastive::{pair_losses, pair_objective, AugmentedBatch, PairCoefficients, PairLossMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    Hard,
    Linear,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::Hard => "hard",
            Regularizer::Linear => "linear",
        }
    }
}

impl std::fmt::Display for Regularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed-form minimizer of `w·ℓ + R_γ(w)` over `[0, 1]`.
///
/// A hard-mode tie `ℓ == γ` selects the pair.
pub fn optimal_weight(loss: f64, gamma: f64, reg: Regularizer) -> f64 {
    debug_assert!(gamma > 0.0);
    match reg {
        Regularizer::Hard => {
            if loss <= gamma {
                1.0
            } else {
                0.0
            }
        }
        Regularizer::Linear => (1.0 - loss / gamma).clamp(0.0, 1.0),
    }
}

pub fn regularizer_value(w: f64, gamma: f64, reg: Regularizer) -> f64 {
    match reg {
        Regularizer::Hard => -gamma * w,
        Regularizer::Linear => gamma * (0.5 * w * w - w),
    }
}

/// `w·ℓ + R_γ(w)`, the per-pair objective the weights minimize.
pub fn weight_objective(w: f64, loss: f64, gamma: f64, reg: Regularizer) -> f64 {
    w * loss + regularizer_value(w, gamma, reg)
}

/// Exact range of any pair term over unit embeddings for a batch of `n`
/// original images at temperature `tau`:
/// `[log(1 + 2(n−1)e^{−2/τ}), log(1 + 2(n−1)e^{2/τ})]`.
pub fn loss_bounds(n: usize, tau: f64) -> (f64, f64) {
    assert!(n >= 2 && tau > 0.0);
    let m = 2.0 * (n as f64 - 1.0);
    // log(1 + m e^x) = x + log(e^{-x} + m), stable for large x
    let lo = (m * (-2.0 / tau).exp()).ln_1p();
    let hi = 2.0 / tau + ((-2.0 / tau).exp() + m).ln();
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfPacedConfig {
    pub regularizer: Regularizer,
    pub tau: f64,
    /// Pace at the first epoch; `None` means the lower loss bound.
    pub gamma_start: Option<f64>,
    /// Pace at the last epoch; `None` means the upper loss bound.
    pub gamma_end: Option<f64>,
    pub p: f64,
    /// Per-meta-label weights `λ_k`.
    pub lambdas: Vec<f64>,
}

impl Default for SelfPacedConfig {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::Linear,
            tau: 0.1,
            gamma_start: None,
            gamma_end: None,
            p: 0.5,
            lambdas: vec![1.0, 0.5, 0.5],
        }
    }
}

impl SelfPacedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.p > 0.0) {
            return bad("schedule exponent p must be positive");
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) || !self.lambdas.iter().any(|&l| l > 0.0) {
            return bad("lambdas must be non-negative with at least one positive");
        }
        if let (Some(s), Some(e)) = (self.gamma_start, self.gamma_end) {
            if s > e {
                return bad("gamma_start must not exceed gamma_end");
            }
        }
        if self.gamma_start.is_some_and(|g| !(g > 0.0)) {
            return bad("gamma_start must be positive");
        }
        Ok(())
    }

    /// `(γ_start, γ_end)` for batches of `n` original images.
    pub fn pace_endpoints(&self, n: usize) -> (f64, f64) {
        let (lo, hi) = loss_bounds(n, self.tau);
        (self.gamma_start.unwrap_or(lo), self.gamma_end.unwrap_or(hi))
    }
}

/// `γ_start + (γ_end − γ_start)·(cur/max)^p`.
pub fn pace_schedule(gamma_start: f64, gamma_end: f64, p: f64, cur_epoch: usize, max_epoch: usize) -> f64 {
    assert!(max_epoch >= 1 && cur_epoch <= max_epoch);
    if cur_epoch == max_epoch {
        return gamma_end;
    }
    let frac = cur_epoch as f64 / max_epoch as f64;
    gamma_start + (gamma_end - gamma_start) * frac.powf(p)
}

/// Weights aligned entry-for-entry with a [`PairLossMatrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeightMatrix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl PairWeightMatrix {
    pub fn solve(losses: &PairLossMatrix, gamma: f64, reg: Regularizer) -> Self {
        let rows = losses
            .rows
            .iter()
            .map(|r| r.iter().map(|&(j, l)| (j, optimal_weight(l, gamma, reg))).collect())
            .collect();
        Self { rows }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, w)| (i, j, w)))
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.rows[i].iter().find(|(jj, _)| *jj == j).map(|(_, w)| *w)
    }

    pub fn stats(&self) -> WeightStats {
        WeightStats::from_weights(self.iter().map(|(_, _, w)| w))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl WeightStats {
    pub fn from_weights(ws: impl Iterator<Item = f64>) -> Self {
        let (mut sum, mut min, mut max, mut count) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0);
        for w in ws {
            sum += w;
            min = min.min(w);
            max = max.max(w);
            count += 1;
        }
        if count == 0 {
            return Self::default();
        }
        Self {
            mean: sum / count as f64,
            min,
            max,
            count,
        }
    }

    /// Pools several groups, weighting each by its pair count.
    pub fn merge(parts: &[WeightStats]) -> Self {
        let count: usize = parts.iter().map(|s| s.count).sum();
        if count == 0 {
            return Self::default();
        }
        Self {
            mean: parts.iter().map(|s| s.mean * s.count as f64).sum::<f64>() / count as f64,
            min: parts.iter().filter(|s| s.count > 0).map(|s| s.min).fold(f64::INFINITY, f64::min),
            max: parts.iter().filter(|s| s.count > 0).map(|s| s.max).fold(f64::NEG_INFINITY, f64::max),
            count,
        }
    }
}

/// Value of a self-paced loss, split into its two parts.
#[derive(Clone, Debug)]
pub struct SpLoss {
    /// `weighted + regularization`.
    pub value: f64,
    /// `(1/2N) Σ_i (1/|P(i)|) Σ_j w_ij ℓ_ij`
    pub weighted: f64,
    /// `(1/2N) Σ_i (1/|P(i)|) Σ_j R_γ(w_ij)`
    pub regularization: f64,
    pub weights: PairWeightMatrix,
    pub losses: PairLossMatrix,
}

impl SpLoss {
    pub fn from_losses(losses: PairLossMatrix, gamma: f64, reg: Regularizer) -> Self {
        let weights = PairWeightMatrix::solve(&losses, gamma, reg);
        let n2 = losses.rows.len() as f64;
        let (mut weighted, mut regularization) = (0.0, 0.0);
        for (lr, wr) in losses.rows.iter().zip(&weights.rows) {
            let norm = lr.len() as f64;
            weighted += lr.iter().zip(wr).map(|((_, l), (_, w))| w * l).sum::<f64>() / norm;
            regularization += wr.iter().map(|(_, w)| regularizer_value(*w, gamma, reg)).sum::<f64>() / norm;
        }
        weighted /= n2;
        regularization /= n2;
        Self {
            value: weighted + regularization,
            weighted,
            regularization,
            weights,
            losses,
        }
    }

    /// Coefficients of the weighted part, with weights frozen.
    pub fn coefficients(&self) -> PairCoefficients {
        let lookup = |i: usize, j: usize| self.weights.weight(i, j).expect("aligned with losses");
        PairCoefficients::from_pairs(&self.losses, lookup)
    }
}

/// Self-paced contrastive loss for meta-label `k` at pace `gamma`, with the
/// weights solved in closed form for the current embeddings.
pub fn sp_contrastive_loss(batch: &AugmentedBatch, k: usize, gamma: f64, cfg: &SelfPacedConfig) -> SpLoss {
    assert!(gamma > 0.0, "pace must be positive");
    SpLoss::from_losses(pair_losses(batch, k, cfg.tau), gamma, cfg.regularizer)
}

/// `Σ_k λ_k L^k` over every meta-label with a positive weight.
#[derive(Clone, Debug)]
pub struct CombinedSpLoss {
    pub value: f64,
    pub weighted: f64,
    pub regularization: f64,
    /// `(k, loss)` for each meta-label with `λ_k > 0`.
    pub per_label: Vec<(usize, SpLoss)>,
    /// `Σ_k λ_k c^k_ij`, the frozen-weight gradient coefficients.
    pub coefficients: PairCoefficients,
}

impl CombinedSpLoss {
    pub fn weight_stats(&self) -> WeightStats {
        let parts: Vec<_> = self.per_label.iter().map(|(_, l)| l.weights.stats()).collect();
        WeightStats::merge(&parts)
    }
}

pub fn combined_sp_loss(batch: &AugmentedBatch, gamma: f64, cfg: &SelfPacedConfig) -> Result<CombinedSpLoss> {
    if cfg.lambdas.len() != batch.num_label_kinds() {
        return Err(Error::InvalidConfig(format!(
            "{} lambdas for {} meta-label kinds",
            cfg.lambdas.len(),
            batch.num_label_kinds()
        )));
    }
    let mut per_label = Vec::new();
    let mut coefficients = PairCoefficients::zeros(batch.len());
    let (mut value, mut weighted, mut regularization) = (0.0, 0.0, 0.0);
    for (k, &lambda) in cfg.lambdas.iter().enumerate() {
        if lambda == 0.0 {
            continue;
        }
        let l = sp_contrastive_loss(batch, k, gamma, cfg);
        value += lambda * l.value;
        weighted += lambda * l.weighted;
        regularization += lambda * l.regularization;
        coefficients.add_scaled(&l.coefficients(), lambda);
        per_label.push((k, l));
    }
    Ok(CombinedSpLoss {
        value,
        weighted,
        regularization,
        per_label,
        coefficients,
    })
}

/// Records the frozen-weight part `Σ_ij c_ij ℓ_ij` on a tape for embeddings
/// `z`. The regularization term is constant in the encoder parameters and is
/// returned separately by [`combined_sp_loss`].
pub fn sp_objective_on_tape(tape: &mut Tape, z: Var, tau: f64, coefficients: &PairCoefficients) -> Var {
    pair_objective(tape, z, tau, coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::fixtures::{random_batch, unit_rows};
    use crate::contrastive::{meta_contrastive_loss, twin_pair_losses};
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force argmin over `w ∈ {0, 1e-4, ..., 1}`.
    fn grid_argmin(loss: f64, gamma: f64, reg: Regularizer) -> (f64, f64) {
        (0..=10_000)
            .map(|k| k as f64 * 1e-4)
            .map(|w| (w, weight_objective(w, loss, gamma, reg)))
            .fold((0.0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    #[test]
    fn weight_examples() {
        assert_eq!(optimal_weight(2.0, 3.0, Regularizer::Hard), 1.0);
        assert_eq!(optimal_weight(1.0, 4.0, Regularizer::Linear), 0.75);
        assert_eq!(optimal_weight(5.0, 4.0, Regularizer::Linear), 0.0);
        assert_eq!(optimal_weight(3.0, 3.0, Regularizer::Hard), 1.0);
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(regularizer_value(1.0, 2.0, Regularizer::Hard), -2.0);
        assert_eq!(regularizer_value(1.0, 2.0, Regularizer::Linear), -1.0);
        assert_eq!(regularizer_value(0.0, 7.3, Regularizer::Linear), 0.0);
    }

    #[test]
    fn closed_form_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for reg in [Regularizer::Hard, Regularizer::Linear] {
            for _ in 0..1000 {
                let loss = rng.gen_range(0.0..10.0);
                let gamma = rng.gen_range(0.1..10.0);
                let w = optimal_weight(loss, gamma, reg);
                let (gw, gobj) = grid_argmin(loss, gamma, reg);
                let obj = weight_objective(w, loss, gamma, reg);
                assert!(obj <= gobj + 1e-12, "{reg} ℓ={loss} γ={gamma}");
                assert!((w - gw).abs() <= 1e-3, "{reg} ℓ={loss} γ={gamma}: {w} vs {gw}");
            }
        }
    }

    #[test]
    fn bounds_examples() {
        let (lo, hi) = loss_bounds(2, 1.0);
        assert!((lo - (1.0 + 2.0 * (-2f64).exp()).ln()).abs() < 1e-14);
        assert!((hi - (1.0 + 2.0 * 2f64.exp()).ln()).abs() < 1e-14);
        assert!((lo - 0.2395447662).abs() < 1e-9);
        assert!((hi - 2.7586236757).abs() < 1e-9);
        let (lo, hi) = loss_bounds(4, 1e8);
        assert!((lo - 7f64.ln()).abs() < 1e-6 && (hi - 7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn bounds_contain_random_pair_terms() {
        for seed in 0..1000u64 {
            let n = [2, 4, 8][seed as usize % 3];
            let tau = [0.07, 0.1, 0.5, 1.0][seed as usize % 4];
            let b = random_batch(seed, n, 6, 1, 2);
            let (lo, hi) = loss_bounds(n, tau);
            for (_, _, l) in meta_contrastive_loss(&b, 0, tau).1.iter() {
                assert!(l >= lo && l <= hi, "seed {seed}: {l} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(pace_schedule(2.0, 10.0, 0.5, 25, 100), 6.0);
        assert_eq!(pace_schedule(2.0, 10.0, 0.5, 0, 100), 2.0);
        assert_eq!(pace_schedule(2.0, 10.0, 0.5, 100, 100), 10.0);
        assert!(pace_schedule(2.0, 10.0, 2.0, 50, 100) < pace_schedule(2.0, 10.0, 0.5, 50, 100));
    }

    #[test]
    fn large_pace_selects_every_pair() {
        let cfg = SelfPacedConfig {
            regularizer: Regularizer::Hard,
            tau: 0.5,
            ..Default::default()
        };
        let b = random_batch(4, 4, 8, 1, 2);
        let (lo, hi) = loss_bounds(4, 0.5);
        let l = sp_contrastive_loss(&b, 0, hi + 1e-6, &cfg);
        assert!(l.weights.iter().all(|(_, _, w)| w == 1.0));
        assert!((l.weighted - meta_contrastive_loss(&b, 0, 0.5).0).abs() < 1e-10);
        let l = sp_contrastive_loss(&b, 0, lo - 1e-6, &cfg);
        assert!(l.weights.iter().all(|(_, _, w)| w == 0.0));
        assert_eq!(l.weighted, 0.0);
    }

    #[test]
    fn combined_loss_linearity() {
        let cfg = SelfPacedConfig {
            tau: 0.5,
            lambdas: vec![1.0],
            ..Default::default()
        };
        let b = random_batch(8, 5, 8, 3, 2);
        let single = b.with_labels(vec![b.meta_labels()[0].clone()]).unwrap();
        let gamma = 3.0;
        let one = combined_sp_loss(&single, gamma, &cfg).unwrap();
        assert_eq!(one.value, sp_contrastive_loss(&single, 0, gamma, &cfg).value);

        let cfg3 = SelfPacedConfig {
            lambdas: vec![1.0, 0.0, 0.0],
            ..cfg.clone()
        };
        let a = combined_sp_loss(&b, gamma, &cfg3).unwrap();
        let mut relabeled = b.meta_labels().to_vec();
        relabeled[1] = b.image_identity_labels();
        relabeled[2] = vec![0; b.len()];
        let c = combined_sp_loss(&b.with_labels(relabeled).unwrap(), gamma, &cfg3).unwrap();
        assert_eq!(a.value, c.value);

        let twin = b
            .with_labels(vec![b.meta_labels()[0].clone(), b.meta_labels()[0].clone()])
            .unwrap();
        let half = SelfPacedConfig {
            lambdas: vec![0.5, 0.5],
            ..cfg.clone()
        };
        let h = combined_sp_loss(&twin, gamma, &half).unwrap();
        assert!((h.value - one.value).abs() < 1e-12);
    }

    #[test]
    fn frozen_weight_gradient_matches_finite_differences() {
        let cfg = SelfPacedConfig {
            tau: 0.5,
            lambdas: vec![1.0, 0.3],
            ..Default::default()
        };
        for seed in 0..10 {
            let b = random_batch(seed, 4, 6, 2, 2);
            let (lo, hi) = loss_bounds(4, cfg.tau);
            let gamma = lo + 0.4 * (hi - lo);
            let combined = combined_sp_loss(&b, gamma, &cfg).unwrap();
            // tape value reproduces the weighted part
            let mut tape = Tape::new();
            let z = tape.constant(b.embeddings().clone());
            let v = sp_objective_on_tape(&mut tape, z, cfg.tau, &combined.coefficients);
            assert!((tape.value(v).item() - combined.weighted).abs() < 1e-12);

            let raw = b.embeddings().map(|x| 0.8 * x - 0.02);
            let report = check_gradients(&[raw], &GradCheckConfig::default(), |t, p| {
                let z = t.normalize_rows(p[0])?;
                Ok(sp_objective_on_tape(t, z, cfg.tau, &combined.coefficients))
            })
            .unwrap();
            assert!(report.passed, "seed {seed}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn zero_weights_give_exactly_zero_gradient() {
        let b = random_batch(3, 4, 6, 1, 2);
        let losses = twin_pair_losses(&b, 0.5);
        let (lo, _) = loss_bounds(4, 0.5);
        let sp = SpLoss::from_losses(losses, lo * 0.5, Regularizer::Hard);
        let mut tape = Tape::new();
        let raw = tape.param(b.embeddings().clone());
        let z = tape.normalize_rows(raw).unwrap();
        let out = sp_objective_on_tape(&mut tape, z, 0.5, &sp.coefficients());
        let g = crate::autodiff::grad(&tape, out, &[raw]);
        assert!(g.grads[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_batch_weight_dynamics_favor_small_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z1 = unit_rows(&mut rng, 8, 16);
        let z2 = unit_rows(&mut rng, 8, 16);
        let labels = vec![(0..8).map(|i| i % 3).collect::<Vec<_>>()];
        let b = AugmentedBatch::from_views(&z1, &z2, &labels).unwrap();
        let (lo, hi) = loss_bounds(8, 0.1);
        let mean_w = |p: f64| {
            let g = pace_schedule(lo, hi, p, 50, 100);
            let cfg = SelfPacedConfig {
                tau: 0.1,
                ..Default::default()
            };
            sp_contrastive_loss(&b, 0, g, &cfg).weights.stats().mean
        };
        assert!(mean_w(0.5) > mean_w(1.0));
        assert!(mean_w(1.0) > mean_w(2.0));
    }

    #[test]
    fn config_validation() {
        assert!(SelfPacedConfig::default().validate().is_ok());
        let bad = SelfPacedConfig {
            lambdas: vec![0.0, 0.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SelfPacedConfig {
            gamma_start: Some(5.0),
            gamma_end: Some(1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn weights_in_range_and_monotone(
            l1 in 0.0f64..30.0, dl in 0.0f64..5.0,
            g1 in 0.01f64..30.0, dg in 0.0f64..5.0,
        ) {
            for reg in [Regularizer::Hard, Regularizer::Linear] {
                let w = optimal_weight(l1, g1, reg);
                prop_assert!((0.0..=1.0).contains(&w));
                if reg == Regularizer::Hard {
                    prop_assert!(w == 0.0 || w == 1.0);
                }
                prop_assert!(optimal_weight(l1 + dl, g1, reg) <= w);
                prop_assert!(optimal_weight(l1, g1 + dg, reg) >= w);
            }
        }

        #[test]
        fn schedule_is_monotone(a in 0.0f64..5.0, span in 0.0f64..20.0, p in 0.1f64..4.0, max in 1usize..200) {
            let mut prev = f64::NEG_INFINITY;
            for e in 0..=max {
                let g = pace_schedule(a, a + span, p, e, max);
                prop_assert!(g >= prev);
                prev = g;
            }
            prop_assert_eq!(pace_schedule(a, a + span, p, 0, max), a);
            prop_assert_eq!(pace_schedule(a, a + span, p, max, max), a + span);
        }
    }
}
