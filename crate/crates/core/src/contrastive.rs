//! Augmented batches, positive sets, and temperature-scaled contrastive
//! losses over unit embeddings.
//!
//! Indices are 0-based: a batch of `N` original images yields `2N`
//! augmented samples, and `pair_of[i]` is the other view of sample `i`'s
//! source image. Meta-label classes are `0..C_k`.
//!
//! For anchor `i` and positive `j`, the pair term is
//!
//! ```text
//! ℓ_ij = log Σ_{a≠i} exp(z_i·z_a / τ) − z_i·z_j / τ
//! ```
//!
//! evaluated with a max-shifted log-sum-exp.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp, Tensor};

/// Tolerance on the unit norm of every embedding row.
pub const UNIT_NORM_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    embeddings: Tensor,
    pair_of: Vec<usize>,
    meta_labels: Vec<Vec<usize>>,
}

impl AugmentedBatch {
    /// Validates and wraps a batch. `embeddings` is `[2N, d]` with unit rows,
    /// `meta_labels` holds `K` label vectors of length `2N`.
    pub fn new(embeddings: Tensor, pair_of: Vec<usize>, meta_labels: Vec<Vec<usize>>) -> Result<Self> {
        if embeddings.shape().len() != 2 {
            return Err(Error::InvalidBatch("embeddings must be a matrix".into()));
        }
        let n2 = embeddings.rows();
        if n2 < 4 || n2 % 2 != 0 {
            return Err(Error::InvalidBatch(format!(
                "need an even number (>= 4) of augmented samples, got {n2}"
            )));
        }
        if pair_of.len() != n2 {
            return Err(Error::InvalidBatch("pair_of length differs from batch size".into()));
        }
        for (i, &j) in pair_of.iter().enumerate() {
            if j >= n2 || j == i || pair_of[j] != i {
                return Err(Error::InvalidBatch(format!(
                    "pair_of is not a fixed-point-free involution at {i}"
                )));
            }
        }
        for (k, labels) in meta_labels.iter().enumerate() {
            if labels.len() != n2 {
                return Err(Error::InvalidBatch(format!("meta-label {k} has wrong length")));
            }
            if (0..n2).any(|i| labels[i] != labels[pair_of[i]]) {
                return Err(Error::InvalidBatch(format!(
                    "meta-label {k} differs between the two views of an image"
                )));
            }
        }
        for i in 0..n2 {
            let norm = dot(embeddings.row(i), embeddings.row(i)).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidBatch(format!("row {i} has norm {norm}")));
            }
        }
        Ok(Self {
            embeddings,
            pair_of,
            meta_labels,
        })
    }

    /// Stacks two `[N, d]` view matrices as rows `0..N` and `N..2N`, so that
    /// `pair_of(i) = i ± N`. `labels` holds `K` vectors of length `N`, one
    /// entry per original image.
    pub fn from_views(first: &Tensor, second: &Tensor, labels: &[Vec<usize>]) -> Result<Self> {
        if first.shape() != second.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                found: second.shape().to_vec(),
            });
        }
        let (n, d) = (first.rows(), first.cols());
        let mut data = first.data().to_vec();
        data.extend_from_slice(second.data());
        let pair_of = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
        let meta = labels
            .iter()
            .map(|l| l.iter().chain(l.iter()).copied().collect())
            .collect();
        Self::new(Tensor::matrix(2 * n, d, data)?, pair_of, meta)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn pair_of(&self, i: usize) -> usize {
        self.pair_of[i]
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pair_of
    }

    pub fn meta_labels(&self) -> &[Vec<usize>] {
        &self.meta_labels
    }

    /// `2N`.
    pub fn len(&self) -> usize {
        self.pair_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_of.is_empty()
    }

    /// `N`.
    pub fn num_originals(&self) -> usize {
        self.len() / 2
    }

    pub fn num_label_kinds(&self) -> usize {
        self.meta_labels.len()
    }

    /// Labels giving every original image its own class. Under these labels
    /// the meta-label loss reduces to the unsupervised one.
    pub fn image_identity_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| i.min(self.pair_of[i])).collect()
    }

    /// Same batch with the meta labels replaced.
    pub fn with_labels(&self, meta_labels: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(self.embeddings.clone(), self.pair_of.clone(), meta_labels)
    }

    /// Applies `perm` consistently: new sample `p` is old sample `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n2 = self.len();
        let mut inverse = vec![0; n2];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let d = self.embeddings.cols();
        let data = perm
            .iter()
            .flat_map(|&old| self.embeddings.row(old).iter().copied())
            .collect();
        let pair_of = perm.iter().map(|&old| inverse[self.pair_of[old]]).collect();
        let labels = self
            .meta_labels
            .iter()
            .map(|l| perm.iter().map(|&old| l[old]).collect())
            .collect();
        Self::new(Tensor::matrix(n2, d, data)?, pair_of, labels)
    }
}

/// Positive indices for anchor `i` under meta-label `k`: every other sample
/// sharing its label, plus its own twin. Sorted, without duplicates, never
/// containing `i`.
pub fn positive_set(batch: &AugmentedBatch, k: usize, i: usize) -> Vec<usize> {
    let labels = &batch.meta_labels[k];
    let twin = batch.pair_of(i);
    (0..batch.len())
        .filter(|&j| j != i && (labels[j] == labels[i] || j == twin))
        .collect()
}

/// Positive set of the unsupervised loss: just the twin.
pub fn twin_positive_set(batch: &AugmentedBatch, i: usize) -> Vec<usize> {
    vec![batch.pair_of(i)]
}

/// Per-anchor `log Σ_{a≠i} exp(z_i·z_a/τ)`.
fn anchor_normalizers(batch: &AugmentedBatch, tau: f64) -> Vec<f64> {
    let z = &batch.embeddings;
    (0..batch.len())
        .map(|i| {
            log_sum_exp(
                (0..batch.len())
                    .filter(move |&a| a != i)
                    .map(move |a| dot(z.row(i), z.row(a)) / tau),
            )
        })
        .collect()
}

/// Single pair term `ℓ_ij`.
pub fn pair_loss(batch: &AugmentedBatch, i: usize, j: usize, tau: f64) -> f64 {
    assert!(i != j && tau > 0.0);
    let z = &batch.embeddings;
    let lse = log_sum_exp(
        (0..batch.len())
            .filter(|&a| a != i)
            .map(|a| dot(z.row(i), z.row(a)) / tau),
    );
    lse - dot(z.row(i), z.row(j)) / tau
}

/// `ℓ_ij` for every anchor `i` and each of its positives.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLossMatrix {
    pub tau: f64,
    /// `rows[i]` lists `(j, ℓ_ij)` in ascending `j`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl PairLossMatrix {
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, l)| (i, j, l)))
    }

    pub fn num_pairs(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `(1/2N) Σ_i (1/|P(i)|) Σ_j ℓ_ij`.
    pub fn mean_loss(&self) -> f64 {
        let n2 = self.rows.len() as f64;
        self.rows
            .iter()
            .map(|r| r.iter().map(|(_, l)| l).sum::<f64>() / r.len() as f64)
            .sum::<f64>()
            / n2
    }
}

fn pair_losses_for(
    batch: &AugmentedBatch,
    tau: f64,
    positives: impl Fn(usize) -> Vec<usize>,
) -> PairLossMatrix {
    assert!(tau > 0.0, "temperature must be positive");
    let lse = anchor_normalizers(batch, tau);
    let z = &batch.embeddings;
    let rows = (0..batch.len())
        .map(|i| {
            positives(i)
                .into_iter()
                .map(|j| (j, lse[i] - dot(z.row(i), z.row(j)) / tau))
                .collect()
        })
        .collect();
    PairLossMatrix { tau, rows }
}

/// Pair terms over the meta-label-`k` positive sets.
pub fn pair_losses(batch: &AugmentedBatch, k: usize, tau: f64) -> PairLossMatrix {
    pair_losses_for(batch, tau, |i| positive_set(batch, k, i))
}

/// Pair terms over twin positives only.
pub fn twin_pair_losses(batch: &AugmentedBatch, tau: f64) -> PairLossMatrix {
    pair_losses_for(batch, tau, |i| twin_positive_set(batch, i))
}

/// Unsupervised contrastive loss: mean over anchors of `ℓ_{i,pair_of(i)}`.
pub fn unsup_contrastive_loss(batch: &AugmentedBatch, tau: f64) -> f64 {
    twin_pair_losses(batch, tau).mean_loss()
}

/// Meta-label contrastive loss for label kind `k`, with the pair terms it
/// averaged.
pub fn meta_contrastive_loss(batch: &AugmentedBatch, k: usize, tau: f64) -> (f64, PairLossMatrix) {
    let losses = pair_losses(batch, k, tau);
    (losses.mean_loss(), losses)
}

/// Coefficients `c_ij` such that a loss equals `Σ_ij c_ij ℓ_ij`, stored as a
/// dense `[2N, 2N]` matrix (zero off the positive sets).
#[derive(Clone, Debug, PartialEq)]
pub struct PairCoefficients(pub Tensor);

impl PairCoefficients {
    pub fn zeros(n2: usize) -> Self {
        Self(Tensor::zeros(&[n2, n2]))
    }

    /// `c_ij = weight(i, j) / (2N |P(i)|)` over `losses`' positive sets.
    pub fn from_pairs(losses: &PairLossMatrix, weight: impl Fn(usize, usize) -> f64) -> Self {
        let n2 = losses.rows.len();
        let mut c = Self::zeros(n2);
        for (i, row) in losses.rows.iter().enumerate() {
            let norm = (n2 * row.len()) as f64;
            for &(j, _) in row {
                c.0.data_mut()[i * n2 + j] = weight(i, j) / norm;
            }
        }
        c
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &PairCoefficients, scale: f64) {
        for (a, b) in self.0.data_mut().iter_mut().zip(other.0.data()) {
            *a += scale * b;
        }
    }

    /// `Σ c_ij ℓ_ij` evaluated directly.
    pub fn apply(&self, losses: &PairLossMatrix) -> f64 {
        let n2 = losses.rows.len();
        losses
            .iter()
            .map(|(i, j, l)| self.0.data()[i * n2 + j] * l)
            .sum()
    }
}

/// Records `Σ_ij c_ij ℓ_ij` for unit embeddings `z: [2N, d]` on `tape`.
///
/// Uses `Σ_ij c_ij (lse_i − s_ij) = Σ_i (Σ_j c_ij) lse_i − Σ_ij c_ij s_ij`,
/// so the coefficients enter only as constants.
pub fn pair_objective(tape: &mut Tape, z: Var, tau: f64, coeffs: &PairCoefficients) -> Var {
    let n2 = tape.value(z).rows();
    let sim = tape.matmul_nt(z, z);
    let logits = tape.scale(sim, 1.0 / tau);
    let lse = tape.lse_rows_off_diag(logits);
    let row_sums: Vec<f64> = coeffs.0.data().chunks(n2).map(|r| r.iter().sum()).collect();
    let a = tape.weighted_sum(lse, Arc::new(Tensor::from_raw(vec![n2], row_sums)));
    let b = tape.weighted_sum(logits, Arc::new(coeffs.0.clone()));
    tape.sub(a, b)
}

/// Unsupervised contrastive loss recorded on a tape.
pub fn unsup_contrastive_on_tape(tape: &mut Tape, z: Var, batch: &AugmentedBatch, tau: f64) -> Var {
    let c = PairCoefficients::from_pairs(&twin_pair_losses(batch, tau), |_, _| 1.0);
    pair_objective(tape, z, tau, &c)
}

/// Meta-label contrastive loss recorded on a tape.
pub fn meta_contrastive_on_tape(
    tape: &mut Tape,
    z: Var,
    batch: &AugmentedBatch,
    k: usize,
    tau: f64,
) -> Var {
    let c = PairCoefficients::from_pairs(&pair_losses(batch, k, tau), |_, _| 1.0);
    pair_objective(tape, z, tau, &c)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Naive double-loop reference, written straight from the definition
    //! without log-sum-exp shifting.

    use super::AugmentedBatch;

    fn sim(b: &AugmentedBatch, i: usize, j: usize) -> f64 {
        b.embeddings()
            .row(i)
            .iter()
            .zip(b.embeddings().row(j))
            .map(|(x, y)| x * y)
            .sum()
    }

    pub fn pair_loss(b: &AugmentedBatch, i: usize, j: usize, tau: f64) -> f64 {
        let mut denom = 0.0;
        for a in 0..b.len() {
            if a != i {
                denom += (sim(b, i, a) / tau).exp();
            }
        }
        -((sim(b, i, j) / tau).exp() / denom).ln()
    }

    pub fn unsup(b: &AugmentedBatch, tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..b.len() {
            total += pair_loss(b, i, b.pair_of(i), tau);
        }
        total / b.len() as f64
    }

    pub fn meta(b: &AugmentedBatch, k: usize, tau: f64) -> f64 {
        let labels = &b.meta_labels()[k];
        let mut total = 0.0;
        for i in 0..b.len() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in 0..b.len() {
                if j != i && (labels[j] == labels[i] || j == b.pair_of(i)) {
                    sum += pair_loss(b, i, j, tau);
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / b.len() as f64
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::AugmentedBatch;
    use crate::tensor::Tensor;

    pub fn unit_rows(rng: &mut impl Rng, rows: usize, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.into_iter().map(|x| x / n));
        }
        Tensor::matrix(rows, d, data).unwrap()
    }

    /// Random batch with `k` label kinds of `classes` classes each.
    pub fn random_batch(seed: u64, n: usize, d: usize, kinds: usize, classes: usize) -> AugmentedBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(&mut rng, n, d);
        let b = unit_rows(&mut rng, n, d);
        let labels: Vec<Vec<usize>> = (0..kinds)
            .map(|_| (0..n).map(|_| rng.gen_range(0..classes)).collect())
            .collect();
        AugmentedBatch::from_views(&a, &b, &labels).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axis_batch(labels: Vec<usize>) -> AugmentedBatch {
        // z1 = z2 = e1, z3 = z4 = e2; pairs (0,1), (2,3)
        let e = Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        AugmentedBatch::new(e, vec![1, 0, 3, 2], vec![labels]).unwrap()
    }

    #[test]
    fn positive_set_examples() {
        let b = axis_batch(vec![0, 0, 1, 1]);
        assert_eq!(positive_set(&b, 0, 0), vec![1]);
        let b = axis_batch(vec![0, 0, 0, 0]);
        assert_eq!(positive_set(&b, 0, 0), vec![1, 2, 3]);
    }

    #[test]
    fn distinct_labels_give_twin_only() {
        let b = random_batch(1, 3, 4, 1, 1);
        let b = b.with_labels(vec![b.image_identity_labels()]).unwrap();
        for i in 0..b.len() {
            assert_eq!(positive_set(&b, 0, i), vec![b.pair_of(i)]);
        }
    }

    #[test]
    fn identical_embeddings_give_log_2n_minus_1() {
        let z = Tensor::matrix(8, 2, [0.6, 0.8].repeat(8)).unwrap();
        let pairs = (0..8).map(|i| i ^ 1).collect();
        let b = AugmentedBatch::new(z, pairs, vec![vec![0, 0, 1, 1, 2, 2, 3, 3]]).unwrap();
        assert!((pair_loss(&b, 0, 1, 0.5) - 7f64.ln()).abs() < 1e-12);
        assert!((unsup_contrastive_loss(&b, 0.5) - 7f64.ln()).abs() < 1e-12);
        assert!((meta_contrastive_loss(&b, 0, 0.3).0 - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn axis_pair_loss() {
        let b = axis_batch(vec![0, 0, 1, 1]);
        let expected = (1f64.exp() + 2.0).ln() - 1.0;
        assert!((pair_loss(&b, 0, 1, 1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.55144).abs() < 1e-5);
    }

    #[test]
    fn huge_temperature_washes_out() {
        let b = random_batch(5, 4, 8, 1, 2);
        for i in 0..b.len() {
            let l = pair_loss(&b, i, b.pair_of(i), 1e6);
            assert!((l - 7f64.ln()).abs() < 1e-4);
        }
    }

    #[test]
    fn small_temperature_does_not_overflow() {
        let b = random_batch(6, 8, 4, 1, 2);
        let (l, m) = meta_contrastive_loss(&b, 0, 0.01);
        assert!(l.is_finite());
        assert!(m.iter().all(|(_, _, v)| v.is_finite()));
    }

    #[test]
    fn degenerate_labels_reduce_to_unsupervised() {
        for seed in 0..20 {
            let b = random_batch(seed, 6, 8, 1, 3);
            let b = b.with_labels(vec![b.image_identity_labels()]).unwrap();
            assert_eq!(meta_contrastive_loss(&b, 0, 0.5).0, unsup_contrastive_loss(&b, 0.5));
        }
    }

    #[test]
    fn matches_naive_reference() {
        for seed in 0..100 {
            let b = random_batch(seed, 8, 16, 2, 3);
            let u = unsup_contrastive_loss(&b, 0.5);
            assert!((u - oracle::unsup(&b, 0.5)).abs() < 1e-10);
            for k in 0..2 {
                let m = meta_contrastive_loss(&b, k, 0.5).0;
                assert!((m - oracle::meta(&b, k, 0.5)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_class_averages_over_all_others() {
        let b = random_batch(9, 2, 4, 1, 1);
        let expected: f64 = (0..4)
            .map(|i| (0..4).filter(|&j| j != i).map(|j| oracle::pair_loss(&b, i, j, 0.7)).sum::<f64>() / 3.0)
            .sum::<f64>()
            / 4.0;
        assert!((meta_contrastive_loss(&b, 0, 0.7).0 - expected).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..20 {
            let b = random_batch(seed, 6, 8, 2, 3);
            let mut perm: Vec<usize> = (0..b.len()).collect();
            perm.shuffle(&mut rng);
            let p = b.permuted(&perm).unwrap();
            assert!((unsup_contrastive_loss(&b, 0.2) - unsup_contrastive_loss(&p, 0.2)).abs() < 1e-12);
            for k in 0..2 {
                let d = meta_contrastive_loss(&b, k, 0.2).0 - meta_contrastive_loss(&p, k, 0.2).0;
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raising_positive_similarity_lowers_pair_loss() {
        // anchor e1, twin moves toward e1 while the others stay put
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let angle = 1.5 - step as f64 * 0.15;
            let data = vec![1.0, 0.0, angle.cos(), angle.sin(), 0.0, -1.0, -1.0, 0.0];
            let z = Tensor::matrix(4, 2, data).unwrap();
            let b = AugmentedBatch::new(z, vec![1, 0, 3, 2], vec![]).unwrap();
            let l = pair_loss(&b, 0, 1, 0.5);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn rejects_malformed_batches() {
        let z = Tensor::matrix(4, 2, [1.0, 0.0].repeat(4)).unwrap();
        assert!(AugmentedBatch::new(z.clone(), vec![0, 1, 2, 3], vec![]).is_err());
        assert!(AugmentedBatch::new(z.clone(), vec![1, 2, 3, 0], vec![]).is_err());
        assert!(AugmentedBatch::new(z.clone(), vec![1, 0, 3, 2], vec![vec![0, 1, 0, 0]]).is_err());
        let not_unit = Tensor::matrix(4, 2, [2.0, 0.0].repeat(4)).unwrap();
        assert!(AugmentedBatch::new(not_unit, vec![1, 0, 3, 2], vec![]).is_err());
    }

    #[test]
    fn tape_losses_match_direct_values_and_gradients() {
        let cfg = GradCheckConfig::default();
        for seed in 0..10 {
            let b = random_batch(seed, 4, 6, 1, 2);
            let mut tape = Tape::new();
            let z = tape.constant(b.embeddings().clone());
            let u = unsup_contrastive_on_tape(&mut tape, z, &b, 0.5);
            let m = meta_contrastive_on_tape(&mut tape, z, &b, 0, 0.5);
            assert!((tape.value(u).item() - unsup_contrastive_loss(&b, 0.5)).abs() < 1e-12);
            assert!((tape.value(m).item() - meta_contrastive_loss(&b, 0, 0.5).0).abs() < 1e-12);

            // gradients through the normalization, w.r.t. raw features
            let raw = b.embeddings().map(|v| v * 1.7 + 0.05);
            let report = check_gradients(&[raw], &cfg, |t, p| {
                let z = t.normalize_rows(p[0])?;
                Ok(meta_contrastive_on_tape(t, z, &b, 0, 0.5))
            })
            .unwrap();
            assert!(report.passed, "{}", report.max_rel_error);
        }
    }
}
