//! Training objectives and loops: contrastive pre-training of the encoder,
//! supervised and semi-supervised segmentation training, and 3-D Dice.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Tape, Var};
use crate::contrastive::{pair_losses, pair_objective, twin_pair_losses, AugmentedBatch, PairCoefficients};
use crate::error::{Error, Result};
use crate::model::{EmaTeacher, ParamModel};
use crate::optim::{RAdam, RAdamConfig};
use crate::self_paced::{combined_sp_loss, pace_schedule, SelfPacedConfig, SpLoss, WeightStats};
use crate::synth::{augment, augment_with_mask, AugmentationPolicy, Dataset, SliceRef};
use crate::tensor::Tensor;

/// Positive-pair source for pre-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveObjective {
    /// Two views of one image.
    Unsup,
    /// Shared meta-labels, combined over kinds with `λ_k`.
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub objective: ContrastiveObjective,
    pub self_paced: bool,
    pub epochs: usize,
    /// Original images per batch (`N`); each contributes two views.
    pub batch_size: usize,
    pub optimizer: RAdamConfig,
    pub augmentation: AugmentationPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: ContrastiveObjective::Meta,
            self_paced: true,
            epochs: 40,
            batch_size: 16,
            optimizer: RAdamConfig::default(),
            augmentation: AugmentationPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSupConfig {
    pub epochs: usize,
    pub labeled_batch: usize,
    /// Original unlabeled images per step (`N`).
    pub unlabeled_batch: usize,
    pub lambda_reg: f64,
    pub lambda_sp: f64,
    pub ema_decay: f64,
    /// Draw the contrastive batches from labeled and unlabeled images
    /// together rather than from unlabeled images alone.
    pub sp_on_union: bool,
    /// Standard deviation of the pixel noise added to the teacher's input.
    pub teacher_noise: f64,
    pub optimizer: RAdamConfig,
    pub augmentation: AugmentationPolicy,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            labeled_batch: 8,
            unlabeled_batch: 8,
            lambda_reg: 0.1,
            lambda_sp: 0.1,
            ema_decay: 0.99,
            sp_on_union: true,
            teacher_noise: 0.05,
            optimizer: RAdamConfig {
                lr: 3e-3,
                ..RAdamConfig::default()
            },
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl SemiSupConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.labeled_batch == 0 || self.unlabeled_batch < 2 {
            return bad("labeled_batch must be positive and unlabeled_batch at least 2");
        }
        if !(self.lambda_reg >= 0.0) || !(self.lambda_sp >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        self.optimizer.validate()
    }

    fn uses_unlabeled(&self) -> bool {
        self.lambda_reg > 0.0 || self.lambda_sp > 0.0
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub sup: f64,
    pub reg: f64,
    pub sp_con: f64,
    pub total: f64,
    pub gamma: f64,
    pub mean_w: f64,
    pub min_w: f64,
    pub max_w: f64,
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `sup + λ_reg·reg + λ_sp·sp_con`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub reg: f64,
    pub sp_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(sup: f64, reg: f64, sp_con: f64, lambda_reg: f64, lambda_sp: f64) -> Self {
        Self {
            sup,
            reg,
            sp_con,
            total: sup + lambda_reg * reg + lambda_sp * sp_con,
        }
    }
}

/// Mean per-pixel cross-entropy of `[P, C]` logits against class indices.
pub fn supervised_loss(logits: &Tensor, mask: &[u8]) -> Result<f64> {
    check_mask(logits, mask)?;
    let total: f64 = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            crate::tensor::log_sum_exp(row.iter().copied()) - row[mask[r] as usize]
        })
        .sum();
    Ok(total / mask.len() as f64)
}

fn check_mask(logits: &Tensor, mask: &[u8]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != mask.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![mask.len()],
            found: logits.shape().to_vec(),
        });
    }
    if let Some(&bad) = mask.iter().find(|&&m| m as usize >= logits.cols()) {
        return Err(Error::Data(format!("mask class {bad} out of range")));
    }
    Ok(())
}

/// Cross-entropy recorded on a tape.
pub fn supervised_loss_on_tape(tape: &mut Tape, logits: Var, mask: &[u8]) -> Result<Var> {
    check_mask(tape.value(logits), mask)?;
    let c = tape.value(logits).cols();
    let ls = tape.log_softmax_rows(logits);
    let mut w = vec![0.0; mask.len() * c];
    let scale = -1.0 / mask.len() as f64;
    for (r, &m) in mask.iter().enumerate() {
        w[r * c + m as usize] = scale;
    }
    Ok(tape.weighted_sum(ls, Arc::new(Tensor::new(vec![mask.len(), c], w)?)))
}

fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        let lse = crate::tensor::log_sum_exp(row.iter().copied());
        out.extend(row.iter().map(|v| (v - lse).exp()));
    }
    out
}

/// Mean over pixels of `Σ_c (softmax(s)_c − softmax(t)_c)²`.
pub fn consistency_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            expected: student.shape().to_vec(),
            found: teacher.shape().to_vec(),
        });
    }
    let (ps, pt) = (softmax_rows(student), softmax_rows(teacher));
    let sq: f64 = ps.iter().zip(&pt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / student.rows() as f64)
}

/// Consistency recorded on a tape; the teacher enters as a constant.
pub fn consistency_loss_on_tape(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    if tape.value(student).shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            expected: tape.value(student).shape().to_vec(),
            found: teacher.shape().to_vec(),
        });
    }
    let rows = teacher.rows();
    let ps = tape.softmax_rows(student);
    let pt = tape.constant(Tensor::new(teacher.shape().to_vec(), softmax_rows(teacher))?);
    let d = tape.sub(ps, pt);
    let sq = tape.mul(d, d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Per-class and mean Dice over volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Mean over volumes for each foreground class `1..C`.
    pub per_class: Vec<f64>,
    /// Mean over foreground classes, per volume.
    pub per_volume: Vec<f64>,
    pub mean: f64,
}

/// `2|A∩B| / (|A|+|B|)` for class `c`; 1 when both are empty.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p == class, t == class);
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// 3-D Dice: slices of each volume are regrouped before measuring overlap.
pub fn evaluate_dice(model: &ParamModel, data: &Dataset, patients: &[usize]) -> Result<DiceReport> {
    let classes = model.config().num_classes;
    let mut per_class = vec![0.0; classes - 1];
    let mut per_volume = Vec::with_capacity(patients.len());
    for &p in patients {
        let vol = &data.volumes[p];
        let imgs: Vec<&Tensor> = vol.slices.iter().collect();
        let pred: Vec<u8> = model.predict(&imgs)?.concat();
        let truth: Vec<u8> = vol.masks.concat();
        let scores: Vec<f64> = (1..classes as u8).map(|c| dice(&pred, &truth, c)).collect();
        for (acc, s) in per_class.iter_mut().zip(&scores) {
            *acc += s / patients.len() as f64;
        }
        per_volume.push(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    let mean = per_volume.iter().sum::<f64>() / per_volume.len().max(1) as f64;
    Ok(DiceReport {
        per_class,
        per_volume,
        mean,
    })
}

/// Generator for one (stream, epoch) pair, independent of every other.
fn stream_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream << 32 | epoch as u64);
    rng
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_LABELED: u64 = 2;
const STREAM_UNLABELED: u64 = 3;

/// Model, teacher, optimizer, pace, and loss history of one training run.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub model: ParamModel,
    pub teacher: EmaTeacher,
    pub optimizer: RAdam,
    pub epoch: usize,
    pub max_epoch: usize,
    pub seed: u64,
    pub gamma: f64,
    pub history: Vec<HistoryRow>,
}

impl TrainingState {
    pub fn new(model: ParamModel, optimizer: RAdamConfig, ema_decay: f64, max_epoch: usize, seed: u64) -> Result<Self> {
        optimizer.validate()?;
        if max_epoch == 0 {
            return Err(Error::InvalidConfig("need at least one epoch".into()));
        }
        let teacher = EmaTeacher::new(&model, ema_decay)?;
        let optimizer = RAdam::new(optimizer, model.params());
        Ok(Self {
            model,
            teacher,
            optimizer,
            epoch: 0,
            max_epoch,
            seed,
            gamma: 0.0,
            history: Vec::new(),
        })
    }

    fn apply(&mut self, tape: &Tape, loss: Var, vars: &[Var]) -> Result<()> {
        let report = grad(tape, loss, vars);
        let grads: Vec<Option<&Tensor>> = report
            .grads
            .iter()
            .enumerate()
            .map(|(k, g)| (!report.disconnected.contains(&k)).then_some(g))
            .collect();
        self.optimizer.step(self.model.params_mut(), &grads)
    }

    /// Sets `γ` for the current epoch.
    fn update_gamma(&mut self, sp: &SelfPacedConfig, n: usize) {
        let (gs, ge) = sp.pace_endpoints(n);
        self.gamma = pace_schedule(gs, ge, sp.p, self.epoch.min(self.max_epoch), self.max_epoch);
    }
}

/// Two views of every image, stacked first-views-then-second-views, plus
/// the meta-labels as `K` vectors over the originals.
fn contrastive_views(
    data: &Dataset,
    refs: &[SliceRef],
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> (Vec<Tensor>, Vec<Vec<usize>>) {
    let mut first = Vec::with_capacity(refs.len());
    let mut second = Vec::with_capacity(refs.len());
    for &r in refs {
        first.push(augment(data.image(r), policy, rng));
        second.push(augment(data.image(r), policy, rng));
    }
    first.extend(second);
    let per_image: Vec<[usize; 3]> = refs.iter().map(|&r| data.meta_labels(r).as_array()).collect();
    let labels = (0..3).map(|k| per_image.iter().map(|l| l[k]).collect()).collect();
    (first, labels)
}

/// Meta-label batch plus frozen-weight coefficients for the configured
/// contrastive objective.
struct ContrastiveStep {
    value: f64,
    coefficients: PairCoefficients,
    stats: WeightStats,
}

fn contrastive_step(
    z: &Tensor,
    labels: &[Vec<usize>],
    objective: ContrastiveObjective,
    self_paced: bool,
    gamma: f64,
    sp: &SelfPacedConfig,
) -> Result<ContrastiveStep> {
    let n = z.rows() / 2;
    let first = Tensor::new(vec![n, z.cols()], z.data()[..n * z.cols()].to_vec())?;
    let second = Tensor::new(vec![n, z.cols()], z.data()[n * z.cols()..].to_vec())?;
    let batch = AugmentedBatch::from_views(&first, &second, labels)?;
    match (objective, self_paced) {
        (ContrastiveObjective::Unsup, false) => {
            let losses = twin_pair_losses(&batch, sp.tau);
            Ok(ContrastiveStep {
                value: losses.mean_loss(),
                coefficients: PairCoefficients::from_pairs(&losses, |_, _| 1.0),
                stats: WeightStats::from_weights(std::iter::repeat(1.0).take(losses.num_pairs())),
            })
        }
        (ContrastiveObjective::Unsup, true) => {
            let l = SpLoss::from_losses(twin_pair_losses(&batch, sp.tau), gamma, sp.regularizer);
            Ok(ContrastiveStep {
                value: l.value,
                coefficients: l.coefficients(),
                stats: l.weights.stats(),
            })
        }
        (ContrastiveObjective::Meta, false) => {
            let mut coefficients = PairCoefficients::zeros(batch.len());
            let mut value = 0.0;
            let mut count = 0;
            for (k, &lambda) in sp.lambdas.iter().enumerate() {
                if lambda == 0.0 {
                    continue;
                }
                let losses = pair_losses(&batch, k, sp.tau);
                let c = PairCoefficients::from_pairs(&losses, |_, _| 1.0);
                value += lambda * c.apply(&losses);
                coefficients.add_scaled(&c, lambda);
                count += losses.num_pairs();
            }
            Ok(ContrastiveStep {
                value,
                coefficients,
                stats: WeightStats::from_weights(std::iter::repeat(1.0).take(count)),
            })
        }
        (ContrastiveObjective::Meta, true) => {
            let l = combined_sp_loss(&batch, gamma, sp)?;
            Ok(ContrastiveStep {
                value: l.value,
                stats: l.weight_stats(),
                coefficients: l.coefficients,
            })
        }
    }
}

/// One pre-training epoch over `patients`: for each batch, solve the pair
/// weights in closed form for the current embeddings, then take one step on
/// the weighted loss with the weights held fixed. Only the encoder and head
/// move.
pub fn pretrain_epoch(
    state: &mut TrainingState,
    data: &Dataset,
    patients: &[usize],
    cfg: &PretrainConfig,
    sp: &SelfPacedConfig,
) -> Result<()> {
    let n = cfg.batch_size;
    if n < 2 {
        return Err(Error::InvalidConfig("pre-training batch_size must be at least 2".into()));
    }
    state.update_gamma(sp, n);
    let mut rng = stream_rng(state.seed, STREAM_PRETRAIN, state.epoch);
    let mut refs = data.slice_refs(patients);
    refs.shuffle(&mut rng);
    for (step, chunk) in refs.chunks(n).filter(|c| c.len() >= 2).enumerate() {
        let (views, labels) = contrastive_views(data, chunk, &cfg.augmentation, &mut rng);
        let view_refs: Vec<&Tensor> = views.iter().collect();
        let mut tape = Tape::new();
        let b = state.model.bind(&mut tape);
        let x = state.model.input(&mut tape, &view_refs)?;
        let z = state.model.embed_on_tape(&mut tape, &b, x)?;
        let cs = contrastive_step(tape.value(z), &labels, cfg.objective, cfg.self_paced, state.gamma, sp)?;
        let loss = pair_objective(&mut tape, z, sp.tau, &cs.coefficients);
        state.apply(&tape, loss, &b.vars)?;
        state.history.push(HistoryRow {
            epoch: state.epoch,
            step,
            sup: 0.0,
            reg: 0.0,
            sp_con: cs.value,
            total: cs.value,
            gamma: if cfg.self_paced { state.gamma } else { f64::NAN },
            mean_w: cs.stats.mean,
            min_w: cs.stats.min,
            max_w: cs.stats.max,
        });
    }
    state.epoch += 1;
    Ok(())
}

fn labeled_batches(
    data: &Dataset,
    batch: usize,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<Tensor>, Vec<u8>)> {
    let mut refs = data.slice_refs(&data.splits.labeled);
    refs.shuffle(rng);
    refs.chunks(batch)
        .map(|chunk| {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut mask = Vec::new();
            for &r in chunk {
                let (img, m) = augment_with_mask(data.image(r), data.mask(r), policy, rng);
                imgs.push(img);
                mask.extend(m);
            }
            (imgs, mask)
        })
        .collect()
}

/// One epoch of plain supervised training on the labeled split.
pub fn supervised_epoch(state: &mut TrainingState, data: &Dataset, cfg: &SemiSupConfig) -> Result<()> {
    let mut rng = stream_rng(state.seed, STREAM_LABELED, state.epoch);
    for (step, (imgs, mask)) in labeled_batches(data, cfg.labeled_batch, &cfg.augmentation, &mut rng)
        .into_iter()
        .enumerate()
    {
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut tape = Tape::new();
        let b = state.model.bind(&mut tape);
        let x = state.model.input(&mut tape, &refs)?;
        let logits = state.model.segment_on_tape(&mut tape, &b, x);
        let loss = supervised_loss_on_tape(&mut tape, logits, &mask)?;
        let sup = tape.value(loss).item();
        state.apply(&tape, loss, &b.vars)?;
        state.teacher.update(&state.model)?;
        state.history.push(HistoryRow {
            epoch: state.epoch,
            step,
            sup,
            reg: 0.0,
            sp_con: 0.0,
            total: sup,
            gamma: f64::NAN,
            mean_w: f64::NAN,
            min_w: f64::NAN,
            max_w: f64::NAN,
        });
    }
    state.epoch += 1;
    Ok(())
}

/// One semi-supervised epoch. Each step pairs a labeled batch with a batch
/// of contrastive views and minimizes
/// `sup + λ_reg·consistency + λ_sp·SP-Con`, then updates the teacher.
/// Terms with zero weight are still measured but never enter the gradient,
/// so `λ_reg = λ_sp = 0` reproduces [`supervised_epoch`] exactly.
pub fn semisup_epoch(state: &mut TrainingState, data: &Dataset, cfg: &SemiSupConfig, sp: &SelfPacedConfig) -> Result<()> {
    cfg.validate()?;
    let n = cfg.unlabeled_batch;
    state.update_gamma(sp, n);
    let mut rng_l = stream_rng(state.seed, STREAM_LABELED, state.epoch);
    let mut rng_u = stream_rng(state.seed, STREAM_UNLABELED, state.epoch);
    let pool: Vec<usize> = if cfg.sp_on_union {
        data.splits.train.clone()
    } else {
        let unl: Vec<usize> = data.splits.train.iter().copied().filter(|p| !data.splits.labeled.contains(p)).collect();
        if unl.is_empty() {
            return Err(Error::Data("no unlabeled training volumes".into()));
        }
        unl
    };
    let mut unlabeled = data.slice_refs(&pool);
    unlabeled.shuffle(&mut rng_u);
    let noise = Normal::new(0.0, cfg.teacher_noise.max(0.0) + f64::MIN_POSITIVE).expect("valid noise");
    let mut cursor = 0;
    for (step, (imgs, mask)) in labeled_batches(data, cfg.labeled_batch, &cfg.augmentation, &mut rng_l)
        .into_iter()
        .enumerate()
    {
        if cursor + n > unlabeled.len() {
            unlabeled.shuffle(&mut rng_u);
            cursor = 0;
        }
        let chunk = &unlabeled[cursor..cursor + n];
        cursor += n;
        let (views, labels) = contrastive_views(data, chunk, &cfg.augmentation, &mut rng_u);
        let noisy: Vec<Tensor> = views
            .iter()
            .map(|v| {
                let mut t = v.clone();
                for x in t.data_mut() {
                    *x = (*x + cfg.teacher_noise * noise.sample(&mut rng_u)).clamp(0.0, 1.0);
                }
                t
            })
            .collect();

        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut tape = Tape::new();
        let b = state.model.bind(&mut tape);
        let x = state.model.input(&mut tape, &refs)?;
        let logits = state.model.segment_on_tape(&mut tape, &b, x);
        let sup_var = supervised_loss_on_tape(&mut tape, logits, &mask)?;
        let sup = tape.value(sup_var).item();

        let view_refs: Vec<&Tensor> = views.iter().collect();
        let xu = state.model.input(&mut tape, &view_refs)?;
        let enc = state.model.encode(&mut tape, &b, xu);
        let student = state.model.decode(&mut tape, &b, &enc);
        let noisy_refs: Vec<&Tensor> = noisy.iter().collect();
        let teacher_logits = state.teacher.model.segment_batch(&noisy_refs)?;
        let reg_var = consistency_loss_on_tape(&mut tape, student, &teacher_logits)?;
        let reg = tape.value(reg_var).item();

        let proj = state.model.project(&mut tape, &b, enc.features);
        let z = tape.normalize_rows(proj)?;
        let cs = contrastive_step(tape.value(z), &labels, ContrastiveObjective::Meta, true, state.gamma, sp)?;
        let sp_var = pair_objective(&mut tape, z, sp.tau, &cs.coefficients);

        let mut total = sup_var;
        if cfg.lambda_reg > 0.0 {
            let t = tape.scale(reg_var, cfg.lambda_reg);
            total = tape.add(total, t);
        }
        if cfg.lambda_sp > 0.0 {
            let t = tape.scale(sp_var, cfg.lambda_sp);
            total = tape.add(total, t);
        }
        state.apply(&tape, total, &b.vars)?;
        state.teacher.update(&state.model)?;
        let bd = LossBreakdown::new(sup, reg, cs.value, cfg.lambda_reg, cfg.lambda_sp);
        state.history.push(HistoryRow {
            epoch: state.epoch,
            step,
            sup: bd.sup,
            reg: bd.reg,
            sp_con: bd.sp_con,
            total: bd.total,
            gamma: state.gamma,
            mean_w: cs.stats.mean,
            min_w: cs.stats.min,
            max_w: cs.stats.max,
        });
    }
    state.epoch += 1;
    Ok(())
}

/// Runs `epochs` of pre-training from `model` and returns the final state.
pub fn pretrain(
    model: ParamModel,
    data: &Dataset,
    cfg: &PretrainConfig,
    sp: &SelfPacedConfig,
    seed: u64,
) -> Result<TrainingState> {
    sp.validate()?;
    let mut state = TrainingState::new(model, cfg.optimizer.clone(), 0.0, cfg.epochs, seed)?;
    for _ in 0..cfg.epochs {
        pretrain_epoch(&mut state, data, &data.splits.train, cfg, sp)?;
    }
    state.update_gamma(sp, cfg.batch_size);
    Ok(state)
}

/// Downstream training from `model`: semi-supervised when either loss
/// weight is positive, plain supervised otherwise.
pub fn train_segmentation(
    model: ParamModel,
    data: &Dataset,
    cfg: &SemiSupConfig,
    sp: &SelfPacedConfig,
    seed: u64,
) -> Result<TrainingState> {
    cfg.validate()?;
    let mut state = TrainingState::new(model, cfg.optimizer.clone(), cfg.ema_decay, cfg.epochs, seed)?;
    for _ in 0..cfg.epochs {
        if cfg.uses_unlabeled() {
            semisup_epoch(&mut state, data, cfg, sp)?;
        } else {
            supervised_epoch(&mut state, data, cfg)?;
        }
    }
    Ok(state)
}
