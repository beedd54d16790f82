//! Experiment drivers: the ablation ladder, the pace report, and run
//! summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::contrastive::AugmentedBatch;
use crate::error::{Error, Result};
use crate::model::ParamModel;
use crate::self_paced::{combined_sp_loss, pace_schedule, Regularizer, SelfPacedConfig, WeightStats};
use crate::synth::{augment, Dataset};
use crate::tensor::Tensor;
use crate::train::{
    evaluate_dice, pretrain, train_segmentation, ContrastiveObjective, DiceReport, HistoryRow, SemiSupConfig,
};

/// Build version, with the `git describe` output when available.
pub fn version_string() -> String {
    let describe = env!("SPCON_GIT_DESCRIBE");
    if describe.is_empty() {
        env!("CARGO_PKG_VERSION").to_string()
    } else {
        format!("{} ({describe})", env!("CARGO_PKG_VERSION"))
    }
}

/// Rows of the ablation ladder, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    UnsupCon,
    UnsupConSp,
    ConMeta,
    SpConPretrain,
    SpConSemisup,
    SpConBoth,
    SpConBothMeanTeacher,
    FullSupervision,
}

impl Variant {
    pub const LADDER: [Variant; 9] = [
        Variant::Baseline,
        Variant::UnsupCon,
        Variant::UnsupConSp,
        Variant::ConMeta,
        Variant::SpConPretrain,
        Variant::SpConSemisup,
        Variant::SpConBoth,
        Variant::SpConBothMeanTeacher,
        Variant::FullSupervision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::UnsupCon => "unsup-con",
            Variant::UnsupConSp => "unsup-con+SP",
            Variant::ConMeta => "con(meta)",
            Variant::SpConPretrain => "sp-con(pretrain)",
            Variant::SpConSemisup => "sp-con(semisup)",
            Variant::SpConBoth => "sp-con(both)",
            Variant::SpConBothMeanTeacher => "sp-con(both)+mean-teacher",
            Variant::FullSupervision => "full-supervision",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        Self::LADDER.into_iter().find(|v| v.name() == name)
    }

    /// Pre-training objective and whether it is self-paced.
    pub fn pretraining(self) -> Option<(ContrastiveObjective, bool)> {
        match self {
            Variant::UnsupCon => Some((ContrastiveObjective::Unsup, false)),
            Variant::UnsupConSp => Some((ContrastiveObjective::Unsup, true)),
            Variant::ConMeta => Some((ContrastiveObjective::Meta, false)),
            Variant::SpConPretrain | Variant::SpConBoth | Variant::SpConBothMeanTeacher => {
                Some((ContrastiveObjective::Meta, true))
            }
            Variant::Baseline | Variant::SpConSemisup | Variant::FullSupervision => None,
        }
    }

    /// Downstream loss weights `(λ_reg, λ_sp)` drawn from `base`.
    pub fn downstream(self, base: &SemiSupConfig) -> SemiSupConfig {
        let (reg, sp) = match self {
            Variant::SpConSemisup | Variant::SpConBoth => (0.0, base.lambda_sp),
            Variant::SpConBothMeanTeacher => (base.lambda_reg, base.lambda_sp),
            _ => (0.0, 0.0),
        };
        SemiSupConfig {
            lambda_reg: reg,
            lambda_sp: sp,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub dice: DiceReport,
    pub pretrain_history: Vec<HistoryRow>,
    pub train_history: Vec<HistoryRow>,
}

/// Encoder pre-trained with `objective` from a fresh model, decoder reset.
pub fn pretrained_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    objective: ContrastiveObjective,
    self_paced: bool,
    seed: u64,
) -> Result<(ParamModel, Vec<HistoryRow>)> {
    let pcfg = crate::train::PretrainConfig {
        objective,
        self_paced,
        ..cfg.pretrain.clone()
    };
    let state = pretrain(ParamModel::new(cfg.model.clone(), seed)?, data, &pcfg, &cfg.self_paced, seed)?;
    let mut model = state.model;
    model.reinit_decoder(seed);
    Ok((model, state.history))
}

fn downstream(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variant: Variant,
    init: ParamModel,
    seed: u64,
) -> Result<(DiceReport, Vec<HistoryRow>)> {
    let full;
    let train_data = if variant == Variant::FullSupervision {
        full = data.fully_labeled();
        &full
    } else {
        data
    };
    let scfg = variant.downstream(&cfg.semisup);
    let state = train_segmentation(init, train_data, &scfg, &cfg.self_paced, seed)?;
    let dice = evaluate_dice(&state.model, data, &data.splits.test)?;
    Ok((dice, state.history))
}

/// Trains one variant from scratch for one seed.
pub fn run_variant(cfg: &ExperimentConfig, data: &Dataset, variant: Variant, seed: u64) -> Result<VariantOutcome> {
    let (init, pretrain_history) = match variant.pretraining() {
        Some((obj, sp)) => pretrained_model(cfg, data, obj, sp, seed)?,
        None => (ParamModel::new(cfg.model.clone(), seed)?, Vec::new()),
    };
    let (dice, train_history) = downstream(cfg, data, variant, init, seed)?;
    Ok(VariantOutcome {
        variant,
        seed,
        dice,
        pretrain_history,
        train_history,
    })
}

/// Runs every `(variant, seed)` pair. Variants sharing a pre-training
/// objective share the pre-trained encoder for a given seed.
pub fn run_variants(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<VariantOutcome>> {
    let mut keys: Vec<((ContrastiveObjective, bool), u64)> = Vec::new();
    for v in variants {
        if let Some(p) = v.pretraining() {
            for &s in seeds {
                if !keys.contains(&(p, s)) {
                    keys.push((p, s));
                }
            }
        }
    }
    let pretrained: Vec<(ParamModel, Vec<HistoryRow>)> = keys
        .par_iter()
        .map(|&((obj, sp), seed)| pretrained_model(cfg, data, obj, sp, seed))
        .collect::<Result<_>>()?;
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let (init, pretrain_history) = match variant.pretraining() {
                Some(p) => {
                    let k = keys.iter().position(|&key| key == (p, seed)).expect("pre-trained");
                    pretrained[k].clone()
                }
                None => (ParamModel::new(cfg.model.clone(), seed)?, Vec::new()),
            };
            let (dice, train_history) = downstream(cfg, data, variant, init, seed)?;
            Ok(VariantOutcome {
                variant,
                seed,
                dice,
                pretrain_history,
                train_history,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub dice: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
    pub median: f64,
}

impl AblationRow {
    pub fn new(variant: Variant, seeds: Vec<u64>, dice: Vec<f64>) -> Self {
        let n = dice.len() as f64;
        let mean = dice.iter().sum::<f64>() / n;
        let std = if dice.len() > 1 {
            (dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            variant: variant.name().to_string(),
            seeds,
            median: median(&dice),
            dice,
            mean,
            std,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_outcomes(variants: &[Variant], seeds: &[u64], outcomes: &[VariantOutcome]) -> Self {
        let rows = variants
            .iter()
            .map(|&v| {
                let dice = seeds
                    .iter()
                    .map(|&s| {
                        outcomes
                            .iter()
                            .find(|o| o.variant == v && o.seed == s)
                            .map(|o| o.dice.mean)
                            .unwrap_or(f64::NAN)
                    })
                    .collect();
                AblationRow::new(v, seeds.to_vec(), dice)
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.name())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.rows.first().map_or(0, |r| r.seeds.len());
        let mut header = vec!["variant".to_string()];
        if let Some(r) = self.rows.first() {
            header.extend(r.seeds.iter().map(|s| format!("seed_{s}")));
        }
        header.extend(["mean", "std", "median"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.variant.clone()];
            rec.extend(r.dice.iter().take(n).map(|d| format!("{d:.6}")));
            rec.extend([r.mean, r.std, r.median].map(|x| format!("{x:.6}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>8} {:>8} {:>8}", "variant", "mean", "std", "median")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>8.4} {:>8.4} {:>8.4}",
                r.variant, r.mean, r.std, r.median
            )?;
        }
        Ok(())
    }
}

pub fn run_ablation(cfg: &ExperimentConfig, data: &Dataset, variants: &[Variant]) -> Result<(AblationTable, Vec<VariantOutcome>)> {
    let outcomes = run_variants(cfg, data, variants, &cfg.seeds)?;
    Ok((AblationTable::from_outcomes(variants, &cfg.seeds, &outcomes), outcomes))
}

/// One pace-report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaceRow {
    pub epoch: usize,
    pub p: f64,
    pub regularizer: Regularizer,
    pub gamma: f64,
    pub mean_w: f64,
    pub min_w: f64,
    pub max_w: f64,
}

/// Fixed augmented batches embedded once by a frozen model.
pub fn probe_batches(cfg: &ExperimentConfig, data: &Dataset, model: &ParamModel) -> Result<Vec<AugmentedBatch>> {
    let rc = &cfg.pace_report;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7ace);
    let mut refs = data.slice_refs(&data.splits.train);
    refs.shuffle(&mut rng);
    let n = rc.batch_size.min(refs.len());
    let mut out = Vec::with_capacity(rc.batches);
    for b in 0..rc.batches {
        let chunk: Vec<_> = (0..n).map(|k| refs[(b * n + k) % refs.len()]).collect();
        let first: Vec<Tensor> = chunk.iter().map(|&r| augment(data.image(r), &cfg.pretrain.augmentation, &mut rng)).collect();
        let second: Vec<Tensor> = chunk.iter().map(|&r| augment(data.image(r), &cfg.pretrain.augmentation, &mut rng)).collect();
        let z1 = model.embed_batch(&first.iter().collect::<Vec<_>>())?;
        let z2 = model.embed_batch(&second.iter().collect::<Vec<_>>())?;
        let per_image: Vec<[usize; 3]> = chunk.iter().map(|&r| data.meta_labels(r).as_array()).collect();
        let labels: Vec<Vec<usize>> = (0..3).map(|k| per_image.iter().map(|l| l[k]).collect()).collect();
        out.push(AugmentedBatch::from_views(&z1, &z2, &labels)?);
    }
    Ok(out)
}

/// Per-epoch `γ` and weight statistics for each `p` and both regularizers,
/// with the model held fixed.
pub fn pace_report(cfg: &ExperimentConfig, batches: &[AugmentedBatch]) -> Result<Vec<PaceRow>> {
    let rc = &cfg.pace_report;
    let n = batches.first().map(AugmentedBatch::num_originals).ok_or_else(|| Error::Data("no probe batches".into()))?;
    let mut rows = Vec::new();
    for reg in [Regularizer::Linear, Regularizer::Hard] {
        let sp = SelfPacedConfig {
            regularizer: reg,
            ..cfg.self_paced.clone()
        };
        let (gs, ge) = sp.pace_endpoints(n);
        for &p in &rc.p_values {
            for epoch in 0..=rc.max_epoch {
                let gamma = pace_schedule(gs, ge, p, epoch, rc.max_epoch);
                let stats: Vec<WeightStats> = batches
                    .iter()
                    .map(|b| combined_sp_loss(b, gamma, &sp).map(|l| l.weight_stats()))
                    .collect::<Result<_>>()?;
                let s = WeightStats::merge(&stats);
                rows.push(PaceRow {
                    epoch,
                    p,
                    regularizer: reg,
                    gamma,
                    mean_w: s.mean,
                    min_w: s.min,
                    max_w: s.max,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_pace_csv(rows: &[PaceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pace_csv(path: &Path) -> Result<Vec<PaceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// JSON summary written next to every run's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

impl RunSummary {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            version: version_string(),
            seed,
            metrics: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// Creates `dir` and writes the effective configuration into it.
pub fn prepare_run_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("effective_config.toml");
    std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn quick() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.train_patients = 3;
        cfg.data.val_patients = 1;
        cfg.data.test_patients = 1;
        cfg.data.labeled_patients = 1;
        cfg.data.slices = 8;
        cfg.pretrain.epochs = 1;
        cfg.pretrain.batch_size = 8;
        cfg.semisup.epochs = 1;
        cfg.seeds = vec![0, 1];
        cfg.pace_report.batches = 2;
        cfg.pace_report.batch_size = 6;
        cfg.pace_report.max_epoch = 8;
        cfg
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::LADDER {
            assert_eq!(Variant::from_name(v.name()), Some(v));
        }
        assert_eq!(Variant::LADDER.len(), 9);
    }

    #[test]
    fn stats_of_rows() {
        let r = AblationRow::new(Variant::Baseline, vec![0, 1, 2], vec![0.5, 0.7, 0.6]);
        assert!((r.mean - 0.6).abs() < 1e-15);
        assert!((r.std - 0.1).abs() < 1e-12);
        assert_eq!(r.median, 0.6);
        assert_eq!(median(&[1.0, 4.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn ablation_is_deterministic() {
        let cfg = quick();
        let data = generate_dataset(&cfg.data, cfg.seed).unwrap();
        let variants = [Variant::Baseline, Variant::SpConPretrain, Variant::SpConBoth];
        let (a, _) = run_ablation(&cfg, &data, &variants).unwrap();
        let (b, _) = run_ablation(&cfg, &data, &variants).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.iter().all(|r| r.dice.iter().all(|d| (0.0..=1.0).contains(d))));
        // shared encoders match a from-scratch run
        let solo = run_variant(&cfg, &data, Variant::SpConBoth, 1).unwrap();
        assert_eq!(a.row(Variant::SpConBoth).unwrap().dice[1], solo.dice.mean);
    }

    #[test]
    fn pace_report_shape_and_endpoints() {
        let cfg = quick();
        let data = generate_dataset(&cfg.data, cfg.seed).unwrap();
        let model = ParamModel::new(cfg.model.clone(), 0).unwrap();
        let batches = probe_batches(&cfg, &data, &model).unwrap();
        let rows = pace_report(&cfg, &batches).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 9);
        let (gs, ge) = cfg.self_paced.pace_endpoints(6);
        for r in &rows {
            if r.epoch == 0 {
                assert_eq!(r.gamma, gs);
            }
            if r.epoch == 8 {
                assert_eq!(r.gamma, ge);
            }
        }
        let mid = |p: f64| {
            rows.iter()
                .find(|r| r.epoch == 4 && r.p == p && r.regularizer == Regularizer::Linear)
                .unwrap()
                .mean_w
        };
        assert!(mid(0.5) > mid(1.0) && mid(1.0) > mid(2.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pace.csv");
        write_pace_csv(&rows, &path).unwrap();
        assert_eq!(read_pace_csv(&path).unwrap(), rows);
    }
}
