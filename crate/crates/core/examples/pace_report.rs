//! Weight trajectories on a frozen model: how fast each pace exponent
//! admits pairs into training.

use spcon::config::ExperimentConfig;
use spcon::experiment::{pace_report, probe_batches};
use spcon::model::ParamModel;
use spcon::self_paced::Regularizer;
use spcon::synth::generate_dataset;

fn main() -> spcon::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&[
        "data.train_patients=4",
        "data.val_patients=0",
        "data.test_patients=1",
        "data.labeled_patients=1",
        "pace_report.max_epoch=10",
    ])?;
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    let model = ParamModel::new(cfg.model.clone(), cfg.seed)?;
    let batches = probe_batches(&cfg, &data, &model)?;
    let rows = pace_report(&cfg, &batches)?;

    for reg in [Regularizer::Linear, Regularizer::Hard] {
        println!("{reg}: mean w per epoch");
        for &p in &cfg.pace_report.p_values {
            let curve: Vec<String> = rows
                .iter()
                .filter(|r| r.regularizer == reg && r.p == p)
                .map(|r| format!("{:.2}", r.mean_w))
                .collect();
            println!("  p={p:<4} {}", curve.join(" "));
        }
    }
    Ok(())
}
