//! A shortened ablation ladder: every variant on shared seeds, reported as
//! a table and a CSV.

use spcon::config::ExperimentConfig;
use spcon::experiment::{run_ablation, Variant};
use spcon::synth::generate_dataset;

fn main() -> spcon::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&[
        "data.train_patients=4",
        "data.val_patients=0",
        "data.test_patients=2",
        "data.labeled_patients=1",
        "data.slices=8",
        "pretrain.epochs=2",
        "semisup.epochs=4",
        "seeds=[0, 1, 2]",
    ])?;
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    let variants = [
        Variant::Baseline,
        Variant::ConMeta,
        Variant::SpConPretrain,
        Variant::SpConBothMeanTeacher,
        Variant::FullSupervision,
    ];
    let (table, _) = run_ablation(&cfg, &data, &variants)?;
    print!("{table}");
    let path = std::env::temp_dir().join("spcon_example_ablation.csv");
    table.write_csv(&path)?;
    println!("csv written to {}", path.display());
    Ok(())
}
