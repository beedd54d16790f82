//! Self-paced meta-label contrastive pre-training on a small dataset,
//! printing the loss, pace and weight statistics per epoch.

use spcon::model::{ModelConfig, ParamModel};
use spcon::self_paced::SelfPacedConfig;
use spcon::synth::{generate_dataset, DataConfig};
use spcon::train::{pretrain, PretrainConfig};

fn main() -> spcon::Result<()> {
    let data_cfg = DataConfig {
        train_patients: 4,
        val_patients: 0,
        test_patients: 1,
        labeled_patients: 1,
        slices: 8,
        ..DataConfig::default()
    };
    let data = generate_dataset(&data_cfg, 0)?;
    let model = ParamModel::new(ModelConfig::default(), 0)?;
    let cfg = PretrainConfig {
        epochs: 4,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let state = pretrain(model, &data, &cfg, &SelfPacedConfig::default(), 0)?;

    println!("epoch  step     loss    gamma  mean_w  min_w  max_w");
    for r in state.history.iter().filter(|r| r.step % 2 == 0) {
        println!(
            "{:>5} {:>5} {:>8.4} {:>8.4} {:>7.3} {:>6.3} {:>6.3}",
            r.epoch, r.step, r.total, r.gamma, r.mean_w, r.min_w, r.max_w
        );
    }

    let path = std::env::temp_dir().join("spcon_example_encoder.json");
    state.model.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
