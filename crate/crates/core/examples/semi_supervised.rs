//! Semi-supervised segmentation from a pre-trained encoder: supervised
//! cross-entropy, mean-teacher consistency and self-paced contrastive
//! terms, then 3D Dice on the test volumes.

use spcon::model::{ModelConfig, ParamModel};
use spcon::self_paced::SelfPacedConfig;
use spcon::synth::{generate_dataset, DataConfig};
use spcon::train::{evaluate_dice, pretrain, train_segmentation, PretrainConfig, SemiSupConfig};

fn main() -> spcon::Result<()> {
    let data = generate_dataset(
        &DataConfig {
            train_patients: 4,
            val_patients: 0,
            test_patients: 2,
            labeled_patients: 1,
            slices: 8,
            ..DataConfig::default()
        },
        0,
    )?;
    let sp = SelfPacedConfig::default();
    let pre = PretrainConfig {
        epochs: 2,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let mut model = pretrain(ParamModel::new(ModelConfig::default(), 1)?, &data, &pre, &sp, 1)?.model;
    model.reinit_decoder(1);

    let cfg = SemiSupConfig {
        epochs: 40,
        ..SemiSupConfig::default()
    };
    let state = train_segmentation(model, &data, &cfg, &sp, 1)?;
    for r in state.history.iter().filter(|r| r.step == 0 && r.epoch % 5 == 0) {
        println!(
            "epoch {:>2}: sup {:.4} reg {:.5} sp-con {:.4} total {:.4}",
            r.epoch, r.sup, r.reg, r.sp_con, r.total
        );
    }
    let dice = evaluate_dice(&state.model, &data, &data.splits.test)?;
    println!("per-class Dice {:?}, mean {:.4}", dice.per_class, dice.mean);
    Ok(())
}
