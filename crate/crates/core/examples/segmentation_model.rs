//! The encoder / projection head / decoder network: embeddings, per-pixel
//! class probabilities, an EMA teacher, and a checkpoint round trip.

use spcon::model::{EmaTeacher, ModelConfig, ParamModel, Part};
use spcon::synth::{generate_dataset, DataConfig};

fn main() -> spcon::Result<()> {
    let model = ParamModel::new(ModelConfig::default(), 5)?;
    for part in [Part::Encoder, Part::Head, Part::Decoder] {
        println!("{part:?}: {} parameters", model.param_count(part));
    }

    let data = generate_dataset(
        &DataConfig {
            train_patients: 2,
            val_patients: 0,
            test_patients: 1,
            labeled_patients: 1,
            ..DataConfig::default()
        },
        0,
    )?;
    let image = &data.volumes[0].slices[6];
    let z = model.embed(image)?;
    println!("embedding of length {} and norm {:.6}", z.len(), z.norm());
    let probs = model.segment(image)?;
    println!("probabilities shape {:?}", probs.shape());

    let mut teacher = EmaTeacher::new(&model, 0.99)?;
    teacher.update(&model)?;
    let path = std::env::temp_dir().join("spcon_example_model.json");
    model.save(&path)?;
    let back = ParamModel::load(&path)?;
    println!("reloaded model predicts identically: {}", back.predict(&[image])? == model.predict(&[image])?);
    Ok(())
}
