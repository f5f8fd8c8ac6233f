//! Builds the residual-difference classifier and scores a batch.

use gwanomaly::dataio::{generate_synthetic, SynthConfig};
use gwanomaly::model::{Model, ModelConfig};

fn main() -> gwanomaly::Result<()> {
    for (name, cfg) in [("default", ModelConfig::default()), ("desk", ModelConfig::desk())] {
        let model = Model::<f32>::new(cfg)?;
        println!("{name:<8} {} trainable parameters", model.param_count());
    }

    let model = Model::<f32>::new(ModelConfig { seed: 1, ..ModelConfig::desk() })?;
    let data = generate_synthetic(&SynthConfig::default().with_counts(4))?.dataset;
    let probs = model.predict_proba(&data.to_array())?;
    for (i, p) in probs.iter().enumerate() {
        let class = &data.classes()[data.class_ids()[i] as usize].name;
        println!("sample {i:>2} ({class:<10}) P(signal) = {p:.4}");
    }
    println!("untrained weights: scores carry no information yet");
    Ok(())
}
