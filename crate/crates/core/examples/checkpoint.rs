//! Saves a model with optimizer state, reloads it and checks the scores
//! are unchanged.

use gwanomaly::checkpoint::{ModelCheckpoint, OptimizerState};
use gwanomaly::dataio::{generate_synthetic, SynthConfig};
use gwanomaly::model::{Model, ModelConfig};
use gwanomaly::optim::NAdam;

fn main() -> gwanomaly::Result<()> {
    let model = Model::<f32>::new(ModelConfig { seed: 5, ..ModelConfig::desk() })?;
    let opt = NAdam::<f32>::new(1e-4);
    let ckpt = ModelCheckpoint {
        optimizer: Some(OptimizerState::from_nadam(&opt)),
        ..ModelCheckpoint::from_model(&model)
    };

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.gwck");
    ckpt.save(&path)?;
    println!("wrote {} ({} bytes, {} arrays)", path.display(), std::fs::metadata(&path)?.len(), ckpt.arrays.len());

    let restored = ModelCheckpoint::load(&path)?.to_model()?;
    let x = generate_synthetic(&SynthConfig::default().with_counts(3))?.dataset.to_array();
    let same = model.predict_proba(&x)? == restored.predict_proba(&x)?;
    println!("reloaded model gives identical scores: {same}");

    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    println!("one flipped bit: {}", ModelCheckpoint::from_bytes(&bytes).unwrap_err());
    Ok(())
}
