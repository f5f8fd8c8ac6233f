//! Loads a run configuration, applies overrides and shows the per-module
//! seeds fanned out from the root seed.

use gwanomaly::config::RunConfig;

fn main() -> gwanomaly::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.toml");
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(&["max_epochs=5", "lr=3e-4"])?;
    cfg.apply_env()?;

    println!("root seed {}", cfg.seed);
    for module in ["synth", "split", "augment", "model", "train"] {
        println!("  {module:<8} -> {:#018x}", cfg.module_seed(module));
    }
    let m = cfg.model()?;
    println!("model: stem {} channels, blocks {:?}", m.stem.channels, m.blocks.iter().map(|b| b.out_channels).collect::<Vec<_>>());
    println!("train: {:?}", cfg.train()?);

    match RunConfig::from_toml("learning_rate = 0.1") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
