//! Generate, split, train and evaluate in one process.
//!
//! Usage: train_and_evaluate [SAMPLES_PER_CLASS] [MAX_EPOCHS]
//! (defaults 300 and 15; 2000 and 50 gives the full desk-scale run).
//! Runs below 1000 samples per class use batch 64 instead of 512.

use gwanomaly::config::RunConfig;
use gwanomaly::dataio::{generate_synthetic, split};
use gwanomaly::model::Model;
use gwanomaly::trainer::{evaluate, train_with_progress};

fn main() -> gwanomaly::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let per_class = args.next().unwrap_or(300);
    let epochs = args.next().unwrap_or(15);

    let cfg = RunConfig {
        seed: 1,
        background_count: per_class,
        bbh_count: per_class,
        sglf_count: per_class,
        max_epochs: epochs,
        batch_size: if per_class < 1000 { 64 } else { 512 },
        ..RunConfig::default()
    };
    let data = generate_synthetic(&cfg.synth()?)?.dataset;
    let (train_set, val_set, test_set) = split(&data, &cfg.split()?)?;
    println!("{} train / {} val / {} test", train_set.len(), val_set.len(), test_set.len());

    let model = Model::new(cfg.model()?)?;
    let outcome = train_with_progress(model, &train_set, &val_set, &cfg.train()?, |r| {
        println!(
            "epoch {:>3} train_loss {:.4} val_loss {:.4} val_acc {:.3} lr {:.0e} ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr, r.seconds
        );
    })?;

    let report = evaluate(&outcome.model, &test_set, cfg.threshold)?;
    print!("{}", report.to_text());
    Ok(())
}
