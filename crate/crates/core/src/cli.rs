//! `gwanomaly` command line: `gen`, `augment`, `train`, `eval` and `predict`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{augment_class, AugmentCount};
use crate::checkpoint::ModelCheckpoint;
use crate::config::RunConfig;
use crate::dataio::{
    generate_synthetic, read_dataset, read_gwad, read_manifest, split, write_gwad, write_manifest,
    LabeledDataset, ManifestEntry, DETECTORS,
};
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::trainer::{evaluate, train_with_progress};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const CONFIG_NAME: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "gwanomaly", version, about = "Gravitational-wave anomaly detection with a residual 1-D CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config file and GW_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: one GWAD file per class and a manifest.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Average same-class samples into new ones.
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        in_manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Split a manifest's data, train, and write checkpoint, history and the
    /// held-out test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path; the other outputs are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a labeled manifest and report TNR, ROC and AUC.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Where to write report.txt and roc.csv. Defaults to `<checkpoint>.eval`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score an unlabeled GWAD array and write `index,score,label` rows.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { cfg, out_dir } => cmd_gen(&resolve(&cfg)?, &out_dir),
        Command::Augment {
            cfg,
            in_manifest,
            out_dir,
        } => cmd_augment(&resolve(&cfg)?, &in_manifest, &out_dir),
        Command::Train {
            mut cfg,
            manifest,
            out,
            max_epochs,
            batch_size,
            lr,
        } => {
            let flags = [
                max_epochs.map(|v| format!("max_epochs={v}")),
                batch_size.map(|v| format!("batch_size={v}")),
                lr.map(|v| format!("lr={v:e}")),
            ];
            cfg.overrides.extend(flags.into_iter().flatten());
            cmd_train(&resolve(&cfg)?, &manifest, &out)
        }
        Command::Eval {
            cfg,
            checkpoint,
            manifest,
            threshold,
            out_dir,
        } => {
            let explicit = cfg.config.is_some() || !cfg.overrides.is_empty();
            let run = resolve(&cfg)?;
            let out_dir = out_dir.unwrap_or_else(|| with_suffix(&checkpoint, "eval"));
            cmd_eval(
                explicit.then_some(&run),
                &checkpoint,
                &manifest,
                threshold.unwrap_or(run.threshold),
                &out_dir,
            )
        }
        Command::Predict {
            checkpoint,
            input,
            out,
            threshold,
        } => cmd_predict(&checkpoint, &input, &out, threshold),
    }
}

/// Config file, then `GW_SEED`, then `--set` overrides, then `--seed`.
pub fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.apply_env()?;
    c.apply_overrides(&args.overrides)?;
    if let Some(s) = args.seed {
        c.seed = s;
    }
    c.validate()?;
    eprintln!("resolved config:\n{}", c.to_toml());
    Ok(c)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn crc_of(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}

/// Resolved config followed by a CRC32 of every input file, enough to
/// repeat the run.
fn write_run_record(path: &Path, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut s = cfg.to_toml();
    s.push_str("\n# inputs\n");
    for p in inputs {
        let _ = writeln!(s, "# crc32 {:08x} {}", crc_of(p)?, p.display());
    }
    fs::write(path, s)?;
    Ok(())
}

fn manifest_inputs(manifest: &Path) -> Result<Vec<PathBuf>> {
    let mut v = vec![manifest.to_path_buf()];
    v.extend(read_manifest(manifest)?.into_iter().map(|e| e.path));
    Ok(v)
}

/// One GWAD file per class plus a manifest, in class order.
fn write_classes(data: &LabeledDataset, dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (id, info) in data.classes().iter().enumerate() {
        let path = dir.join(format!("{}.gwad", info.name));
        write_gwad(&path, &data.class_subset(id).to_array())?;
        entries.push(ManifestEntry {
            class_name: info.name.clone(),
            path,
            label: info.label,
        });
    }
    Ok(entries)
}

pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let synth = cfg.synth()?;
    let set = generate_synthetic(&synth)?;
    let entries = write_classes(&set.dataset, out_dir)?;
    write_manifest(out_dir.join(MANIFEST_NAME), &entries)?;
    fs::write(
        out_dir.join("seed.txt"),
        format!("seed = {}\nsynth_seed = {}\n", cfg.seed, synth.seed),
    )?;
    write_run_record(&out_dir.join(CONFIG_NAME), cfg, &[])?;
    for e in &entries {
        eprintln!("wrote {}", e.path.display());
    }
    Ok(())
}

pub fn cmd_augment(cfg: &RunConfig, in_manifest: &Path, out_dir: &Path) -> Result<()> {
    let entries = read_manifest(in_manifest)?;
    fs::create_dir_all(out_dir)?;
    let mut merged = if cfg.include_originals {
        entries.clone()
    } else {
        Vec::new()
    };
    let mut done: Vec<&str> = Vec::new();
    for e in &entries {
        if done.contains(&e.class_name.as_str()) {
            continue;
        }
        done.push(&e.class_name);
        let mut class = LabeledDataset::new();
        for f in entries.iter().filter(|f| f.class_name == e.class_name) {
            class.extend_class(&f.class_name, f.label, &read_gwad(&f.path)?)?;
        }
        let mut plan = cfg.augment_plan(class.len())?;
        plan.seed = crate::seed::derive(plan.seed, &e.class_name);
        let generated = augment_class(&class, &plan).map_err(|err| match err {
            Error::Domain(m) => Error::Domain(format!("class {}: {m}", e.class_name)),
            other => other,
        })?;
        let path = out_dir.join(format!("{}.aug.gwad", e.class_name));
        write_gwad(&path, &generated.to_array())?;
        let how = match plan.count {
            AugmentCount::PerN(n) => format!("{n} per n"),
            AugmentCount::Total(t) => format!("{t} total"),
        };
        eprintln!("{}: {} originals -> {} averaged ({how})", e.class_name, class.len(), generated.len());
        merged.push(ManifestEntry {
            class_name: e.class_name.clone(),
            path,
            label: e.label,
        });
    }
    write_manifest(out_dir.join(MANIFEST_NAME), &merged)?;
    write_run_record(&out_dir.join(CONFIG_NAME), cfg, &manifest_inputs(in_manifest)?)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let data = read_dataset(manifest)?;
    if data.label_counts().contains(&0) {
        return Err(Error::Domain(format!(
            "training needs both labels; {} holds {:?} (background, signal)",
            manifest.display(),
            data.label_counts()
        )));
    }
    let (train_set, val_set, test_set) = split(&data, &cfg.split()?)?;
    eprintln!(
        "split: {} train, {} val, {} test",
        train_set.len(),
        val_set.len(),
        test_set.len()
    );
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tc = cfg.train()?;
    tc.checkpoint_path = Some(out.to_path_buf());
    tc.history_path = Some(with_suffix(out, "history.csv"));
    write_run_record(&with_suffix(out, CONFIG_NAME), cfg, &manifest_inputs(manifest)?)?;
    if !test_set.is_empty() {
        let dir = with_suffix(out, "test");
        let entries = write_classes(&test_set, &dir)?;
        write_manifest(dir.join(MANIFEST_NAME), &entries)?;
    }
    let model = Model::new(cfg.model()?)?;
    eprintln!("model: {} parameters", model.param_count());
    let outcome = train_with_progress(model, &train_set, &val_set, &tc, |r| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  train_acc {:.4}  val_loss {:.5}  val_acc {:.4}  lr {:.1e}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
        );
    })?;
    eprintln!(
        "best val_loss {:.5} after {} epochs{}; wrote {}",
        outcome.checkpoint.best_val_loss,
        outcome.history.records.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(
    expected: Option<&RunConfig>,
    checkpoint: &Path,
    manifest: &Path,
    threshold: f64,
    out_dir: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let model = match expected {
        Some(cfg) => {
            let mut m = Model::new(cfg.model()?)?;
            m.load_checkpoint(&ckpt)?;
            m
        }
        None => ckpt.to_model()?,
    };
    let data = read_dataset(manifest)?;
    let report = evaluate(&model, &data, threshold)?;
    if report.roc.is_none() {
        eprintln!("warning: {} holds a single label; ROC and AUC omitted", manifest.display());
    }
    fs::create_dir_all(out_dir)?;
    let text = report.to_text();
    fs::write(out_dir.join("report.txt"), &text)?;
    if let Some(roc) = &report.roc {
        fs::write(out_dir.join("roc.csv"), roc.to_csv())?;
    }
    print!("{text}");
    Ok(())
}

pub fn cmd_predict(checkpoint: &Path, input: &Path, out: &Path, threshold: f64) -> Result<()> {
    let model = ModelCheckpoint::load(checkpoint)?.to_model()?;
    let x = read_gwad(input)?;
    let shape = x.shape();
    let len = model.config().input_len;
    if shape.len() != 3 || shape[1] != len || shape[2] != DETECTORS {
        return Err(shape_err!(
            "expected an (N, {len}, {DETECTORS}) array, got {shape:?}"
        ));
    }
    let scores = if shape[0] == 0 {
        Vec::new()
    } else {
        model.predict_proba(&x)?
    };
    let mut s = String::from("index,score,label\n");
    for (i, p) in scores.iter().enumerate() {
        let _ = writeln!(s, "{i},{p},{}", u8::from(*p > threshold));
    }
    fs::write(out, s)?;
    eprintln!("scored {} samples into {}", scores.len(), out.display());
    Ok(())
}
