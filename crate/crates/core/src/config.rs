//! One flat key-value run configuration covering data generation,
//! augmentation, model, training and splitting, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentCount, AugmentPlan, DEFAULT_N_VALUES};
use crate::dataio::{DetectorTransform, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::{BlockConfig, ModelConfig, StemConfig};
use crate::seed;
use crate::trainer::TrainConfig;

/// Environment variable that replaces the configured root seed.
pub const SEED_ENV: &str = "GW_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every module draws from a sub-seed labeled by its name.
    pub seed: u64,

    pub background_count: usize,
    pub bbh_count: usize,
    pub sglf_count: usize,
    pub noise_std: f64,
    pub bbh_f_start: [f64; 2],
    pub bbh_f_end: [f64; 2],
    pub bbh_envelope_power: f64,
    pub bbh_amplitude: [f64; 2],
    pub sglf_frequency: [f64; 2],
    pub sglf_width: [f64; 2],
    pub sglf_center: [f64; 2],
    pub sglf_amplitude: [f64; 2],
    pub detector2_ratio: [f64; 2],
    pub detector2_shift: [i32; 2],

    pub augment_n_values: Vec<usize>,
    /// Samples per averaging size. Exclusive with `augment_total`.
    pub augment_per_n: Option<usize>,
    /// Samples per class split over the averaging sizes.
    pub augment_total: Option<usize>,
    /// Used when neither count is set: per-class total as a multiple of the
    /// class size.
    pub augment_ratio: f64,
    pub include_originals: bool,

    pub input_len: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_pool: usize,
    pub block_channels: Vec<usize>,
    pub block_kernels: Vec<usize>,
    pub block_strides: Vec<usize>,
    /// 0 means no hidden dense layer.
    pub head_hidden: usize,
    pub post_block_relu: bool,
    pub standardize_input: bool,

    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub record_wall_time: bool,

    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::desk();
        let t = TrainConfig::default();
        let sp = SplitSpec::default();
        let pair = |(a, b): (f64, f64)| [a, b];
        Self {
            seed: 0,
            background_count: s.background_count,
            bbh_count: s.bbh_count,
            sglf_count: s.sglf_count,
            noise_std: s.noise_std,
            bbh_f_start: pair(s.bbh_f_start),
            bbh_f_end: pair(s.bbh_f_end),
            bbh_envelope_power: s.bbh_envelope_power,
            bbh_amplitude: pair(s.bbh_amplitude),
            sglf_frequency: pair(s.sglf_frequency),
            sglf_width: pair(s.sglf_width),
            sglf_center: pair(s.sglf_center),
            sglf_amplitude: pair(s.sglf_amplitude),
            detector2_ratio: pair(s.detector2.ratio),
            detector2_shift: [s.detector2.shift.0, s.detector2.shift.1],
            augment_n_values: DEFAULT_N_VALUES.to_vec(),
            augment_per_n: None,
            augment_total: None,
            augment_ratio: 2.0,
            include_originals: true,
            input_len: m.input_len,
            stem_channels: m.stem.channels,
            stem_kernel: m.stem.kernel,
            stem_pool: m.stem.pool,
            block_channels: m.blocks.iter().map(|b| b.out_channels).collect(),
            block_kernels: m.blocks.iter().map(|b| b.kernel).collect(),
            block_strides: m.blocks.iter().map(|b| b.stride).collect(),
            head_hidden: m.head_hidden.unwrap_or(0),
            post_block_relu: m.post_block_relu,
            standardize_input: m.standardize_input,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            early_stop_patience: t.early_stop_patience.unwrap_or(0),
            plateau_patience: t.plateau_patience,
            plateau_factor: t.plateau_factor,
            record_wall_time: t.record_wall_time,
            train_fraction: sp.train,
            val_fraction: sp.val,
            test_fraction: sp.test,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Sets one key from its TOML spelling. Bare words that are not valid
    /// TOML are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key just parsed"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut table = toml::Table::try_from(&*self).expect("run config always serializes");
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {p:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Replaces the seed with `GW_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Sub-seed for the module called `label`.
    pub fn module_seed(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let pair = |[a, b]: [f64; 2]| (a, b);
        let c = SynthConfig {
            background_count: self.background_count,
            bbh_count: self.bbh_count,
            sglf_count: self.sglf_count,
            noise_std: self.noise_std,
            bbh_f_start: pair(self.bbh_f_start),
            bbh_f_end: pair(self.bbh_f_end),
            bbh_envelope_power: self.bbh_envelope_power,
            bbh_amplitude: pair(self.bbh_amplitude),
            sglf_frequency: pair(self.sglf_frequency),
            sglf_width: pair(self.sglf_width),
            sglf_center: pair(self.sglf_center),
            sglf_amplitude: pair(self.sglf_amplitude),
            detector2: DetectorTransform {
                ratio: pair(self.detector2_ratio),
                shift: (self.detector2_shift[0], self.detector2_shift[1]),
            },
            seed: self.module_seed("synth"),
        };
        c.validate()?;
        Ok(c)
    }

    /// Augmentation plan for a class of `class_size` originals.
    pub fn augment_plan(&self, class_size: usize) -> Result<AugmentPlan> {
        let count = match (self.augment_per_n, self.augment_total) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "augment_per_n and augment_total are mutually exclusive".into(),
                ))
            }
            (Some(n), None) => AugmentCount::PerN(n),
            (None, Some(t)) => AugmentCount::Total(t),
            (None, None) => {
                if !(self.augment_ratio.is_finite() && self.augment_ratio >= 0.0) {
                    return Err(Error::Config(format!(
                        "augment_ratio must be non-negative, got {}",
                        self.augment_ratio
                    )));
                }
                AugmentCount::Total((self.augment_ratio * class_size as f64).round() as usize)
            }
        };
        let plan = AugmentPlan {
            n_values: self.augment_n_values.clone(),
            count,
            seed: self.module_seed("augment"),
            include_originals: self.include_originals,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let n = self.block_channels.len();
        if self.block_kernels.len() != n || self.block_strides.len() != n {
            return Err(Error::Config(format!(
                "block_channels, block_kernels and block_strides must have equal lengths, got {}, {}, {}",
                n,
                self.block_kernels.len(),
                self.block_strides.len()
            )));
        }
        let c = ModelConfig {
            input_len: self.input_len,
            stem: StemConfig {
                channels: self.stem_channels,
                kernel: self.stem_kernel,
                pool: self.stem_pool,
            },
            blocks: (0..n)
                .map(|i| BlockConfig {
                    out_channels: self.block_channels[i],
                    kernel: self.block_kernels[i],
                    stride: self.block_strides[i],
                })
                .collect(),
            head_hidden: (self.head_hidden > 0).then_some(self.head_hidden),
            post_block_relu: self.post_block_relu,
            standardize_input: self.standardize_input,
            seed: self.module_seed("model"),
            ..ModelConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            early_stop_patience: (self.early_stop_patience > 0).then_some(self.early_stop_patience),
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            seed: self.module_seed("train"),
            record_wall_time: self.record_wall_time,
            ..TrainConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn split(&self) -> Result<SplitSpec> {
        let s = SplitSpec {
            train: self.train_fraction,
            val: self.val_fraction,
            test: self.test_fraction,
            seed: self.module_seed("split"),
        };
        s.validate()?;
        Ok(s)
    }

    /// Resolves every typed config, surfacing the first invalid one.
    pub fn validate(&self) -> Result<()> {
        self.synth()?;
        self.augment_plan(0)?;
        self.model()?;
        self.train()?;
        self.split()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
        assert_eq!(c.model().unwrap().without_seed(), ModelConfig::desk().without_seed());
    }

    #[test]
    fn missing_keys_take_defaults() {
        let c = RunConfig::from_toml("seed = 7\nlr = 0.01\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.batch_size, 512);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let e = RunConfig::from_toml("learning_rate = 0.1\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("learning_rate")), "{e}");
        let mut c = RunConfig::default();
        let e = c.set("bogus", "1").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("bogus")), "{e}");
    }

    #[test]
    fn overrides_parse_toml_values() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["max_epochs=3", "block_channels = [8, 8]", "block_kernels=[3,3]", "block_strides=[1,2]"])
            .unwrap();
        assert_eq!(c.max_epochs, 3);
        assert_eq!(c.model().unwrap().blocks.len(), 2);
        assert!(matches!(c.set("max_epochs", "many"), Err(Error::Config(_))));
        assert!(matches!(c.apply_overrides(&["lr"]), Err(Error::Config(_))));
    }

    #[test]
    fn typed_configs_carry_distinct_module_seeds() {
        let c = RunConfig { seed: 5, ..RunConfig::default() };
        let seeds = [
            c.synth().unwrap().seed,
            c.augment_plan(10).unwrap().seed,
            c.model().unwrap().seed,
            c.train().unwrap().seed,
            c.split().unwrap().seed,
        ];
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        let d = RunConfig { seed: 6, ..c.clone() };
        assert_ne!(d.model().unwrap().seed, seeds[2]);
    }

    #[test]
    fn augment_counts_resolve() {
        let c = RunConfig::default();
        assert_eq!(c.augment_plan(1400).unwrap().count, AugmentCount::Total(2800));
        let c = RunConfig { augment_per_n: Some(4), ..RunConfig::default() };
        assert_eq!(c.augment_plan(1400).unwrap().count, AugmentCount::PerN(4));
        let c = RunConfig { augment_total: Some(4), ..c };
        assert!(matches!(c.augment_plan(10), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for c in [
            RunConfig { block_kernels: vec![3], ..RunConfig::default() },
            RunConfig { batch_size: 0, ..RunConfig::default() },
            RunConfig { train_fraction: 0.9, ..RunConfig::default() },
            RunConfig { threshold: 1.5, ..RunConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }
}
