//! GWCK checkpoints: named `f32` arrays holding parameters, batch-norm
//! buffers, the architecture, training counters and optimizer state.
//!
//! Integers and `f64` values are stored exactly as four 16-bit chunks per
//! value, each chunk an `f32` entry.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::autodiff::{DiffArray, Real};
use crate::binio::{check_crc, f32_from_payload, f32_payload, push_crc, Cursor};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{BlockConfig, Model, ModelConfig, StemConfig};
use crate::optim::{Moments, NAdam};

pub const GWCK_MAGIC: &[u8; 4] = b"GWCK";
pub const GWCK_VERSION: u16 = 1;

/// Saved optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<f32>>,
}

impl OptimizerState {
    pub fn from_nadam<T: Real>(opt: &NAdam<T>) -> Self {
        let cast = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect();
        Self {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
            step: opt.step_count(),
            moments: opt
                .moments()
                .iter()
                .map(|(k, m)| (k.clone(), Moments { m: cast(&m.m), v: cast(&m.v) }))
                .collect(),
        }
    }

    pub fn to_nadam(&self) -> NAdam<f32> {
        let mut opt = NAdam::new(self.lr).with_state(self.step, self.moments.clone());
        opt.beta1 = self.beta1;
        opt.beta2 = self.beta2;
        opt.epsilon = self.epsilon;
        opt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    /// Every model array, trainable and buffer, in model order.
    pub arrays: Vec<(String, DiffArray<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: u64,
    pub best_val_loss: f64,
}

impl ModelCheckpoint {
    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        Self {
            config: model.config().clone(),
            arrays: model
                .named_arrays()
                .into_iter()
                .map(|(n, a)| (n, a.cast()))
                .collect(),
            optimizer: None,
            epoch: 0,
            best_val_loss: f64::INFINITY,
        }
    }

    /// Builds a model from the stored config and arrays.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.clone())?;
        model.load_checkpoint(self)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, DiffArray<f32>)> = Vec::new();
        let mut push = |name: &str, a: DiffArray<f32>| entries.push((name.to_string(), a));
        let c = &self.config;
        push("config.input", ints(&[c.input_len as u64, c.input_channels as u64]));
        push("config.stem", ints(&[c.stem.channels as u64, c.stem.kernel as u64, c.stem.pool as u64]));
        let blocks: Vec<u64> = c
            .blocks
            .iter()
            .flat_map(|b| [b.out_channels as u64, b.kernel as u64, b.stride as u64])
            .collect();
        push("config.blocks", ints(&blocks));
        push("config.head_hidden", ints(&c.head_hidden.map(|h| h as u64).into_iter().collect::<Vec<_>>()));
        push("config.num_classes", ints(&[c.num_classes as u64]));
        push("config.post_block_relu", ints(&[u64::from(c.post_block_relu)]));
        push("config.standardize_input", ints(&[u64::from(c.standardize_input)]));
        push("config.seed", ints(&[c.seed]));
        push("train.epoch", ints(&[self.epoch]));
        push("train.best_val_loss", floats(&[self.best_val_loss]));
        for (n, a) in &self.arrays {
            push(n, a.clone());
        }
        if let Some(o) = &self.optimizer {
            push("optim.hyper", floats(&[o.lr, o.beta1, o.beta2, o.epsilon]));
            push("optim.step", ints(&[o.step]));
            for (n, m) in &o.moments {
                push(&format!("optim.m.{n}"), DiffArray::from_vec(m.m.clone()));
                push(&format!("optim.v.{n}"), DiffArray::from_vec(m.v.clone()));
            }
        }
        encode_entries(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode_entries(bytes)?;
        let mut seen = HashSet::new();
        for (n, _) in &entries {
            if !seen.insert(n.as_str()) {
                return Err(corrupt(format!("entry {n} appears twice")));
            }
        }
        let mut map: BTreeMap<String, DiffArray<f32>> = entries.into_iter().collect();
        let mut take = |name: &str| map.remove(name).ok_or_else(|| corrupt(format!("missing entry {name}")));

        let input = read_ints(&take("config.input")?, Some(2))?;
        let stem = read_ints(&take("config.stem")?, Some(3))?;
        let blocks = read_ints(&take("config.blocks")?, None)?;
        if blocks.len() % 3 != 0 {
            return Err(corrupt("config.blocks length is not a multiple of 3".into()));
        }
        let head_hidden = read_ints(&take("config.head_hidden")?, None)?;
        if head_hidden.len() > 1 {
            return Err(corrupt("config.head_hidden holds more than one value".into()));
        }
        let config = ModelConfig {
            input_len: input[0] as usize,
            input_channels: input[1] as usize,
            stem: StemConfig {
                channels: stem[0] as usize,
                kernel: stem[1] as usize,
                pool: stem[2] as usize,
            },
            blocks: blocks
                .chunks(3)
                .map(|b| BlockConfig {
                    out_channels: b[0] as usize,
                    kernel: b[1] as usize,
                    stride: b[2] as usize,
                })
                .collect(),
            head_hidden: head_hidden.first().map(|&h| h as usize),
            num_classes: read_ints(&take("config.num_classes")?, Some(1))?[0] as usize,
            post_block_relu: read_ints(&take("config.post_block_relu")?, Some(1))?[0] != 0,
            standardize_input: read_ints(&take("config.standardize_input")?, Some(1))?[0] != 0,
            seed: read_ints(&take("config.seed")?, Some(1))?[0],
        };
        let epoch = read_ints(&take("train.epoch")?, Some(1))?[0];
        let best_val_loss = read_floats(&take("train.best_val_loss")?, Some(1))?[0];

        // The stored config names every array the model needs.
        let template = Model::<f32>::new(config.clone())
            .map_err(|e| corrupt(format!("stored architecture is invalid: {e}")))?;
        let mut arrays = Vec::new();
        let mut missing = None;
        template.visit(&mut |name, a, _| {
            match map.remove(name) {
                Some(v) if v.shape() == a.shape() => arrays.push((name.to_string(), v)),
                Some(v) => {
                    missing.get_or_insert(format!("{name} has shape {:?}, expected {:?}", v.shape(), a.shape()));
                }
                None => {
                    missing.get_or_insert(format!("missing parameter {name}"));
                }
            }
        });
        if let Some(m) = missing {
            return Err(corrupt(m));
        }

        let optimizer = match map.remove("optim.hyper") {
            None => None,
            Some(h) => {
                let h = read_floats(&h, Some(4))?;
                let step = read_ints(
                    &map.remove("optim.step").ok_or_else(|| corrupt("missing entry optim.step".into()))?,
                    Some(1),
                )?[0];
                let names: Vec<String> = map
                    .keys()
                    .filter_map(|k| k.strip_prefix("optim.m.").map(str::to_string))
                    .collect();
                let mut moments = BTreeMap::new();
                for n in names {
                    let m = map.remove(&format!("optim.m.{n}")).expect("listed above");
                    let v = map
                        .remove(&format!("optim.v.{n}"))
                        .ok_or_else(|| corrupt(format!("missing entry optim.v.{n}")))?;
                    if m.numel() != v.numel() {
                        return Err(corrupt(format!("moment sizes differ for {n}")));
                    }
                    moments.insert(n, Moments { m: m.into_data(), v: v.into_data() });
                }
                Some(OptimizerState {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    epsilon: h[3],
                    step,
                    moments,
                })
            }
        };
        if let Some(extra) = map.keys().next() {
            return Err(corrupt(format!("unexpected entry {extra}")));
        }
        Ok(Self {
            config,
            arrays,
            optimizer,
            epoch,
            best_val_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl<T: Real> Model<T> {
    /// Copies checkpoint arrays into this model. The architectures must
    /// match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &ModelCheckpoint) -> Result<()> {
        if ckpt.config.without_seed() != self.config().without_seed() {
            return Err(Error::Config(format!(
                "checkpoint architecture {:?} does not match model {:?}",
                ckpt.config,
                self.config()
            )));
        }
        let map: BTreeMap<&str, &DiffArray<f32>> =
            ckpt.arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let mut missing = None;
        self.visit_mut(&mut |name, a, _| match map.get(name) {
            Some(src) if src.shape() == a.shape() => *a = src.cast(),
            _ => {
                missing.get_or_insert(name.to_string());
            }
        });
        match missing {
            Some(n) => Err(corrupt(format!("missing parameter {n}"))),
            None => Ok(()),
        }
    }
}

impl ModelConfig {
    pub(crate) fn without_seed(&self) -> ModelConfig {
        ModelConfig {
            seed: 0,
            ..self.clone()
        }
    }
}

fn corrupt(msg: String) -> Error {
    Error::CorruptCheckpoint(msg)
}

fn ints(values: &[u64]) -> DiffArray<f32> {
    let data: Vec<f32> = values
        .iter()
        .flat_map(|&v| (0..4).map(move |k| ((v >> (16 * k)) & 0xFFFF) as f32))
        .collect();
    DiffArray::new(vec![values.len(), 4], data).expect("four chunks per value")
}

fn floats(values: &[f64]) -> DiffArray<f32> {
    ints(&values.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
}

fn read_ints(a: &DiffArray<f32>, expect: Option<usize>) -> Result<Vec<u64>> {
    let s = a.shape();
    if s.len() != 2 || s[1] != 4 || expect.is_some_and(|n| n != s[0]) {
        return Err(corrupt(format!("integer entry has shape {s:?}")));
    }
    a.data()
        .chunks(4)
        .map(|c| {
            c.iter().enumerate().try_fold(0u64, |acc, (k, &v)| {
                if v.fract() != 0.0 || !(0.0..=65535.0).contains(&v) {
                    return Err(corrupt(format!("invalid integer chunk {v}")));
                }
                Ok(acc | ((v as u64) << (16 * k)))
            })
        })
        .collect()
}

fn read_floats(a: &DiffArray<f32>, expect: Option<usize>) -> Result<Vec<f64>> {
    Ok(read_ints(a, expect)?.into_iter().map(f64::from_bits).collect())
}

fn encode_entries(entries: &[(String, DiffArray<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GWCK_MAGIC);
    out.extend_from_slice(&GWCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, a) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(a.rank() as u8);
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&f32_payload(a.data()));
    }
    push_crc(&mut out);
    out
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, DiffArray<f32>)>> {
    if bytes.len() < 4 || &bytes[..4] != GWCK_MAGIC {
        return Err(Error::Format("not a GWCK checkpoint (bad magic)".into()));
    }
    let truncated = || corrupt("truncated checkpoint".into());
    let mut cur = Cursor::new(bytes);
    cur.take(4);
    let version = cur.u16().ok_or_else(truncated)?;
    if version != GWCK_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let body = check_crc(bytes).map_err(corrupt)?;
    let mut cur = Cursor::new(body);
    cur.take(6);
    let count = cur.u32().ok_or_else(truncated)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = cur.u16().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(cur.take(len).ok_or_else(truncated)?)
            .map_err(|_| corrupt("entry name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64().ok_or_else(truncated)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(truncated)?;
        let payload = cur.take(numel).ok_or_else(truncated)?;
        out.push((name, DiffArray::new(shape, f32_from_payload(payload))?));
    }
    if cur.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes after last entry", cur.remaining())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockConfig, StemConfig};

    fn small(seed: u64) -> ModelConfig {
        ModelConfig {
            stem: StemConfig {
                channels: 4,
                kernel: 5,
                pool: 2,
            },
            blocks: vec![
                BlockConfig {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                },
                BlockConfig {
                    out_channels: 6,
                    kernel: 3,
                    stride: 2,
                },
            ],
            seed,
            ..ModelConfig::default()
        }
    }

    fn bits(arrays: &[(String, DiffArray<f32>)]) -> Vec<(String, Vec<u32>)> {
        arrays
            .iter()
            .map(|(n, a)| (n.clone(), a.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn integer_and_float_chunks_are_exact() {
        let v = [0u64, 1, 65535, 65536, u64::MAX, 0x0123_4567_89AB_CDEF];
        assert_eq!(read_ints(&ints(&v), None).unwrap(), v);
        let f = [0.0, -0.0, 1e-300, f64::INFINITY, std::f64::consts::PI];
        let back = read_floats(&floats(&f), None).unwrap();
        assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            f.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn round_trip_is_bitwise_with_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gwck");
        let mut model = Model::<f32>::new(small(3)).unwrap();
        // give the batch-norm buffers non-default values
        model.stem_bn.running_mean.data_mut()[0] = 0.25;
        let mut ckpt = ModelCheckpoint::from_model(&model);
        ckpt.epoch = 7;
        ckpt.best_val_loss = 0.123;
        let mut opt = NAdam::<f32>::new(1e-3);
        let grads = model
            .named_arrays()
            .into_iter()
            .map(|(n, a)| (n, vec![0.5f32; a.numel()]))
            .collect();
        let mut stepped = model.clone();
        opt.step_module(&mut stepped, &grads).unwrap();
        ckpt.optimizer = Some(OptimizerState::from_nadam(&opt));
        ckpt.save(&path).unwrap();

        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(bits(&back.arrays), bits(&ckpt.arrays));
        assert_eq!((back.epoch, back.best_val_loss), (7, 0.123));
        assert_eq!(back.optimizer, ckpt.optimizer);
        assert_eq!(back.optimizer.as_ref().unwrap().to_nadam(), opt);

        let restored = back.to_model().unwrap();
        let x = DiffArray::new(
            vec![3, 200, 2],
            (0..1200).map(|i| ((i * 13) % 17) as f32 / 8.0 - 1.0).collect(),
        )
        .unwrap();
        let a = model.logits(&x, 8).unwrap();
        let b = restored.logits(&x, 8).unwrap();
        assert_eq!(
            a.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(ckpt.to_bytes(), ModelCheckpoint::load(&path).unwrap().to_bytes());
    }

    #[test]
    fn corruption_is_classified() {
        let ckpt = ModelCheckpoint::from_model(&Model::<f32>::new(small(1)).unwrap());
        let good = ckpt.to_bytes();
        assert!(ModelCheckpoint::from_bytes(&good).is_ok());

        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(Error::Format(_))));
        for cut in [good.len() - 1, good.len() / 2, 7] {
            assert!(matches!(ModelCheckpoint::from_bytes(&good[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut flipped = good.clone();
        flipped[good.len() / 2] ^= 1;
        assert!(matches!(ModelCheckpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn missing_parameter_is_corrupt() {
        let ckpt = ModelCheckpoint::from_model(&Model::<f32>::new(small(1)).unwrap());
        let mut arrays = ckpt.arrays.clone();
        arrays.retain(|(n, _)| n != "block1.conv2.weight");
        let partial = ModelCheckpoint { arrays, ..ckpt };
        let err = ModelCheckpoint::from_bytes(&partial.to_bytes()).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(ref m) if m.contains("block1.conv2.weight")), "{err}");
    }

    #[test]
    fn different_architecture_is_config_error() {
        let ckpt = ModelCheckpoint::from_model(&Model::<f32>::new(small(1)).unwrap());
        let mut other = Model::<f32>::new(ModelConfig::default()).unwrap();
        assert!(matches!(other.load_checkpoint(&ckpt), Err(Error::Config(_))));
        let mut same_arch = Model::<f32>::new(small(9)).unwrap();
        assert!(same_arch.load_checkpoint(&ckpt).is_ok());
    }

    #[test]
    fn parameter_names_follow_the_block_scheme() {
        let ckpt = ModelCheckpoint::from_model(&Model::<f32>::new(small(1)).unwrap());
        let names: Vec<&str> = ckpt.arrays.iter().map(|(n, _)| n.as_str()).collect();
        for n in [
            "stem.conv.weight",
            "stem.bn.running_var",
            "block0.conv1.weight",
            "block0.bn2.gamma",
            "block1.proj.weight",
            "head.out.bias",
        ] {
            assert!(names.contains(&n), "{n} not in {names:?}");
        }
        assert!(!names.contains(&"block0.proj.weight"));
    }
}
