//! Samples, labeled datasets, splitting and batching, plus the GWAD file
//! format and the synthetic data generator.

mod gwad;
mod synth;

pub use gwad::{
    decode_gwad, encode_gwad, read_dataset, read_gwad, read_manifest, write_gwad, write_manifest,
    ManifestEntry, GWAD_MAGIC, GWAD_VERSION,
};
pub use synth::{
    generate_synthetic, BbhParams, DetectorTransform, Injection, SglfParams, SynthConfig,
    SyntheticSet, BACKGROUND_CLASS, BBH_CLASS, SAMPLE_RATE, SGLF_CLASS,
};

use rand::seq::SliceRandom;

use crate::autodiff::DiffArray;
use crate::error::{domain_err, shape_err, Error, Result};
use crate::seed;

/// Time steps per sample window.
pub const SAMPLE_LEN: usize = 200;
/// Detectors per sample (Hanford, Livingston).
pub const DETECTORS: usize = 2;
/// Values in one sample, stored time-major: `[t0d0, t0d1, t1d0, ...]`.
pub const SAMPLE_VALUES: usize = SAMPLE_LEN * DETECTORS;

pub const BACKGROUND: u8 = 0;
pub const SIGNAL: u8 = 1;

/// One `200 x 2` window.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample(Vec<f32>);

impl SignalSample {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != SAMPLE_VALUES {
            return Err(shape_err!(
                "a sample has {SAMPLE_VALUES} values, got {}",
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain_err!("sample contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn at(&self, t: usize, detector: usize) -> f32 {
        self.0[t * DETECTORS + detector]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for SignalSample {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub label: u8,
}

/// Samples with binary labels and the source class each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    values: Vec<f32>,
    labels: Vec<u8>,
    class_ids: Vec<u16>,
    classes: Vec<ClassInfo>,
    /// Seed the data was produced with, when known.
    pub seed: Option<u64>,
}

impl LabeledDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Id of the class called `name`, registering it if new.
    pub fn add_class(&mut self, name: &str, label: u8) -> Result<usize> {
        if label > SIGNAL {
            return Err(domain_err!("label must be 0 or 1, got {label}"));
        }
        if let Some(i) = self.classes.iter().position(|c| c.name == name) {
            if self.classes[i].label != label {
                return Err(shape_err!(
                    "class {name} has label {}, not {label}",
                    self.classes[i].label
                ));
            }
            return Ok(i);
        }
        self.classes.push(ClassInfo {
            name: name.to_string(),
            label,
        });
        Ok(self.classes.len() - 1)
    }

    pub fn push(&mut self, class_id: usize, sample: &[f32]) -> Result<()> {
        let info = self
            .classes
            .get(class_id)
            .ok_or_else(|| domain_err!("unknown class id {class_id}"))?;
        if sample.len() != SAMPLE_VALUES {
            return Err(shape_err!(
                "a sample has {SAMPLE_VALUES} values, got {}",
                sample.len()
            ));
        }
        self.values.extend_from_slice(sample);
        self.labels.push(info.label);
        self.class_ids.push(class_id as u16);
        Ok(())
    }

    /// Appends every row of an `(N, 200, 2)` array as class `name`.
    pub fn extend_class(&mut self, name: &str, label: u8, array: &DiffArray<f32>) -> Result<usize> {
        let shape = array.shape();
        if shape.len() != 3 || shape[1] != SAMPLE_LEN || shape[2] != DETECTORS {
            return Err(shape_err!(
                "class arrays are (N, {SAMPLE_LEN}, {DETECTORS}), got {shape:?}"
            ));
        }
        let id = self.add_class(name, label)?;
        for row in array.data().chunks(SAMPLE_VALUES) {
            self.push(id, row)?;
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.values[i * SAMPLE_VALUES..(i + 1) * SAMPLE_VALUES]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_ids(&self) -> &[u16] {
        &self.class_ids
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// `[background, signal]` counts.
    pub fn label_counts(&self) -> [usize; 2] {
        let pos = self.labels.iter().filter(|&&l| l == SIGNAL).count();
        [self.len() - pos, pos]
    }

    pub fn class_count(&self, class_id: usize) -> usize {
        self.class_ids.iter().filter(|&&c| c as usize == class_id).count()
    }

    /// New dataset with the given rows, in order, keeping the class table.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self {
            classes: self.classes.clone(),
            seed: self.seed,
            ..Self::default()
        };
        out.values.reserve(indices.len() * SAMPLE_VALUES);
        for &i in indices {
            out.values.extend_from_slice(self.sample(i));
            out.labels.push(self.labels[i]);
            out.class_ids.push(self.class_ids[i]);
        }
        out
    }

    pub fn class_subset(&self, class_id: usize) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.class_ids[i] as usize == class_id)
            .collect();
        self.subset(&idx)
    }

    /// Appends `other`, matching classes by name.
    pub fn append(&mut self, other: &LabeledDataset) -> Result<()> {
        let map: Vec<usize> = other
            .classes
            .iter()
            .map(|c| self.add_class(&c.name, c.label))
            .collect::<Result<_>>()?;
        self.values.extend_from_slice(&other.values);
        self.labels.extend_from_slice(&other.labels);
        self.class_ids
            .extend(other.class_ids.iter().map(|&c| map[c as usize] as u16));
        Ok(())
    }

    /// Rows `indices` as a `[batch, 200, 2]` array and their labels.
    pub fn gather(&self, indices: &[usize]) -> (DiffArray<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * SAMPLE_VALUES);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        let x = DiffArray::new(vec![indices.len(), SAMPLE_LEN, DETECTORS], data)
            .expect("rows have sample size");
        (x, labels)
    }

    pub fn to_array(&self) -> DiffArray<f32> {
        DiffArray::new(vec![self.len(), SAMPLE_LEN, DETECTORS], self.values.clone())
            .expect("rows have sample size")
    }

    /// Applies [`standardize_sample`] to every sample.
    pub fn standardize_per_channel(&mut self) {
        self.values.chunks_mut(SAMPLE_VALUES).for_each(standardize_sample);
    }
}

/// Shifts and scales each detector channel of one time-major sample to zero
/// mean and unit variance. Constant channels become zero.
pub fn standardize_sample(row: &mut [f32]) {
    let len = row.len() / DETECTORS;
    for d in 0..DETECTORS {
        let vals = || row.iter().skip(d).step_by(DETECTORS).map(|&v| v as f64);
        let mean = vals().sum::<f64>() / len as f64;
        let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for v in row.iter_mut().skip(d).step_by(DETECTORS) {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

/// Train/validation/test fractions and the seed of the split permutation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {fr:?}"
            )));
        }
        Ok(())
    }
}

/// Index sets of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified seeded split. Each label's indices are shuffled and spread
/// evenly over one combined ordering, which is then cut contiguously at
/// `floor(train * n)` and `floor((train + val) * n)`.
pub fn split_indices(labels: &[u8], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = labels.len();
    if n < 10 {
        return Err(domain_err!("splitting needs at least 10 samples, got {n}"));
    }
    let mut rng = seed::rng(spec.seed);
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(n);
    for label in [BACKGROUND, SIGNAL] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        let count = idx.len() as f64;
        keyed.extend(
            idx.into_iter()
                .enumerate()
                .map(|(rank, i)| ((rank as f64 + 0.5) / count, label, i)),
        );
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
    let n_train = (spec.train * n as f64).floor() as usize;
    let n_val = ((spec.val * n as f64).floor() as usize).min(n - n_train);
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// `(train, val, test)` datasets.
pub fn split(
    dataset: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let s = split_indices(dataset.labels(), spec)?;
    Ok((
        dataset.subset(&s.train),
        dataset.subset(&s.val),
        dataset.subset(&s.test),
    ))
}

/// Index batches of one epoch: a fresh permutation from `epoch_seed`, cut
/// into chunks of `batch_size` with the remainder last.
pub fn batch_indices(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(epoch_seed));
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of `(x, labels)` for one epoch.
pub fn batches<'a>(
    dataset: &'a LabeledDataset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = (DiffArray<f32>, Vec<usize>)> + 'a> {
    Ok(batch_indices(dataset.len(), batch_size, epoch_seed)?
        .into_iter()
        .map(move |idx| dataset.gather(&idx)))
}
