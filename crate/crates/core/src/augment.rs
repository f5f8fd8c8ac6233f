//! Averaging augmentation: new same-class samples as the componentwise mean
//! of `n` samples drawn with replacement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{LabeledDataset, SignalSample, SAMPLE_VALUES};
use crate::error::{domain_err, shape_err, Result};
use crate::seed;

/// Componentwise mean of equally shaped samples, accumulated in `f64`.
pub fn average_signals<S: AsRef<[f32]>>(signals: &[S]) -> Result<SignalSample> {
    let first = signals
        .first()
        .ok_or_else(|| domain_err!("cannot average an empty list"))?;
    let len = first.as_ref().len();
    let mut acc = vec![0.0f64; len];
    for s in signals {
        let s = s.as_ref();
        if s.len() != len {
            return Err(shape_err!("cannot average samples of {} and {} values", len, s.len()));
        }
        for (a, &v) in acc.iter_mut().zip(s) {
            *a += v as f64;
        }
    }
    let n = signals.len() as f64;
    SignalSample::new(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// How many samples to generate for each averaging size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentCount {
    /// The same count for every `n`.
    PerN(usize),
    /// A total split evenly over the `n` values, remainder to the first ones.
    Total(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub n_values: Vec<usize>,
    pub count: AugmentCount,
    pub seed: u64,
    /// Put the source samples ahead of the generated ones in merged output.
    pub include_originals: bool,
}

pub const DEFAULT_N_VALUES: [usize; 3] = [3, 5, 10];

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            n_values: DEFAULT_N_VALUES.to_vec(),
            count: AugmentCount::PerN(0),
            seed: 0,
            include_originals: true,
        }
    }
}

impl AugmentPlan {
    pub fn per_n(n_values: Vec<usize>, count_per_n: usize, seed: u64) -> Self {
        Self {
            n_values,
            count: AugmentCount::PerN(count_per_n),
            seed,
            include_originals: true,
        }
    }

    pub fn with_total_budget(n_values: Vec<usize>, total: usize, seed: u64) -> Self {
        Self {
            n_values,
            count: AugmentCount::Total(total),
            seed,
            include_originals: true,
        }
    }

    /// 200,000 samples for each of n = 3, 5, 10: 600,000 generated per class.
    pub fn paper_per_n(seed: u64) -> Self {
        Self::per_n(DEFAULT_N_VALUES.to_vec(), 200_000, seed)
    }

    /// 200,000 generated per class in total, so that with 100,000 originals
    /// each class ends at 300,000.
    pub fn paper_total(seed: u64) -> Self {
        Self::with_total_budget(DEFAULT_N_VALUES.to_vec(), 200_000, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values.contains(&0) {
            return Err(crate::Error::Config("every averaging size n must be >= 1".into()));
        }
        Ok(())
    }

    /// Generated count for each entry of `n_values`.
    pub fn counts(&self) -> Vec<usize> {
        let k = self.n_values.len();
        match self.count {
            AugmentCount::PerN(c) => vec![c; k],
            AugmentCount::Total(_) if k == 0 => Vec::new(),
            AugmentCount::Total(t) => (0..k).map(|i| t / k + usize::from(i < t % k)).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }
}

/// Draws `n` indices with replacement for output `index` of size group
/// `group`, from a stream that depends only on `(seed, group, index)`.
fn draw_indices(seed: u64, group: usize, index: usize, n: usize, population: usize) -> Vec<usize> {
    let s = seed::indexed(seed::indexed(seed, group as u64), index as u64);
    let mut rng = seed::rng(s);
    (0..n).map(|_| rng.random_range(0..population)).collect()
}

/// Generated samples for one class, grouped by `n` in plan order.
pub fn augment_class(class_data: &LabeledDataset, plan: &AugmentPlan) -> Result<LabeledDataset> {
    plan.validate()?;
    if class_data.is_empty() {
        return Err(domain_err!("cannot augment an empty class"));
    }
    let class_id = class_data.class_ids()[0];
    if class_data.class_ids().iter().any(|&c| c != class_id) {
        return Err(domain_err!("augment_class needs samples of a single class"));
    }
    let info = &class_data.classes()[class_id as usize];
    let mut out = LabeledDataset::new();
    out.seed = Some(plan.seed);
    let id = out.add_class(&info.name, info.label)?;
    let mut picked: Vec<&[f32]> = Vec::new();
    for (group, (&n, count)) in plan.n_values.iter().zip(plan.counts()).enumerate() {
        for i in 0..count {
            picked.clear();
            picked.extend(
                draw_indices(plan.seed, group, i, n, class_data.len())
                    .into_iter()
                    .map(|j| class_data.sample(j)),
            );
            out.push(id, average_signals(&picked)?.values())?;
        }
    }
    Ok(out)
}

/// Originals first, then each augmented set in order.
pub fn merge_augmented(original: &LabeledDataset, augmented: &[LabeledDataset]) -> Result<LabeledDataset> {
    let mut out = original.clone();
    for a in augmented {
        if a.values().len() != a.len() * SAMPLE_VALUES {
            return Err(shape_err!("augmented set has inconsistent sample size"));
        }
        out.append(a)?;
    }
    Ok(out)
}

/// Augments every class of `dataset` separately, each class using a seed
/// derived from the plan seed and its name, and merges the results. When
/// `include_originals` is off only generated samples are returned.
pub fn augment_dataset(dataset: &LabeledDataset, plan: &AugmentPlan) -> Result<LabeledDataset> {
    let mut generated = Vec::new();
    for (id, info) in dataset.classes().iter().enumerate() {
        let class = dataset.class_subset(id);
        if class.is_empty() {
            continue;
        }
        let class_plan = AugmentPlan {
            seed: seed::derive(plan.seed, &info.name),
            ..plan.clone()
        };
        generated.push(augment_class(&class, &class_plan)?);
    }
    let base = if plan.include_originals {
        dataset.clone()
    } else {
        let mut empty = LabeledDataset::new();
        for c in dataset.classes() {
            empty.add_class(&c.name, c.label)?;
        }
        empty
    };
    merge_augmented(&base, &generated)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::error::Error;

    fn class_of(rows: &[Vec<f32>], name: &str, label: u8) -> LabeledDataset {
        let mut d = LabeledDataset::new();
        let id = d.add_class(name, label).unwrap();
        for r in rows {
            d.push(id, r).unwrap();
        }
        d
    }

    fn random_rows(count: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = crate::seed::rng(seed);
        (0..count)
            .map(|_| (0..SAMPLE_VALUES).map(|_| rng.random_range(-3.0f32..3.0)).collect())
            .collect()
    }

    #[test]
    fn average_examples() {
        let rows = random_rows(1, 1);
        assert_eq!(average_signals(&rows).unwrap().values(), &rows[0][..]);
        for n in [2, 3, 7, 8] {
            let copies = vec![rows[0].clone(); n];
            assert_eq!(average_signals(&copies).unwrap().values(), &rows[0][..]);
        }
        let mut a = vec![0.0f32; SAMPLE_VALUES];
        let mut b = vec![0.0f32; SAMPLE_VALUES];
        a[0] = 1.0;
        b[0] = 3.0;
        assert_eq!(average_signals(&[a, b]).unwrap().values()[0], 2.0);
        assert!(matches!(average_signals::<Vec<f32>>(&[]), Err(Error::Domain(_))));
        assert!(matches!(
            average_signals(&[vec![0.0f32; SAMPLE_VALUES], vec![0.0; 10]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn plan_counts() {
        let plan = AugmentPlan::paper_per_n(0);
        assert_eq!(plan.counts(), vec![200_000; 3]);
        assert_eq!(plan.total(), 600_000);
        assert_eq!(AugmentPlan::paper_total(0).total(), 200_000);
        let plan = AugmentPlan::with_total_budget(vec![3, 5, 10], 2800, 0);
        assert_eq!(plan.counts(), vec![934, 933, 933]);
        assert!(matches!(AugmentPlan::per_n(vec![0], 1, 0).validate(), Err(Error::Config(_))));
    }

    #[test]
    fn class_examples() {
        let rows = random_rows(10, 2);
        let class = class_of(&rows, "bbh", 1);
        let out = augment_class(&class, &AugmentPlan::per_n(vec![3, 5, 10], 4, 7)).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.labels().iter().all(|&l| l == 1));
        assert!(augment_class(&class, &AugmentPlan::per_n(vec![3], 0, 7)).unwrap().is_empty());

        let single = class_of(&rows[..1], "sglf", 1);
        let out = augment_class(&single, &AugmentPlan::per_n(vec![3, 5, 10], 5, 1)).unwrap();
        for i in 0..out.len() {
            assert_eq!(out.sample(i), &rows[0][..]);
        }
        let empty = class_of(&[], "bbh", 1);
        assert!(matches!(augment_class(&empty, &AugmentPlan::per_n(vec![3], 1, 0)), Err(Error::Domain(_))));
    }

    #[test]
    fn n_of_one_resamples_originals() {
        let rows = random_rows(6, 3);
        let class = class_of(&rows, "background", 0);
        let out = augment_class(&class, &AugmentPlan::per_n(vec![1], 20, 5)).unwrap();
        assert_eq!(out.len(), 20);
        for i in 0..out.len() {
            assert!(rows.iter().any(|r| r[..] == *out.sample(i)));
        }
    }

    #[test]
    fn merge_examples() {
        let a = class_of(&random_rows(3, 4), "background", 0);
        assert_eq!(merge_augmented(&a, &[]).unwrap(), a);
        let b = class_of(&random_rows(5, 5), "background", 0);
        let c = class_of(&random_rows(2, 6), "bbh", 1);
        let m = merge_augmented(&a, &[b.clone(), c]).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.label_counts(), [8, 2]);
        assert_eq!(m.sample(0), a.sample(0));
        assert_eq!(m.sample(3), b.sample(0));
        let bad = class_of(&[], "bbh", 0);
        assert!(matches!(merge_augmented(&m, &[bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn dataset_augmentation_is_per_class() {
        let mut d = class_of(&random_rows(4, 8), "background", 0);
        d.append(&class_of(&random_rows(3, 9), "bbh", 1)).unwrap();
        let plan = AugmentPlan::with_total_budget(vec![3, 5, 10], 8, 11);
        let out = augment_dataset(&d, &plan).unwrap();
        assert_eq!(out.len(), 7 + 16);
        assert_eq!(out.label_counts(), [4 + 8, 3 + 8]);
        let only = augment_dataset(&d, &AugmentPlan { include_originals: false, ..plan }).unwrap();
        assert_eq!(only.len(), 16);
    }

    #[test]
    fn variance_shrinks_as_one_over_n() {
        let mut rng = crate::seed::rng(21);
        let rows: Vec<Vec<f32>> = (0..10_000)
            .map(|_| (0..SAMPLE_VALUES).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
            .collect();
        let class = class_of(&rows, "background", 0);
        for n in [3usize, 5, 10] {
            let out = augment_class(&class, &AugmentPlan::per_n(vec![n], 10_000, n as u64)).unwrap();
            // component 0 over 1e4 averaged samples
            let col: Vec<f64> = (0..out.len()).map(|i| out.sample(i)[0] as f64).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            let expected = 1.0 / n as f64;
            assert!((var / expected - 1.0).abs() <= 0.2, "n={n}: {var} vs {expected}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn averages_stay_within_source_range(seed in any::<u64>(), count in 1usize..8, n in 1usize..12) {
            let rows = random_rows(count, seed);
            let class = class_of(&rows, "bbh", 1);
            let out = augment_class(&class, &AugmentPlan::per_n(vec![n], 6, seed)).unwrap();
            for i in 0..out.len() {
                for (k, &v) in out.sample(i).iter().enumerate() {
                    let lo = rows.iter().map(|r| r[k]).fold(f32::INFINITY, f32::min);
                    let hi = rows.iter().map(|r| r[k]).fold(f32::NEG_INFINITY, f32::max);
                    prop_assert!(lo <= v && v <= hi);
                }
            }
            prop_assert!(out.labels().iter().all(|&l| l == 1));
            let again = augment_class(&class, &AugmentPlan::per_n(vec![n], 6, seed)).unwrap();
            prop_assert_eq!(
                out.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                again.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn averaging_is_linear(seed in any::<u64>(), n in 1usize..10, a in -4.0f32..4.0) {
            let rows = random_rows(n, seed);
            let scaled: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|v| a * v).collect()).collect();
            let lhs = average_signals(&scaled).unwrap();
            let rhs = average_signals(&rows).unwrap();
            for (&l, &r) in lhs.values().iter().zip(rhs.values()) {
                let r = a * r;
                prop_assert!((l - r).abs() <= 1e-6 * r.abs().max(1.0));
            }
        }
    }
}
