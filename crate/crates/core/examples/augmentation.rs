//! Within-class averaging: n-sample means of a class become new samples of
//! that class. Averaging shrinks the noise variance by 1/n.

use gwanomaly::augment::{augment_dataset, AugmentPlan};
use gwanomaly::dataio::{generate_synthetic, SynthConfig};

fn variance(values: &[f32]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

fn main() -> gwanomaly::Result<()> {
    let data = generate_synthetic(&SynthConfig { seed: 3, ..SynthConfig::default().with_counts(300) })?.dataset;

    for n in [1, 3, 5, 10] {
        let plan = AugmentPlan { include_originals: false, ..AugmentPlan::per_n(vec![n], 300, 9) };
        let out = augment_dataset(&data, &plan)?;
        let bg = out.class_subset(out.class_id("background").unwrap());
        println!("n = {n:>2}: background variance {:.4} (expected {:.4})", variance(bg.values()), 1.0 / n as f64);
    }

    let plan = AugmentPlan::with_total_budget(vec![3, 5, 10], 2 * 300, 9);
    println!("budget of {} per class splits as {:?}", plan.total(), plan.counts());
    let merged = augment_dataset(&data, &plan)?;
    for (id, class) in merged.classes().iter().enumerate() {
        println!("{:<10} {} samples after augmentation", class.name, merged.class_count(id));
    }
    Ok(())
}
