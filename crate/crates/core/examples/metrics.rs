//! Confusion counts, TNR, ROC and AUC for a handful of scores.

use gwanomaly::metrics::{roc_auc, EvalReport};

fn main() -> gwanomaly::Result<()> {
    let scores = [0.05, 0.2, 0.35, 0.4, 0.4, 0.55, 0.6, 0.8, 0.9, 0.97];
    let labels = [0, 0, 0, 1, 0, 1, 0, 1, 1, 1];

    let roc = roc_auc(&scores, &labels)?;
    println!("AUC = {:.4}", roc.auc);
    print!("{}", roc.to_csv());

    for threshold in [0.5, 0.7] {
        let report = EvalReport::from_scores(&scores, &labels, threshold)?;
        println!("threshold {threshold}: TNR {:?}, TPR {:?}, accuracy {}", report.tnr, report.tpr, report.accuracy);
    }
    let op = roc.operating_point(0.9);
    println!("TNR {:.2} at TPR {:.2} (threshold {})", op.tnr, op.tpr, op.threshold);
    Ok(())
}
