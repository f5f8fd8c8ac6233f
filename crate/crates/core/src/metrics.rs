//! Loss and detection metrics: cross-entropy, confusion counts, true negative
//! rate, ROC sweep and trapezoidal AUC.

use std::fmt::Write as _;

use crate::error::{domain_err, Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Default operating threshold on the signal probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// TPR that the competition-style operating point must reach.
pub const OPERATING_TPR: f64 = 0.9;

/// Mean `-ln p[label]` over rows of two-class probabilities.
pub fn cross_entropy(probs: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(domain_err!("cross-entropy over an empty batch"));
    }
    let mut total = 0.0;
    for (row, &label) in probs.iter().zip(labels) {
        if label > 1 {
            return Err(domain_err!("label {} outside {{0, 1}}", label));
        }
        if (row[0] + row[1] - 1.0).abs() > 1e-5 {
            return Err(domain_err!("probability row {:?} does not sum to 1", row));
        }
        let p = row[label as usize].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= p.ln();
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tnr(&self) -> Result<f64> {
        tnr(self.tn, self.fp)
    }

    pub fn tpr(&self) -> Result<f64> {
        if self.tp + self.fn_ == 0 {
            return Err(Error::UndefinedMetric("TPR with no positive samples".into()));
        }
        Ok(self.tp as f64 / (self.tp + self.fn_) as f64)
    }

    pub fn fpr(&self) -> Result<f64> {
        if self.tn + self.fp == 0 {
            return Err(Error::UndefinedMetric("FPR with no negative samples".into()));
        }
        Ok(self.fp as f64 / (self.tn + self.fp) as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("accuracy of zero samples".into()));
        }
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }
}

/// Counts with the strict rule: a sample is called positive iff
/// `score > threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// `TN / (TN + FP)`.
pub fn tnr(tn: u64, fp: u64) -> Result<f64> {
    if tn + fp == 0 {
        return Err(Error::UndefinedMetric("TNR with no negative samples".into()));
    }
    Ok(tn as f64 / (tn + fp) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Samples with `score >= threshold` are called positive at this point.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub tp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
}

/// Sweeps one threshold per distinct score, from `+inf` down, and integrates
/// the curve with the trapezoidal rule. Tied scores move as one step, which
/// gives tied positive/negative pairs half credit.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(domain_err!("NaN score"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
        tp: 0,
        fp: 0,
    }];
    // twice the area in units of one (positive, negative) pair
    let mut doubled_area: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            tp,
            fp,
        });
    }
    let auc = doubled_area as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(Roc {
        points,
        auc,
        positives,
        negatives,
    })
}

/// The highest-threshold ROC point whose TPR reaches `target_tpr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
}

impl Roc {
    pub fn operating_point(&self, target_tpr: f64) -> OperatingPoint {
        let p = self
            .points
            .iter()
            .find(|p| p.tpr >= target_tpr)
            .unwrap_or_else(|| self.points.last().expect("non-empty sweep"));
        OperatingPoint {
            threshold: p.threshold,
            tpr: p.tpr,
            tnr: 1.0 - p.fpr,
        }
    }

    /// `fpr,tpr` CSV with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{}", fmt_sig(p.fpr, 9), fmt_sig(p.tpr, 9));
        }
        s
    }
}

pub(crate) fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub confusion: Confusion,
    pub tnr: Option<f64>,
    pub tpr: Option<f64>,
    pub accuracy: f64,
    pub loss: Option<f64>,
    /// `None` when the data holds a single class.
    pub roc: Option<Roc>,
    pub operating_point: Option<OperatingPoint>,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::UndefinedMetric("evaluation of zero samples".into()));
        }
        let confusion = confusion(scores, labels, threshold);
        let roc = match roc_auc(scores, labels) {
            Ok(r) => Some(r),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let operating_point = roc.as_ref().map(|r| r.operating_point(OPERATING_TPR));
        Ok(Self {
            threshold,
            tnr: confusion.tnr().ok(),
            tpr: confusion.tpr().ok(),
            accuracy: confusion.accuracy()?,
            confusion,
            loss: None,
            roc,
            operating_point,
        })
    }

    pub fn auc(&self) -> Option<f64> {
        self.roc.as_ref().map(|r| r.auc)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| fmt_sig(x, 9));
        let c = &self.confusion;
        let mut s = String::new();
        let _ = writeln!(s, "threshold = {}", fmt_sig(self.threshold, 9));
        let _ = writeln!(s, "samples = {}", c.total());
        let _ = writeln!(s, "tp = {}", c.tp);
        let _ = writeln!(s, "fp = {}", c.fp);
        let _ = writeln!(s, "tn = {}", c.tn);
        let _ = writeln!(s, "fn = {}", c.fn_);
        let _ = writeln!(s, "tnr = {}", opt(self.tnr));
        let _ = writeln!(s, "tpr = {}", opt(self.tpr));
        let _ = writeln!(s, "accuracy = {}", fmt_sig(self.accuracy, 9));
        if let Some(l) = self.loss {
            let _ = writeln!(s, "loss = {}", fmt_sig(l, 9));
        }
        let _ = writeln!(s, "auc = {}", opt(self.auc()));
        if let Some(op) = self.operating_point {
            let _ = writeln!(s, "op_target_tpr = {}", fmt_sig(OPERATING_TPR, 9));
            let _ = writeln!(s, "op_threshold = {}", fmt_sig(op.threshold, 9));
            let _ = writeln!(s, "op_tpr = {}", fmt_sig(op.tpr, 9));
            let _ = writeln!(s, "op_tnr = {}", fmt_sig(op.tnr, 9));
        }
        s
    }
}
