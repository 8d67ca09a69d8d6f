use super::{EvalError, Result};
use serde::{Deserialize, Serialize};

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts of the other class of a binary problem.
    pub fn complement(&self) -> Self {
        Self { tp: self.tn, tn: self.tp, fp: self.fn_, fn_: self.fp }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Indexed by class id.
    pub classes: Vec<ClassCounts>,
}

pub fn confusion(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(EvalError::UnknownClass(bad, num_classes));
    }
    let classes = (0..num_classes)
        .map(|c| {
            let mut k = ClassCounts::default();
            for (&p, &t) in pred.iter().zip(truth) {
                match (p == c, t == c) {
                    (true, true) => k.tp += 1,
                    (true, false) => k.fp += 1,
                    (false, true) => k.fn_ += 1,
                    (false, false) => k.tn += 1,
                }
            }
            k
        })
        .collect();
    Ok(ConfusionMatrix { classes })
}

/// Per-class rates; `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub fdr: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    /// `(name, value)` pairs in table order.
    pub fn fields(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("precision", self.precision),
            ("fpr", self.fpr),
            ("fnr", self.fnr),
            ("fdr", self.fdr),
            ("accuracy", self.accuracy),
            ("f1", self.f1),
        ]
    }

    fn from_fields(v: [Option<f64>; 8]) -> Self {
        Self {
            sensitivity: v[0],
            specificity: v[1],
            precision: v[2],
            fpr: v[3],
            fnr: v[4],
            fdr: v[5],
            accuracy: v[6],
            f1: v[7],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_fields(self.fields().map(|(_, v)| v.map(&f)))
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// F1 is `2tp / (2tp + fp + fn)`, the harmonic mean of precision and
/// sensitivity wherever both exist, and 0 when a class is never predicted
/// but does occur.
pub fn class_metrics(k: &ClassCounts) -> ClassMetrics {
    let ClassCounts { tp, tn, fp, fn_ } = *k;
    ClassMetrics {
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        precision: ratio(tp, tp + fp),
        fpr: ratio(fp, tn + fp),
        fnr: ratio(fn_, tp + fn_),
        fdr: ratio(fp, tp + fp),
        accuracy: ratio(tp + tn, k.total()),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    }
}

/// Treatment of undefined per-class values in a macro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    /// Any undefined input makes the average undefined.
    #[default]
    Propagate,
    /// Undefined inputs count as 0.
    Zero,
}

/// Class-averaged counts (possibly fractional) and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub metrics: ClassMetrics,
}

pub fn macro_average(counts: &[ClassCounts], policy: UndefinedPolicy) -> Result<MacroAverage> {
    if counts.len() < 2 {
        return Err(EvalError::TooFewClasses(counts.len()));
    }
    let n = counts.len() as f64;
    let mean_count = |f: fn(&ClassCounts) -> u64| counts.iter().map(|k| f(k) as f64).sum::<f64>() / n;
    let per: Vec<ClassMetrics> = counts.iter().map(class_metrics).collect();
    let mut avg = [None; 8];
    for (j, slot) in avg.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut defined = true;
        for m in &per {
            match (m.fields()[j].1, policy) {
                (Some(v), _) => sum += v,
                (None, UndefinedPolicy::Zero) => {}
                (None, UndefinedPolicy::Propagate) => defined = false,
            }
        }
        *slot = defined.then(|| sum / n);
    }
    Ok(MacroAverage {
        tp: mean_count(|k| k.tp),
        tn: mean_count(|k| k.tn),
        fp: mean_count(|k| k.fp),
        fn_: mean_count(|k| k.fn_),
        metrics: ClassMetrics::from_fields(avg),
    })
}
