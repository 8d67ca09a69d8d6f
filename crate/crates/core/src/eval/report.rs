use super::{
    class_metrics, confusion, macro_average, roc_auc, round2, ClassMetrics, EvalError, Result, UndefinedPolicy,
};
use serde::{Deserialize, Serialize};

/// Class 0 survives, class 1 dies.
pub const CLASS_NAMES: [&str; 2] = ["alive", "dead"];

/// One scored subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    /// Predicted probability of class 1.
    pub score_dead: f64,
    /// True class id.
    pub label: usize,
}

/// Counts (possibly averaged) with the derived rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
    pub auc: f64,
}

impl MetricsRow {
    fn rounded(&self) -> Self {
        Self { metrics: self.metrics.map(round2), auc: round2(self.auc), ..*self }
    }
}

/// Per-class and class-averaged performance of a binary classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    /// Rows for `alive` and `dead`, in class order.
    pub classes: Vec<(String, MetricsRow)>,
    /// Macro average; undefined if any class value is undefined.
    pub macro_average: MetricsRow,
    /// Macro average counting undefined class values as 0.
    pub macro_average_undefined_as_zero: MetricsRow,
}

impl EvalReport {
    /// A subject is predicted dead when `score_dead > threshold`, so a score
    /// of exactly 0.5 goes to class 0 as with an argmax over two
    /// probabilities.
    pub fn from_predictions(preds: &[Prediction], threshold: f64) -> Result<Self> {
        if preds.is_empty() {
            return Err(EvalError::Empty);
        }
        let truth: Vec<usize> = preds.iter().map(|p| p.label).collect();
        let pred: Vec<usize> = preds.iter().map(|p| usize::from(p.score_dead > threshold)).collect();
        let cm = confusion(&pred, &truth, 2)?;
        let scores: Vec<f64> = preds.iter().map(|p| p.score_dead).collect();
        let dead: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        let auc = roc_auc(&scores, &dead)?;
        let row = |k: &super::ClassCounts| MetricsRow {
            tp: k.tp as f64,
            tn: k.tn as f64,
            fp: k.fp as f64,
            fn_: k.fn_ as f64,
            metrics: class_metrics(k),
            auc,
        };
        let avg = |policy| -> Result<MetricsRow> {
            let m = macro_average(&cm.classes, policy)?;
            Ok(MetricsRow { tp: m.tp, tn: m.tn, fp: m.fp, fn_: m.fn_, metrics: m.metrics, auc })
        };
        Ok(Self {
            n: preds.len(),
            threshold,
            classes: CLASS_NAMES.iter().zip(&cm.classes).map(|(n, k)| (n.to_string(), row(k))).collect(),
            macro_average: avg(UndefinedPolicy::Propagate)?,
            macro_average_undefined_as_zero: avg(UndefinedPolicy::Zero)?,
        })
    }

    /// Copy with every rate rounded to 2 decimals.
    pub fn rounded(&self) -> Self {
        Self {
            classes: self.classes.iter().map(|(n, r)| (n.clone(), r.rounded())).collect(),
            macro_average: self.macro_average.rounded(),
            macro_average_undefined_as_zero: self.macro_average_undefined_as_zero.rounded(),
            ..self.clone()
        }
    }
}
