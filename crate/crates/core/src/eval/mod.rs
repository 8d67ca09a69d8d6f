//! Classification metrics, ROC analysis and univariate clinical statistics.

mod metrics;
mod report;
mod roc;
mod stats;

pub use metrics::{
    class_metrics, confusion, macro_average, ClassCounts, ClassMetrics, ConfusionMatrix, MacroAverage, UndefinedPolicy,
};
pub use report::{EvalReport, MetricsRow, Prediction, CLASS_NAMES};
pub use roc::{roc_auc, roc_curve, RocPoint};
pub use stats::{chi_square, odds_ratio, t_test, ChiSquare, Contingency2x2, OddsResult, TTest, TTestKind, Z_95, Z_95_EXACT};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("class id {0} outside 0..{1}")]
    UnknownClass(usize, usize),
    #[error("macro average needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("ROC analysis needs both classes present")]
    SingleClass,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("contingency table has a zero margin")]
    DegenerateMargin,
    #[error("contingency table is empty")]
    EmptyTable,
    #[error("each sample needs at least 2 values (got {0} and {1})")]
    TooSmall(usize, usize),
    #[error("both samples have zero variance")]
    ZeroVariance,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rounds to 2 decimals, halves away from zero.
///
/// Values within 1e-9 of a half-cent are treated as exact halves, so
/// ratios like 29/40 round the way their exact decimal would.
pub fn round2(x: f64) -> f64 {
    let y = x * 100.0;
    let whole = y.trunc();
    let frac = (y - whole).abs();
    if (frac - 0.5).abs() < 1e-9 {
        (whole + y.signum()) / 100.0
    } else {
        y.round() / 100.0
    }
}
