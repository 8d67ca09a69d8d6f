use super::{EvalError, Result};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::gamma_ur;

/// Two-sided 95% normal quantile as used by clinical statistics packages.
pub const Z_95: f64 = 1.96;

/// Two-sided 95% normal quantile to double precision.
pub const Z_95_EXACT: f64 = 1.959_963_984_540_054;

/// Exposure × event table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency2x2 {
    /// exposed, event
    pub a: u64,
    /// exposed, no event
    pub b: u64,
    /// unexposed, event
    pub c: u64,
    /// unexposed, no event
    pub d: u64,
}

impl Contingency2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Same data with exposed and unexposed rows exchanged.
    pub fn swap_exposure(&self) -> Self {
        Self { a: self.c, b: self.d, c: self.a, d: self.b }
    }

    /// Same data with event and no-event columns exchanged.
    pub fn swap_outcome(&self) -> Self {
        Self { a: self.b, b: self.a, c: self.d, d: self.c }
    }

    pub fn transpose(&self) -> Self {
        Self { a: self.a, b: self.c, c: self.b, d: self.d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddsResult {
    pub or_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// 0.5 was added to every cell because one was zero.
    pub corrected: bool,
}

impl OddsResult {
    /// Odds ratio for the opposite reference group.
    pub fn invert(&self) -> Self {
        Self {
            or_value: 1.0 / self.or_value,
            ci_low: 1.0 / self.ci_high,
            ci_high: 1.0 / self.ci_low,
            corrected: self.corrected,
        }
    }
}

/// Odds ratio with a Wald interval on the log scale.
pub fn odds_ratio(t: &Contingency2x2, z: f64) -> Result<OddsResult> {
    if t.total() == 0 {
        return Err(EvalError::EmptyTable);
    }
    let corrected = [t.a, t.b, t.c, t.d].contains(&0);
    let k = if corrected { 0.5 } else { 0.0 };
    let (a, b, c, d) = (t.a as f64 + k, t.b as f64 + k, t.c as f64 + k, t.d as f64 + k);
    let or = (a * d) / (b * c);
    let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    Ok(OddsResult { or_value: or, ci_low: (or.ln() - z * se).exp(), ci_high: (or.ln() + z * se).exp(), corrected })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: u32,
    pub p: f64,
}

/// Pearson chi-square test of independence, without continuity correction.
pub fn chi_square(t: &Contingency2x2) -> Result<ChiSquare> {
    if t.total() == 0 {
        return Err(EvalError::EmptyTable);
    }
    let (a, b, c, d) = (t.a as f64, t.b as f64, t.c as f64, t.d as f64);
    let margins = [a + b, c + d, a + c, b + d];
    if margins.contains(&0.0) {
        return Err(EvalError::DegenerateMargin);
    }
    let n = a + b + c + d;
    let stat = n * (a * d - b * c).powi(2) / margins.iter().product::<f64>();
    let p = if stat == 0.0 { 1.0 } else { gamma_ur(0.5, stat / 2.0) };
    Ok(ChiSquare { statistic: stat, dof: 1, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Pooled variance.
    Student,
    /// Unequal variances, Satterthwaite degrees of freedom.
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

pub fn t_test(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::TooSmall(a.len(), b.len()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let (se, dof) = match kind {
        TTestKind::Student => {
            let dof = na + nb - 2.0;
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / dof;
            ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), dof)
        }
        TTestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let dof = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
            ((qa + qb).sqrt(), dof)
        }
    };
    let t = (ma - mb) / se;
    let p = if t == 0.0 { 1.0 } else { beta_reg(dof / 2.0, 0.5, dof / (dof + t * t)) };
    Ok(TTest { t, dof, p })
}
