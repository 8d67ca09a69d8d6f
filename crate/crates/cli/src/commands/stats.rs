use super::{write_json, Context};
use crate::config::RunConfig;
use crate::data::Table;
use crate::error::{CliError, Result};
use sahnet::eval::{chi_square, odds_ratio, round2, t_test, ChiSquare, Contingency2x2, OddsResult, TTest};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Univariate association of one column with the outcome. Binary columns
/// treat 1 as exposed; ratios and statistics are rounded to 2 decimals,
/// p-values are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableStats {
    Binary {
        variable: String,
        n: usize,
        table: Contingency2x2,
        /// Percentage of events among exposed and unexposed subjects.
        event_pct_exposed: f64,
        event_pct_unexposed: f64,
        odds_ratio: Option<OddsResult>,
        chi_square: Option<ChiSquare>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        note: Option<String>,
    },
    Continuous {
        variable: String,
        event: GroupSummary,
        no_event: GroupSummary,
        t_test: Option<TTest>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        note: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub outcome: String,
    pub n: usize,
    pub events: usize,
    pub variables: Vec<VariableStats>,
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        return 0.0;
    }
    (1000.0 * part as f64 / whole as f64).round() / 10.0
}

fn summary(x: &[f64]) -> GroupSummary {
    let n = x.len();
    let mean = if n == 0 { 0.0 } else { x.iter().sum::<f64>() / n as f64 };
    let sd = if n < 2 { 0.0 } else { (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    GroupSummary { n, mean: round2(mean), sd: round2(sd) }
}

fn binary(name: &str, pairs: &[(bool, f64)], z: f64) -> VariableStats {
    let count = |exposed: bool, event: bool| pairs.iter().filter(|&&(e, v)| e == event && (v == 1.0) == exposed).count() as u64;
    let t = Contingency2x2::new(count(true, true), count(true, false), count(false, true), count(false, false));
    let mut note = None;
    let odds = odds_ratio(&t, z)
        .map(|o| OddsResult { or_value: round2(o.or_value), ci_low: round2(o.ci_low), ci_high: round2(o.ci_high), ..o })
        .map_err(|e| note = Some(e.to_string()))
        .ok();
    let chi = chi_square(&t)
        .map(|c| ChiSquare { statistic: round2(c.statistic), ..c })
        .map_err(|e| note = Some(e.to_string()))
        .ok();
    VariableStats::Binary {
        variable: name.to_string(),
        n: pairs.len(),
        table: t,
        event_pct_exposed: pct(t.a, t.a + t.b),
        event_pct_unexposed: pct(t.c, t.c + t.d),
        odds_ratio: odds,
        chi_square: chi,
        note,
    }
}

fn continuous(name: &str, pairs: &[(bool, f64)], ctx: &Context) -> VariableStats {
    let split = |event: bool| pairs.iter().filter(|p| p.0 == event).map(|p| p.1).collect::<Vec<f64>>();
    let (ev, no) = (split(true), split(false));
    let (t_test, note) = match t_test(&ev, &no, ctx.cfg.eval.t_test) {
        Ok(t) => (Some(TTest { t: round2(t.t), dof: round2(t.dof), ..t }), None),
        Err(e) => (None, Some(e.to_string())),
    };
    VariableStats::Continuous { variable: name.to_string(), event: summary(&ev), no_event: summary(&no), t_test, note }
}

fn parse(path: &str, line: usize, column: &str, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| CliError::Data(format!("{path} row {line}: column '{column}' holds '{cell}'")))
}

/// Computes the report for every column except the outcome and id columns.
pub fn analyze(table: &Table, source: &str, ctx: &Context) -> Result<StatsReport> {
    let e = &ctx.cfg.eval;
    let out_col = table
        .column(&e.outcome_column)
        .ok_or_else(|| CliError::Data(format!("{source} has no outcome column '{}'", e.outcome_column)))?;
    let mut outcome = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        let v = parse(source, r + 2, &e.outcome_column, &row[out_col])?;
        match v {
            None => outcome.push(None),
            Some(x) if x == 0.0 || x == 1.0 => outcome.push(Some(x == 1.0)),
            Some(x) => return Err(CliError::Data(format!("{source} row {}: outcome {x} is not 0 or 1", r + 2))),
        }
    }
    let mut variables = Vec::new();
    for (c, name) in table.header.iter().enumerate() {
        if c == out_col || *name == e.id_column {
            continue;
        }
        let mut pairs = Vec::new();
        for (r, row) in table.rows.iter().enumerate() {
            if let (Some(event), Some(v)) = (outcome[r], parse(source, r + 2, name, &row[c])?) {
                pairs.push((event, v));
            }
        }
        let is_binary = pairs.iter().all(|&(_, v)| v == 0.0 || v == 1.0);
        variables.push(if is_binary { binary(name, &pairs, e.z) } else { continuous(name, &pairs, ctx) });
    }
    let known: Vec<bool> = outcome.into_iter().flatten().collect();
    Ok(StatsReport {
        outcome: e.outcome_column.clone(),
        n: known.len(),
        events: known.iter().filter(|&&d| d).count(),
        variables,
    })
}

/// Clinical table → `stats.json` with one entry per variable.
pub fn stats(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let path = RunConfig::require(&cfg.paths.cohort, "cohort")?;
    let table = Table::read(path)?;
    let report = analyze(&table, &path.display().to_string(), ctx)?;
    let out = &cfg.paths.out;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("stats.json"), &report)?;
    cfg.write_resolved(out)
}
