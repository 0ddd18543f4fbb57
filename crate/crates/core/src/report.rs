//! Merging per-seed evaluation reports into mean ± std tables.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::Variant;
use crate::error::{LamaeError, Result};
use crate::train::EvalReport;

/// Mean and sample standard deviation (n - 1 denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(LamaeError::Data(format!(
                "mean ± std needs at least 2 values, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    /// `0.72 ± 0.02`.
    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.std)
    }
}

/// One metric column of the table: a regime plus a metric name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Column {
    pub regime: String,
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<Column>,
    /// `(method display name, one cell per column)`.
    pub rows: Vec<(String, Vec<Option<MeanStd>>)>,
}

fn regime_label(regime: &str) -> &str {
    match regime {
        "finetune_full" => "Full Finetuning",
        "finetune_frozen" => "Frozen Backbone",
        other => other,
    }
}

fn metrics_of(r: &EvalReport) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    if let Some(c) = &r.classification {
        out.push(("AUROC", c.macro_auroc.value));
        out.push(("F1", c.macro_f1));
    }
    if let Some(g) = &r.regression {
        out.push(("MAE", g.mae));
    }
    out
}

fn variant_rank(name: &str) -> usize {
    Variant::ALL.iter().position(|v| v.name() == name).unwrap_or(usize::MAX)
}

/// Groups reports by variant (rows) and regime x metric (columns). Every
/// non-empty cell must hold at least two seeds.
pub fn aggregate(reports: &[EvalReport]) -> Result<Table> {
    if reports.len() < 2 {
        return Err(LamaeError::Data("aggregation needs at least 2 reports".into()));
    }
    let mut cells: BTreeMap<(String, Column), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (metric, value) in metrics_of(r) {
            let col = Column {
                regime: r.regime.clone(),
                metric: metric.into(),
            };
            cells.entry((r.variant.clone(), col)).or_default().push(value);
        }
    }
    let mut columns: Vec<Column> = cells.keys().map(|(_, c)| c.clone()).collect();
    columns.sort_by(|a, b| {
        let rank = |c: &Column| match c.regime.as_str() {
            "finetune_full" => 0,
            "finetune_frozen" => 1,
            _ => 2,
        };
        (rank(a), &a.regime, &a.metric).cmp(&(rank(b), &b.regime, &b.metric))
    });
    columns.dedup();
    let mut variants: Vec<String> = cells.keys().map(|(v, _)| v.clone()).collect();
    variants.sort_by_key(|v| (variant_rank(v), v.clone()));
    variants.dedup();
    let mut rows = Vec::new();
    for v in variants {
        let mut row = Vec::with_capacity(columns.len());
        for c in &columns {
            row.push(match cells.get(&(v.clone(), c.clone())) {
                Some(values) => Some(
                    MeanStd::of(values)
                        .map_err(|e| LamaeError::Data(format!("{v} / {} / {}: {e}", c.regime, c.metric)))?,
                ),
                None => None,
            });
        }
        let name = v.parse::<Variant>().map_or(v.clone(), |x| x.display_name().to_string());
        rows.push((name, row));
    }
    Ok(Table { columns, rows })
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for c in &self.columns {
            s.push_str(&format!(" {} {} |", regime_label(&c.regime), c.metric));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for (name, cells) in &self.rows {
            s.push_str(&format!("| {name} |"));
            for c in cells {
                match c {
                    Some(m) => s.push_str(&format!(" {} |", m.format(2))),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        for c in &self.columns {
            header.push(format!("{}_{}_mean", c.regime, c.metric.to_lowercase()));
            header.push(format!("{}_{}_std", c.regime, c.metric.to_lowercase()));
        }
        let err = |e: csv::Error| LamaeError::Data(e.to_string());
        w.write_record(&header).map_err(err)?;
        for (name, cells) in &self.rows {
            let mut rec = vec![name.clone()];
            for c in cells {
                match c {
                    Some(m) => rec.extend([m.mean.to_string(), m.std.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec).map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| LamaeError::Data(e.to_string()))?)
            .map_err(|e| LamaeError::Data(e.to_string()))
    }
}

/// Per-code means over the reports that score it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodeSummary {
    pub code: String,
    pub mean_f1: f64,
    pub mean_auroc: Option<f64>,
}

/// The `k` codes with the highest mean F1 across all reports, best first;
/// ties break on the code name.
pub fn top_codes_by_f1(reports: &[EvalReport], k: usize) -> Vec<CodeSummary> {
    let mut f1: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut auc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for c in r.classification.iter().flat_map(|c| &c.per_code) {
            f1.entry(&c.code).or_default().push(c.f1);
            if let Some(a) = c.auroc {
                auc.entry(&c.code).or_default().push(a);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut out: Vec<CodeSummary> = f1
        .iter()
        .map(|(code, v)| CodeSummary {
            code: code.to_string(),
            mean_f1: mean(v),
            mean_auroc: auc.get(code).map(|a| mean(a)),
        })
        .collect();
    out.sort_by(|a, b| b.mean_f1.total_cmp(&a.mean_f1).then_with(|| a.code.cmp(&b.code)));
    out.truncate(k);
    out
}
