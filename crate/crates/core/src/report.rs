//! Flat CSV of evaluation results.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const CURVES_HEADER: &str = "task,fold,n_per_class,duration_s,metric_name,value,seed";

/// One line of `curves.csv`. `None` sizes and durations print as `full`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: String,
    pub fold: usize,
    pub n_per_class: Option<usize>,
    pub duration_s: Option<f64>,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
}

/// Rounds to 6 significant digits.
pub fn round_sig6(v: f64) -> f64 {
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "full".to_string(), |x| x.to_string())
}

/// `None` (full) sorts after every finite size or duration.
fn cmp_opt<T: PartialOrd>(a: &Option<T>, b: &Option<T>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.partial_cmp(y).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Expands reports into rows sorted by task, training size, duration and
/// fold, then metric name and seed.
pub fn curve_rows(reports: &[EvalReport]) -> Vec<CurveRow> {
    let mut rows: Vec<CurveRow> = reports
        .iter()
        .flat_map(|r| {
            r.slices.iter().flat_map(move |s| {
                r.metrics.iter().map(move |&m| CurveRow {
                    task: r.task_name.clone(),
                    fold: r.fold,
                    n_per_class: r.n_per_class,
                    duration_s: s.duration_s,
                    metric_name: m.name().to_string(),
                    value: round_sig6(s.value(m)),
                    seed: r.seed,
                })
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        a.task
            .cmp(&b.task)
            .then_with(|| cmp_opt(&a.n_per_class, &b.n_per_class))
            .then_with(|| cmp_opt(&a.duration_s, &b.duration_s))
            .then_with(|| a.fold.cmp(&b.fold))
            .then_with(|| a.metric_name.cmp(&b.metric_name))
            .then_with(|| a.seed.cmp(&b.seed))
    });
    rows
}

pub fn format_curves(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task,
            r.fold,
            fmt_opt(r.n_per_class),
            fmt_opt(r.duration_s),
            r.metric_name,
            round_sig6(r.value),
            r.seed
        ));
    }
    out
}

/// Writes `curves.csv` and a `curves.csv.meta.json` sidecar holding the
/// shared config fingerprint. Reports from different configs are refused.
pub fn emit_report(reports: &[EvalReport], out: &Path) -> Result<()> {
    let first = reports.first().ok_or(Error::EmptyList)?;
    if let Some(r) = reports.iter().find(|r| r.config_fingerprint != first.config_fingerprint) {
        return Err(Error::FingerprintMismatch {
            expected: first.config_fingerprint.clone(),
            found: r.config_fingerprint.clone(),
        });
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(out, format_curves(&curve_rows(reports))).map_err(|e| Error::io(out, e))?;
    let side = crate::container::sidecar_path(out);
    let meta = serde_json::json!({ "kind": "curves", "config_fingerprint": first.config_fingerprint });
    std::fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&side, e))
}

fn parse_opt<T: std::str::FromStr>(field: &str, line: usize) -> Result<Option<T>> {
    if field == "full" {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("bad value `{field}`"),
    })
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    parse_opt(field, line)?.ok_or_else(|| Error::Parse {
        line,
        message: "`full` is not allowed here".into(),
    })
}

pub fn parse_curves_str(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CURVES_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{CURVES_HEADER}`"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 7 fields, found {}", f.len()),
                });
            }
            Ok(CurveRow {
                task: f[0].to_string(),
                fold: parse_field(f[1], line)?,
                n_per_class: parse_opt(f[2], line)?,
                duration_s: parse_opt(f[3], line)?,
                metric_name: f[4].to_string(),
                value: parse_field(f[5], line)?,
                seed: parse_field(f[6], line)?,
            })
        })
        .collect()
}

pub fn parse_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curves_str(&text)
}
