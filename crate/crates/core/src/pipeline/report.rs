//! Report emission: JSON, a plain-text results table and SVG line plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{harmonic_mean_value, ArCurve, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Table,
    Plots,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            "plots" => Ok(ReportFormat::Plots),
            _ => Err(Error::Config(format!(
                "unknown report format `{s}` (json, table, plots)"
            ))),
        }
    }
}

pub fn report_to_json(reports: &[EvalReport]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(reports)?;
    s.push('\n');
    Ok(s)
}

/// Accepts either a single report object or a list of reports.
pub fn reports_from_json(text: &str, path: &Path) -> Result<Vec<EvalReport>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    parsed.map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "-".to_string())
}

fn difficulty_recall(r: &EvalReport, difficulty: &str, k: usize) -> Option<f64> {
    let split = r.split.as_ref()?;
    let (_, class) = split
        .unseen_by_difficulty()
        .into_iter()
        .find(|(d, _)| *d == difficulty)?;
    r.per_class.get(&class)?.at(k)
}

/// One row per report at the largest shared k: seen, unseen and harmonic
/// mean, the unseen classes by difficulty, then cross-dataset and
/// size-bucketed recall. Missing entries print as `-`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let k = reports
        .iter()
        .map(|r| r.macro_unseen.top_k())
        .min()
        .unwrap_or(0);
    let headers = [
        "Model".to_string(),
        format!("Seen@{k}"),
        format!("Unseen@{k}"),
        format!("HM@{k}"),
        "Easy".into(),
        "Med".into(),
        "Hard".into(),
        "Cross".into(),
        "Sml".into(),
        "Med".into(),
        "Lrg".into(),
    ];
    let mut rows = vec![headers.to_vec()];
    for r in reports {
        let s = r.macro_seen.at(k);
        let u = r.macro_unseen.at(k);
        let size = |b: &str| r.per_size.get(b).map(ArCurve::last);
        rows.push(vec![
            r.name.clone(),
            cell(s),
            cell(u),
            cell(r.harmonic_mean.at(k)),
            cell(difficulty_recall(r, "easy", k)),
            cell(difficulty_recall(r, "medium", k)),
            cell(difficulty_recall(r, "hard", k)),
            cell(r.cross_dataset.as_ref().and_then(|c| c.at(k))),
            cell(size("small")),
            cell(size("medium")),
            cell(size("large")),
        ]);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// `(name, seen, unseen, hm)` of one table row; `-` cells are `None`.
pub type TableRow = (String, Option<f64>, Option<f64>, Option<f64>);

/// Parses a table from `render_table` back into its leading columns.
pub fn parse_table_columns(table: &str) -> Vec<TableRow> {
    table
        .lines()
        .skip(2)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let num = |i: usize| parts.get(i).and_then(|v| v.parse::<f64>().ok());
            (parts[0].to_string(), num(1), num(2), num(3))
        })
        .collect()
}

/// True when every row's harmonic-mean column matches the value recomputed
/// from its rounded seen and unseen columns within rounding error.
pub fn table_is_consistent(table: &str) -> bool {
    parse_table_columns(table)
        .into_iter()
        .all(|(_, s, u, h)| match (s, u, h) {
            (Some(s), Some(u), Some(h)) => (harmonic_mean_value(s, u) - h).abs() <= 1.5e-4,
            (None, None, None) => true,
            _ => false,
        })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn panel(
    out: &mut String,
    title: &str,
    series: &[(&str, &ArCurve)],
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
) {
    let (l, r, t, b) = (45.0, 10.0, 25.0, 35.0);
    let (pw, ph) = (w - l - r, h - t - b);
    let ks: Vec<usize> = series
        .iter()
        .flat_map(|(_, c)| c.k_values.iter().copied())
        .collect();
    let kmin = ks.iter().copied().min().unwrap_or(1).max(1) as f64;
    let kmax = ks.iter().copied().max().unwrap_or(1).max(2) as f64;
    let span = (kmax.ln() - kmin.ln()).max(1e-9);
    let px = |k: f64| x0 + l + (k.ln() - kmin.ln()) / span * pw;
    let py = |v: f64| y0 + t + (1.0 - v.clamp(0.0, 1.0)) * ph;
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{title}</text>"#,
        x0 + l + pw / 2.0,
        y0 + 16.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##,
        x0 + l,
        y0 + t
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = py(tick);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            x0 + l,
            x0 + l + pw
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{tick:.2}</text>"#,
            x0 + l - 4.0,
            y + 3.0
        );
    }
    let mut ticks: Vec<usize> = ks.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for k in ticks {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{k}</text>"#,
            px(k as f64),
            y0 + t + ph + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">k</text>"#,
        x0 + l + pw / 2.0,
        y0 + h - 4.0
    );
    for (i, (name, curve)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .k_values
            .iter()
            .zip(&curve.recalls)
            .map(|(&k, &v)| format!("{:.1},{:.1}", px(k.max(1) as f64), py(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            pts.join(" ")
        );
        let ly = y0 + t + 12.0 + 13.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="10" fill="{color}">{}</text>"#,
            x0 + l + 6.0,
            escape(name)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn svg(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Three panels (seen, unseen, harmonic mean), one line per report.
pub fn render_macro_plot(reports: &[EvalReport]) -> String {
    let (w, h) = (300.0, 240.0);
    let mut body = String::new();
    type Pick = fn(&EvalReport) -> &ArCurve;
    let pick: [(&str, Pick); 3] = [
        ("AR-Seen", |r| &r.macro_seen),
        ("AR-Unseen", |r| &r.macro_unseen),
        ("AR-HM", |r| &r.harmonic_mean),
    ];
    for (i, (title, f)) in pick.iter().enumerate() {
        let series: Vec<(&str, &ArCurve)> =
            reports.iter().map(|r| (r.name.as_str(), f(r))).collect();
        panel(&mut body, title, &series, i as f64 * w, 0.0, w, h);
    }
    svg(3.0 * w, h, &body)
}

/// Easy, medium and hard unseen-class panels; reports without a split or a
/// given difficulty are left out of that panel.
pub fn render_difficulty_plot(reports: &[EvalReport]) -> String {
    let (w, h) = (300.0, 240.0);
    let mut body = String::new();
    for (i, difficulty) in ["easy", "medium", "hard"].into_iter().enumerate() {
        let series: Vec<(&str, &ArCurve)> = reports
            .iter()
            .filter_map(|r| {
                let split = r.split.as_ref()?;
                let (_, class) = split
                    .unseen_by_difficulty()
                    .into_iter()
                    .find(|(d, _)| *d == difficulty)?;
                Some((r.name.as_str(), r.per_class.get(&class)?))
            })
            .collect();
        panel(
            &mut body,
            &format!("Unseen ({difficulty})"),
            &series,
            i as f64 * w,
            0.0,
            w,
            h,
        );
    }
    svg(3.0 * w, h, &body)
}

/// Writes the requested formats into `dir` and returns the written paths.
pub fn emit_report(
    reports: &[EvalReport],
    formats: &[ReportFormat],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => {
                let p = dir.join("report.json");
                std::fs::write(&p, report_to_json(reports)?)?;
                written.push(p);
            }
            ReportFormat::Table => {
                let p = dir.join("report.txt");
                std::fs::write(&p, render_table(reports))?;
                written.push(p);
            }
            ReportFormat::Plots => {
                let p = dir.join("ar_macro.svg");
                std::fs::write(&p, render_macro_plot(reports))?;
                written.push(p);
                let p = dir.join("ar_difficulty.svg");
                std::fs::write(&p, render_difficulty_plot(reports))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::metrics::harmonic_mean;
    use crate::protocol::ClassSplit;

    fn curve(r: &[f64]) -> ArCurve {
        ArCurve {
            k_values: vec![10, 100],
            recalls: r.to_vec(),
            iou_threshold: 0.5,
            num_truths: 4,
            empty_truth_set: false,
        }
    }

    fn report(name: &str, s: &[f64], u: &[f64], with_micro: bool) -> EvalReport {
        let (s, u) = (curve(s), curve(u));
        let mut per_class = BTreeMap::new();
        let mut split = None;
        if with_micro {
            per_class.insert("ring".to_string(), curve(&[0.1, 0.3]));
            split = Some(ClassSplit {
                seen: ["circle".to_string()].into(),
                unseen_easy: None,
                unseen_medium: None,
                unseen_hard: Some("ring".to_string()),
            });
        }
        EvalReport {
            name: name.into(),
            harmonic_mean: harmonic_mean(&s, &u).unwrap(),
            macro_seen: s,
            macro_unseen: u,
            per_class,
            per_size: BTreeMap::new(),
            downstream: None,
            cross_dataset: None,
            split,
        }
    }

    #[test]
    fn table_handles_missing_micro_rows_and_is_consistent() {
        let reports = [
            report("SSD-ag", &[0.3, 0.61237], &[0.2, 0.43333], false),
            report("SSD-ag-ad", &[0.3, 0.7], &[0.1, 0.5], true),
        ];
        let t = render_table(&reports);
        assert!(t.contains("Seen@100"));
        let rows = parse_table_columns(&t);
        assert_eq!(rows.len(), 2);
        assert!(t.lines().nth(2).unwrap().contains('-'));
        assert!(table_is_consistent(&t), "{t}");
        assert!(t.lines().nth(3).unwrap().contains("0.3000"));
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let reports = vec![report("a", &[0.1 + 0.2, 1.0 / 3.0], &[0.7, 0.9], true)];
        let text = report_to_json(&reports).unwrap();
        let back = reports_from_json(&text, Path::new("r.json")).unwrap();
        assert_eq!(back, reports);
        assert_eq!(report_to_json(&back).unwrap(), text);
    }

    #[test]
    fn emits_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let reports = [report("a", &[0.1, 0.2], &[0.3, 0.4], true)];
        let files = emit_report(
            &reports,
            &[ReportFormat::Json, ReportFormat::Table, ReportFormat::Plots],
            dir.path(),
        )
        .unwrap();
        assert_eq!(files.len(), 4);
        let svg = std::fs::read_to_string(dir.path().join("ar_macro.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("AR-HM") && svg.contains("polyline"));
    }
}
