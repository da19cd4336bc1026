//! Per-cell summaries and box-plot panels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::Method;
use super::run::ResultRow;
use super::stats::BoxStats;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub sigma_c: f64,
    pub i_source: usize,
    pub method: Method,
    pub n: usize,
    pub n_failed: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub whisker_low: Option<f64>,
    pub whisker_high: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Sortable key for a finite `f64`.
fn ord_key(v: f64) -> i64 {
    let bits = v.to_bits() as i64;
    if bits < 0 {
        bits ^ i64::MAX
    } else {
        bits
    }
}

type Panels = BTreeMap<i64, (f64, Vec<(usize, Method, BoxStats)>)>;
type Groups = BTreeMap<(i64, usize, Method), (f64, Vec<f64>, usize)>;

fn group(rows: &[ResultRow]) -> Groups {
    let mut groups: Groups = BTreeMap::new();
    for r in rows {
        let e = groups
            .entry((ord_key(r.sigma_c), r.i_source, r.method))
            .or_insert((r.sigma_c, Vec::new(), 0));
        match r.mean_abs_error {
            Some(v) if v.is_finite() => e.1.push(v),
            _ => e.2 += 1,
        }
    }
    groups
}

/// One summary row per `(σ, I1, method)`, sorted by that key.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::EmptyReport("results contain no rows".into()));
    }
    group(rows)
        .into_iter()
        .map(|((_, i_source, method), (sigma_c, values, n_failed))| {
            let b = if values.is_empty() { None } else { Some(BoxStats::from_values(&values)?) };
            Ok(SummaryRow {
                sigma_c,
                i_source,
                method,
                n: values.len(),
                n_failed,
                median: b.as_ref().map(|b| b.median),
                q1: b.as_ref().map(|b| b.q1),
                q3: b.as_ref().map(|b| b.q3),
                whisker_low: b.as_ref().map(|b| b.whisker_low),
                whisker_high: b.as_ref().map(|b| b.whisker_high),
                min: b.as_ref().map(|b| b.min),
                max: b.as_ref().map(|b| b.max),
            })
        })
        .collect()
}

fn color(method: Method) -> &'static str {
    match method {
        Method::NoTransfer => "#7f7f7f",
        Method::OneStep => "#1f77b4",
        Method::TwoStep => "#d62728",
    }
}

/// One SVG panel: error box plots grouped by `I1`, one box per method.
pub fn render_panel(sigma_c: f64, boxes: &[(usize, Method, BoxStats)]) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let mut sizes: Vec<usize> = boxes.iter().map(|b| b.0).collect();
    sizes.dedup();
    let mut methods: Vec<Method> = boxes.iter().map(|b| b.1).collect();
    methods.sort();
    methods.dedup();
    let lo = boxes.iter().map(|b| b.2.min).fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = boxes.iter().map(|b| b.2.max).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));
    let group_w = plot_w / sizes.len().max(1) as f64;
    let box_w = group_w * 0.8 / methods.len().max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">sigma_c = {sigma_c}</text>"#,
        width / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            left - 5.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {0})" text-anchor="middle">mean absolute error</text>"#,
        top + plot_h / 2.0
    );
    for (gi, size) in sizes.iter().enumerate() {
        let gx = left + group_w * gi as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">I1 = {size}</text>"#,
            gx + group_w / 2.0,
            top + plot_h + 20.0
        );
        for (_, method, b) in boxes.iter().filter(|b| b.0 == *size) {
            let mi = methods.iter().position(|m| m == method).unwrap_or(0);
            let x0 = gx + group_w * 0.1 + box_w * mi as f64 + box_w * 0.1;
            let w = box_w * 0.8;
            let xc = x0 + w / 2.0;
            let c = color(*method);
            let _ = writeln!(
                s,
                r#"<line x1="{xc:.2}" y1="{:.2}" x2="{xc:.2}" y2="{:.2}" stroke="{c}"/>"#,
                y(b.whisker_low),
                y(b.whisker_high)
            );
            let _ = writeln!(
                s,
                r#"<rect x="{x0:.2}" y="{:.2}" width="{w:.2}" height="{:.2}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
                y(b.q3),
                (y(b.q1) - y(b.q3)).max(0.5)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{x0:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="{c}" stroke-width="2"/>"#,
                y(b.median),
                x0 + w
            );
            for o in &b.outliers {
                let _ = writeln!(s, r#"<circle cx="{xc:.2}" cy="{:.2}" r="2" fill="none" stroke="{c}"/>"#, y(*o));
            }
        }
    }
    for (mi, m) in methods.iter().enumerate() {
        let lx = left + 10.0 + 120.0 * mi as f64;
        let ly = height - 15.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{ly}">{}</text>"#,
            ly - 9.0,
            color(*m),
            lx + 14.0,
            m.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `summary.csv` and one `boxplot_sigma_<σ>.svg` per σ into `out`.
/// Returns the SVG paths.
pub fn write_report(rows: &[ResultRow], out: &Path) -> Result<Vec<PathBuf>> {
    let summary = summarize(rows)?;
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    for r in &summary {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut panels: Panels = BTreeMap::new();
    for ((k, i_source, method), (sigma, values, _)) in group(rows) {
        let panel = panels.entry(k).or_insert((sigma, Vec::new()));
        if !values.is_empty() {
            panel.1.push((i_source, method, BoxStats::from_values(&values)?));
        }
    }
    let mut paths = Vec::new();
    for (sigma, boxes) in panels.values() {
        let path = out.join(format!("boxplot_sigma_{sigma}.svg"));
        std::fs::write(&path, render_panel(*sigma, boxes))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sigma_c: f64, i_source: usize, method: Method, rep: usize, err: Option<f64>) -> ResultRow {
        ResultRow {
            sigma_c,
            i_source,
            method,
            replication: rep,
            mean_abs_error: err,
            h_r_hat: None,
            c_sigma_hat: None,
            runtime_ms: 0,
            note: String::new(),
        }
    }

    #[test]
    fn summary_groups_and_counts_failures() {
        let mut rows = Vec::new();
        for (i, v) in [1.0, 2.0, 3.0, 4.0, 100.0].into_iter().enumerate() {
            rows.push(row(0.5, 10, Method::TwoStep, i, Some(v)));
        }
        rows.push(row(0.5, 10, Method::TwoStep, 5, None));
        rows.push(row(0.25, 10, Method::OneStep, 0, Some(7.0)));
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].sigma_c, s[0].median), (0.25, Some(7.0)));
        assert_eq!((s[1].n, s[1].n_failed), (5, 1));
        assert_eq!((s[1].median, s[1].q1, s[1].q3), (Some(3.0), Some(2.0), Some(4.0)));
        assert_eq!(s[1].whisker_high, Some(4.0));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(summarize(&[]), Err(Error::EmptyReport(_))));
    }

    #[test]
    fn one_panel_per_sigma() {
        let rows: Vec<ResultRow> = [0.25, 1.0, 0.5]
            .iter()
            .flat_map(|&s| {
                [Method::NoTransfer, Method::TwoStep]
                    .into_iter()
                    .map(move |m| row(s, 20, m, 0, Some(s + 1.0)))
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_report(&rows, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let svg = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("two_step"));
        assert!(dir.path().join("summary.csv").exists());
    }
}
