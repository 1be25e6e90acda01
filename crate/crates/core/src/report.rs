//! Analysis artifacts: CSV tables, a JSON summary and static SVG charts.
//!
//! Every writer is byte-deterministic for fixed inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfile::{self, fmt_f64};
use crate::selection::{schedule_alpha, Schedule};
use crate::snapshot::Aggregation;
use crate::toy::EpochLog;
use crate::trajectory::{mean_fitted_curve, Category, CategoryLabel, CategoryReport, DeltaAnalysis, TrajectoryFit};

/// Summary written next to the analysis tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub n: usize,
    pub checkpoints: Vec<usize>,
    pub s_mean: f64,
    pub epsilon: f64,
    pub aggregation: Option<Aggregation>,
    pub fall_through_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub i: usize,
    pub j: usize,
    pub a: f64,
    pub b: f64,
    pub s0: f64,
    #[serde(rename = "sK")]
    pub s_k: f64,
    pub label: String,
    pub fall_through: bool,
}

impl FitRow {
    /// Rebuilds the fit; `final_checkpoint` restores `delta = a·K`.
    pub fn to_fit(&self, final_checkpoint: usize) -> TrajectoryFit {
        TrajectoryFit::from_line(self.i, self.j, self.a, self.b, final_checkpoint as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub count: usize,
    pub fraction: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Serialize)]
struct FitOut<'a> {
    i: usize,
    j: usize,
    a: &'a str,
    b: &'a str,
    s0: &'a str,
    #[serde(rename = "sK")]
    s_k: &'a str,
    label: &'a str,
    fall_through: bool,
}

/// `i,j,a,b,s0,sK,label,fall_through` with 17 significant digits.
pub fn write_fits(path: &Path, fits: &[TrajectoryFit], labels: &[CategoryLabel]) -> Result<()> {
    let rows: Vec<[String; 4]> = fits
        .iter()
        .map(|f| [f.slope, f.intercept, f.fitted_start, f.fitted_end].map(fmt_f64))
        .collect();
    write_csv(
        path,
        fits.iter().zip(labels).zip(&rows).map(|((f, l), r)| FitOut {
            i: f.i,
            j: f.j,
            a: &r[0],
            b: &r[1],
            s0: &r[2],
            s_k: &r[3],
            label: l.category.code(),
            fall_through: l.fall_through,
        }),
    )
}

pub fn read_fits(path: &Path) -> Result<Vec<FitRow>> {
    let rows: Vec<FitRow> = read_csv(path)?;
    for row in &rows {
        row.label.parse::<Category>()?;
    }
    Ok(rows)
}

/// Positive-pair fits: `i,a,b,s0,sK`.
pub fn write_positive_fits(path: &Path, fits: &[TrajectoryFit]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        i: usize,
        a: String,
        b: String,
        s0: String,
        #[serde(rename = "sK")]
        s_k: String,
    }
    write_csv(
        path,
        fits.iter().map(|f| Row {
            i: f.i,
            a: fmt_f64(f.slope),
            b: fmt_f64(f.intercept),
            s0: fmt_f64(f.fitted_start),
            s_k: fmt_f64(f.fitted_end),
        }),
    )
}

pub fn report_rows(report: &CategoryReport) -> Vec<ReportRow> {
    Category::ALL
        .iter()
        .map(|&c| ReportRow {
            category: c.code().to_string(),
            count: report.count(c),
            fraction: report.fraction(c),
        })
        .collect()
}

/// `category,count,fraction`, one row per regime.
pub fn write_report(path: &Path, report: &CategoryReport) -> Result<()> {
    write_csv(path, report_rows(report))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    read_csv(path)
}

pub fn write_summary(path: &Path, summary: &AnalysisSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<AnalysisSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes the full set of analysis outputs into `dir`.
pub fn write_analysis(
    dir: &Path,
    analysis: &DeltaAnalysis,
    report: &CategoryReport,
    aggregation: Option<Aggregation>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    matfile::write_square(&dir.join("delta.mat"), analysis.delta.values())?;
    write_fits(&dir.join("fits.csv"), &analysis.fits, &report.labels)?;
    write_positive_fits(&dir.join("positives.csv"), &analysis.positive_fits)?;
    write_report(&dir.join("report.csv"), report)?;
    write_summary(
        &dir.join("analysis.json"),
        &AnalysisSummary {
            n: analysis.delta.n(),
            checkpoints: analysis.checkpoints.clone(),
            s_mean: analysis.s_mean,
            epsilon: report.epsilon,
            aggregation,
            fall_through_count: report.fall_through_count,
        },
    )?;
    let curves = category_curves(analysis.fits.iter().zip(&report.labels), &analysis.checkpoints);
    write_text(&dir.join("trajectories.svg"), &trajectories_svg(&curves))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean fitted line per category; empty categories are skipped.
pub fn category_curves<'a, I>(labelled: I, checkpoints: &[usize]) -> Vec<(Category, Vec<(f64, f64)>)>
where
    I: IntoIterator<Item = (&'a TrajectoryFit, &'a CategoryLabel)>,
{
    let mut groups: [Vec<&TrajectoryFit>; 4] = Default::default();
    for (fit, label) in labelled {
        groups[label.category.index()].push(fit);
    }
    Category::ALL
        .iter()
        .filter_map(|&c| mean_fitted_curve(groups[c.index()].iter().copied(), checkpoints).map(|curve| (c, curve)))
        .collect()
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub points: &'a [(f64, f64)],
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// A plain line chart. Each polyline carries its raw data coordinates in a
/// `data-points` attribute.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>], y_range: Option<(f64, f64)>) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = y_range.unwrap_or_else(|| extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    for (value, anchor_x, anchor_y, anchor) in [
        (x0, px(x0), bottom + 16.0, "middle"),
        (x1, px(x1), bottom + 16.0, "middle"),
    ] {
        let _ = writeln!(svg, r#"<text x="{anchor_x:.2}" y="{anchor_y:.2}" text-anchor="{anchor}">{}</text>"#, tick(value));
    }
    for value in [y0, y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(value) + 4.0,
            tick(value)
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 14.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (idx, s) in series.iter().enumerate() {
        let pixels: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let data: Vec<String> = s.points.iter().map(|&(x, y)| format!("{x},{y}")).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-name="{}" data-points="{}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            escape(s.name),
            data.join(" "),
            pixels.join(" "),
            s.color
        );
        let ly = top + 14.0 * idx as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{}" text-anchor="end">{}</text>"#,
            right,
            s.color,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn category_color(c: Category) -> &'static str {
    match c {
        Category::HighToLow => "#1f77b4",
        Category::LowToLow => "#2ca02c",
        Category::HighToHigh => "#d62728",
        Category::LowToHigh => "#ff7f0e",
    }
}

pub fn trajectories_svg(curves: &[(Category, Vec<(f64, f64)>)]) -> String {
    let names: Vec<String> = curves.iter().map(|(c, _)| c.code().to_string()).collect();
    let series: Vec<Series<'_>> = curves
        .iter()
        .zip(&names)
        .map(|((c, pts), name)| Series { name, color: category_color(*c), points: pts })
        .collect();
    line_chart("Mean fitted negative similarity by category", "checkpoint", "similarity", &series, None)
}

/// Alpha against epoch for `0..=E`; random schedules have no curve.
pub fn schedule_svg(schedule: &Schedule) -> Result<String> {
    let mut points = Vec::new();
    for e in 0..=schedule.total_epochs {
        if let Some(alpha) = schedule_alpha(schedule, e)? {
            points.push((e as f64, alpha));
        }
    }
    let name = schedule.kind.as_str();
    let series: Vec<Series<'_>> = if points.is_empty() {
        Vec::new()
    } else {
        vec![Series { name, color: "#1f77b4", points: &points }]
    };
    Ok(line_chart(
        &format!("Curriculum schedule ({name})"),
        "epoch",
        "alpha",
        &series,
        Some((0.0, 1.0)),
    ))
}

pub fn loss_svg(logs: &[(&str, &[EpochLog])]) -> String {
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let points: Vec<Vec<(f64, f64)>> = logs
        .iter()
        .map(|(_, log)| log.iter().map(|r| (r.epoch as f64, r.loss)).collect())
        .collect();
    let series: Vec<Series<'_>> = logs
        .iter()
        .zip(&points)
        .enumerate()
        .map(|(k, ((name, _), pts))| Series { name, color: COLORS[k % COLORS.len()], points: pts })
        .collect();
    line_chart("Training loss", "epoch", "contrastive loss", &series, None)
}

/// Parses the `data-points` attributes of every polyline in an SVG produced
/// by [`line_chart`].
pub fn polyline_data(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .filter_map(|l| {
            let start = l.find("data-points=\"")? + "data-points=\"".len();
            let end = start + l[start..].find('"')?;
            l[start..end]
                .split_whitespace()
                .map(|pair| {
                    let (x, y) = pair.split_once(',')?;
                    Some((x.parse().ok()?, y.parse().ok()?))
                })
                .collect()
        })
        .collect()
}
