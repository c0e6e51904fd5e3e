//! Tables, JSON summaries and SVG figures for finished runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{diff_confusion, GroupAccuracy, Metrics, ScatterExport};
use crate::pipeline::{write_atomic, RunRecord};

/// One evaluated model, e.g. the Phase-I checkpoint or a Phase-II arm.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// File-name-safe identifier, unique within a report.
    pub label: String,
    pub phase: String,
    pub arm: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub phase: String,
    pub arm: String,
    pub overall: f64,
    pub per_class: Vec<Option<f64>>,
    pub groups: GroupAccuracy,
    pub tail: Option<f64>,
}

impl StageSummary {
    pub fn of(stage: &Stage) -> Self {
        Self {
            phase: stage.phase.clone(),
            arm: stage.arm.clone(),
            overall: stage.metrics.overall,
            per_class: stage.metrics.per_class.clone(),
            groups: stage.metrics.groups.clone(),
            tail: stage.metrics.tail_accuracy(),
        }
    }
}

/// Canonical JSON for a list of summaries: fixed field order, shortest
/// round-trip floats, two-space indentation, trailing newline.
pub fn summary_json(summaries: &[StageSummary]) -> Result<String> {
    Ok(serde_json::to_string_pretty(summaries)? + "\n")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

pub const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg];

pub struct ReportInput<'a> {
    pub class_names: &'a [String],
    pub stages: &'a [Stage],
    pub runs: &'a [RunRecord],
    pub scatter: Option<&'a ScatterExport>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn per_class_csv(class_names: &[String], m: &Metrics) -> String {
    let mut out = String::from("class_id,class_name,group,train_count,test_count,correct,accuracy\n");
    let tc = m.test_counts();
    for c in 0..m.n_classes() {
        let name = class_names.get(c).map_or(String::new(), |n| csv_field(n));
        let _ = writeln!(
            out,
            "{c},{name},{},{},{},{},{}",
            m.group_of(c).as_str(),
            m.train_counts[c],
            tc[c],
            m.confusion[c][c],
            opt(m.per_class[c])
        );
    }
    out
}

pub fn confusion_csv(m: &Metrics) -> String {
    let n = m.n_classes();
    let mut out = String::from("true\\predicted");
    for c in 0..n {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (c, row) in m.confusion.iter().enumerate() {
        out.push_str(&c.to_string());
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn groups_csv(stages: &[Stage]) -> String {
    let mut out = String::from("label,phase,arm,overall,many,medium,few,tail\n");
    for s in stages {
        let g = &s.metrics.groups;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&s.label),
            csv_field(&s.phase),
            csv_field(&s.arm),
            s.metrics.overall,
            opt(g.many),
            opt(g.medium),
            opt(g.few),
            opt(s.metrics.tail_accuracy())
        );
    }
    out
}

fn parse_cell<T: std::str::FromStr>(cell: &str, line: usize) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| Error::Data(format!("unparsable CSV cell {cell:?} on line {line}")))
}

/// Rebuild metrics from a per-class table and a confusion table.
pub fn metrics_from_csv(per_class: &str, confusion: &str) -> Result<Metrics> {
    let mut train_counts = Vec::new();
    for (i, line) in per_class.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 7 {
            return Err(Error::Data(format!("per-class CSV line {} has {} cells", i + 1, cells.len())));
        }
        train_counts.push(parse_cell::<usize>(cells[cells.len() - 4], i + 1)?);
    }
    let mut rows = Vec::new();
    for (i, line) in confusion.lines().enumerate().skip(1) {
        let row = line
            .split(',')
            .skip(1)
            .map(|c| parse_cell::<u64>(c, i + 1))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Metrics::from_confusion(rows, train_counts)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// `(phase, arm)`
type CurveKey = (String, String);

/// Validation accuracy against step, one polyline per (phase, arm). Phase-II
/// steps are placed after the last Phase-I epoch.
pub fn learning_curve_svg(runs: &[RunRecord]) -> String {
    let (w, h, margin) = (640.0, 360.0, 48.0);
    let mut series: Vec<(CurveKey, Vec<(f64, f64)>)> = Vec::new();
    for run in runs {
        for e in &run.events {
            let key = (e.phase.clone(), e.arm.clone());
            let pos = match series.iter().position(|(k, _)| *k == key) {
                Some(p) => p,
                None => {
                    series.push((key, Vec::new()));
                    series.len() - 1
                }
            };
            series[pos].1.push((e.step as f64, e.val_accuracy));
        }
    }
    // Phase-II runs start where Phase-I ends, in units of epochs.
    let p1_len = series
        .iter()
        .filter(|((p, _), _)| p == "phase1")
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0 + 1.0))
        .fold(0.0f64, f64::max);
    let p2_span = series
        .iter()
        .filter(|((p, _), _)| p != "phase1")
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(0.0f64, f64::max);
    let p2_scale = if p2_span > 0.0 { p1_len.max(1.0) * 0.5 / p2_span } else { 0.0 };
    let x_max = p1_len + p2_span * p2_scale;
    let sx = |x: f64| margin + x / x_max.max(1.0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - y * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>
<text x="{m}" y="{t}" font-size="12">validation accuracy</text>"#,
        m = margin,
        b = h - margin,
        r = w - margin,
        t = margin - 8.0
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{tick}</text>"#,
            margin - 4.0,
            sy(tick) + 3.0
        );
    }
    if p2_span > 0.0 {
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            margin,
            h - margin,
            x = sx(p1_len)
        );
    }
    for (i, ((phase, arm), pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let x = if phase == "phase1" { x + 1.0 } else { p1_len + x * p2_scale };
                format!("{:.1},{:.1}", sx(x), sy(y))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{phase} {arm}</title></polyline>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{phase} {arm}</text>"#,
            w - margin - 120.0,
            margin + 14.0 * (i as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap of a square matrix. Non-negative matrices use a white-to-blue
/// scale; signed ones use red for negative and blue for positive.
pub fn heatmap_svg(title: &str, matrix: &[Vec<i64>]) -> String {
    let n = matrix.len();
    let cell = 28.0;
    let margin = 40.0;
    let size = margin * 2.0 + cell * n as f64;
    let max_abs = matrix.iter().flatten().map(|v| v.unsigned_abs()).max().unwrap_or(0).max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" viewBox="0 0 {size} {size}">
<rect width="{size}" height="{size}" fill="white"/>
<text x="{margin}" y="{}" font-size="12">{title}</text>"#,
        margin - 16.0
    );
    for (r, row) in matrix.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = v.unsigned_abs() as f64 / max_abs;
            let fade = (255.0 * (1.0 - t)).round() as u8;
            let fill = if v < 0 {
                format!("#ff{fade:02x}{fade:02x}")
            } else {
                format!("#{fade:02x}{fade:02x}ff")
            };
            let (x, y) = (margin + c as f64 * cell, margin + r as f64 * cell);
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#dddddd"/><text x="{}" y="{}" font-size="9" text-anchor="middle">{v}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 3.0
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn to_signed(m: &Metrics) -> Vec<Vec<i64>> {
    m.confusion.iter().map(|r| r.iter().map(|&v| v as i64).collect()).collect()
}

/// Write the requested artifacts into `dir` and return their paths.
///
/// Every Phase-II stage is diffed against the first Phase-I stage.
pub fn emit_report(input: &ReportInput, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    if input.stages.is_empty() {
        return Err(Error::Data("nothing to report: no evaluated stages".into()));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    let baseline = input.stages.iter().find(|s| s.phase == "phase1");
    for f in formats {
        match f {
            ReportFormat::Csv => {
                for s in input.stages {
                    put(format!("per_class_{}.csv", s.label), per_class_csv(input.class_names, &s.metrics))?;
                    put(format!("confusion_{}.csv", s.label), confusion_csv(&s.metrics))?;
                }
                put("groups.csv".into(), groups_csv(input.stages))?;
                if let Some(sc) = input.scatter {
                    let mut csv = String::from("x,y,class_id,kind,empty_support\n");
                    for p in &sc.points {
                        let kind = match p.kind {
                            crate::metrics::FeatureKind::Specific => "specific",
                            crate::metrics::FeatureKind::Generic => "generic",
                        };
                        let _ = writeln!(csv, "{},{},{},{kind},{}", p.x, p.y, p.class_id, p.empty_support);
                    }
                    put("scatter.csv".into(), csv)?;
                    put(
                        "scatter_notes.txt".into(),
                        "Each point is one training sample's pre-pooling features averaged over the \
                         class-specific (or class-generic) region of its ground-truth CAM, projected \
                         onto the top two principal components of all points. Samples whose region is \
                         empty contribute a zero vector and are flagged.\n"
                            .into(),
                    )?;
                }
            }
            ReportFormat::Json => {
                let summaries: Vec<StageSummary> = input.stages.iter().map(StageSummary::of).collect();
                put("summary.json".into(), summary_json(&summaries)?)?;
                if let Some(sc) = input.scatter {
                    put("scatter.json".into(), serde_json::to_string_pretty(sc)? + "\n")?;
                }
            }
            ReportFormat::Svg => {
                put("learning_curve.svg".into(), learning_curve_svg(input.runs))?;
                for s in input.stages {
                    put(
                        format!("confusion_{}.svg", s.label),
                        heatmap_svg(&format!("confusion: {}", s.label), &to_signed(&s.metrics)),
                    )?;
                }
                if let Some(base) = baseline {
                    for s in input.stages.iter().filter(|s| s.phase != "phase1") {
                        let diff = diff_confusion(&base.metrics, &s.metrics)?;
                        put(
                            format!("diff_{}.svg", s.label),
                            heatmap_svg(&format!("change after phase2: {}", s.label), &diff),
                        )?;
                    }
                }
            }
        }
    }
    Ok(written)
}
