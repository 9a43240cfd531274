//! Accuracy/fairness trade-off scatter, emitted as a standalone SVG plus a
//! companion CSV of the plotted values.
//!
//! Micro F1 runs along x and imparity along y, so better runs sit toward the
//! bottom right. A dashed horizontal line marks the reference (vanilla)
//! imparity: any point above it amplified bias relative to no mitigation.

use crate::ResultRecord;
use anyhow::{bail, Result};
use fairmi::train::Variant;
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct PlotPoint {
    pub label: String,
    pub micro_f1: f64,
    pub imparity: f64,
    pub reduction: Option<f64>,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct PlotData {
    pub points: Vec<PlotPoint>,
    /// (imparity value, pixel y) of the dashed reference line.
    pub reference_line: Option<(f64, f64)>,
    pub svg: String,
    pub csv: String,
}

fn point_label(record: &ResultRecord, index: usize) -> String {
    let sensitive = record.config.sensitive.join("+");
    if sensitive.is_empty() {
        format!("{}#{index}", record.variant)
    } else {
        format!("{}:{sensitive}", record.variant)
    }
}

/// Lay out the scatter for a set of result records.
pub fn build_plot(records: &[ResultRecord]) -> Result<PlotData> {
    if records.is_empty() {
        bail!("plot needs at least one result file");
    }

    // Reference line: an explicit vanilla record wins, otherwise the first
    // record that carries a vanilla reference.
    let reference = records
        .iter()
        .find(|r| r.variant == Variant::Vanilla)
        .map(|r| r.aggregate.imparity)
        .or_else(|| {
            records
                .iter()
                .find_map(|r| r.vanilla_reference.as_ref().map(|v| v.imparity))
        });

    let raw: Vec<(String, f64, f64, Option<f64>)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (
                point_label(r, i),
                r.aggregate.micro_f1,
                r.aggregate.imparity,
                r.aggregate.reduction,
            )
        })
        .collect();

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y_max = f64::NEG_INFINITY;
    for (_, micro, imp, _) in &raw {
        x_min = x_min.min(*micro);
        x_max = x_max.max(*micro);
        y_max = y_max.max(*imp);
    }
    if let Some(r) = reference {
        y_max = y_max.max(r);
    }
    // Pad the ranges so points never sit on the frame.
    let x_pad = ((x_max - x_min) * 0.15).max(0.02);
    let (x_min, x_max) = (x_min - x_pad, x_max + x_pad);
    let y_max = (y_max * 1.15).max(1e-3);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let to_x = |micro: f64| MARGIN_LEFT + (micro - x_min) / (x_max - x_min) * plot_w;
    let to_y = |imp: f64| MARGIN_TOP + (1.0 - imp / y_max) * plot_h;

    let points: Vec<PlotPoint> = raw
        .into_iter()
        .map(|(label, micro_f1, imparity, reduction)| PlotPoint {
            x: to_x(micro_f1),
            y: to_y(imparity),
            label,
            micro_f1,
            imparity,
            reduction,
        })
        .collect();
    let reference_line = reference.map(|r| (r, to_y(r)));

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#)?;
    // Axes.
    let x0 = MARGIN_LEFT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    writeln!(
        svg,
        r#"<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#
    )?;
    writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        WIDTH - MARGIN_RIGHT
    )?;
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">Micro F1</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    )?;
    writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 18 {})">Imparity</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    )?;
    // Axis ticks at the extremes.
    for (value, frac) in [(x_min, 0.0), (x_max, 1.0)] {
        let x = MARGIN_LEFT + frac * plot_w;
        writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-size="11">{value:.3}</text>"#,
            y0 + 18.0
        )?;
    }
    for (value, y) in [(0.0, to_y(0.0)), (y_max, to_y(y_max))] {
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{value:.3}</text>"#,
            x0 - 6.0,
            y + 4.0
        )?;
    }
    // Dashed reference line at the vanilla imparity.
    if let Some((value, y)) = reference_line {
        writeln!(
            svg,
            r#"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="gray" stroke-dasharray="6 4"/>"#,
            WIDTH - MARGIN_RIGHT
        )?;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11" fill="gray">reference {value:.4}</text>"#,
            WIDTH - MARGIN_RIGHT - 4.0,
            y - 6.0
        )?;
    }
    for p in &points {
        writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="crimson"/>"#,
            p.x, p.y
        )?;
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            p.x + 8.0,
            p.y + 4.0,
            p.label
        )?;
    }
    writeln!(svg, "</svg>")?;

    let mut csv = String::from("label,micro_f1,imparity,reduction\n");
    for p in &points {
        writeln!(
            csv,
            "{},{},{},{}",
            p.label,
            p.micro_f1,
            p.imparity,
            p.reduction.map_or(String::new(), |r| r.to_string())
        )?;
    }

    Ok(PlotData {
        points,
        reference_line,
        svg,
        csv,
    })
}

/// Read result files, write `tradeoff.svg` and `tradeoff.csv` under `out`.
pub fn cmd_plot(result_files: &[std::path::PathBuf], out: &Path) -> Result<PlotData> {
    let records: Vec<ResultRecord> = result_files
        .iter()
        .map(|p| ResultRecord::from_file(p))
        .collect::<Result<_>>()?;
    let plot = build_plot(&records)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("tradeoff.svg"), &plot.svg)?;
    std::fs::write(out.join("tradeoff.csv"), &plot.csv)?;
    Ok(plot)
}
