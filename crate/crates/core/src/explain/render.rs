//! Explanation plots: a CSV table and a self-contained SVG with the SpO₂
//! trace stacked above per-minute attribution bars.
//!
//! Output is fully deterministic — fixed canvas, fixed-precision
//! coordinates, no timestamps — so re-rendering identical inputs produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Attribution, ExplainError};

const CANVAS_W: f64 = 640.0;
const CANVAS_H: f64 = 480.0;
const PLOT_X0: f64 = 56.0;
const PLOT_X1: f64 = 616.0;
const TRACE_Y0: f64 = 44.0;
const TRACE_Y1: f64 = 224.0;
const BARS_Y0: f64 = 258.0;
const BARS_Y1: f64 = 438.0;

const TRACE_COLOR: &str = "#2c3e50";
const POS_COLOR: &str = "#c0392b";
const NEG_COLOR: &str = "#2980b9";

fn check_widths(raw_window: &[f64], attribution: &Attribution) -> Result<(), ExplainError> {
    if raw_window.len() != attribution.per_minute.len() {
        return Err(ExplainError::WidthMismatch {
            context: "attribution",
            got: attribution.per_minute.len(),
            want: raw_window.len(),
        });
    }
    if raw_window.is_empty() {
        return Err(ExplainError::WidthMismatch {
            context: "raw window",
            got: 0,
            want: 1,
        });
    }
    Ok(())
}

/// `minute_offset,spo2,attribution`, one row per minute, offset 0 = now.
pub fn render_csv<W: Write>(
    out: &mut W,
    raw_window: &[f64],
    attribution: &Attribution,
) -> Result<(), ExplainError> {
    check_widths(raw_window, attribution)?;
    let width = raw_window.len();
    writeln!(out, "minute_offset,spo2,attribution")?;
    for (i, (spo2, att)) in raw_window.iter().zip(&attribution.per_minute).enumerate() {
        writeln!(out, "{},{spo2},{att}", i as i64 - (width as i64 - 1))?;
    }
    Ok(())
}

/// Attribution labels: plain decimals in a readable range, scientific
/// notation outside it.
fn fmt_attr(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

struct Scale {
    lo: f64,
    hi: f64,
    y0: f64,
    y1: f64,
}

impl Scale {
    /// Screen y for a data value; `y0` is the top edge (data `hi`).
    fn y(&self, v: f64) -> f64 {
        self.y0 + (self.hi - v) / (self.hi - self.lo) * (self.y1 - self.y0)
    }
}

fn x_center(i: usize, width: usize) -> f64 {
    PLOT_X0 + (i as f64 + 0.5) / width as f64 * (PLOT_X1 - PLOT_X0)
}

/// Two stacked panels — the raw SpO₂ trace and the attribution bars — with
/// the predicted risk in the title.
pub fn render_svg<W: Write>(
    out: &mut W,
    raw_window: &[f64],
    attribution: &Attribution,
    risk: f64,
) -> Result<(), ExplainError> {
    check_widths(raw_window, attribution)?;
    let width = raw_window.len();

    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS_W}\" height=\"{CANVAS_H}\" \
         viewBox=\"0 0 {CANVAS_W} {CANVAS_H}\" font-family=\"monospace\" font-size=\"12\">"
    )?;
    writeln!(out, "<rect width=\"{CANVAS_W}\" height=\"{CANVAS_H}\" fill=\"white\"/>")?;
    writeln!(
        out,
        "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">predicted risk {risk:.4} — per-minute attribution (log-odds)</text>",
        CANVAS_W / 2.0
    )?;

    // Top panel: the SpO₂ trace.
    let data_lo = raw_window.iter().copied().fold(f64::INFINITY, f64::min);
    let data_hi = raw_window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let trace = Scale {
        lo: (data_lo - 1.0).floor().min(90.0),
        hi: (data_hi + 1.0).ceil().max(100.0),
        y0: TRACE_Y0,
        y1: TRACE_Y1,
    };
    writeln!(
        out,
        "<rect x=\"{PLOT_X0}\" y=\"{TRACE_Y0}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#bbbbbb\"/>",
        PLOT_X1 - PLOT_X0,
        TRACE_Y1 - TRACE_Y0
    )?;
    let mut grid = (trace.lo / 5.0).ceil() * 5.0;
    while grid <= trace.hi {
        let y = trace.y(grid);
        writeln!(
            out,
            "<line x1=\"{PLOT_X0}\" y1=\"{y:.2}\" x2=\"{PLOT_X1}\" y2=\"{y:.2}\" stroke=\"#eeeeee\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{grid:.0}</text>",
            PLOT_X0 - 6.0,
            y + 4.0
        )?;
        grid += 5.0;
    }
    let points: Vec<String> = raw_window
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{:.2},{:.2}", x_center(i, width), trace.y(*v)))
        .collect();
    writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{TRACE_COLOR}\" stroke-width=\"1.5\"/>",
        points.join(" ")
    )?;
    writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" transform=\"rotate(-90 16 {:.2})\" text-anchor=\"middle\">SpO2 (%)</text>",
        (TRACE_Y0 + TRACE_Y1) / 2.0,
        (TRACE_Y0 + TRACE_Y1) / 2.0
    )?;

    // Bottom panel: attribution bars, symmetric about zero.
    let amax = attribution
        .per_minute
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let bar_lim = if amax > 0.0 { amax * 1.05 } else { 1.0 };
    let bars = Scale {
        lo: -bar_lim,
        hi: bar_lim,
        y0: BARS_Y0,
        y1: BARS_Y1,
    };
    let zero_y = bars.y(0.0);
    writeln!(
        out,
        "<rect x=\"{PLOT_X0}\" y=\"{BARS_Y0}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#bbbbbb\"/>",
        PLOT_X1 - PLOT_X0,
        BARS_Y1 - BARS_Y0
    )?;
    writeln!(
        out,
        "<line x1=\"{PLOT_X0}\" y1=\"{zero_y:.2}\" x2=\"{PLOT_X1}\" y2=\"{zero_y:.2}\" stroke=\"#999999\"/>"
    )?;
    for (v, label_y) in [(bar_lim, BARS_Y0 + 4.0), (-bar_lim, BARS_Y1 + 4.0)] {
        writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{label_y:.2}\" text-anchor=\"end\">{}</text>",
            PLOT_X0 - 6.0,
            fmt_attr(v)
        )?;
    }
    let bar_w = (PLOT_X1 - PLOT_X0) / width as f64 * 0.8;
    for (i, v) in attribution.per_minute.iter().enumerate() {
        let x = x_center(i, width) - bar_w / 2.0;
        let (top, color) = if *v >= 0.0 {
            (bars.y(*v), POS_COLOR)
        } else {
            (zero_y, NEG_COLOR)
        };
        let height = (bars.y(*v) - zero_y).abs();
        writeln!(
            out,
            "<rect class=\"bar\" x=\"{x:.2}\" y=\"{top:.2}\" width=\"{bar_w:.2}\" height=\"{height:.2}\" fill=\"{color}\"/>"
        )?;
    }
    writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" transform=\"rotate(-90 16 {:.2})\" text-anchor=\"middle\">attribution</text>",
        (BARS_Y0 + BARS_Y1) / 2.0,
        (BARS_Y0 + BARS_Y1) / 2.0
    )?;

    // Shared x axis, offsets in minutes before now.
    let last = width as i64 - 1;
    let mut offset = -(last / 10) * 10;
    while offset <= 0 {
        let i = (offset + last) as usize;
        let x = x_center(i, width);
        writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{BARS_Y1}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#bbbbbb\"/>\
             <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{offset}</text>",
            BARS_Y1 + 4.0,
            BARS_Y1 + 18.0
        )?;
        offset += 10;
    }
    writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">minutes before now</text>",
        (PLOT_X0 + PLOT_X1) / 2.0,
        BARS_Y1 + 34.0
    )?;
    writeln!(out, "</svg>")?;
    Ok(())
}

/// Write both plot files next to `path_stem` (extensions `.csv`, `.svg`);
/// returns the two paths.
pub fn render_explanation(
    path_stem: &Path,
    raw_window: &[f64],
    attribution: &Attribution,
    risk: f64,
) -> Result<(PathBuf, PathBuf), ExplainError> {
    check_widths(raw_window, attribution)?;
    let csv_path = path_stem.with_extension("csv");
    let svg_path = path_stem.with_extension("svg");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    render_csv(&mut csv, raw_window, attribution)?;
    csv.flush()?;
    let mut svg = BufWriter::new(File::create(&svg_path)?);
    render_svg(&mut svg, raw_window, attribution, risk)?;
    svg.flush()?;
    Ok((csv_path, svg_path))
}
