//! On-disk cache for labeling decisions and normalization statistics.
//!
//! The label cache is a CSV, one row per labeled time point:
//!
//! ```text
//! case_id,minute,label,included,split
//! case00000,0,0,1,train
//! ```
//!
//! `label` and `included` are 0/1 flags; `split` is one of `train`,
//! `validation`, `test`. The normalization sidecar is key-value text with
//! space-separated numbers:
//!
//! ```text
//! window_width: 60
//! means: 96.91 96.90 ...
//! stds: 1.52 1.54 ...
//! ```
//!
//! Numbers use shortest-round-trip formatting, so reading a written file
//! reproduces the exact original values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{NormalizationStats, PipelineError, Split};

const CACHE_HEADER: &str = "case_id,minute,label,included,split";

/// One labeled time point as cached on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedPoint {
    pub case_id: String,
    pub minute: usize,
    pub label: u8,
    pub included: bool,
    pub split: Split,
}

pub fn write_label_cache<W: Write>(points: &[CachedPoint], mut out: W) -> Result<(), PipelineError> {
    writeln!(out, "{CACHE_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.case_id,
            p.minute,
            p.label,
            u8::from(p.included),
            p.split.as_str()
        )?;
    }
    Ok(())
}

pub fn save_label_cache(points: &[CachedPoint], path: &Path) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_label_cache(points, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_label_cache<R: BufRead>(reader: R) -> Result<Vec<CachedPoint>, PipelineError> {
    let parse_err = |line: usize, reason: String| PipelineError::Parse { line, reason };
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(first))) if first == CACHE_HEADER => {}
        Some((_, Ok(first))) => {
            return Err(parse_err(1, format!("expected header {CACHE_HEADER:?}, got {first:?}")))
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(parse_err(1, "empty file".into())),
    }

    let mut points = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(line_no, format!("expected 5 fields, got {}", fields.len())));
        }
        let minute: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad minute {:?}: {e}", fields[1])))?;
        let label = match fields[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(line_no, format!("bad label {other:?}"))),
        };
        let included = match fields[3] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line_no, format!("bad included flag {other:?}"))),
        };
        let split = Split::parse(fields[4])
            .ok_or_else(|| parse_err(line_no, format!("bad split {:?}", fields[4])))?;
        points.push(CachedPoint {
            case_id: fields[0].to_string(),
            minute,
            label,
            included,
            split,
        });
    }
    Ok(points)
}

pub fn load_label_cache(path: &Path) -> Result<Vec<CachedPoint>, PipelineError> {
    read_label_cache(BufReader::new(File::open(path)?))
}

pub fn write_norm_stats<W: Write>(
    stats: &NormalizationStats,
    mut out: W,
) -> Result<(), PipelineError> {
    let join = |values: &[f64]| {
        values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    writeln!(out, "window_width: {}", stats.width())?;
    writeln!(out, "means: {}", join(stats.means()))?;
    writeln!(out, "stds: {}", join(stats.stds()))?;
    Ok(())
}

pub fn save_norm_stats(stats: &NormalizationStats, path: &Path) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_norm_stats(stats, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_norm_stats<R: BufRead>(reader: R) -> Result<NormalizationStats, PipelineError> {
    let parse_err = |line: usize, reason: String| PipelineError::Parse { line, reason };
    let mut width: Option<usize> = None;
    let mut means: Option<Vec<f64>> = None;
    let mut stds: Option<Vec<f64>> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| parse_err(line_no, format!("expected `key: value`, got {line:?}")))?;
        let parse_vec = |value: &str| -> Result<Vec<f64>, PipelineError> {
            value
                .split(' ')
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| parse_err(line_no, format!("bad number {tok:?}: {e}")))
                })
                .collect()
        };
        match key {
            "window_width" => {
                width = Some(value.parse().map_err(|e| {
                    parse_err(line_no, format!("bad window_width {value:?}: {e}"))
                })?)
            }
            "means" => means = Some(parse_vec(value)?),
            "stds" => stds = Some(parse_vec(value)?),
            other => return Err(parse_err(line_no, format!("unknown key {other:?}"))),
        }
    }

    let width = width.ok_or_else(|| parse_err(0, "missing window_width".into()))?;
    let means = means.ok_or_else(|| parse_err(0, "missing means".into()))?;
    let stds = stds.ok_or_else(|| parse_err(0, "missing stds".into()))?;
    if means.len() != width || stds.len() != width {
        return Err(PipelineError::InvalidInput(format!(
            "window_width {width} does not match {} means / {} stds",
            means.len(),
            stds.len()
        )));
    }
    NormalizationStats::new(means, stds)
}

pub fn load_norm_stats(path: &Path) -> Result<NormalizationStats, PipelineError> {
    read_norm_stats(BufReader::new(File::open(path)?))
}
