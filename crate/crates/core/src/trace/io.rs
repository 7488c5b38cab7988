//! Trace CSV format.
//!
//! One row per recorded minute, grouped by case, minutes ascending and
//! gap-free from zero:
//!
//! ```text
//! case_id,minute,spo2
//! case00000,0,97.5
//! case00000,1,
//! case00000,2,96.25
//! ```
//!
//! An empty `spo2` field marks a missing reading. Values carry at most two
//! fractional digits with trailing zeros trimmed, so a written file reloads
//! to bit-identical traces.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{SpO2Trace, TraceError, SPO2_MAX, SPO2_MIN};

const HEADER: &str = "case_id,minute,spo2";

/// Renders an SpO2 value with at most two fractional digits.
fn format_spo2(v: f64) -> String {
    let mut s = format!("{v:.2}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

pub fn write_traces<W: Write>(traces: &[SpO2Trace], mut out: W) -> Result<(), TraceError> {
    writeln!(out, "{HEADER}")?;
    for trace in traces {
        for (minute, sample) in trace.samples().iter().enumerate() {
            match sample {
                Some(v) => writeln!(out, "{},{},{}", trace.case_id(), minute, format_spo2(*v))?,
                None => writeln!(out, "{},{},", trace.case_id(), minute)?,
            }
        }
    }
    Ok(())
}

pub fn save_traces(traces: &[SpO2Trace], path: &Path) -> Result<(), TraceError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_traces(traces, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_traces<R: BufRead>(reader: R) -> Result<Vec<SpO2Trace>, TraceError> {
    let parse_err = |line: usize, reason: String| TraceError::Parse { line, reason };

    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(first))) if first == HEADER => {}
        Some((_, Ok(first))) => {
            return Err(parse_err(1, format!("expected header {HEADER:?}, got {first:?}")))
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(parse_err(1, "empty file".into())),
    }

    let mut traces: Vec<SpO2Trace> = Vec::new();
    let mut current: Option<(String, Vec<Option<f64>>)> = None;
    let mut finished: Vec<String> = Vec::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            return Err(parse_err(line_no, "blank line".into()));
        }
        let mut fields = line.split(',');
        let (case_id, minute_str, value_str) =
            match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => return Err(parse_err(line_no, "expected exactly 3 fields".into())),
            };

        let minute: usize = minute_str
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad minute {minute_str:?}: {e}")))?;
        let value = if value_str.is_empty() {
            None
        } else {
            let v: f64 = value_str
                .parse()
                .map_err(|e| parse_err(line_no, format!("bad spo2 {value_str:?}: {e}")))?;
            if !v.is_finite() || !(SPO2_MIN..=SPO2_MAX).contains(&v) {
                return Err(parse_err(
                    line_no,
                    format!("spo2 {value_str:?} outside [{SPO2_MIN}, {SPO2_MAX}]"),
                ));
            }
            Some(v)
        };

        let start_new = match &current {
            Some((id, _)) => id != case_id,
            None => true,
        };
        if start_new {
            if let Some((id, samples)) = current.take() {
                finished.push(id.clone());
                traces.push(SpO2Trace::new(id, samples)?);
            }
            if finished.iter().any(|id| id == case_id) {
                return Err(parse_err(
                    line_no,
                    format!("case {case_id:?} reappears after other cases"),
                ));
            }
            current = Some((case_id.to_string(), Vec::new()));
        }

        let samples = &mut current.as_mut().expect("current case set above").1;
        if minute != samples.len() {
            return Err(parse_err(
                line_no,
                format!("case {case_id:?}: expected minute {}, got {minute}", samples.len()),
            ));
        }
        samples.push(value);
    }

    if let Some((id, samples)) = current.take() {
        traces.push(SpO2Trace::new(id, samples)?);
    }
    Ok(traces)
}

pub fn load_traces(path: &Path) -> Result<Vec<SpO2Trace>, TraceError> {
    read_traces(BufReader::new(File::open(path)?))
}
