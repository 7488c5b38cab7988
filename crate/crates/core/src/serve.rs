//! Streaming inference over a line-delimited JSON protocol.
//!
//! One request per line: `{"session": "a", "minute": 3, "spo2": 97.5}`,
//! with `spo2` null for a missing reading. Each accepted sample yields one
//! response line `{"session", "minute", "risk"}`, plus the three most
//! influential window minutes when the server runs with attribution
//! enabled. A session keeps only its most recent hour of samples; the
//! window it scores is reconstructed with exactly the batch pipeline's
//! imputation and boundary rules, so streamed risks are bit-identical to
//! batch predictions on the same data.
//!
//! Protocol-level problems never tear down the stream: a malformed line is
//! answered with an error object echoing the line, an out-of-order minute
//! with an error naming the session, and in both cases state is unchanged.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::PredictorArtifact;
use crate::explain::{explain_window, BackgroundSet, ExplainError};
use crate::model::ModelKind;
use crate::pipeline::{impute_window, PipelineError, DEFAULT_FILL_SPO2};
use crate::trace::{SPO2_MAX, SPO2_MIN};

/// How many attributed minutes a response carries.
const TOP_ATTRIBUTIONS: usize = 3;

/// How often a blocked connection thread re-checks the shutdown flag.
const READ_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("attribution is not supported for the {} model", .0.as_str())]
    UnsupportedAttribution(ModelKind),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    session: String,
    minute: u64,
    /// `null` means the minute's reading is missing; the key itself is
    /// still required, so dropped fields are caught instead of silently
    /// reading as "no sample".
    #[serde(deserialize_with = "nullable_reading")]
    spo2: Option<f64>,
}

fn nullable_reading<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    Option::<f64>::deserialize(d)
}

#[derive(Debug, Serialize)]
struct TopAttribution {
    /// Session minute the attributed sample was (or would have been) taken.
    minute: i64,
    value: f64,
}

#[derive(Debug, Serialize)]
struct Response {
    session: String,
    minute: u64,
    risk: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_attributions: Option<Vec<TopAttribution>>,
}

#[derive(Debug, Serialize)]
struct LineError {
    error: String,
    line: String,
}

#[derive(Debug, Serialize)]
struct SessionError {
    session: String,
    error: String,
}

/// One client stream's rolling state: the most recent hour of raw samples
/// (missing markers included) and the strictly increasing minute counter.
#[derive(Debug)]
pub struct Session {
    width: usize,
    slots: VecDeque<Option<f64>>,
    last_minute: Option<u64>,
}

impl Session {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            slots: VecDeque::with_capacity(width),
            last_minute: None,
        }
    }

    pub fn last_minute(&self) -> Option<u64> {
        self.last_minute
    }

    /// Number of buffered slots; never exceeds the window width.
    pub fn buffered(&self) -> usize {
        self.slots.len()
    }

    fn push_slot(&mut self, slot: Option<f64>) {
        if self.slots.len() == self.width {
            self.slots.pop_front();
        }
        self.slots.push_back(slot);
    }

    /// Accepts the next sample and returns the imputed window ending at
    /// `minute` — the same vector the batch pipeline extracts at that
    /// minute. Rejects non-increasing minutes without touching state.
    pub fn handle_sample(
        &mut self,
        minute: u64,
        spo2: Option<f64>,
    ) -> Result<Vec<f64>, String> {
        if let Some(last) = self.last_minute {
            if minute <= last {
                return Err(format!(
                    "out-of-order minute {minute}: already saw minute {last}"
                ));
            }
            // Skipped minutes are missing readings; only the last hour of
            // them can influence a window.
            let gap = (minute - last - 1).min(self.width as u64);
            for _ in 0..gap {
                self.push_slot(None);
            }
        }
        self.push_slot(spo2);
        self.last_minute = Some(minute);

        // Pre-history counts as missing, exactly like window extraction at
        // the start of a recorded case.
        let mut slots = vec![None; self.width - self.slots.len()];
        slots.extend(self.slots.iter().copied());
        Ok(impute_window(&slots))
    }
}

/// The immutable, shareable scoring state: one loaded artifact and, when
/// attribution is on, the reference background it is explained against.
pub struct InferenceEngine {
    artifact: PredictorArtifact,
    /// A single "typical healthy hour" reference window; attribution in the
    /// stream has no training cache to sample from, so the baseline is the
    /// constant default-fill reading.
    background: Option<BackgroundSet>,
}

impl InferenceEngine {
    pub fn new(artifact: PredictorArtifact, attrib: bool) -> Result<Self, ServeError> {
        let background = if attrib {
            match artifact.kind() {
                ModelKind::Gbt | ModelKind::Cnn | ModelKind::Lstm => {}
                other => return Err(ServeError::UnsupportedAttribution(other)),
            }
            let raw = vec![DEFAULT_FILL_SPO2; artifact.stats.width()];
            let normalized = crate::pipeline::apply_normalization(&raw, &artifact.stats)?;
            Some(BackgroundSet::new(vec![normalized]).expect("one window"))
        } else {
            None
        };
        Ok(Self { artifact, background })
    }

    pub fn artifact(&self) -> &PredictorArtifact {
        &self.artifact
    }

    pub fn window_width(&self) -> usize {
        self.artifact.stats.width()
    }

    fn top_attributions(
        &self,
        window: &[f64],
        minute: u64,
        background: &BackgroundSet,
    ) -> Result<Vec<TopAttribution>, String> {
        let attribution =
            explain_window(&self.artifact.model, window, &self.artifact.stats, background)
                .map_err(|e| e.to_string())?;
        let width = attribution.per_minute.len();
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|a, b| {
            let (va, vb) = (attribution.per_minute[*a], attribution.per_minute[*b]);
            vb.abs()
                .partial_cmp(&va.abs())
                .expect("attributions are finite")
                .then(b.cmp(a))
        });
        Ok(order
            .into_iter()
            .take(TOP_ATTRIBUTIONS)
            .map(|i| TopAttribution {
                minute: minute as i64 - (width as i64 - 1 - i as i64),
                value: attribution.per_minute[i],
            })
            .collect())
    }

    /// Processes one request line against the connection's session map.
    /// Always produces exactly one response line.
    pub fn handle_line(&self, sessions: &mut HashMap<String, Session>, line: &str) -> String {
        let request: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                return respond(&LineError {
                    error: format!("malformed request: {e}"),
                    line: line.to_string(),
                })
            }
        };
        if let Some(v) = request.spo2 {
            if !(SPO2_MIN..=SPO2_MAX).contains(&v) {
                return respond(&SessionError {
                    session: request.session,
                    error: format!("spo2 {v} outside [{SPO2_MIN}, {SPO2_MAX}]"),
                });
            }
        }

        let session = sessions
            .entry(request.session.clone())
            .or_insert_with(|| Session::new(self.window_width()));
        let window = match session.handle_sample(request.minute, request.spo2) {
            Ok(w) => w,
            Err(error) => {
                return respond(&SessionError {
                    session: request.session,
                    error,
                })
            }
        };

        let risk = match self.artifact.predict(&window) {
            Ok(r) => r,
            Err(e) => {
                return respond(&SessionError {
                    session: request.session,
                    error: format!("prediction failed: {e}"),
                })
            }
        };
        let top_attributions = match &self.background {
            Some(bg) => match self.top_attributions(&window, request.minute, bg) {
                Ok(t) => Some(t),
                Err(error) => {
                    return respond(&SessionError {
                        session: request.session,
                        error,
                    })
                }
            },
            None => None,
        };
        respond(&Response {
            session: request.session,
            minute: request.minute,
            risk,
            top_attributions,
        })
    }
}

/// Serializes one response struct; infallible for the types used here.
fn respond<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("response structs always serialize")
}

/// Serves one byte stream (a socket or stdio) to completion: one response
/// line per request line, flushed as it is produced. Returns when the
/// reader reaches end of input.
pub fn serve_stream<R: BufRead, W: Write>(
    engine: &InferenceEngine,
    reader: R,
    mut writer: W,
) -> Result<(), ServeError> {
    let mut sessions = HashMap::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = engine.handle_line(&mut sessions, &line);
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

fn serve_connection(
    engine: &InferenceEngine,
    stream: TcpStream,
    shutdown: &AtomicBool,
) -> Result<(), ServeError> {
    stream.set_read_timeout(Some(READ_POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut sessions = HashMap::new();
    let mut line = String::new();
    loop {
        if shutdown.load(Ordering::Relaxed) {
            return Ok(());
        }
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => return Ok(()),
            Ok(_) => {
                let trimmed = line.trim_end_matches(['\n', '\r']);
                if trimmed.is_empty() {
                    continue;
                }
                let response = engine.handle_line(&mut sessions, trimmed);
                writer.write_all(response.as_bytes())?;
                writer.write_all(b"\n")?;
                writer.flush()?;
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Accepts connections until `shutdown` is set, one thread per connection;
/// in-flight responses are flushed before their threads exit. The engine is
/// shared read-only; every connection owns its sessions.
pub fn run_server(
    engine: Arc<InferenceEngine>,
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
) -> Result<(), ServeError> {
    listener.set_nonblocking(true)?;
    let mut workers = Vec::new();
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let engine = Arc::clone(&engine);
                let shutdown = Arc::clone(&shutdown);
                workers.push(std::thread::spawn(move || {
                    // A failed connection only affects that client.
                    let _ = serve_connection(&engine, stream, &shutdown);
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(READ_POLL);
            }
            Err(e) => return Err(e.into()),
        }
    }
    for worker in workers {
        let _ = worker.join();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::PredictorArtifact;
    use crate::baseline::{train_base_rate, train_logistic, LogisticConfig};
    use crate::gbt::{train_gbt, GBTConfig};
    use crate::model::TrainedModel;
    use crate::pipeline::{extract_window, fit_normalization, NormalizationStats};
    use crate::trace::SpO2Trace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_artifact(width: usize) -> PredictorArtifact {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let windows: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..width).map(|_| rng.gen_range(88.0..100.0)).collect())
            .collect();
        let labels: Vec<u8> = windows.iter().map(|w| u8::from(w[width - 1] < 93.0)).collect();
        let stats = fit_normalization(&windows).unwrap();
        let features: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| crate::pipeline::apply_normalization(w, &stats).unwrap())
            .collect();
        let (model, _) = train_logistic(&features, &labels, &LogisticConfig::default()).unwrap();
        PredictorArtifact {
            seed: 5,
            data_fingerprint: "feedfacecafebeef".into(),
            stats,
            model: TrainedModel::Logistic(model),
        }
    }

    fn gbt_artifact(width: usize) -> PredictorArtifact {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let windows: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..width).map(|_| rng.gen_range(88.0..100.0)).collect())
            .collect();
        let labels: Vec<u8> = windows.iter().map(|w| u8::from(w[width - 1] < 93.0)).collect();
        let stats = fit_normalization(&windows).unwrap();
        let features: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| crate::pipeline::apply_normalization(w, &stats).unwrap())
            .collect();
        let model = train_gbt(
            &features,
            &labels,
            &GBTConfig { n_trees: 10, max_depth: 3, ..GBTConfig::default() },
        )
        .unwrap();
        PredictorArtifact {
            seed: 6,
            data_fingerprint: "feedfacecafebeef".into(),
            stats,
            model: TrainedModel::Gbt(model),
        }
    }

    fn request(session: &str, minute: u64, spo2: Option<f64>) -> String {
        match spo2 {
            Some(v) => format!(r#"{{"session":"{session}","minute":{minute},"spo2":{v}}}"#),
            None => format!(r#"{{"session":"{session}","minute":{minute},"spo2":null}}"#),
        }
    }

    #[test]
    fn streamed_risks_are_bit_identical_to_batch_predictions() {
        let width = 12;
        let engine = InferenceEngine::new(tiny_artifact(width), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<Option<f64>> = (0..90)
            .map(|_| (rng.gen_range(0.0..1.0) > 0.1).then(|| rng.gen_range(88.0..100.0)))
            .collect();
        let trace = SpO2Trace::new("s", samples.clone()).unwrap();

        let mut sessions = HashMap::new();
        for (minute, sample) in samples.iter().enumerate() {
            let line = request("s", minute as u64, *sample);
            let response = engine.handle_line(&mut sessions, &line);
            let parsed: serde_json::Value = serde_json::from_str(&response).unwrap();
            let streamed = parsed["risk"].as_f64().unwrap();
            let window = extract_window(&trace, minute, width);
            let batch = engine.artifact().predict(&window).unwrap();
            assert_eq!(
                streamed.to_bits(),
                batch.to_bits(),
                "minute {minute}: {streamed} vs {batch}"
            );
        }
    }

    #[test]
    fn minute_gaps_count_as_missing_readings() {
        let width = 8;
        let engine = InferenceEngine::new(tiny_artifact(width), false).unwrap();
        let mut sessions = HashMap::new();
        // Samples at minutes 0 and 5; 1-4 are skipped.
        engine.handle_line(&mut sessions, &request("g", 0, Some(99.0)));
        let response = engine.handle_line(&mut sessions, &request("g", 5, Some(91.0)));
        let risk: serde_json::Value = serde_json::from_str(&response).unwrap();

        let trace = SpO2Trace::new(
            "g",
            vec![Some(99.0), None, None, None, None, Some(91.0)],
        )
        .unwrap();
        let window = extract_window(&trace, 5, width);
        let batch = engine.artifact().predict(&window).unwrap();
        assert_eq!(risk["risk"].as_f64().unwrap().to_bits(), batch.to_bits());
    }

    #[test]
    fn out_of_order_minutes_leave_state_untouched() {
        let width = 8;
        let engine = InferenceEngine::new(tiny_artifact(width), false).unwrap();
        let mut sessions = HashMap::new();
        engine.handle_line(&mut sessions, &request("s", 5, Some(97.0)));
        let before = sessions["s"].buffered();

        let err = engine.handle_line(&mut sessions, &request("s", 5, Some(90.0)));
        assert!(err.contains("out-of-order"), "{err}");
        assert!(err.contains("\"session\":\"s\""));
        assert_eq!(sessions["s"].buffered(), before);
        assert_eq!(sessions["s"].last_minute(), Some(5));

        // The session keeps working afterwards.
        let ok = engine.handle_line(&mut sessions, &request("s", 6, Some(97.0)));
        assert!(ok.contains("\"risk\":"), "{ok}");
    }

    #[test]
    fn malformed_lines_echo_the_input() {
        let engine = InferenceEngine::new(tiny_artifact(8), false).unwrap();
        let mut sessions = HashMap::new();
        for bad in [
            "not json",
            r#"{"session":"a","minute":3}"#,
            r#"{"session":"a","minute":-1,"spo2":97}"#,
            r#"{"session":"a","minute":3,"spo2":97,"extra":1}"#,
        ] {
            let response = engine.handle_line(&mut sessions, bad);
            let parsed: serde_json::Value = serde_json::from_str(&response).unwrap();
            assert!(parsed["error"].as_str().unwrap().contains("malformed"));
            assert_eq!(parsed["line"].as_str().unwrap(), bad);
        }
        assert!(sessions.is_empty(), "failed lines must not create sessions");

        let out_of_range = engine.handle_line(&mut sessions, &request("a", 0, Some(150.0)));
        assert!(out_of_range.contains("outside"));
        assert!(!sessions.contains_key("a"), "rejected value must not buffer");
    }

    #[test]
    fn interleaved_sessions_match_sequential_replays() {
        let width = 10;
        let engine = InferenceEngine::new(tiny_artifact(width), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let seq_a: Vec<Option<f64>> =
            (0..30).map(|_| Some(rng.gen_range(88.0..100.0))).collect();
        let seq_b: Vec<Option<f64>> =
            (0..30).map(|_| Some(rng.gen_range(88.0..100.0))).collect();

        let mut interleaved = HashMap::new();
        let mut got_a = Vec::new();
        let mut got_b = Vec::new();
        for minute in 0..30u64 {
            got_a.push(engine.handle_line(
                &mut interleaved,
                &request("a", minute, seq_a[minute as usize]),
            ));
            got_b.push(engine.handle_line(
                &mut interleaved,
                &request("b", minute, seq_b[minute as usize]),
            ));
        }

        for (name, seq, got) in [("a", &seq_a, &got_a), ("b", &seq_b, &got_b)] {
            let mut solo = HashMap::new();
            for minute in 0..30u64 {
                let want =
                    engine.handle_line(&mut solo, &request(name, minute, seq[minute as usize]));
                assert_eq!(got[minute as usize], want);
            }
        }
    }

    #[test]
    fn soak_keeps_the_buffer_bounded() {
        let width = 60;
        let engine = InferenceEngine::new(tiny_artifact(width), false).unwrap();
        let mut sessions = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut minute = 0u64;
        for _ in 0..1000 {
            minute += rng.gen_range(1..4);
            let line = request("soak", minute, Some(rng.gen_range(88.0..100.0)));
            let response = engine.handle_line(&mut sessions, &line);
            assert!(response.contains("\"risk\":"));
            assert!(sessions["soak"].buffered() <= width);
        }
        assert_eq!(sessions.len(), 1);
        assert!(sessions["soak"].slots.capacity() <= 2 * width, "buffer must not grow");
    }

    #[test]
    fn attribution_responses_carry_the_top_three_minutes() {
        let width = 12;
        let engine = InferenceEngine::new(gbt_artifact(width), true).unwrap();
        let mut sessions = HashMap::new();
        let mut response = String::new();
        for minute in 0..width as u64 {
            let value = if minute >= 9 { 89.0 } else { 98.5 };
            response = engine.handle_line(&mut sessions, &request("a", minute, Some(value)));
        }
        let parsed: serde_json::Value = serde_json::from_str(&response).unwrap();
        let top = parsed["top_attributions"].as_array().unwrap();
        assert_eq!(top.len(), 3);
        for entry in top {
            assert!(entry["minute"].as_i64().unwrap() <= 11);
            assert!(entry["value"].as_f64().unwrap().is_finite());
        }
        // Ordered by influence magnitude.
        let values: Vec<f64> = top
            .iter()
            .map(|e| e["value"].as_f64().unwrap().abs())
            .collect();
        assert!(values[0] >= values[1] && values[1] >= values[2]);
    }

    #[test]
    fn attribution_requires_a_supported_model() {
        let base = PredictorArtifact {
            seed: 0,
            data_fingerprint: "feedfacecafebeef".into(),
            stats: NormalizationStats::new(vec![97.0; 8], vec![1.0; 8]).unwrap(),
            model: TrainedModel::BaseRate(train_base_rate(&[0, 1, 0]).unwrap()),
        };
        assert!(matches!(
            InferenceEngine::new(base.clone(), true),
            Err(ServeError::UnsupportedAttribution(ModelKind::BaseRate))
        ));
        assert!(InferenceEngine::new(base, false).is_ok());
    }

    #[test]
    fn stream_loop_answers_every_line_and_stops_at_eof() {
        let engine = InferenceEngine::new(tiny_artifact(8), false).unwrap();
        let input = format!(
            "{}\n\n{}\nnot json\n{}\n",
            request("x", 0, Some(98.0)),
            request("x", 1, None),
            request("x", 2, Some(97.0)),
        );
        let mut output = Vec::new();
        serve_stream(&engine, input.as_bytes(), &mut output).unwrap();
        let text = String::from_utf8(output).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "{text}");
        assert!(lines[0].contains("\"minute\":0"));
        assert!(lines[1].contains("\"minute\":1"));
        assert!(lines[2].contains("malformed"));
        assert!(lines[3].contains("\"minute\":2"));
    }

    #[test]
    fn tcp_server_round_trips_and_shuts_down_gracefully() {
        let engine = Arc::new(InferenceEngine::new(tiny_artifact(8), false).unwrap());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let shutdown = Arc::new(AtomicBool::new(false));
        let server = {
            let (engine, shutdown) = (Arc::clone(&engine), Arc::clone(&shutdown));
            std::thread::spawn(move || run_server(engine, listener, shutdown))
        };

        let mut client = TcpStream::connect(addr).unwrap();
        client
            .write_all(format!("{}\n", request("t", 0, Some(98.0))).as_bytes())
            .unwrap();
        let mut reader = BufReader::new(client.try_clone().unwrap());
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        assert!(line.contains("\"risk\":"), "{line}");

        // The response matches the direct in-process path bit for bit.
        let mut sessions = HashMap::new();
        let direct = engine.handle_line(&mut sessions, &request("t", 0, Some(98.0)));
        assert_eq!(line.trim_end(), direct);

        drop(reader);
        drop(client);
        shutdown.store(true, Ordering::Relaxed);
        server.join().unwrap().unwrap();
    }
}
