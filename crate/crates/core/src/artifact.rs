//! The shared on-disk container for trained predictors.
//!
//! An artifact is a text header followed by a JSON payload:
//!
//! ```text
//! #oxiwarn-model v1
//! kind: gbt
//! seed: 7
//! data_fingerprint: 9f2c4e1ab00d377e
//! window_width: 60
//! means: 96.8 96.79 ...
//! stds: 1.42 1.44 ...
//! hyperparameters: {"eta":0.1,...}
//! ---
//! {"kind":"gbt","model":{...}}
//! ```
//!
//! Every number is rendered as decimal text with the shortest representation
//! that round-trips the underlying 64-bit float, and parsed back exactly, so
//! artifacts are byte-identical across platforms — there is no binary
//! encoding and therefore no endianness concern. The `hyperparameters` line
//! is informational (the payload is authoritative); it is regenerated from
//! the payload on save, which keeps save(load(file)) byte-identical to file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelError, ModelKind, TrainedModel};
use crate::pipeline::NormalizationStats;

pub const ARTIFACT_MAGIC: &str = "#oxiwarn-model v1";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed artifact (line {line}): {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn malformed(line: usize, reason: impl Into<String>) -> ArtifactError {
    ArtifactError::Malformed {
        line,
        reason: reason.into(),
    }
}

/// A trained predictor plus everything needed to score raw windows with it:
/// the normalization statistics it was trained against, the training seed,
/// and a fingerprint of the prepared data it saw.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorArtifact {
    pub seed: u64,
    /// Hex digest prefix of the prepared training data.
    pub data_fingerprint: String,
    pub stats: NormalizationStats,
    pub model: TrainedModel,
}

impl PredictorArtifact {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    /// Risk for one raw imputed window (physical SpO₂ values).
    pub fn predict(&self, raw_window: &[f64]) -> Result<f64, ModelError> {
        self.model.predict(raw_window, &self.stats)
    }

    pub fn predict_batch(&self, raw_windows: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        self.model.predict_batch(raw_windows, &self.stats)
    }
}

/// 16-hex-character prefix of the SHA-256 digest, used to tie artifacts to
/// the prepared data they were trained on.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn hyperparameters_json(model: &TrainedModel) -> Result<String, ArtifactError> {
    let json = match model {
        TrainedModel::BaseRate(_) => "{}".to_string(),
        TrainedModel::Ar1(m) => format!(
            "{{\"threshold\":{},\"horizon\":{}}}",
            m.threshold, m.horizon
        ),
        TrainedModel::Logistic(m) => format!("{{\"n_features\":{}}}", m.weights.len()),
        TrainedModel::Gbt(m) => serde_json::to_string(&m.config)
            .map_err(|e| malformed(0, format!("hyperparameter encoding failed: {e}")))?,
        TrainedModel::Cnn(m) => serde_json::to_string(&m.config)
            .map_err(|e| malformed(0, format!("hyperparameter encoding failed: {e}")))?,
        TrainedModel::Lstm(m) => serde_json::to_string(&m.config)
            .map_err(|e| malformed(0, format!("hyperparameter encoding failed: {e}")))?,
    };
    Ok(json)
}

pub fn write_artifact<W: Write>(
    artifact: &PredictorArtifact,
    mut out: W,
) -> Result<(), ArtifactError> {
    let join = |values: &[f64]| {
        values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    writeln!(out, "{ARTIFACT_MAGIC}")?;
    writeln!(out, "kind: {}", artifact.kind().as_str())?;
    writeln!(out, "seed: {}", artifact.seed)?;
    writeln!(out, "data_fingerprint: {}", artifact.data_fingerprint)?;
    writeln!(out, "window_width: {}", artifact.stats.width())?;
    writeln!(out, "means: {}", join(artifact.stats.means()))?;
    writeln!(out, "stds: {}", join(artifact.stats.stds()))?;
    writeln!(out, "hyperparameters: {}", hyperparameters_json(&artifact.model)?)?;
    writeln!(out, "---")?;
    let payload = serde_json::to_string(&artifact.model)
        .map_err(|e| malformed(0, format!("payload encoding failed: {e}")))?;
    writeln!(out, "{payload}")?;
    Ok(())
}

pub fn save_artifact(artifact: &PredictorArtifact, path: &Path) -> Result<(), ArtifactError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_artifact(artifact, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_artifact<R: Read>(mut reader: R) -> Result<PredictorArtifact, ArtifactError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    parse_artifact(&text)
}

pub fn load_artifact(path: &Path) -> Result<PredictorArtifact, ArtifactError> {
    read_artifact(BufReader::new(File::open(path)?))
}

fn parse_artifact(text: &str) -> Result<PredictorArtifact, ArtifactError> {
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty artifact"))?;
    if magic != ARTIFACT_MAGIC {
        return Err(malformed(
            1,
            format!("expected {ARTIFACT_MAGIC:?}, got {magic:?}"),
        ));
    }

    let mut kind: Option<ModelKind> = None;
    let mut seed: Option<u64> = None;
    let mut fingerprint: Option<String> = None;
    let mut width: Option<usize> = None;
    let mut means: Option<Vec<f64>> = None;
    let mut stds: Option<Vec<f64>> = None;
    let mut saw_hyperparameters = false;
    let mut header_end = None;

    for (idx, line) in lines.by_ref() {
        let line_no = idx + 1;
        if line == "---" {
            header_end = Some(line_no);
            break;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| malformed(line_no, format!("expected `key: value`, got {line:?}")))?;
        let parse_vec = |value: &str| -> Result<Vec<f64>, ArtifactError> {
            value
                .split(' ')
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| malformed(line_no, format!("bad number {tok:?}: {e}")))
                })
                .collect()
        };
        match key {
            "kind" => {
                kind = Some(ModelKind::parse(value).ok_or_else(|| {
                    malformed(line_no, format!("unknown model kind {value:?}"))
                })?)
            }
            "seed" => {
                seed = Some(value.parse().map_err(|e| {
                    malformed(line_no, format!("bad seed {value:?}: {e}"))
                })?)
            }
            "data_fingerprint" => fingerprint = Some(value.to_string()),
            "window_width" => {
                width = Some(value.parse().map_err(|e| {
                    malformed(line_no, format!("bad window_width {value:?}: {e}"))
                })?)
            }
            "means" => means = Some(parse_vec(value)?),
            "stds" => stds = Some(parse_vec(value)?),
            "hyperparameters" => saw_hyperparameters = true,
            other => return Err(malformed(line_no, format!("unknown key {other:?}"))),
        }
    }

    let header_end =
        header_end.ok_or_else(|| malformed(0, "missing `---` payload separator"))?;
    let kind = kind.ok_or_else(|| malformed(0, "missing kind"))?;
    let seed = seed.ok_or_else(|| malformed(0, "missing seed"))?;
    let fingerprint = fingerprint.ok_or_else(|| malformed(0, "missing data_fingerprint"))?;
    let width = width.ok_or_else(|| malformed(0, "missing window_width"))?;
    let means = means.ok_or_else(|| malformed(0, "missing means"))?;
    let stds = stds.ok_or_else(|| malformed(0, "missing stds"))?;
    if !saw_hyperparameters {
        return Err(malformed(0, "missing hyperparameters"));
    }
    if means.len() != width || stds.len() != width {
        return Err(malformed(
            0,
            format!(
                "window_width {width} does not match {} means / {} stds",
                means.len(),
                stds.len()
            ),
        ));
    }
    let stats = NormalizationStats::new(means, stds)
        .map_err(|e| malformed(0, format!("bad normalization stats: {e}")))?;

    let payload: String = lines.map(|(_, l)| l).collect::<Vec<_>>().join("\n");
    if payload.trim().is_empty() {
        return Err(malformed(header_end, "missing model payload"));
    }
    let model: TrainedModel = serde_json::from_str(payload.trim())
        .map_err(|e| malformed(header_end + 1, format!("bad model payload: {e}")))?;
    if model.kind() != kind {
        return Err(malformed(
            0,
            format!(
                "header kind {} does not match payload kind {}",
                kind.as_str(),
                model.kind().as_str()
            ),
        ));
    }

    Ok(PredictorArtifact {
        seed,
        data_fingerprint: fingerprint,
        stats,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{fit_ar1, train_logistic, Ar1Config, BaseRateModel, LogisticConfig};
    use crate::gbt::{train_gbt, GBTConfig};
    use crate::neural::{init_cnn_params, init_lstm_params, CnnConfig, CnnModel, LstmConfig, LstmModel};
    use crate::pipeline::apply_normalization;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn demo_stats(width: usize) -> NormalizationStats {
        let means = vec![96.5; width];
        let stds = vec![1.25; width];
        NormalizationStats::new(means, stds).unwrap()
    }

    fn demo_windows(n: usize, width: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..width).map(|_| rng.gen_range(90.0..100.0)).collect();
            ys.push(u8::from(row[width - 1] < 95.0));
            xs.push(row);
        }
        (xs, ys)
    }

    fn all_kinds_artifacts() -> Vec<PredictorArtifact> {
        let width = 12;
        let stats = demo_stats(width);
        let (raw, labels) = demo_windows(80, width, 3);
        let normalized: Vec<Vec<f64>> = raw
            .iter()
            .map(|w| apply_normalization(w, &stats).unwrap())
            .collect();

        let ar1 = fit_ar1(&raw, &labels, &Ar1Config { threshold: 95.0, ..Ar1Config::default() }).unwrap();
        let (logistic, _) = train_logistic(
            &normalized,
            &labels,
            &LogisticConfig { epochs: 40, ..LogisticConfig::default() },
        )
        .unwrap();
        let gbt = train_gbt(
            &normalized,
            &labels,
            &GBTConfig { n_trees: 5, max_depth: 3, ..GBTConfig::default() },
        )
        .unwrap();
        let cnn_cfg = CnnConfig {
            input_len: width,
            layer_filters: vec![2, 3],
            ..CnnConfig::default()
        };
        let lstm_cfg = LstmConfig {
            input_len: width,
            hidden_sizes: vec![3, 4],
            ..LstmConfig::default()
        };
        let models = vec![
            TrainedModel::BaseRate(BaseRateModel { rate: 0.25 }),
            TrainedModel::Ar1(ar1),
            TrainedModel::Logistic(logistic),
            TrainedModel::Gbt(gbt),
            TrainedModel::Cnn(CnnModel {
                params: init_cnn_params(&cnn_cfg, 5),
                config: cnn_cfg,
            }),
            TrainedModel::Lstm(LstmModel {
                params: init_lstm_params(&lstm_cfg, 5),
                config: lstm_cfg,
            }),
        ];
        models
            .into_iter()
            .map(|model| PredictorArtifact {
                seed: 7,
                data_fingerprint: fingerprint_bytes(b"demo-cache"),
                stats: stats.clone(),
                model,
            })
            .collect()
    }

    #[test]
    fn artifacts_round_trip_bit_exactly_for_every_kind() {
        let (raw, _) = demo_windows(5, 12, 9);
        for artifact in all_kinds_artifacts() {
            let mut bytes = Vec::new();
            write_artifact(&artifact, &mut bytes).unwrap();
            let loaded = read_artifact(bytes.as_slice()).unwrap();
            assert_eq!(loaded, artifact, "{:?}", artifact.kind());

            let mut bytes2 = Vec::new();
            write_artifact(&loaded, &mut bytes2).unwrap();
            assert_eq!(bytes, bytes2, "{:?} bytes changed", artifact.kind());

            for w in &raw {
                let a = artifact.predict(w).unwrap();
                let b = loaded.predict(w).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "{:?}", artifact.kind());
            }
        }
    }

    #[test]
    fn dispatch_normalizes_for_all_but_ar1() {
        let (raw, _) = demo_windows(6, 12, 31);
        for artifact in all_kinds_artifacts() {
            let got: Vec<f64> = raw.iter().map(|w| artifact.predict(w).unwrap()).collect();
            let batch = artifact.predict_batch(&raw).unwrap();
            for (a, b) in got.iter().zip(&batch) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (w, got) in raw.iter().zip(&got) {
                let expected = match &artifact.model {
                    TrainedModel::BaseRate(m) => m.predict(),
                    TrainedModel::Ar1(m) => m.predict(w),
                    other => {
                        let norm = apply_normalization(w, &artifact.stats).unwrap();
                        match other {
                            TrainedModel::Logistic(m) => m.predict(&norm).unwrap(),
                            TrainedModel::Gbt(m) => m.predict(&norm).unwrap(),
                            TrainedModel::Cnn(m) => m.predict(&norm).unwrap(),
                            TrainedModel::Lstm(m) => m.predict(&norm).unwrap(),
                            _ => unreachable!(),
                        }
                    }
                };
                assert_eq!(got.to_bits(), expected.to_bits(), "{:?}", artifact.kind());
            }
        }
    }

    #[test]
    fn malformed_artifacts_are_rejected() {
        let artifact = &all_kinds_artifacts()[0];
        let mut bytes = Vec::new();
        write_artifact(artifact, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();

        let wrong_magic = text.replacen("v1", "v9", 1);
        assert!(matches!(
            parse_artifact(&wrong_magic),
            Err(ArtifactError::Malformed { line: 1, .. })
        ));

        let wrong_kind = text.replacen("kind: base_rate", "kind: gbt", 1);
        let err = parse_artifact(&wrong_kind).unwrap_err();
        assert!(err.to_string().contains("does not match payload"), "{err}");

        let unknown_key = text.replacen("seed:", "sead:", 1);
        assert!(parse_artifact(&unknown_key).is_err());

        let truncated = &text[..text.find("---").unwrap() + 4];
        assert!(parse_artifact(truncated).is_err());

        let broken_payload = format!("{}{}", &text[..text.len() - 10], "garbage\n");
        assert!(parse_artifact(&broken_payload).is_err());
    }

    #[test]
    fn save_and_load_work_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.art");
        let artifact = all_kinds_artifacts().remove(3);
        save_artifact(&artifact, &path).unwrap();
        let loaded = load_artifact(&path).unwrap();
        assert_eq!(loaded, artifact);
        assert_eq!(loaded.kind(), ModelKind::Gbt);
    }

    #[test]
    fn fingerprints_are_stable_and_content_sensitive() {
        let a = fingerprint_bytes(b"hello");
        assert_eq!(a, fingerprint_bytes(b"hello"));
        assert_eq!(a.len(), 16);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(a, fingerprint_bytes(b"hello!"));
    }
}
