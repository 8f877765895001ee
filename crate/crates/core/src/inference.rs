//! Whole-session prediction by sliding windows with edge trimming, trace
//! files, and threshold-calibrated evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::dataset::{window_starts, SessionRecord};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{confusion, f1_macro, select_threshold, ConfusionCounts, Threshold};
use crate::model::ShineModel;
use crate::signal::seconds_to_samples;

/// Continuous per-sample speech scores for one session from one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    pub session_id: String,
    pub scores: Vec<f32>,
    pub rate_hz: f64,
    pub model_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceMeta {
    session_id: String,
    model_id: String,
    rate_hz: f64,
    n_samples: usize,
}

impl PredictionTrace {
    pub fn new(
        session_id: String,
        scores: Vec<f32>,
        rate_hz: f64,
        model_id: String,
    ) -> Result<Self> {
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "trace score {i} is not finite"
            )));
        }
        Ok(Self {
            session_id,
            scores,
            rate_hz,
            model_id,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn file_stem(&self) -> String {
        format!("{}.{}", self.session_id, self.model_id)
    }

    /// Writes `<dir>/<session_id>.<model_id>.f32` and its `.json` sidecar;
    /// returns the score file path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        io::create_dir(dir)?;
        let path = dir.join(format!("{}.f32", self.file_stem()));
        fs::write(&path, io::f32_to_le(&self.scores)).map_err(|e| Error::io(&path, e))?;
        io::write_json(
            &path.with_extension("json"),
            &TraceMeta {
                session_id: self.session_id.clone(),
                model_id: self.model_id.clone(),
                rate_hz: self.rate_hz,
                n_samples: self.scores.len(),
            },
        )?;
        Ok(path)
    }

    /// Loads a trace from its score file (the sidecar sits next to it).
    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = path.with_extension("json");
        let meta: TraceMeta = io::read_json(&meta_path).map_err(|e| match e {
            Error::ConfigParse(reason) => Error::CorruptFile {
                path: meta_path.clone(),
                reason,
            },
            other => other,
        })?;
        let scores = io::read_f32_file(path, meta.n_samples)?;
        Self::new(meta.session_id, scores, meta.rate_hz, meta.model_id).map_err(|e| {
            Error::CorruptFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })
    }
}

/// All trace score files in `dir`, sorted by path.
pub fn list_traces(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "f32") && path.with_extension("json").exists() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_traces(dir: &Path) -> Result<Vec<PredictionTrace>> {
    list_traces(dir)?
        .iter()
        .map(|p| PredictionTrace::load(p))
        .collect()
}

/// Window geometry for full-session prediction, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceGeometry {
    pub window_seconds: f64,
    pub stride_seconds: f64,
    pub trim_seconds: f64,
    /// Require `stride == window - 2 trim` so trimmed windows tile exactly;
    /// otherwise each sample takes the window whose centre is nearest.
    pub strict: bool,
}

impl Default for InferenceGeometry {
    fn default() -> Self {
        Self {
            window_seconds: 30.0,
            stride_seconds: 20.0,
            trim_seconds: 5.0,
            strict: true,
        }
    }
}

/// Which window supplies each sample: `(start, from, to)` means samples
/// `from..to` come from the window starting at `start`.
pub fn stitch_plan(
    total: usize,
    window: usize,
    stride: usize,
    trim: usize,
    strict: bool,
) -> Result<Vec<(usize, usize, usize)>> {
    let consistent = if strict {
        2 * trim < window && stride == window - 2 * trim
    } else {
        stride <= window
    };
    if !consistent {
        return Err(Error::InconsistentGeometry {
            window,
            stride,
            trim,
        });
    }
    let starts = window_starts(total, window, stride)?;
    let mut plan = Vec::with_capacity(starts.len());
    if strict {
        let mut cursor = 0;
        for (k, &a) in starts.iter().enumerate() {
            let to = if k + 1 == starts.len() {
                total
            } else {
                a + window - trim
            };
            debug_assert!(cursor >= a && to <= a + window);
            plan.push((a, cursor, to));
            cursor = to;
        }
    } else {
        // centres are increasing, so nearest-centre regions are contiguous
        let mut from = 0;
        for (k, &a) in starts.iter().enumerate() {
            let to = match starts.get(k + 1) {
                // samples up to the midpoint of the two centres, ties to the earlier window
                Some(&b) => ((a + b + window) / 2 + 1).min(a + window).max(from),
                None => total,
            };
            plan.push((a, from, to));
            from = to;
        }
    }
    Ok(plan)
}

/// Scores every sample of a session: the session is z-scored per channel,
/// windows are run through the model, and the binary output row of each
/// window is trimmed and stitched per [`stitch_plan`].
pub fn predict_session(
    model: &ShineModel,
    s: &SessionRecord,
    geometry: &InferenceGeometry,
    model_id: &str,
) -> Result<PredictionTrace> {
    let rate = s.rate_hz;
    let window = seconds_to_samples(geometry.window_seconds, rate);
    let stride = seconds_to_samples(geometry.stride_seconds, rate);
    let trim = seconds_to_samples(geometry.trim_seconds, rate);
    let plan = stitch_plan(s.n_samples(), window, stride, trim, geometry.strict)?;
    let normalized = s.normalized();
    let mut scores = vec![0.0f32; s.n_samples()];
    for &(a, from, to) in &plan {
        if from == to {
            continue;
        }
        let out = model.forward(normalized.meg.slice(s![.., a..a + window]))?;
        let binary = out.row(out.nrows() - 1);
        for t in from..to {
            scores[t] = binary[t - a];
        }
    }
    PredictionTrace::new(s.session_id.clone(), scores, rate, model_id.to_string())
}

/// Identifier derived from checkpoint bytes.
pub fn model_id_from_bytes(bytes: &[u8]) -> String {
    io::sha256_hex(bytes)[..12].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_id: String,
    pub threshold: f64,
    pub f1_macro: f64,
    pub f1_speech: f64,
    pub f1_silence: f64,
}

impl SessionMetrics {
    fn from_counts(session_id: String, threshold: f64, c: &ConfusionCounts) -> Self {
        Self {
            session_id,
            threshold,
            f1_macro: f1_macro(c),
            f1_speech: c.f1_speech(),
            f1_silence: c.f1_silence(),
        }
    }
}

/// Row id of the pooled summary in an [`EvalReport`].
pub const POOLED: &str = "ALL";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub threshold: Threshold,
    /// One row per evaluated session, then the pooled row.
    pub rows: Vec<SessionMetrics>,
}

impl EvalReport {
    pub fn pooled(&self) -> &SessionMetrics {
        self.rows.last().expect("pooled row")
    }

    pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record([
            "model_id",
            "session_id",
            "threshold",
            "f1_macro",
            "f1_speech",
            "f1_silence",
        ])
        .map_err(|e| csv_error(path, e))?;
        for r in reports {
            for m in &r.rows {
                w.write_record([
                    r.model_id.clone(),
                    m.session_id.clone(),
                    format!("{}", m.threshold),
                    format!("{}", m.f1_macro),
                    format!("{}", m.f1_speech),
                    format!("{}", m.f1_silence),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

/// Calibrates one threshold on the pooled `calibrate_on` sessions and applies
/// it unchanged to every other session. All traces must share a model id.
pub fn evaluate_traces(
    traces: &[PredictionTrace],
    labels: &BTreeMap<String, Vec<u8>>,
    calibrate_on: &BTreeSet<String>,
) -> Result<EvalReport> {
    let first = traces.first().ok_or(Error::EmptyEnsemble)?;
    let mut calib_scores = Vec::new();
    let mut calib_labels = Vec::new();
    let mut evaluated = Vec::new();
    for t in traces {
        if t.model_id != first.model_id {
            return Err(Error::InvalidConfig(format!(
                "traces from models {} and {} cannot share a threshold",
                first.model_id, t.model_id
            )));
        }
        let truth = labels
            .get(&t.session_id)
            .ok_or_else(|| Error::MissingField {
                path: PathBuf::from(&t.session_id),
                field: "labels".into(),
            })?;
        if truth.len() != t.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                actual: t.len(),
            });
        }
        if calibrate_on.contains(&t.session_id) {
            calib_scores.extend_from_slice(&t.scores);
            calib_labels.extend_from_slice(truth);
        } else {
            evaluated.push((t, truth));
        }
    }
    if calib_scores.is_empty() {
        return Err(Error::InvalidConfig(
            "no trace belongs to a calibration session".into(),
        ));
    }
    if evaluated.is_empty() {
        return Err(Error::InvalidConfig(
            "every trace belongs to a calibration session".into(),
        ));
    }
    let threshold = select_threshold(&calib_scores, &calib_labels)?;
    evaluated.sort_by(|a, b| a.0.session_id.cmp(&b.0.session_id));
    let mut rows = Vec::new();
    let mut pooled_pred = Vec::new();
    let mut pooled_truth = Vec::new();
    for (t, truth) in evaluated {
        let pred = threshold.apply(&t.scores);
        rows.push(SessionMetrics::from_counts(
            t.session_id.clone(),
            threshold.value,
            &confusion(&pred, truth)?,
        ));
        pooled_pred.extend(pred);
        pooled_truth.extend_from_slice(truth);
    }
    rows.push(SessionMetrics::from_counts(
        POOLED.to_string(),
        threshold.value,
        &confusion(&pooled_pred, &pooled_truth)?,
    ));
    Ok(EvalReport {
        model_id: first.model_id.clone(),
        threshold,
        rows,
    })
}

/// Evaluates every model found among `traces` separately, in model-id order.
pub fn evaluate_by_model(
    traces: &[PredictionTrace],
    labels: &BTreeMap<String, Vec<u8>>,
    calibrate_on: &BTreeSet<String>,
) -> Result<Vec<EvalReport>> {
    if traces.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut by_model: BTreeMap<&str, Vec<PredictionTrace>> = BTreeMap::new();
    for t in traces {
        by_model.entry(&t.model_id).or_default().push(t.clone());
    }
    by_model
        .values()
        .map(|ts| evaluate_traces(ts, labels, calibrate_on))
        .collect()
}
