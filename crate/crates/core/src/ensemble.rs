//! Score-averaging ensembles over prediction traces.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::error::{Error, Result};
use crate::inference::{evaluate_traces, EvalReport, PredictionTrace};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Each trace is shifted and scaled to zero mean and unit variance
    /// before averaging, so no model dominates through its output scale.
    #[default]
    ZscorePerTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub trace_paths: Vec<PathBuf>,
    /// One nonnegative weight per trace; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl EnsembleSpec {
    pub fn uniform(trace_paths: Vec<PathBuf>, normalization: Normalization) -> Self {
        Self {
            trace_paths,
            weights: None,
            normalization,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    fn resolved_weights(&self) -> Result<Vec<f64>> {
        if self.trace_paths.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let w = match &self.weights {
            None => vec![1.0; self.trace_paths.len()],
            Some(w) => w.clone(),
        };
        check_weights(&w, self.trace_paths.len())?;
        Ok(w)
    }
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: w.len(),
        });
    }
    if let Some(bad) = w.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "ensemble weight {bad} is not a nonnegative number"
        )));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    Ok(())
}

/// Id shared by every session-level output of one ensemble: a digest of the
/// member model ids with their weights and the normalization.
pub fn ensemble_model_id(members: &[(String, f64)], normalization: Normalization) -> String {
    let mut m: Vec<&(String, f64)> = members.iter().collect();
    m.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut text = format!("{normalization:?}");
    for (id, w) in m {
        text.push_str(&format!("\n{id}\t{:016x}", w.to_bits()));
    }
    format!("ens-{}", &io::sha256_hex(text.as_bytes())[..12])
}

fn normalized(scores: &[f32], normalization: Normalization) -> Vec<f64> {
    let x: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
    match normalization {
        Normalization::None => x,
        Normalization::ZscorePerTrace => {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            // A constant trace carries no ranking information: center it only.
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            x.into_iter().map(|v| (v - mean) / sd).collect()
        }
    }
}

/// Weighted mean of traces that all belong to one session. The reduction
/// order is fixed by sorting members on (model id, scores), so the result
/// does not depend on input order.
pub fn average_loaded(
    members: &[(PredictionTrace, f64)],
    normalization: Normalization,
) -> Result<PredictionTrace> {
    let (first, _) = members.first().ok_or(Error::EmptyEnsemble)?;
    let weights: Vec<f64> = members.iter().map(|(_, w)| *w).collect();
    check_weights(&weights, members.len())?;
    for (t, _) in members {
        if t.session_id != first.session_id {
            return Err(Error::MixedSessions {
                first: first.session_id.clone(),
                other: t.session_id.clone(),
            });
        }
        if t.len() != first.len() {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                actual: t.len(),
            });
        }
        if t.rate_hz != first.rate_hz {
            return Err(Error::RateMismatch {
                from: t.rate_hz,
                to: first.rate_hz,
            });
        }
    }
    let mut order: Vec<&(PredictionTrace, f64)> = members.iter().collect();
    order.sort_by(|a, b| {
        a.0.model_id
            .cmp(&b.0.model_id)
            .then_with(|| a.1.total_cmp(&b.1))
            .then_with(|| {
                let ka = a.0.scores.iter().map(|v| v.to_bits());
                let kb = b.0.scores.iter().map(|v| v.to_bits());
                ka.cmp(kb)
            })
    });
    let total: f64 = order.iter().map(|(_, w)| w).sum();
    let mut acc = vec![0.0f64; first.len()];
    for (t, w) in order {
        if *w == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(normalized(&t.scores, normalization)) {
            *a += w * v;
        }
    }
    let scores = acc.into_iter().map(|v| (v / total) as f32).collect();
    let ids: Vec<(String, f64)> = members
        .iter()
        .map(|(t, w)| (t.model_id.clone(), *w))
        .collect();
    PredictionTrace::new(
        first.session_id.clone(),
        scores,
        first.rate_hz,
        ensemble_model_id(&ids, normalization),
    )
}

fn load_members(spec: &EnsembleSpec) -> Result<Vec<(PredictionTrace, f64)>> {
    let weights = spec.resolved_weights()?;
    let traces: Vec<PredictionTrace> = spec
        .trace_paths
        .par_iter()
        .map(|p| PredictionTrace::load(p))
        .collect::<Result<_>>()?;
    Ok(traces.into_iter().zip(weights).collect())
}

/// Averages the traces named by `spec`, which must all cover one session.
pub fn average_traces(spec: &EnsembleSpec) -> Result<PredictionTrace> {
    average_loaded(&load_members(spec)?, spec.normalization)
}

/// Groups traces by session and averages each group. Weights follow their
/// traces; the ensemble id is computed over all members so every session
/// shares it.
pub fn average_by_session(
    members: &[(PredictionTrace, f64)],
    normalization: Normalization,
) -> Result<Vec<PredictionTrace>> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut groups: BTreeMap<&str, Vec<(PredictionTrace, f64)>> = BTreeMap::new();
    for (t, w) in members {
        groups
            .entry(&t.session_id)
            .or_default()
            .push((t.clone(), *w));
    }
    let mut models: BTreeMap<String, f64> = BTreeMap::new();
    for (t, w) in members {
        models.entry(t.model_id.clone()).or_insert(*w);
    }
    let id = ensemble_model_id(&models.into_iter().collect::<Vec<_>>(), normalization);
    groups
        .into_values()
        .map(|g| {
            let mut avg = average_loaded(&g, normalization)?;
            avg.model_id = id.clone();
            Ok(avg)
        })
        .collect()
}

/// Averages per session, then calibrates on `calibrate_on` and evaluates
/// the remaining sessions.
pub fn ensemble_evaluate_loaded(
    members: &[(PredictionTrace, f64)],
    normalization: Normalization,
    labels: &BTreeMap<String, Vec<u8>>,
    calibrate_on: &BTreeSet<String>,
) -> Result<EvalReport> {
    let averaged = average_by_session(members, normalization)?;
    evaluate_traces(&averaged, labels, calibrate_on)
}

/// [`ensemble_evaluate_loaded`] with traces from `spec` and labels read from
/// the sessions under `data_root`.
pub fn ensemble_evaluate(
    spec: &EnsembleSpec,
    data_root: &Path,
    calibrate_on: &BTreeSet<String>,
) -> Result<EvalReport> {
    let members = load_members(spec)?;
    let labels = load_labels(data_root)?;
    ensemble_evaluate_loaded(&members, spec.normalization, &labels, calibrate_on)
}

/// Binary labels of every session under `root`, keyed by session id.
pub fn load_labels(root: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    dataset::list_sessions(root)?
        .iter()
        .map(|p| dataset::load_session(p).map(|s| (s.session_id, s.labels)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub path: PathBuf,
    pub session_id: String,
    pub model_id: String,
    pub weight: f64,
    pub sha256: String,
}

/// Record of one ensemble run, written next to its output traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub inputs: Vec<ManifestInput>,
    pub normalization: Normalization,
    pub model_id: String,
    pub outputs: Vec<PathBuf>,
    /// Digest over the input digests, weights and normalization.
    pub digest: String,
}

/// Averages `spec` per session, writes the traces into `out_dir` and a
/// manifest describing the inputs.
pub fn write_ensemble(spec: &EnsembleSpec, out_dir: &Path) -> Result<EnsembleManifest> {
    let members = load_members(spec)?;
    let averaged = average_by_session(&members, spec.normalization)?;
    let mut inputs = Vec::with_capacity(members.len());
    for (path, (t, w)) in spec.trace_paths.iter().zip(&members) {
        inputs.push(ManifestInput {
            path: path.clone(),
            session_id: t.session_id.clone(),
            model_id: t.model_id.clone(),
            weight: *w,
            sha256: io::file_digest(path)?,
        });
    }
    let mut sorted: Vec<&ManifestInput> = inputs.iter().collect();
    sorted.sort_by(|a, b| a.sha256.cmp(&b.sha256).then(a.weight.total_cmp(&b.weight)));
    let mut text = format!("{:?}", spec.normalization);
    for i in sorted {
        text.push_str(&format!("\n{}\t{:016x}", i.sha256, i.weight.to_bits()));
    }
    let outputs = averaged
        .iter()
        .map(|t| t.save(out_dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = EnsembleManifest {
        model_id: averaged[0].model_id.clone(),
        inputs,
        normalization: spec.normalization,
        outputs,
        digest: io::sha256_hex(text.as_bytes()),
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
