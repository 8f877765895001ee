//! Recording sessions: on-disk format, fixed-length training windows,
//! leave-session-out splits and the synthetic generator.

mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, CompositeTarget, TargetMode, N_MEL};
use crate::io;
use crate::signal::{row_stats, seconds_to_samples, zscore_normalize};

pub use synth::{synth_session, synth_session_with_truth, AuxContent, SynthConfig, SynthTruth};

pub const DEFAULT_RATE_HZ: f64 = 250.0;
pub const WINDOW_SECONDS: f64 = 30.0;
pub const TRAIN_STRIDE_SECONDS: f64 = 30.0;

pub const META_FILE: &str = "meta.json";
pub const MEG_FILE: &str = "meg.f32";
pub const LABELS_FILE: &str = "labels.u8";
pub const ENVELOPE_FILE: &str = "envelope.f32";
pub const MEL_FILE: &str = "mel.f32";

/// Envelope and mel rows recorded alongside a session, at the MEG rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxRows {
    pub envelope: Vec<f32>,
    pub mel: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    /// Sensors x samples.
    pub meg: Array2<f32>,
    /// 1 = speech, 0 = silence.
    pub labels: Vec<u8>,
    pub rate_hz: f64,
    pub aux: Option<AuxRows>,
}

impl SessionRecord {
    pub fn new(
        session_id: impl Into<String>,
        meg: Array2<f32>,
        labels: Vec<u8>,
        rate_hz: f64,
        aux: Option<AuxRows>,
    ) -> Result<Self> {
        let s = Self {
            session_id: session_id.into(),
            meg,
            labels,
            rate_hz,
            aux,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.meg.nrows() == 0 {
            return Err(Error::InvalidConfig("session has no channels".into()));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rate {} Hz must be positive",
                self.rate_hz
            )));
        }
        if self.meg.ncols() != self.labels.len() {
            return Err(Error::LengthMismatch {
                expected: self.meg.ncols(),
                actual: self.labels.len(),
            });
        }
        features::check_binary(self.labels.iter().map(|&v| v as f64))?;
        if let Some(aux) = &self.aux {
            if aux.envelope.len() != self.labels.len() {
                return Err(Error::LengthMismatch {
                    expected: self.labels.len(),
                    actual: aux.envelope.len(),
                });
            }
            if aux.mel.dim() != (N_MEL, self.labels.len()) {
                return Err(Error::shape(&[N_MEL, self.labels.len()], aux.mel.shape()));
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.meg.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.meg.ncols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_samples() as f64 / self.rate_hz
    }

    /// Copy with every MEG channel z-scored on this session's own statistics.
    pub fn normalized(&self) -> Self {
        let stats = row_stats(self.meg.view());
        Self {
            meg: zscore_normalize(self.meg.view(), &stats).expect("one stat per row"),
            ..self.clone()
        }
    }

    /// Full-session target. Auxiliary rows are z-scored over the session; the
    /// binary row is left as 0/1.
    pub fn target(&self, mode: TargetMode) -> Result<CompositeTarget> {
        match mode {
            TargetMode::Standard => CompositeTarget::from_labels(&self.labels, self.rate_hz),
            TargetMode::Extended => {
                let aux = self.aux.as_ref().ok_or_else(|| Error::MissingField {
                    path: PathBuf::from(&self.session_id),
                    field: "envelope/mel rows (required in extended mode)".into(),
                })?;
                let mut rows = Array2::zeros((N_MEL + 1, self.n_samples()));
                rows.row_mut(0).assign(&ndarray::aview1(&aux.envelope));
                rows.slice_mut(s![1.., ..]).assign(&aux.mel);
                features::standardize_rows(&mut rows);
                let env = crate::signal::ScoreSequence::new(rows.row(0).to_vec(), self.rate_hz)?;
                let binary = crate::signal::ScoreSequence::new(
                    self.labels.iter().map(|&v| v as f32).collect(),
                    self.rate_hz,
                )?;
                features::build_composite_target(&env, rows.slice(s![1.., ..]), &binary, mode)
            }
        }
    }
}

fn missing(dir: &Path, field: &str) -> Error {
    Error::MissingField {
        path: dir.to_path_buf(),
        field: field.to_string(),
    }
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    session_id: &'a str,
    rate_hz: f64,
    n_channels: usize,
    n_samples: usize,
    rows: Vec<&'static str>,
}

pub fn write_session(s: &SessionRecord, dir: &Path) -> Result<()> {
    s.validate()?;
    io::create_dir(dir)?;
    let mut rows = vec!["meg", "labels"];
    let meg = s.meg.as_standard_layout();
    let write = |name: &str, bytes: Vec<u8>| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(
        MEG_FILE,
        io::f32_to_le(meg.as_slice().expect("standard layout")),
    )?;
    write(LABELS_FILE, s.labels.clone())?;
    if let Some(aux) = &s.aux {
        rows.extend(["envelope", "mel"]);
        write(ENVELOPE_FILE, io::f32_to_le(&aux.envelope))?;
        let mel = aux.mel.as_standard_layout();
        write(
            MEL_FILE,
            io::f32_to_le(mel.as_slice().expect("standard layout")),
        )?;
    }
    io::write_json(
        &dir.join(META_FILE),
        &Meta {
            session_id: &s.session_id,
            rate_hz: s.rate_hz,
            n_channels: s.n_channels(),
            n_samples: s.n_samples(),
            rows,
        },
    )
}

/// Reads a session directory exactly as written; no normalization applied.
pub fn load_session(dir: &Path) -> Result<SessionRecord> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(missing(dir, META_FILE));
    }
    let meta: serde_json::Value = io::read_json(&meta_path)?;
    let field = |name: &str| meta.get(name).ok_or_else(|| missing(&meta_path, name));
    let session_id = field("session_id")?
        .as_str()
        .ok_or_else(|| missing(&meta_path, "session_id"))?
        .to_string();
    let rate_hz = field("rate_hz")?
        .as_f64()
        .ok_or_else(|| missing(&meta_path, "rate_hz"))?;
    let as_usize = |name: &str| -> Result<usize> {
        field(name)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| missing(&meta_path, name))
    };
    let n_channels = as_usize("n_channels")?;
    let n_samples = as_usize("n_samples")?;
    let rows: Vec<String> = field("rows")?
        .as_array()
        .ok_or_else(|| missing(&meta_path, "rows"))?
        .iter()
        .filter_map(|v| v.as_str().map(str::to_string))
        .collect();
    let has = |r: &str| rows.iter().any(|x| x == r);

    let require = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(missing(dir, name))
        }
    };
    let meg = io::read_f32_file(&require(MEG_FILE)?, n_channels * n_samples)?;
    let labels_path = require(LABELS_FILE)?;
    let labels = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    if labels.len() != n_samples {
        return Err(Error::CorruptFile {
            path: labels_path,
            reason: format!("expected {n_samples} labels, found {}", labels.len()),
        });
    }
    let aux = if has("envelope") || has("mel") {
        let envelope = io::read_f32_file(&require(ENVELOPE_FILE)?, n_samples)?;
        let mel = io::read_f32_file(&require(MEL_FILE)?, N_MEL * n_samples)?;
        Some(AuxRows {
            envelope,
            mel: Array2::from_shape_vec((N_MEL, n_samples), mel).expect("checked size"),
        })
    } else {
        None
    };
    let meg = Array2::from_shape_vec((n_channels, n_samples), meg).expect("checked size");
    SessionRecord::new(session_id, meg, labels, rate_hz, aux).map_err(|e| Error::CorruptFile {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Session directories (those holding a `meta.json`) directly under `root`,
/// sorted by name.
pub fn list_sessions(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(META_FILE).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_all(root: &Path) -> Result<Vec<SessionRecord>> {
    list_sessions(root)?
        .iter()
        .map(|d| load_session(d))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// Channels x W.
    pub meg: Array2<f32>,
    /// Target rows x W, binary row last.
    pub target: Array2<f32>,
    pub session_id: String,
    pub start_sample: usize,
}

/// Window starts `0, stride, 2 stride, ...` that fit in `total`, plus an
/// end-anchored start at `total - window` when the regular grid leaves a tail.
pub fn window_starts(total: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig(
            "window and stride must be positive".into(),
        ));
    }
    if total < window {
        return Err(Error::SessionTooShort {
            samples: total,
            window,
        });
    }
    let mut starts: Vec<usize> = (0..=total - window).step_by(stride).collect();
    let last = *starts.last().expect("at least one start");
    if last + window < total {
        starts.push(total - window);
    }
    Ok(starts)
}

/// Cuts a (normalized) session into training windows.
pub fn make_windows(
    s: &SessionRecord,
    window_seconds: f64,
    stride_seconds: f64,
    mode: TargetMode,
) -> Result<Vec<TrainingWindow>> {
    let w = seconds_to_samples(window_seconds, s.rate_hz);
    let stride = seconds_to_samples(stride_seconds, s.rate_hz);
    let starts = window_starts(s.n_samples(), w, stride)?;
    let target = s.target(mode)?;
    Ok(starts
        .into_iter()
        .map(|a| TrainingWindow {
            meg: s.meg.slice(s![.., a..a + w]).to_owned(),
            target: target.bands.slice(s![.., a..a + w]).to_owned(),
            session_id: s.session_id.clone(),
            start_sample: a,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_sessions: BTreeSet<String>,
    pub val_sessions: BTreeSet<String>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Draws `n_val` validation sessions uniformly at random; the rest train.
/// The result depends only on the set of ids and the seed, not their order.
pub fn leave_session_out_split(
    session_ids: &[String],
    n_val: usize,
    seed: u64,
) -> Result<SplitPlan> {
    let mut ids: Vec<String> = session_ids.to_vec();
    ids.sort();
    ids.dedup();
    if n_val >= ids.len() {
        return Err(Error::TooFewSessions {
            needed: n_val,
            found: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let val_sessions: BTreeSet<String> = ids[..n_val].iter().cloned().collect();
    let train_sessions: BTreeSet<String> = ids[n_val..].iter().cloned().collect();
    Ok(SplitPlan {
        train_sessions,
        val_sessions,
        seed,
    })
}

#[cfg(test)]
mod tests;
