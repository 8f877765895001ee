//! Auxiliary regression targets derived from the stimulus audio: a broadband
//! envelope and a coarse mel spectrogram, both resampled to the MEG rate, and
//! the composite target that stacks them with the speech/silence labels.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{RowStats, ScoreSequence};

/// Number of mel rows in an extended target.
pub const N_MEL: usize = 10;
/// Rows of an extended target: envelope, mel bands, binary.
pub const EXTENDED_ROWS: usize = N_MEL + 2;

pub const ENVELOPE_CUTOFF_HZ: f64 = 25.0;
pub const ENVELOPE_EXPONENT: f64 = 0.6;
pub const MEL_FRAME: usize = 512;
pub const MEL_FMIN_HZ: f64 = 50.0;
pub const MEL_FMAX_HZ: f64 = 8000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioWaveform {
    samples: Vec<f32>,
    rate_hz: f64,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f32>, rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("audio waveform is empty".into()));
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "audio rate {rate_hz} Hz must be positive"
            )));
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AudioSidecar {
    rate_hz: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Reads raw little-endian `f32` audio plus its `.json` sidecar holding
/// `{"rate_hz": ...}`.
pub fn read_audio(path: &Path) -> Result<AudioWaveform> {
    let meta_path = sidecar_path(path);
    let meta = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta).map_err(|e| Error::CorruptFile {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;
    let rate_hz = meta
        .get("rate_hz")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::MissingField {
            path: meta_path.clone(),
            field: "rate_hz".into(),
        })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of f32 samples", bytes.len()),
        });
    }
    AudioWaveform::new(crate::io::f32_from_le(&bytes), rate_hz)
}

pub fn write_audio(a: &AudioWaveform, path: &Path) -> Result<()> {
    fs::write(path, crate::io::f32_to_le(&a.samples)).map_err(|e| Error::io(path, e))?;
    let meta = serde_json::to_vec_pretty(&AudioSidecar { rate_hz: a.rate_hz }).expect("sidecar");
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
}

/// Integer decimation factor from `from` to `to`, or `RateMismatch`.
pub fn decimation_factor(from: f64, to: f64) -> Result<usize> {
    let ratio = from / to;
    let rounded = ratio.round();
    if !(to > 0.0) || rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::RateMismatch { from, to });
    }
    Ok(rounded as usize)
}

/// Speech envelope: rectify, one-pole low-pass at 25 Hz, keep the last
/// sample of every decimation block, compress with `x^0.6`.
pub fn compute_envelope(a: &AudioWaveform, out_rate_hz: f64) -> Result<ScoreSequence> {
    let factor = decimation_factor(a.rate_hz, out_rate_hz)?;
    let n_out = a.len() / factor;
    if n_out == 0 {
        return Err(Error::TooShort {
            len: a.len(),
            trim: factor,
        });
    }
    let alpha = 1.0 - (-2.0 * PI * ENVELOPE_CUTOFF_HZ / a.rate_hz).exp();
    let mut state = 0.0f64;
    let mut out = Vec::with_capacity(n_out);
    for (i, &x) in a.samples.iter().enumerate().take(n_out * factor) {
        state += alpha * ((x as f64).abs() - state);
        if (i + 1) % factor == 0 {
            out.push(state.max(0.0).powf(ENVELOPE_EXPONENT) as f32);
        }
    }
    ScoreSequence::new(out, out_rate_hz)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters (`n_bands x (frame/2 + 1)`) spanning 50 Hz up to
/// 8 kHz or Nyquist, whichever is lower.
pub fn mel_filterbank(n_bands: usize, frame: usize, rate_hz: f64) -> Array2<f64> {
    let n_bins = frame / 2 + 1;
    let fmax = MEL_FMAX_HZ.min(rate_hz / 2.0);
    let (lo, hi) = (hz_to_mel(MEL_FMIN_HZ), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_bands + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_bands, n_bins));
    for b in 0..n_bands {
        let (left, center, right) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..n_bins {
            let f = k as f64 * rate_hz / frame as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            bank[[b, k]] = w;
        }
    }
    bank
}

/// Centre frequency of each mel band in Hz.
pub fn mel_band_centers(n_bands: usize, rate_hz: f64) -> Vec<f64> {
    let fmax = MEL_FMAX_HZ.min(rate_hz / 2.0);
    let (lo, hi) = (hz_to_mel(MEL_FMIN_HZ), hz_to_mel(fmax));
    (1..=n_bands)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_bands + 1) as f64))
        .collect()
}

/// Log-compressed mel band magnitudes, one frame per output sample.
///
/// Frame `k` is a Hann-windowed 512-sample frame centred on input sample
/// `k * hop`, zero padded at the edges, with `hop = rate / out_rate`.
pub fn compute_mel_bands(
    a: &AudioWaveform,
    n_bands: usize,
    out_rate_hz: f64,
) -> Result<Array2<f32>> {
    if n_bands == 0 {
        return Err(Error::InvalidConfig("n_bands must be at least 1".into()));
    }
    let hop = decimation_factor(a.rate_hz, out_rate_hz)?;
    let n_frames = a.len() / hop;
    if n_frames == 0 {
        return Err(Error::TooShort {
            len: a.len(),
            trim: hop,
        });
    }
    let bank = mel_filterbank(n_bands, MEL_FRAME, a.rate_hz);
    let window: Vec<f64> = (0..MEL_FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / MEL_FRAME as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(MEL_FRAME);
    let mut buf = vec![Complex::new(0.0, 0.0); MEL_FRAME];
    let mut mag = vec![0.0f64; MEL_FRAME / 2 + 1];
    let mut out = Array2::<f32>::zeros((n_bands, n_frames));
    let half = (MEL_FRAME / 2) as isize;
    for k in 0..n_frames {
        let center = (k * hop) as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = center - half + i as isize;
            let x = if idx >= 0 && (idx as usize) < a.len() {
                a.samples[idx as usize] as f64
            } else {
                0.0
            };
            *slot = Complex::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for b in 0..n_bands {
            let energy: f64 = bank.row(b).iter().zip(&mag).map(|(w, m)| w * m).sum();
            out[[b, k]] = energy.ln_1p() as f32;
        }
    }
    Ok(out)
}

/// Which rows the network is trained to reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Binary speech/silence row only.
    #[default]
    Standard,
    /// Envelope, ten mel rows and the binary row.
    Extended,
}

impl TargetMode {
    pub fn rows(self) -> usize {
        match self {
            TargetMode::Standard => 1,
            TargetMode::Extended => EXTENDED_ROWS,
        }
    }
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(TargetMode::Standard),
            "extended" => Ok(TargetMode::Extended),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetRole {
    Envelope,
    Mel(usize),
    Binary,
}

/// Stacked regression target; the binary row is always last.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTarget {
    pub bands: Array2<f32>,
    pub roles: Vec<TargetRole>,
    pub rate_hz: f64,
}

impl CompositeTarget {
    pub fn binary_row(&self) -> ndarray::ArrayView1<'_, f32> {
        self.bands.row(self.bands.nrows() - 1)
    }

    pub fn mode(&self) -> TargetMode {
        if self.roles.len() == 1 {
            TargetMode::Standard
        } else {
            TargetMode::Extended
        }
    }

    /// Standard-mode target straight from labels.
    pub fn from_labels(labels: &[u8], rate_hz: f64) -> Result<Self> {
        check_binary(labels.iter().map(|&v| v as f64))?;
        let row = labels.iter().map(|&v| v as f32).collect::<Vec<_>>();
        Ok(Self {
            bands: Array2::from_shape_vec((1, row.len()), row).expect("one row"),
            roles: vec![TargetRole::Binary],
            rate_hz,
        })
    }
}

pub(crate) fn check_binary(values: impl Iterator<Item = f64>) -> Result<()> {
    for (index, value) in values.enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(Error::NonBinaryLabels { index, value });
        }
    }
    Ok(())
}

pub fn extended_roles() -> Vec<TargetRole> {
    let mut roles = vec![TargetRole::Envelope];
    roles.extend((0..N_MEL).map(TargetRole::Mel));
    roles.push(TargetRole::Binary);
    roles
}

/// Stacks `(envelope, mel_1..mel_10, binary)` in extended mode, or returns the
/// binary row alone in standard mode. All inputs are checked in both modes.
pub fn build_composite_target(
    env: &ScoreSequence,
    mel: ArrayView2<f32>,
    binary: &ScoreSequence,
    mode: TargetMode,
) -> Result<CompositeTarget> {
    let t = binary.len();
    for len in [env.len(), mel.ncols()] {
        if len != t {
            return Err(Error::LengthMismatch {
                expected: t,
                actual: len,
            });
        }
    }
    if mel.nrows() != N_MEL {
        return Err(Error::shape(&[N_MEL, t], mel.shape()));
    }
    if env.rate_hz() != binary.rate_hz() {
        return Err(Error::RateMismatch {
            from: env.rate_hz(),
            to: binary.rate_hz(),
        });
    }
    check_binary(binary.values().iter().map(|&v| v as f64))?;
    let bands = match mode {
        TargetMode::Standard => {
            Array2::from_shape_vec((1, t), binary.values().to_vec()).expect("one row")
        }
        TargetMode::Extended => {
            let mut bands = Array2::zeros((EXTENDED_ROWS, t));
            bands.row_mut(0).assign(&ndarray::aview1(env.values()));
            bands.slice_mut(ndarray::s![1..=N_MEL, ..]).assign(&mel);
            bands
                .row_mut(EXTENDED_ROWS - 1)
                .assign(&ndarray::aview1(binary.values()));
            bands
        }
    };
    let roles = match mode {
        TargetMode::Standard => vec![TargetRole::Binary],
        TargetMode::Extended => extended_roles(),
    };
    Ok(CompositeTarget {
        bands,
        roles,
        rate_hz: binary.rate_hz(),
    })
}

/// Z-scores every row in place using that row's own statistics.
pub fn standardize_rows(x: &mut Array2<f32>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let s = RowStats::of(row.iter().copied());
        let scale = s.std.max(crate::signal::STD_EPS);
        row.mapv_inplace(|v| ((v as f64 - s.mean) / scale) as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, amp: f64, n: usize, rate: f64) -> AudioWaveform {
        let s = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate).sin()) as f32)
            .collect();
        AudioWaveform::new(s, rate).unwrap()
    }

    #[test]
    fn envelope_of_silence_is_zero() {
        let a = AudioWaveform::new(vec![0.0; 3200], 16000.0).unwrap();
        let env = compute_envelope(&a, 250.0).unwrap();
        assert_eq!(env.len(), 50);
        assert!(env.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn envelope_length_follows_decimation() {
        let a = tone(440.0, 0.5, 16000, 16000.0);
        assert_eq!(compute_envelope(&a, 250.0).unwrap().len(), 250);
        let b = tone(440.0, 0.5, 16063, 16000.0);
        assert_eq!(compute_envelope(&b, 250.0).unwrap().len(), 250);
        assert!(matches!(
            compute_envelope(&a, 300.0),
            Err(Error::RateMismatch { .. })
        ));
    }

    /// A pure tone has a flat analytic envelope; after the filter settles
    /// the rectified-and-smoothed estimate must stay within 5% of its mean.
    #[test]
    fn envelope_of_tone_is_flat_after_warmup() {
        let rate = 16000.0;
        let a = tone(1000.0, 0.8, 32000, rate);
        let env = compute_envelope(&a, 250.0).unwrap();
        let tail = &env.values()[25..];
        let mean = tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len() as f64;
        for &v in tail {
            assert!(((v as f64 - mean) / mean).abs() < 0.05, "{v} vs {mean}");
        }
        // mean of |A sin| is 2A/pi before compression
        let expected = (2.0 * 0.8 / PI).powf(ENVELOPE_EXPONENT);
        assert!((mean - expected).abs() / expected < 0.02);
    }

    #[test]
    fn mel_of_silence_is_zero_and_frame_rate_matches() {
        let a = AudioWaveform::new(vec![0.0; 16000], 16000.0).unwrap();
        let mel = compute_mel_bands(&a, N_MEL, 250.0).unwrap();
        assert_eq!(mel.dim(), (N_MEL, 250));
        assert!(mel.iter().all(|&v| v == 0.0));
        assert_eq!(decimation_factor(16000.0, 250.0).unwrap(), 64);
    }

    /// Independent oracle: a direct O(N^2) DFT of one frame, weighted by the
    /// same triangular filters, must peak in the band whose centre the tone
    /// sits on, and so must the fast path's mean band energy.
    #[test]
    fn tone_at_band_center_dominates_that_band() {
        let rate = 16000.0;
        let centers = mel_band_centers(N_MEL, rate);
        let bank = mel_filterbank(N_MEL, MEL_FRAME, rate);
        for (band, &f) in centers.iter().enumerate() {
            let a = tone(f, 0.5, 8000, rate);
            let mel = compute_mel_bands(&a, N_MEL, 250.0).unwrap();
            let means: Vec<f64> = mel
                .axis_iter(Axis(0))
                .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64)
                .collect();
            let best = (0..N_MEL)
                .max_by(|&i, &j| means[i].total_cmp(&means[j]))
                .unwrap();
            assert_eq!(best, band, "tone {f:.1} Hz: {means:?}");

            let start = 2000;
            let mut energies = vec![0.0; N_MEL];
            for k in 0..=MEL_FRAME / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..MEL_FRAME {
                    let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / MEL_FRAME as f64).cos();
                    let x = a.samples()[start + i] as f64 * w;
                    let ph = -2.0 * PI * (k * i) as f64 / MEL_FRAME as f64;
                    re += x * ph.cos();
                    im += x * ph.sin();
                }
                let m = (re * re + im * im).sqrt();
                for b in 0..N_MEL {
                    energies[b] += bank[[b, k]] * m;
                }
            }
            let oracle_best = (0..N_MEL)
                .max_by(|&i, &j| energies[i].total_cmp(&energies[j]))
                .unwrap();
            assert_eq!(oracle_best, band);
            // the fast path's frame centred at start + 256 uses the same samples
            let frame = (start + MEL_FRAME / 2) / 64;
            let fast = mel[[band, frame]] as f64;
            assert!((fast - energies[band].ln_1p()).abs() < 1e-3 * fast.max(1.0));
        }
    }

    fn seq(v: Vec<f32>) -> ScoreSequence {
        ScoreSequence::new(v, 250.0).unwrap()
    }

    #[test]
    fn composite_target_layout() {
        let t = 100;
        let env = seq((0..t).map(|i| i as f32).collect());
        let mel = Array2::from_shape_fn((N_MEL, t), |(r, c)| (r * 1000 + c) as f32);
        let bin = seq((0..t).map(|i| (i % 3 == 0) as u8 as f32).collect());
        let ext = build_composite_target(&env, mel.view(), &bin, TargetMode::Extended).unwrap();
        assert_eq!(ext.bands.dim(), (12, 100));
        assert_eq!(ext.roles, extended_roles());
        assert_eq!(ext.binary_row().to_vec(), bin.values().to_vec());
        assert_eq!(ext.bands.row(0).to_vec(), env.values().to_vec());
        assert_eq!(ext.bands.row(3), mel.row(2));
        let std = build_composite_target(&env, mel.view(), &bin, TargetMode::Standard).unwrap();
        assert_eq!(std.bands.dim(), (1, 100));
        assert_eq!(std.binary_row().to_vec(), bin.values().to_vec());

        let short = seq(vec![0.0; 99]);
        assert!(matches!(
            build_composite_target(&short, mel.view(), &bin, TargetMode::Extended),
            Err(Error::LengthMismatch {
                expected: 100,
                actual: 99
            })
        ));
        let bad = seq(vec![0.5; 100]);
        assert!(matches!(
            build_composite_target(&env, mel.view(), &bad, TargetMode::Standard),
            Err(Error::NonBinaryLabels { .. })
        ));
    }

    #[test]
    fn audio_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.f32");
        let a = tone(300.0, 0.3, 1000, 16000.0);
        write_audio(&a, &path).unwrap();
        assert_eq!(read_audio(&path).unwrap(), a);
        fs::write(dir.path().join("a.json"), "{}").unwrap();
        assert!(matches!(read_audio(&path), Err(Error::MissingField { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn features_ignore_polarity_and_stay_finite(
            samples in proptest::collection::vec(-1.0f32..1.0, 640..2000)
        ) {
            let a = AudioWaveform::new(samples.clone(), 16000.0).unwrap();
            let b = AudioWaveform::new(samples.iter().map(|v| -v).collect(), 16000.0).unwrap();
            let (ea, eb) = (compute_envelope(&a, 250.0).unwrap(), compute_envelope(&b, 250.0).unwrap());
            prop_assert_eq!(ea.values(), eb.values());
            prop_assert!(ea.values().iter().all(|v| v.is_finite() && *v >= 0.0));
            let (ma, mb) = (compute_mel_bands(&a, N_MEL, 250.0).unwrap(), compute_mel_bands(&b, N_MEL, 250.0).unwrap());
            for (x, y) in ma.iter().zip(mb.iter()) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
                prop_assert!(x.is_finite() && *x >= 0.0);
            }
        }
    }
}
