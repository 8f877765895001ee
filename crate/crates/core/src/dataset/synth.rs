//! Synthetic envelope-following recordings.
//!
//! Speech/silence runs with log-normal durations drive a small set of latent
//! time courses (the labels, a speech envelope and ten band patterns). Each
//! sensor sees a linear mixture of the latents delayed by a per-sensor lag,
//! plus independent 1/f noise at the requested signal-to-noise ratio.
//!
//! Mixing, lags and gains belong to the simulated subject and are drawn from
//! `subject_seed`, so every session of a corpus shares them up to a small
//! per-session jitter; everything else is drawn from the session seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AuxRows, SessionRecord, WINDOW_SECONDS};
use crate::error::{Error, Result};
use crate::features::N_MEL;
use crate::signal::{seconds_to_samples, RowStats};

/// What the auxiliary envelope/mel rows contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxContent {
    /// The latent envelope and band patterns that drive the sensors.
    #[default]
    Informative,
    /// Smoothed noise unrelated to the recording.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub duration_seconds: f64,
    pub rate_hz: f64,
    /// Per-channel signal-to-noise power ratio; `inf` disables noise.
    pub snr: f64,
    pub speech_median_seconds: f64,
    pub silence_median_seconds: f64,
    /// Log-space standard deviation of run durations.
    pub duration_sigma: f64,
    pub max_lag_ms: f64,
    pub aux: AuxContent,
    pub subject_seed: u64,
    /// Standard deviation of the per-session perturbation of the subject's
    /// mixing weights.
    pub mixing_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_channels: 32,
            duration_seconds: 120.0,
            rate_hz: super::DEFAULT_RATE_HZ,
            snr: 4.0,
            speech_median_seconds: 1.8,
            silence_median_seconds: 0.8,
            duration_sigma: 0.5,
            max_lag_ms: 40.0,
            aux: AuxContent::Informative,
            subject_seed: 0,
            mixing_jitter: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_channels == 0 {
            return bad("synthetic sessions need at least one channel".into());
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return bad(format!("rate {} Hz must be positive", self.rate_hz));
        }
        if !(self.duration_seconds >= WINDOW_SECONDS) {
            return bad(format!(
                "duration {} s is shorter than one {WINDOW_SECONDS} s window",
                self.duration_seconds
            ));
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr {} must be positive", self.snr));
        }
        if !(self.speech_median_seconds > 0.0 && self.silence_median_seconds > 0.0) {
            return bad("run durations must be positive".into());
        }
        if !(self.duration_sigma >= 0.0 && self.max_lag_ms >= 0.0 && self.mixing_jitter >= 0.0) {
            return bad("duration_sigma, max_lag_ms and mixing_jitter must be nonnegative".into());
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        seconds_to_samples(self.duration_seconds, self.rate_hz)
    }
}

/// Generator internals exposed for oracle tests.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Latents x samples, each row standardized: labels, envelope, bands.
    pub latents: Array2<f64>,
    /// Channels x latents.
    pub mixing: Array2<f64>,
    /// Per-channel delay in samples.
    pub lags: Vec<usize>,
}

pub fn synth_session(cfg: &SynthConfig, seed: u64) -> Result<SessionRecord> {
    synth_session_with_truth(cfg, seed).map(|(s, _)| s)
}

pub fn synth_session_with_truth(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(SessionRecord, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.n_samples();
    let rate = cfg.rate_hz;

    let labels = speech_runs(cfg, t, &mut rng)?;
    let gate = smooth(
        &labels.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        8.0,
        rate,
    );
    let modulated = |rng: &mut ChaCha8Rng, cutoff: f64, depth: f64| -> Vec<f64> {
        let n = smooth_noise(rng, t, cutoff, rate);
        gate.iter()
            .zip(&n)
            .map(|(g, n)| (g * (1.0 + depth * n)).max(0.0))
            .collect()
    };
    let envelope = modulated(&mut rng, 4.0, 0.5);
    let bands: Vec<Vec<f64>> = (0..N_MEL)
        .map(|k| modulated(&mut rng, 1.0 + k as f64, 0.6))
        .collect();

    let n_latent = N_MEL + 2;
    let mut latents = Array2::<f64>::zeros((n_latent, t));
    for (i, v) in labels.iter().enumerate() {
        latents[[0, i]] = *v as f64;
    }
    for i in 0..t {
        latents[[1, i]] = envelope[i];
        for (k, b) in bands.iter().enumerate() {
            latents[[2 + k, i]] = b[i];
        }
    }
    for mut row in latents.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(1e-12);
        row.mapv_inplace(|v| (v - mean) / sd);
    }

    let c = cfg.n_channels;
    let mut subject = ChaCha8Rng::seed_from_u64(cfg.subject_seed);
    let mut mixing =
        Array2::from_shape_fn((c, n_latent), |_| subject.sample::<f64, _>(StandardNormal));
    let max_lag = seconds_to_samples(cfg.max_lag_ms / 1000.0, rate);
    let lags: Vec<usize> = (0..c).map(|_| subject.gen_range(0..=max_lag)).collect();
    let gains: Vec<f64> = (0..c).map(|_| subject.gen_range(0.5..2.0)).collect();
    if cfg.mixing_jitter > 0.0 {
        mixing.mapv_inplace(|a| a + cfg.mixing_jitter * rng.sample::<f64, _>(StandardNormal));
    }

    let mut meg = Array2::<f32>::zeros((c, t));
    for ch in 0..c {
        let mut signal = vec![0.0f64; t];
        for (k, &a) in mixing.row(ch).iter().enumerate() {
            let lat = latents.row(k);
            for (i, s) in signal.iter_mut().enumerate() {
                *s += a * lat[i.saturating_sub(lags[ch])];
            }
        }
        let noise = pink_noise(&mut rng, t);
        let noise_scale = if cfg.snr.is_infinite() {
            0.0
        } else {
            let power = RowStats::of(signal.iter().map(|&v| v as f32)).std.powi(2);
            (power / cfg.snr).sqrt()
        };
        for i in 0..t {
            meg[[ch, i]] = (gains[ch] * (signal[i] + noise_scale * noise[i])) as f32;
        }
    }

    let (aux_env, aux_bands) = match cfg.aux {
        AuxContent::Informative => (envelope, bands),
        AuxContent::Noise => (
            smooth_noise(&mut rng, t, 4.0, rate),
            (0..N_MEL)
                .map(|k| smooth_noise(&mut rng, t, 1.0 + k as f64, rate))
                .collect(),
        ),
    };
    let mut mel = Array2::<f32>::zeros((N_MEL, t));
    for (k, b) in aux_bands.iter().enumerate() {
        for (i, v) in b.iter().enumerate() {
            mel[[k, i]] = *v as f32;
        }
    }
    let aux = AuxRows {
        envelope: aux_env.iter().map(|&v| v as f32).collect(),
        mel,
    };
    let session = SessionRecord::new(format!("synth-{seed:04}"), meg, labels, rate, Some(aux))?;
    Ok((
        session,
        SynthTruth {
            latents,
            mixing,
            lags,
        },
    ))
}

/// Alternating speech/silence runs with log-normal durations.
fn speech_runs(cfg: &SynthConfig, t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let dist = |median: f64| {
        LogNormal::new(median.ln(), cfg.duration_sigma)
            .map_err(|e| Error::InvalidConfig(format!("run duration distribution: {e}")))
    };
    let speech = dist(cfg.speech_median_seconds)?;
    let silence = dist(cfg.silence_median_seconds)?;
    let mut labels = Vec::with_capacity(t);
    let mut state: u8 = rng.gen_range(0..=1);
    while labels.len() < t {
        let d = if state == 1 {
            speech.sample(rng)
        } else {
            silence.sample(rng)
        };
        let n = seconds_to_samples(d, cfg.rate_hz).max(1);
        labels.extend(std::iter::repeat(state).take(n.min(t - labels.len())));
        state = 1 - state;
    }
    Ok(labels)
}

/// Zero-phase one-pole low-pass (forward then backward pass).
fn smooth(x: &[f64], cutoff_hz: f64, rate_hz: f64) -> Vec<f64> {
    let alpha = 1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz / rate_hz).exp();
    let mut y = x.to_vec();
    let mut state = y[0];
    for v in y.iter_mut() {
        state += alpha * (*v - state);
        *v = state;
    }
    let mut state = *y.last().expect("non-empty");
    for v in y.iter_mut().rev() {
        state += alpha * (*v - state);
        *v = state;
    }
    y
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// Unit-variance low-pass Gaussian noise.
fn smooth_noise(rng: &mut ChaCha8Rng, t: usize, cutoff_hz: f64, rate_hz: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
    let mut y = smooth(&white, cutoff_hz, rate_hz);
    standardize(&mut y);
    y
}

/// Unit-variance Gaussian noise with a 1/f power spectrum.
fn pink_noise(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..t)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(t).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, v) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(t - k) as f64;
        *v /= f.sqrt();
    }
    planner.plan_fft_inverse(t).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    standardize(&mut out);
    out
}
