//! Sequence primitives shared across the crate: Pearson correlation, the
//! negative-Pearson training objective, z-score normalization and edge
//! trimming.
//!
//! Sequences are stored as `f32`; every reduction accumulates in `f64`.
//! Pearson uses population (1/N) moments. The correlation ratio does not
//! depend on that choice, but the epsilon-guarded loss denominator does.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon added to the loss denominator so constant predictions stay finite.
pub const LOSS_EPS: f64 = 1e-8;
/// Floor applied to standard deviations in [`zscore_normalize`].
pub const STD_EPS: f64 = 1e-8;

/// A uniformly sampled score sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence {
    values: Vec<f32>,
    rate_hz: f64,
}

impl ScoreSequence {
    pub fn new(values: Vec<f32>, rate_hz: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("score sequence is empty".into()));
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rate {rate_hz} Hz must be positive"
            )));
        }
        Ok(Self { values, rate_hz })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.values.len() as f64 / self.rate_hz
    }
}

/// Converts a duration to a whole number of samples.
pub fn seconds_to_samples(seconds: f64, rate_hz: f64) -> usize {
    (seconds * rate_hz).round().max(0.0) as usize
}

fn mean_f64<T: Copy + Into<f64>>(x: &[T]) -> f64 {
    x.iter().map(|&v| v.into()).sum::<f64>() / x.len() as f64
}

fn is_constant<T: Copy + Into<f64>>(x: &[T]) -> bool {
    let first: f64 = x[0].into();
    x.iter().all(|&v| v.into() == first)
}

/// Sample Pearson correlation between two equally long sequences.
///
/// Constant inputs are an error rather than a silent zero: a metric built on
/// this function must not report a number for a degenerate window.
pub fn pearson_corr<T: Copy + Into<f64>>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::LengthMismatch {
            expected: 2,
            actual: x.len(),
        });
    }
    if is_constant(x) || is_constant(y) {
        return Err(Error::ZeroVariance);
    }
    let (mx, my) = (mean_f64(x), mean_f64(y));
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a.into() - mx, b.into() - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// What [`neg_pearson_loss`] does with a target row that has no variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegenerateRowPolicy {
    /// Drop the row and average over the remaining ones.
    #[default]
    Skip,
    Error,
}

/// Loss value together with its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean of `-r` over the rows that were used; 0 when none were.
    pub loss: f64,
    /// Same shape as the prediction (K x T).
    pub grad: Array2<f64>,
    pub rows_used: usize,
}

/// Negative Pearson correlation between prediction and target rows (K x T),
/// averaged over rows. Returns the loss only.
pub fn neg_pearson_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    policy: DegenerateRowPolicy,
) -> Result<f64> {
    neg_pearson_loss_grad(pred, target, policy).map(|out| out.loss)
}

/// Negative Pearson loss and its analytic gradient.
///
/// Per row, with centered `p`, `t` and population moments:
/// `r = cov(p, t) / (sd(p) * sd(t) + eps)`.
pub fn neg_pearson_loss_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    policy: DegenerateRowPolicy,
) -> Result<LossOutput> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(target.shape(), pred.shape()));
    }
    let (k, t) = pred.dim();
    if t < 2 {
        return Err(Error::SequenceTooShort { len: t, min: 2 });
    }
    let n = t as f64;
    let mut grad = Array2::<f64>::zeros((k, t));
    let mut used = Vec::with_capacity(k);
    let mut total = 0.0;
    for row in 0..k {
        let p = pred.row(row);
        let y = target.row(row);
        let first = y[0];
        if y.iter().all(|&v| v == first) {
            match policy {
                DegenerateRowPolicy::Skip => continue,
                DegenerateRowPolicy::Error => return Err(Error::DegenerateTarget { row }),
            }
        }
        let mp = p.sum() / n;
        let my = y.sum() / n;
        let (mut sxy, mut spp, mut syy) = (0.0, 0.0, 0.0);
        for (&a, &b) in p.iter().zip(y.iter()) {
            let (dp, dy) = (a - mp, b - my);
            sxy += dp * dy;
            spp += dp * dp;
            syy += dy * dy;
        }
        let cov = sxy / n;
        let sd_p = (spp / n).sqrt();
        let sd_y = (syy / n).sqrt();
        let denom = sd_p * sd_y + LOSS_EPS;
        let r = cov / denom;
        total -= r;
        used.push(row);

        // d r / d p_i = (y~_i / n) / D - cov * sd_y * p~_i / (n * sd_p * D^2)
        let second = if sd_p > 0.0 {
            cov * sd_y / (n * sd_p * denom * denom)
        } else {
            0.0
        };
        let mut g = grad.row_mut(row);
        for ((gi, &a), &b) in g.iter_mut().zip(p.iter()).zip(y.iter()) {
            *gi = -((b - my) / (n * denom) - second * (a - mp));
        }
    }
    let rows_used = used.len();
    if rows_used == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad,
            rows_used,
        });
    }
    if rows_used > 1 {
        grad.mapv_inplace(|v| v / rows_used as f64);
    }
    Ok(LossOutput {
        loss: total / rows_used as f64,
        grad,
        rows_used,
    })
}

/// Per-row location and scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub mean: f64,
    pub std: f64,
}

impl RowStats {
    /// Population mean and standard deviation of `x`.
    pub fn of(x: impl IntoIterator<Item = f32> + Clone) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        for v in x.clone() {
            sum += v as f64;
            n += 1;
        }
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = sum / n as f64;
        let var = x
            .into_iter()
            .map(|v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Row statistics of a C x T matrix.
pub fn row_stats(x: ArrayView2<f32>) -> Vec<RowStats> {
    x.axis_iter(Axis(0))
        .map(|row| RowStats::of(row.iter().copied()))
        .collect()
}

/// Applies `(x - mean) / max(std, eps)` per row. Constant rows become zeros.
pub fn zscore_normalize(x: ArrayView2<f32>, stats: &[RowStats]) -> Result<Array2<f32>> {
    if stats.len() != x.nrows() {
        return Err(Error::LengthMismatch {
            expected: x.nrows(),
            actual: stats.len(),
        });
    }
    let mut out = x.to_owned();
    for (mut row, s) in out.axis_iter_mut(Axis(0)).zip(stats) {
        let scale = s.std.max(STD_EPS);
        row.mapv_inplace(|v| ((v as f64 - s.mean) / scale) as f32);
    }
    Ok(out)
}

/// Removes `round(trim_seconds * rate)` samples from both ends.
pub fn trim_edges(s: &ScoreSequence, trim_seconds: f64) -> Result<ScoreSequence> {
    let n = seconds_to_samples(trim_seconds, s.rate_hz);
    if n == 0 {
        return Ok(s.clone());
    }
    if s.len() <= 2 * n {
        return Err(Error::TooShort {
            len: s.len(),
            trim: n,
        });
    }
    ScoreSequence::new(s.values[n..s.len() - n].to_vec(), s.rate_hz)
}
