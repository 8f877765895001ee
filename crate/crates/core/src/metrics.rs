//! Speech/silence classification metrics and threshold calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::check_binary;

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2 TP / (2 TP + FP + FN)`, or 0 when the denominator is empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// Counts for the opposite class.
    pub fn mirrored(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub speech: ClassCounts,
    pub silence: ClassCounts,
}

impl ConfusionCounts {
    pub fn f1_speech(&self) -> f64 {
        self.speech.f1()
    }

    pub fn f1_silence(&self) -> f64 {
        self.silence.f1()
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    check_binary(pred.iter().map(|&v| v as f64))?;
    check_binary(truth.iter().map(|&v| v as f64))?;
    // index = 2 * truth + pred
    let mut cells = [0u64; 4];
    for (&p, &t) in pred.iter().zip(truth) {
        cells[(2 * t + p) as usize] += 1;
    }
    let speech = ClassCounts {
        tn: cells[0],
        fp: cells[1],
        fn_: cells[2],
        tp: cells[3],
    };
    Ok(ConfusionCounts {
        speech,
        silence: speech.mirrored(),
    })
}

/// Unweighted mean of the speech and silence F1 scores.
pub fn f1_macro(c: &ConfusionCounts) -> f64 {
    (c.speech.f1() + c.silence.f1()) / 2.0
}

/// 1 where `score > threshold`, else 0.
pub fn binarize(scores: &[f32], threshold: f64) -> Vec<u8> {
    scores
        .iter()
        .map(|&s| (s as f64 > threshold) as u8)
        .collect()
}

pub const QUANTILE_CANDIDATES: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    /// Quantile of the calibration scores the value was taken from.
    pub quantile: f64,
    /// Calibration F1-macro at this threshold.
    pub f1_macro: f64,
    /// Scores were negated before thresholding.
    pub inverted: bool,
}

impl Threshold {
    pub fn apply(&self, scores: &[f32]) -> Vec<u8> {
        if self.inverted {
            scores
                .iter()
                .map(|&s| (-(s as f64) > self.value) as u8)
                .collect()
        } else {
            binarize(scores, self.value)
        }
    }
}

/// Nearest-rank quantile of ascending `sorted`: element `round(q (n - 1))`.
pub fn nearest_rank(sorted: &[f32], q: f64) -> f32 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Picks the threshold that maximizes F1-macro over the 201 quantiles
/// `0, 0.005, ..., 1` of the scores; exact ties go to the candidate nearest
/// the median.
pub fn select_threshold(scores: &[f32], labels: &[u8]) -> Result<Threshold> {
    select_threshold_with(scores, labels, false)
}

/// As [`select_threshold`]; with `allow_inversion` the sweep also tries the
/// negated scores and keeps whichever polarity scores higher.
pub fn select_threshold_with(
    scores: &[f32],
    labels: &[u8],
    allow_inversion: bool,
) -> Result<Threshold> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    check_binary(labels.iter().map(|&v| v as f64))?;
    let positives = labels.iter().filter(|&&v| v == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClassLabels);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig(format!("score {i} is not finite")));
    }
    let best = sweep(scores, labels, false);
    if !allow_inversion {
        return Ok(best);
    }
    let negated: Vec<f32> = scores.iter().map(|s| -s).collect();
    let inv = sweep(&negated, labels, true);
    Ok(if inv.f1_macro > best.f1_macro {
        inv
    } else {
        best
    })
}

fn sweep(scores: &[f32], labels: &[u8], inverted: bool) -> Threshold {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f32> = order.iter().map(|&i| scores[i]).collect();
    // speech labels at or below each sorted position
    let mut pos_prefix = Vec::with_capacity(sorted.len() + 1);
    pos_prefix.push(0u64);
    for &i in &order {
        let last = *pos_prefix.last().expect("non-empty");
        pos_prefix.push(last + labels[i] as u64);
    }
    let n = sorted.len() as u64;
    let total_pos = *pos_prefix.last().expect("non-empty");
    let mid = (QUANTILE_CANDIDATES - 1) / 2;
    let mut best: Option<(usize, Threshold)> = None;
    for k in 0..QUANTILE_CANDIDATES {
        let q = k as f64 / (QUANTILE_CANDIDATES - 1) as f64;
        let value = nearest_rank(&sorted, q);
        // predictions are 1 exactly for scores strictly above `value`
        let below = sorted.partition_point(|&s| s <= value);
        let fn_ = pos_prefix[below];
        let tp = total_pos - fn_;
        let predicted_pos = n - below as u64;
        let fp = predicted_pos - tp;
        let tn = n - tp - fp - fn_;
        let speech = ClassCounts { tp, fp, fn_, tn };
        let f1 = f1_macro(&ConfusionCounts {
            speech,
            silence: speech.mirrored(),
        });
        let cand = Threshold {
            value: value as f64,
            quantile: q,
            f1_macro: f1,
            inverted,
        };
        let better = match &best {
            None => true,
            Some((bk, b)) => {
                f1 > b.f1_macro || (f1 == b.f1_macro && k.abs_diff(mid) < bk.abs_diff(mid))
            }
        };
        if better {
            best = Some((k, cand));
        }
    }
    best.expect("at least one candidate").1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_fixture() {
        let c = confusion(&[1, 0, 0, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(
            c.speech,
            ClassCounts {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        let perfect = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((perfect.speech.fp, perfect.speech.fn_), (0, 0));
        assert_eq!((perfect.silence.fp, perfect.silence.fn_), (0, 0));
        assert!(matches!(
            confusion(&[1, 0, 0, 1], &[1, 0, 0, 1, 0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion(&[2], &[1]),
            Err(Error::NonBinaryLabels { .. })
        ));
    }

    #[test]
    fn f1_fixtures() {
        let c = confusion(&[1, 0, 0, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(c.f1_speech(), 0.5);
        assert_eq!(c.f1_silence(), 0.5);
        assert_eq!(f1_macro(&c), 0.5);
        let c = confusion(&[1, 1], &[1, 0]).unwrap();
        assert_eq!(c.f1_speech(), 2.0 / 3.0);
        assert_eq!(c.f1_silence(), 0.0);
        assert_eq!(f1_macro(&c), 1.0 / 3.0);
        assert_eq!(f1_macro(&confusion(&[0, 1, 1], &[0, 1, 1]).unwrap()), 1.0);
    }

    #[test]
    fn binarize_fixtures() {
        assert_eq!(binarize(&[0.2, 0.8], 0.5), vec![0, 1]);
        assert_eq!(binarize(&[0.2, 0.8], -1.0), vec![1, 1]);
        assert_eq!(binarize(&[0.2, 0.8], 2.0), vec![0, 0]);
    }

    #[test]
    fn threshold_on_perfect_scores() {
        let labels = [0u8, 1, 1, 0, 1, 0, 0, 1];
        let scores: Vec<f32> = labels.iter().map(|&v| v as f32).collect();
        let t = select_threshold(&scores, &labels).unwrap();
        assert_eq!(t.f1_macro, 1.0);
        assert_eq!(binarize(&scores, t.value), labels.to_vec());
        assert!(matches!(
            select_threshold(&scores, &[1; 8]),
            Err(Error::SingleClassLabels)
        ));
    }

    /// Brute force over every candidate with the slow path.
    fn exhaustive_best(scores: &[f32], labels: &[u8]) -> f64 {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f32::total_cmp);
        (0..QUANTILE_CANDIDATES)
            .map(|k| {
                let v = nearest_rank(&sorted, k as f64 / 200.0) as f64;
                f1_macro(&confusion(&binarize(scores, v), labels).unwrap())
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn inverted_scores_need_the_polarity_flag() {
        let labels: Vec<u8> = (0..200).map(|i| ((i / 7) % 2) as u8).collect();
        let scores: Vec<f32> = labels.iter().map(|&v| -(v as f32)).collect();
        let t = select_threshold(&scores, &labels).unwrap();
        assert_eq!(t.f1_macro, exhaustive_best(&scores, &labels));
        assert!(t.f1_macro < 0.5);
        let inv = select_threshold_with(&scores, &labels, true).unwrap();
        assert!(inv.inverted);
        assert_eq!(inv.f1_macro, 1.0);
        assert_eq!(inv.apply(&scores), labels);
    }

    #[test]
    fn ties_prefer_the_median_candidate() {
        // every candidate between the two score levels is perfect
        let labels = [0u8, 0, 0, 0, 1, 1, 1, 1];
        let scores = [0.0f32, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let t = select_threshold(&scores, &labels).unwrap();
        assert_eq!(t.f1_macro, 1.0);
        assert!((t.quantile - 0.5).abs() <= 0.5);
        assert_eq!(t.value, 0.0);
    }

    fn pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..500).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..=1, n),
                proptest::collection::vec(0u8..=1, n),
            )
        })
    }

    proptest! {
        #[test]
        fn macro_f1_is_symmetric_under_relabeling((p, t) in pair()) {
            let flip = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<_>>();
            let a = f1_macro(&confusion(&p, &t).unwrap());
            let b = f1_macro(&confusion(&flip(&p), &flip(&t)).unwrap());
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn counts_are_consistent((p, t) in pair()) {
            let c = confusion(&p, &t).unwrap();
            prop_assert_eq!(c.speech.total(), p.len() as u64);
            prop_assert_eq!(c.silence, c.speech.mirrored());
        }

        #[test]
        fn binarize_is_monotone(scores in proptest::collection::vec(-5.0f32..5.0, 1..100), a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (pl, ph) = (binarize(&scores, lo), binarize(&scores, hi));
            prop_assert!(pl.iter().zip(&ph).all(|(x, y)| x >= y));
        }

        #[test]
        fn threshold_matches_exhaustive_sweep_and_ignores_monotone_transforms(
            scores in proptest::collection::vec(-3.0f32..3.0, 4..300),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = scores.iter().map(|&s| ((s + rng.gen_range(-1.5f32..1.5)) > 0.0) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let t = select_threshold(&scores, &labels).unwrap();
            prop_assert_eq!(t.f1_macro, exhaustive_best(&scores, &labels));
            let pred = binarize(&scores, t.value);
            prop_assert_eq!(f1_macro(&confusion(&pred, &labels).unwrap()), t.f1_macro);

            let warped: Vec<f32> = scores.iter().map(|&s| ((s as f64).exp() * 3.0 + 1.0) as f32).collect();
            // rounding to f32 must not merge distinct scores for the transform to be strict
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
            prop_assume!(idx.windows(2).all(|w| scores[w[0]] == scores[w[1]] || warped[w[0]] < warped[w[1]]));
            let tw = select_threshold(&warped, &labels).unwrap();
            prop_assert_eq!(binarize(&warped, tw.value), pred);
        }
    }
}
