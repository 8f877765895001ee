//! Training loop: AdamW on the negative-Pearson objective over fixed-length
//! windows, with whole sessions held out for validation.

mod optim;
#[cfg(test)]
mod tests;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, leave_session_out_split, make_windows, SessionRecord, SplitPlan, TrainingWindow,
};
use crate::error::{Error, Result};
use crate::features::TargetMode;
use crate::io;
use crate::model::{checkpoint, ModelConfig, ShineModel};
use crate::nn::ParamSet;
use crate::signal::{pearson_corr, DegenerateRowPolicy};

pub use optim::{clip_global_norm, AdamW};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a strict improvement in validation Pearson before
    /// stopping; 0 disables early stopping.
    pub patience: usize,
    pub n_val_sessions: usize,
    pub mode: TargetMode,
    pub seed: u64,
    pub window_seconds: f64,
    pub stride_seconds: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Redraw the validation sessions at the start of every epoch instead of
    /// once per run.
    pub resplit_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            max_epochs: 20,
            batch_size: 8,
            patience: 4,
            n_val_sessions: 8,
            mode: TargetMode::Standard,
            seed: 0,
            window_seconds: dataset::WINDOW_SECONDS,
            stride_seconds: dataset::TRAIN_STRIDE_SECONDS,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            resplit_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return bad("weight_decay and clip_norm must be nonnegative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.window_seconds > 0.0 && self.stride_seconds > 0.0) {
            return bad("window and stride must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation Pearson (first on ties).
    pub best_epoch: usize,
    pub best_val_pearson: f64,
    pub checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    /// Split used for the final epoch.
    pub split: SplitPlan,
    /// Every session that contributed a gradient.
    pub trained_sessions: BTreeSet<String>,
    /// Sessions that were in the validation set of any epoch.
    pub validated_sessions: BTreeSet<String>,
}

/// Contents of `config.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Mean Pearson correlation between the last output row and the last target
/// row over `windows`. Windows with a constant binary target are skipped; a
/// constant prediction scores 0.
pub fn validate(model: &ShineModel, windows: &[TrainingWindow]) -> Result<f64> {
    let scores: Vec<Option<f64>> = windows
        .par_iter()
        .map(|w| -> Result<Option<f64>> {
            let truth = w.target.row(w.target.nrows() - 1);
            let first = truth[0];
            if truth.iter().all(|&v| v == first) {
                return Ok(None);
            }
            let out = model.forward(w.meg.view())?;
            let pred = out.row(out.nrows() - 1).to_vec();
            Ok(Some(window_pearson(&pred, &truth.to_vec())?))
        })
        .collect::<Result<_>>()?;
    mean_of_valid(&scores, windows.len())
}

fn window_pearson(pred: &[f32], truth: &[f32]) -> Result<f64> {
    match pearson_corr(pred, truth) {
        Err(Error::ZeroVariance) => Ok(0.0),
        other => other,
    }
}

/// Arithmetic mean of the scored windows, in window order.
pub fn mean_of_valid(scores: &[Option<f64>], total: usize) -> Result<f64> {
    let used: Vec<f64> = scores.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::AllWindowsDegenerate { count: total });
    }
    let skipped = total - used.len();
    if skipped > 0 {
        log::debug!("validation skipped {skipped} of {total} windows with a constant target");
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// One training run writing into `run_dir`.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub run_dir: PathBuf,
    /// Worker threads for gradient and validation passes; 0 picks the
    /// rayon default.
    pub jobs: usize,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        run_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            model_cfg,
            train_cfg,
            run_dir: run_dir.into(),
            jobs: 0,
        }
    }

    fn check(&self) -> Result<()> {
        self.train_cfg.validate()?;
        self.model_cfg.validate()?;
        let rows = self.train_cfg.mode.rows();
        if self.model_cfg.out_channels != rows {
            return Err(Error::InvalidConfig(format!(
                "{:?} targets have {rows} rows but the model outputs {}",
                self.train_cfg.mode, self.model_cfg.out_channels
            )));
        }
        Ok(())
    }

    /// Trains on in-memory sessions. With `split == None` the validation
    /// sessions are drawn from the run seed.
    pub fn run(
        &self,
        sessions: &[SessionRecord],
        split: Option<&SplitPlan>,
    ) -> Result<TrainReport> {
        self.check()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| self.run_inner(sessions, split))
    }

    fn run_inner(
        &self,
        sessions: &[SessionRecord],
        split: Option<&SplitPlan>,
    ) -> Result<TrainReport> {
        let cfg = &self.train_cfg;
        for s in sessions {
            if s.n_channels() != self.model_cfg.in_channels {
                return Err(Error::InvalidConfig(format!(
                    "session {} has {} channels but the model expects {}",
                    s.session_id,
                    s.n_channels(),
                    self.model_cfg.in_channels
                )));
            }
        }
        let ids: Vec<String> = sessions.iter().map(|s| s.session_id.clone()).collect();
        let mut plan = match split {
            Some(p) => {
                check_split(p, &ids)?;
                p.clone()
            }
            None => leave_session_out_split(&ids, cfg.n_val_sessions, cfg.seed)?,
        };

        // Normalize and cut every session once; the split only selects.
        let mut windows: Vec<(String, Vec<TrainingWindow>)> = Vec::with_capacity(sessions.len());
        for s in sessions {
            let w = make_windows(
                &s.normalized(),
                cfg.window_seconds,
                cfg.stride_seconds,
                cfg.mode,
            )?;
            windows.push((s.session_id.clone(), w));
        }
        windows.sort_by(|a, b| a.0.cmp(&b.0));

        io::create_dir(&self.run_dir)?;
        io::write_json(
            &self.run_dir.join(CONFIG_FILE),
            &RunConfig {
                model: self.model_cfg.clone(),
                train: cfg.clone(),
            },
        )?;
        plan.save(&self.run_dir.join(SPLIT_FILE))?;

        let mut model = ShineModel::init(self.model_cfg.clone())?;
        let mut opt = AdamW::new(
            model.params(),
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
            cfg.weight_decay,
        );
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let best_path = self.run_dir.join(BEST_CHECKPOINT);
        let last_path = self.run_dir.join(LAST_CHECKPOINT);
        let mut metrics = csv::Writer::from_path(self.run_dir.join(METRICS_FILE))
            .map_err(|e| crate::inference::csv_error(&self.run_dir.join(METRICS_FILE), e))?;
        metrics
            .write_record(["epoch", "train_loss", "val_pearson"])
            .map_err(|e| crate::inference::csv_error(&self.run_dir.join(METRICS_FILE), e))?;

        let mut records = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        let mut since_best = 0;
        let mut trained = BTreeSet::new();
        let mut validated = BTreeSet::new();

        for epoch in 1..=cfg.max_epochs {
            if cfg.resplit_each_epoch && epoch > 1 {
                plan = leave_session_out_split(
                    &ids,
                    plan.val_sessions.len(),
                    cfg.seed.wrapping_add(epoch as u64 - 1),
                )?;
            }
            let (train_w, val_w) = select(&windows, &plan);
            if train_w.is_empty() {
                return Err(Error::TooFewSessions {
                    needed: plan.val_sessions.len(),
                    found: ids.len(),
                });
            }
            validated.extend(plan.val_sessions.iter().cloned());

            let mut order: Vec<&TrainingWindow> = train_w;
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            let mut loss_count = 0usize;
            for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
                let batch_loss = self.step(&mut model, &mut opt, batch, epoch, batch_idx)?;
                if let Some((loss, used)) = batch_loss {
                    loss_sum += loss * used as f64;
                    loss_count += used;
                    for w in batch {
                        debug_assert!(!plan.val_sessions.contains(&w.session_id));
                        trained.insert(w.session_id.clone());
                    }
                }
            }
            let train_loss = if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                0.0
            };

            let val_pearson = if val_w.is_empty() {
                return Err(Error::TooFewSessions {
                    needed: 1,
                    found: 0,
                });
            } else {
                let owned: Vec<TrainingWindow> = val_w.into_iter().cloned().collect();
                validate(&model, &owned)?
            };
            let record = EpochRecord {
                epoch,
                train_loss,
                val_pearson,
            };
            log::info!("epoch {epoch}: train_loss {train_loss:.5} val_pearson {val_pearson:.5}");
            metrics
                .write_record([
                    epoch.to_string(),
                    train_loss.to_string(),
                    val_pearson.to_string(),
                ])
                .and_then(|_| metrics.flush().map_err(csv::Error::from))
                .map_err(|e| crate::inference::csv_error(&self.run_dir.join(METRICS_FILE), e))?;
            records.push(record);

            checkpoint::save(&model, &last_path)?;
            if best.map_or(true, |(_, b)| val_pearson > b) {
                best = Some((epoch, val_pearson));
                since_best = 0;
                checkpoint::save(&model, &best_path)?;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    log::info!("stopping after {since_best} epochs without improvement");
                    break;
                }
            }
        }

        let (best_epoch, best_val_pearson) = best.expect("at least one epoch");
        Ok(TrainReport {
            epochs: records,
            best_epoch,
            best_val_pearson,
            checkpoint: best_path,
            last_checkpoint: last_path,
            split: plan,
            trained_sessions: trained,
            validated_sessions: validated,
        })
    }

    /// One optimizer step on `batch`. Returns the mean loss and the number of
    /// windows that carried a gradient, or `None` when none did.
    fn step(
        &self,
        model: &mut ShineModel,
        opt: &mut AdamW,
        batch: &[&TrainingWindow],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<Option<(f64, usize)>> {
        let results: Vec<_> = {
            let m: &ShineModel = model;
            batch
                .par_iter()
                .map(|w| {
                    m.loss_and_grad::<f32>(
                        m.params(),
                        w.meg.view(),
                        w.target.view(),
                        DegenerateRowPolicy::Skip,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        let mut grads: Option<ParamSet<f32>> = None;
        let mut loss = 0.0;
        let mut used = 0usize;
        for r in results.iter().filter(|r| r.loss.rows_used > 0) {
            loss += r.loss.loss;
            used += 1;
            match grads.as_mut() {
                Some(g) => g.add_assign(&r.grads),
                None => grads = Some(r.grads.clone()),
            }
        }
        let Some(mut grads) = grads else {
            return Ok(None);
        };
        loss /= used as f64;
        grads.scale(1.0 / used as f32);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_idx,
                detail: format!("batch loss {loss}"),
            });
        }
        let norm = if self.train_cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.train_cfg.clip_norm)
        } else {
            grads.global_norm()
        };
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_idx,
                detail: format!("gradient norm {norm} at loss {loss}"),
            });
        }
        opt.step(model.params_mut(), &grads);
        if !model.params().all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_idx,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        Ok(Some((loss, used)))
    }
}

fn check_split(plan: &SplitPlan, ids: &[String]) -> Result<()> {
    let known: BTreeSet<&String> = ids.iter().collect();
    for id in plan.train_sessions.iter().chain(&plan.val_sessions) {
        if !known.contains(id) {
            return Err(Error::InvalidConfig(format!(
                "split names unknown session {id}"
            )));
        }
    }
    if !plan.train_sessions.is_disjoint(&plan.val_sessions) {
        return Err(Error::InvalidConfig(
            "split train and val sets overlap".into(),
        ));
    }
    if plan.train_sessions.is_empty() || plan.val_sessions.is_empty() {
        return Err(Error::TooFewSessions {
            needed: plan.val_sessions.len().max(1),
            found: ids.len(),
        });
    }
    Ok(())
}

fn select<'a>(
    windows: &'a [(String, Vec<TrainingWindow>)],
    plan: &SplitPlan,
) -> (Vec<&'a TrainingWindow>, Vec<&'a TrainingWindow>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (id, ws) in windows {
        if plan.val_sessions.contains(id) {
            val.extend(ws.iter());
        } else if plan.train_sessions.contains(id) {
            train.extend(ws.iter());
        }
    }
    (train, val)
}

/// Loads every session under `data_root` and trains into `run_dir`.
pub fn train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data_root: &Path,
    run_dir: &Path,
) -> Result<TrainReport> {
    train_cfg.validate()?;
    let sessions = dataset::load_all(data_root)?;
    if sessions.len() <= train_cfg.n_val_sessions {
        return Err(Error::TooFewSessions {
            needed: train_cfg.n_val_sessions,
            found: sessions.len(),
        });
    }
    Trainer::new(model_cfg, train_cfg, run_dir).run(&sessions, None)
}

/// Validation Pearson of a checkpoint on the validation sessions of `plan`.
pub fn validate_checkpoint(
    path: &Path,
    sessions: &[SessionRecord],
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<f64> {
    let model = checkpoint::load(path)?;
    let mut windows = Vec::new();
    let mut val: Vec<&SessionRecord> = sessions
        .iter()
        .filter(|s| plan.val_sessions.contains(&s.session_id))
        .collect();
    val.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    for s in val {
        windows.extend(make_windows(
            &s.normalized(),
            cfg.window_seconds,
            cfg.stride_seconds,
            cfg.mode,
        )?);
    }
    if windows.is_empty() {
        return Err(Error::TooFewSessions {
            needed: 1,
            found: 0,
        });
    }
    validate(&model, &windows)
}
