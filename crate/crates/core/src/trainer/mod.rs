//! Two-stage training with validation-based model selection.

pub mod loss;

pub use loss::{grad_check, loss_and_grad, loss_components, reduced_grad_check, Labels, LossBreakdown, Terms};

use crate::dataset::UtteranceRecord;
use crate::error::{Error, IoContext, Result};
use crate::frontend::{batch_tensor, featurize, FeatureCache, FeatureImage, FrontendParams, Mode};
use crate::model::{argmax, PredictionBatch, Roster, S2CModel, FEATURE_SIDE};
use crate::nn::{Adam, Parameterized};
use crate::verifier::compute_threshold;
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Multiplier applied once per epoch, counted across both stages.
    pub lr_decay: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { initial_lr: 1e-4, lr_decay: 0.95, stage1_epochs: 10, stage2_epochs: 10, patience: 5, batch_size: 16, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("learning-rate decay must lie in (0, 1)");
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, patience and batch size must be positive");
        }
        if self.stage1_epochs > 10 || self.stage2_epochs > 10 {
            return bad("each stage runs at most 10 epochs");
        }
        if self.patience > self.stage1_epochs.min(self.stage2_epochs) {
            return bad("patience exceeds a stage length");
        }
        Ok(())
    }

    /// Learning rate for the zero-based epoch index across both stages.
    pub fn lr_at(&self, global_epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(global_epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// One-based within the stage.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_loss: f64,
    pub val_speaker_acc: f64,
    pub val_keyword_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Stage-2 epoch whose weights were kept.
    pub selected_epoch: Option<usize>,
    pub selected_id: String,
    /// Wall seconds per epoch, parallel to `records`; excluded from comparisons.
    #[serde(default)]
    pub epoch_seconds: Vec<f64>,
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn stage(&self, s: u8) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == s)
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).at(path)?;
        }
        Ok(())
    }
}

/// Lowest stage-2 validation loss; the earliest epoch wins ties.
pub fn select_best(history: &TrainHistory) -> Result<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in history.stage(2) {
        if best.is_none_or(|b| r.val_loss < b.val_loss) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch).ok_or_else(|| Error::Invalid("no stage-2 epochs to select from".into()))
}

/// Acoustic images with their subject ids and keyword indices.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub images: Vec<FeatureImage>,
    pub subject_ids: Vec<u32>,
    pub keywords: Vec<usize>,
}

impl LabeledSet {
    pub fn load(records: &[UtteranceRecord], mode: Mode, params: &FrontendParams, cache: Option<&FeatureCache>) -> Result<Self> {
        let paths: Vec<&Path> = records.iter().map(|r| r.path.as_path()).collect();
        Ok(Self {
            images: featurize(&paths, mode, params, cache)?,
            subject_ids: records.iter().map(|r| r.subject_id).collect(),
            keywords: records.iter().map(|r| r.keyword_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: FeatureImage, subject_id: u32, keyword: usize) {
        self.images.push(image);
        self.subject_ids.push(subject_id);
        self.keywords.push(keyword);
    }

    pub fn extend(&mut self, other: &LabeledSet) {
        self.images.extend(other.images.iter().cloned());
        self.subject_ids.extend(&other.subject_ids);
        self.keywords.extend(&other.keywords);
    }

    pub fn filter(&self, keep: impl Fn(u32, usize) -> bool) -> LabeledSet {
        let mut out = LabeledSet::default();
        for i in 0..self.len() {
            if keep(self.subject_ids[i], self.keywords[i]) {
                out.push(self.images[i].clone(), self.subject_ids[i], self.keywords[i]);
            }
        }
        out
    }

    pub fn image_refs(&self) -> Vec<&FeatureImage> {
        self.images.iter().collect()
    }

    /// Output-row labels under `roster`; every subject must be on it.
    pub fn labels(&self, roster: &Roster) -> Result<Labels> {
        let subjects = self
            .subject_ids
            .iter()
            .map(|&s| roster.index_of(s).ok_or(Error::UnknownSubject(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Labels { subjects, keywords: self.keywords.clone() })
    }
}

enum Inputs<'a> {
    Features(&'a Array4<f32>),
    Images(&'a [FeatureImage]),
}

impl Inputs<'_> {
    fn gather_images<'b>(imgs: &'b [FeatureImage], idx: &[usize]) -> Vec<&'b FeatureImage> {
        idx.iter().map(|&i| &imgs[i]).collect()
    }
}

struct ValStats {
    loss: f64,
    speaker_acc: f64,
    keyword_acc: f64,
}

fn evaluate(model: &S2CModel, inputs: &Inputs<'_>, labels: &Labels, batch: usize) -> Result<ValStats> {
    let n = labels.len();
    let mut losses = Vec::new();
    let (mut s_ok, mut w_ok) = (0usize, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch) {
        let f = match inputs {
            Inputs::Features(f) => f.select(Axis(0), chunk),
            Inputs::Images(imgs) => model.extract_features(&batch_tensor(&Inputs::gather_images(imgs, chunk)))?,
        };
        let (logits, _) = model.heads.forward(f)?;
        let lab = labels.select(chunk);
        let (l, _) = loss_and_grad(&logits, &lab)?;
        losses.push(l.total);
        let p = PredictionBatch::from_logits(&logits);
        for (k, _) in chunk.iter().enumerate() {
            s_ok += (argmax(p.s.row(k).as_slice().expect("row")) == lab.subjects[k]) as usize;
            w_ok += (argmax(p.w.row(k).as_slice().expect("row")) == lab.keywords[k]) as usize;
        }
    }
    Ok(ValStats {
        loss: losses.iter().sum::<f64>() / losses.len() as f64,
        speaker_acc: s_ok as f64 / n as f64,
        keyword_acc: w_ok as f64 / n as f64,
    })
}

/// One pass over the training data; the backbone is only updated in stage 2.
fn train_epoch(
    model: &mut S2CModel,
    adam: &mut Adam,
    inputs: &Inputs<'_>,
    labels: &Labels,
    order: &[usize],
    batch: usize,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for chunk in order.chunks(batch) {
        let lab = labels.select(chunk);
        let l = match inputs {
            Inputs::Features(f) => {
                let (logits, cache) = model.heads.forward(f.select(Axis(0), chunk))?;
                let (l, d) = loss_and_grad(&logits, &lab)?;
                model.heads.zero_grad();
                model.heads.backward(&cache, &d, false);
                adam.step(model, lr, &|name| !name.starts_with("backbone"));
                l
            }
            Inputs::Images(imgs) => {
                let x = batch_tensor(&Inputs::gather_images(imgs, chunk));
                let (f, bcache) = model.backbone.forward_train(&x)?;
                let (logits, hcache) = model.heads.forward(f)?;
                let (l, d) = loss_and_grad(&logits, &lab)?;
                model.zero_grad();
                let df = model.heads.backward(&hcache, &d, true).expect("feature gradient");
                model.backbone.backward(bcache, df);
                adam.step(model, lr, &|_| true);
                l
            }
        };
        if !l.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        parts.push(l);
    }
    Ok(LossBreakdown::mean(&parts))
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: S2CModel,
    pub history: TrainHistory,
}

fn features_of_set(model: &S2CModel, set: &LabeledSet) -> Result<Array4<f32>> {
    let f = model.features_of(&set.image_refs())?;
    debug_assert_eq!(f.dim().2, FEATURE_SIDE);
    Ok(f)
}

/// Stage 1 trains projections and heads on frozen backbone features; stage 2
/// fine-tunes everything. Returns the stage-2 epoch with lowest validation loss.
pub fn train_two_stage(model: S2CModel, train: &LabeledSet, val: &LabeledSet, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation sets must be nonempty".into()));
    }
    let mut model = model;
    let train_labels = train.labels(&model.roster)?;
    let val_labels = val.labels(&model.roster)?;
    if let Some(&w) = train.keywords.iter().chain(&val.keywords).find(|&&w| w >= model.num_keywords()) {
        return Err(Error::Invalid(format!("keyword {w} outside the model's {} classes", model.num_keywords())));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut global = 0usize;
    let mut best: Option<(f64, S2CModel)> = None;

    for stage in [1u8, 2] {
        let mut adam = Adam::new();
        let (cached_train, cached_val);
        let (tin, vin) = if stage == 1 {
            cached_train = features_of_set(&model, train)?;
            cached_val = features_of_set(&model, val)?;
            (Inputs::Features(&cached_train), Inputs::Features(&cached_val))
        } else {
            (Inputs::Images(&train.images), Inputs::Images(&val.images))
        };
        let epochs = if stage == 1 { cfg.stage1_epochs } else { cfg.stage2_epochs };
        let mut best_acc = f64::NEG_INFINITY;
        let mut stale = 0;
        for epoch in 1..=epochs {
            let t0 = Instant::now();
            let lr = cfg.lr_at(global);
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let diverged = |history: &TrainHistory| Error::Diverged { stage, epoch, history: Box::new(history.clone()) };
            let tl = match train_epoch(&mut model, &mut adam, &tin, &train_labels, &order, cfg.batch_size, lr) {
                Err(Error::NonFinite(_)) => return Err(diverged(&history)),
                other => other?,
            };
            let v = match evaluate(&model, &vin, &val_labels, cfg.batch_size) {
                Err(Error::NonFinite(_)) => return Err(diverged(&history)),
                other => other?,
            };
            if !v.loss.is_finite() {
                return Err(diverged(&history));
            }
            log::info!(
                "stage {stage} epoch {epoch}: lr {lr:.2e} train {:.4} val {:.4} spk {:.3} kw {:.3}",
                tl.total,
                v.loss,
                v.speaker_acc,
                v.keyword_acc
            );
            history.records.push(EpochRecord {
                stage,
                epoch,
                lr,
                train: tl,
                val_loss: v.loss,
                val_speaker_acc: v.speaker_acc,
                val_keyword_acc: v.keyword_acc,
            });
            history.epoch_seconds.push(t0.elapsed().as_secs_f64());
            global += 1;
            if stage == 2 && best.as_ref().is_none_or(|(l, _)| v.loss < *l) {
                best = Some((v.loss, model.clone()));
            }
            let acc = (v.speaker_acc + v.keyword_acc) / 2.0;
            if acc > best_acc {
                best_acc = acc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    log::info!("stage {stage}: no validation improvement for {stale} epochs, stopping");
                    break;
                }
            }
        }
    }

    let selected = select_best(&history)?;
    let mut model = best.expect("stage 2 ran").1;
    // a single-speaker model has no runner-up score to verify against
    model.lambda = if model.speakers() >= 2 {
        Some(compute_threshold(predict_set(&model, train)?.s.view())?)
    } else {
        None
    };
    let parent = model.id.clone();
    model.id = format!("{}-{}", model.config.backbone.name(), &model.param_hash("")[..12]);
    model.lineage.parent = Some(parent);
    model.lineage.events.push(format!(
        "trained on {} clips, seed {}, stage-2 epoch {selected} selected",
        train.len(),
        cfg.seed
    ));
    history.selected_epoch = Some(selected);
    history.selected_id = model.id.clone();
    history.wall_seconds = start.elapsed().as_secs_f64();
    Ok(Trained { model, history })
}

/// Scores of every image in `set`, in order.
pub fn predict_set(model: &S2CModel, set: &LabeledSet) -> Result<PredictionBatch> {
    model.forward_batch(&set.image_refs())
}
