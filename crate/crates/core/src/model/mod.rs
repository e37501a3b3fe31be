//! The shared-backbone, split-projection, two-head network.

pub mod backbone;
pub mod checkpoint;
pub mod heads;

pub use backbone::{Backbone, BackboneSpec, FEATURE_SIDE};
pub use heads::{ClassifierHead, HeadShape, Heads, PathLogits, Projection};

use crate::error::{Error, Result};
use crate::frontend::{batch_tensor, FeatureImage, FrontendParams, Mode};
use crate::nn::linear::softmax_rows;
use crate::nn::param::join;
use crate::nn::{Float, Param, Parameterized};
use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Images per backbone call during batched inference.
pub const INFERENCE_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub subject_id: u32,
    pub active: bool,
}

/// Speaker classes in output-row order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub entries: Vec<RosterEntry>,
}

impl Roster {
    pub fn new(ids: &[u32]) -> Result<Self> {
        let mut r = Self::default();
        for &id in ids {
            r.push(id)?;
        }
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.subject_id).collect()
    }

    pub fn index_of(&self, subject_id: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.subject_id == subject_id)
    }

    pub fn contains_active(&self, subject_id: u32) -> bool {
        self.entries.iter().any(|e| e.subject_id == subject_id && e.active)
    }

    pub fn push(&mut self, subject_id: u32) -> Result<()> {
        if self.index_of(subject_id).is_some() {
            return Err(Error::DuplicateSubject(subject_id));
        }
        self.entries.push(RosterEntry { subject_id, active: true });
        Ok(())
    }

    pub fn set_active(&mut self, subject_id: u32, active: bool) -> Result<()> {
        let i = self.index_of(subject_id).ok_or(Error::UnknownSubject(subject_id))?;
        self.entries[i].active = active;
        Ok(())
    }
}

/// Scores of the four paths for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub y_s_hat: Vec<f64>,
    pub y_w_hat: Vec<f64>,
    pub y_sw_hat: Vec<f64>,
    pub y_ws_hat: Vec<f64>,
}

/// Row-per-input score matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub s: Array2<f64>,
    pub w: Array2<f64>,
    pub sw: Array2<f64>,
    pub ws: Array2<f64>,
}

impl PredictionBatch {
    pub fn from_logits<T: Float>(l: &PathLogits<T>) -> Self {
        Self {
            s: softmax_rows(&l.s.view()),
            w: softmax_rows(&l.w.view()),
            sw: softmax_rows(&l.sw.view()),
            ws: softmax_rows(&l.ws.view()),
        }
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Predictions {
        Predictions {
            y_s_hat: self.s.row(i).to_vec(),
            y_w_hat: self.w.row(i).to_vec(),
            y_sw_hat: self.sw.row(i).to_vec(),
            y_ws_hat: self.ws.row(i).to_vec(),
        }
    }

    pub fn append(&mut self, other: PredictionBatch) {
        for (a, b) in [(&mut self.s, other.s), (&mut self.w, other.w), (&mut self.sw, other.sw), (&mut self.ws, other.ws)] {
            a.append(Axis(0), b.view()).expect("matching widths");
        }
    }

    fn empty(m: usize, n: usize) -> Self {
        Self { s: Array2::zeros((0, m)), w: Array2::zeros((0, n)), sw: Array2::zeros((0, n)), ws: Array2::zeros((0, m)) }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Architecture choices that are fixed at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub image_size: usize,
    pub speaker_shape: HeadShape,
    pub keyword_shape: HeadShape,
}

impl ModelConfig {
    pub fn new(backbone: BackboneSpec, image_size: usize) -> Self {
        Self { backbone, image_size, speaker_shape: HeadShape::speaker(), keyword_shape: HeadShape::keyword() }
    }
}

/// Where a checkpoint came from and what was done to it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: Option<String>,
    pub events: Vec<String>,
}

pub struct S2CModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub heads: Heads<f32>,
    pub roster: Roster,
    pub keywords: Vec<String>,
    pub mode: Mode,
    pub frontend: FrontendParams,
    /// Verification threshold computed on the training data, if any.
    pub lambda: Option<f64>,
    pub id: String,
    pub lineage: Lineage,
    backbone_images: AtomicUsize,
}

impl Clone for S2CModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            roster: self.roster.clone(),
            keywords: self.keywords.clone(),
            mode: self.mode,
            frontend: self.frontend.clone(),
            lambda: self.lambda,
            id: self.id.clone(),
            lineage: self.lineage.clone(),
            backbone_images: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for S2CModel {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.backbone == o.backbone
            && self.heads == o.heads
            && self.roster == o.roster
            && self.keywords == o.keywords
            && self.mode == o.mode
            && self.frontend == o.frontend
            && self.lambda == o.lambda
            && self.id == o.id
            && self.lineage == o.lineage
    }
}

impl std::fmt::Debug for S2CModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("S2CModel")
            .field("id", &self.id)
            .field("backbone", &self.config.backbone.name())
            .field("channels", &self.backbone.channels)
            .field("roster", &self.roster)
            .field("keywords", &self.keywords.len())
            .field("lambda", &self.lambda)
            .finish()
    }
}

impl S2CModel {
    pub fn new(
        config: ModelConfig,
        subjects: &[u32],
        keywords: Vec<String>,
        mode: Mode,
        frontend: FrontendParams,
        seed: u64,
    ) -> Result<Self> {
        if frontend.image_size != config.image_size {
            return Err(Error::Shape(format!(
                "frontend renders {} px images, model expects {}",
                frontend.image_size, config.image_size
            )));
        }
        if subjects.is_empty() || keywords.is_empty() {
            return Err(Error::Invalid("model needs at least one speaker and one keyword".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::build(&config.backbone, config.image_size, &mut rng)?;
        let heads = Heads::new(
            backbone.channels,
            FEATURE_SIDE,
            subjects.len(),
            keywords.len(),
            config.speaker_shape.clone(),
            config.keyword_shape.clone(),
            &mut rng,
        );
        Ok(Self {
            config,
            backbone,
            heads,
            roster: Roster::new(subjects)?,
            keywords,
            mode,
            frontend,
            lambda: None,
            id: format!("init-{seed:016x}"),
            lineage: Lineage::default(),
            backbone_images: AtomicUsize::new(0),
        })
    }

    pub fn speakers(&self) -> usize {
        self.heads.speaker_head.classes()
    }

    pub fn num_keywords(&self) -> usize {
        self.heads.keyword_head.classes()
    }

    pub fn channels(&self) -> usize {
        self.backbone.channels
    }

    /// Images pushed through the backbone since construction or the last reset.
    pub fn backbone_images(&self) -> usize {
        self.backbone_images.load(Ordering::Relaxed)
    }

    pub fn reset_backbone_counter(&self) {
        self.backbone_images.store(0, Ordering::Relaxed);
    }

    /// `(B, 3, S, S)` → `(B, C, 7, 7)`.
    pub fn extract_features(&self, images: &Array4<f32>) -> Result<Array4<f32>> {
        let f = self.backbone.forward(images)?;
        self.backbone_images.fetch_add(images.dim().0, Ordering::Relaxed);
        Ok(f)
    }

    /// Feature maps for many images, batched.
    pub fn features_of(&self, images: &[&FeatureImage]) -> Result<Array4<f32>> {
        let c = self.channels();
        let mut out = Array4::zeros((0, c, FEATURE_SIDE, FEATURE_SIDE));
        for chunk in images.chunks(INFERENCE_BATCH) {
            self.check_images(chunk)?;
            let f = self.extract_features(&batch_tensor(chunk))?;
            out.append(Axis(0), f.view()).expect("feature shapes agree");
        }
        Ok(out)
    }

    fn check_images(&self, imgs: &[&FeatureImage]) -> Result<()> {
        for i in imgs {
            if i.size() != self.config.image_size {
                return Err(Error::Shape(format!("image is {} px, model expects {}", i.size(), self.config.image_size)));
            }
            if i.mode != self.mode {
                return Err(Error::Invalid(format!("image mode {} but model trained on {}", i.mode, self.mode)));
            }
        }
        Ok(())
    }

    /// All four score vectors from precomputed feature maps.
    pub fn predict_features(&self, features: Array4<f32>) -> Result<PredictionBatch> {
        let (logits, _) = self.heads.forward(features)?;
        Ok(PredictionBatch::from_logits(&logits))
    }

    /// One backbone call, then both projections, both heads and both cross paths.
    pub fn forward_full(&self, image: &FeatureImage) -> Result<Predictions> {
        Ok(self.forward_batch(&[image])?.get(0))
    }

    pub fn forward_batch(&self, images: &[&FeatureImage]) -> Result<PredictionBatch> {
        let mut out = PredictionBatch::empty(self.speakers(), self.num_keywords());
        for chunk in images.chunks(INFERENCE_BATCH) {
            self.check_images(chunk)?;
            let f = self.extract_features(&batch_tensor(chunk))?;
            out.append(self.predict_features(f)?);
        }
        Ok(out)
    }

    /// Speaker-head second hidden layer on the subject features, one row per image.
    pub fn dvectors(&self, images: &[&FeatureImage]) -> Result<Array2<f32>> {
        let width = self.heads.speaker_head.shape.hidden2;
        let mut out = Array2::zeros((0, width));
        for chunk in images.chunks(INFERENCE_BATCH) {
            self.check_images(chunk)?;
            let f = self.extract_features(&batch_tensor(chunk))?;
            let fs = self.heads.subject_projection.forward(&f)?;
            let (_, cache) = self.heads.speaker_head.forward(fs)?;
            out.append(Axis(0), cache.a2.view()).expect("d-vector width");
        }
        Ok(out)
    }

    /// SHA-256 over the parameters whose names start with `prefix` (all when empty).
    pub fn param_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, p| {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                for v in p.values() {
                    h.update(v.to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }
}

impl Parameterized<f32> for S2CModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.heads.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.heads.visit_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::NormStats;

    fn tiny_model() -> S2CModel {
        let cfg = ModelConfig {
            backbone: BackboneSpec::Small { widths: vec![4, 4, 4, 4, 4] },
            image_size: 28,
            speaker_shape: HeadShape { hidden1: 8, act1: crate::nn::Activation::Relu, hidden2: 6 },
            keyword_shape: HeadShape { hidden1: 8, act1: crate::nn::Activation::Sigmoid, hidden2: 8 },
        };
        let kws = (0..10).map(|k| format!("k{k}")).collect();
        S2CModel::new(cfg, &[1, 2, 3, 4, 5], kws, Mode::Mel, FrontendParams::default().with_image_size(28), 9).unwrap()
    }

    fn image(seed: u32) -> FeatureImage {
        let plane = Array2::from_shape_fn((28, 28), |(i, j)| ((i * 31 + j * 17 + seed as usize) % 23) as f32 / 23.0);
        FeatureImage { plane, mode: Mode::Mel, stats: NormStats { min: 0.0, max: 1.0 } }
    }

    #[test]
    fn forward_full_shapes_and_simplex() {
        let m = tiny_model();
        let p = m.forward_full(&image(0)).unwrap();
        assert_eq!((p.y_s_hat.len(), p.y_w_hat.len(), p.y_sw_hat.len(), p.y_ws_hat.len()), (5, 10, 10, 5));
        for v in [&p.y_s_hat, &p.y_w_hat, &p.y_sw_hat, &p.y_ws_hat] {
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn backbone_runs_once_per_input() {
        let m = tiny_model();
        let imgs: Vec<FeatureImage> = (0..3).map(image).collect();
        let refs: Vec<&FeatureImage> = imgs.iter().collect();
        m.reset_backbone_counter();
        m.forward_batch(&refs).unwrap();
        assert_eq!(m.backbone_images(), 3);
        m.forward_full(&imgs[0]).unwrap();
        assert_eq!(m.backbone_images(), 4);
    }

    #[test]
    fn zeroed_output_layers_give_uniform_paths() {
        let mut m = tiny_model();
        for h in [&mut m.heads.speaker_head, &mut m.heads.keyword_head] {
            h.out.weight.values_mut().fill(0.0);
        }
        let p = m.forward_full(&image(1)).unwrap();
        assert!(p.y_s_hat.iter().chain(&p.y_ws_hat).all(|&v| (v - 0.2).abs() < 1e-12));
        assert!(p.y_w_hat.iter().chain(&p.y_sw_hat).all(|&v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn evaluation_is_deterministic_and_order_preserving() {
        let m = tiny_model();
        let imgs: Vec<FeatureImage> = (0..4).map(image).collect();
        let refs: Vec<&FeatureImage> = imgs.iter().collect();
        let a = m.forward_batch(&refs).unwrap();
        let b = m.forward_batch(&refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(2), m.forward_full(&imgs[2]).unwrap());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
