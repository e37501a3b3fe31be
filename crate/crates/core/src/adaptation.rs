//! Roster changes: few-shot addition of a speaker, and metadata-only departures.

use crate::error::{Error, Result};
use crate::model::{ClassifierHead, Projection, S2CModel};
use crate::trainer::{train_two_stage, LabeledSet, TrainConfig, Trained};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// The five networks of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Network {
    Backbone,
    SubjectProjection,
    KeywordProjection,
    SpeakerHead,
    KeywordHead,
}

impl Network {
    pub const ALL: [Network; 5] =
        [Self::Backbone, Self::SubjectProjection, Self::KeywordProjection, Self::SpeakerHead, Self::KeywordHead];

    /// Parameter-name prefix.
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::SubjectProjection => "subject_projection",
            Self::KeywordProjection => "keyword_projection",
            Self::SpeakerHead => "speaker_head",
            Self::KeywordHead => "keyword_head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptPlan {
    pub new_subject_id: u32,
    pub utterances_per_keyword: usize,
    pub warm_start: BTreeSet<Network>,
    pub reinit: BTreeSet<Network>,
}

impl AdaptPlan {
    /// Five clips per keyword; speaker path re-initialized, everything else warm.
    pub fn new(new_subject_id: u32) -> Self {
        use Network::*;
        Self {
            new_subject_id,
            utterances_per_keyword: 5,
            warm_start: [Backbone, KeywordProjection, KeywordHead].into(),
            reinit: [SubjectProjection, SpeakerHead].into(),
        }
    }

    pub fn with_shots(mut self, shots: usize) -> Self {
        self.utterances_per_keyword = shots;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances_per_keyword == 0 {
            return Err(Error::Invalid("adaptation needs at least one utterance per keyword".into()));
        }
        if !self.warm_start.is_disjoint(&self.reinit) {
            return Err(Error::Invalid("a network cannot be both warm-started and re-initialized".into()));
        }
        if self.warm_start.len() + self.reinit.len() != Network::ALL.len() {
            return Err(Error::Invalid("warm-start and re-init sets must cover all five networks".into()));
        }
        if !self.reinit.contains(&Network::SpeakerHead) {
            return Err(Error::Invalid("the speaker head must be rebuilt to grow its output".into()));
        }
        Ok(())
    }
}

/// Keeps the first `shots` clips per keyword of the new subject, in the given order.
pub fn take_shots(new_data: &LabeledSet, subject: u32, keywords: &[String], shots: usize) -> Result<LabeledSet> {
    let mut out = LabeledSet::default();
    let mut taken = vec![0usize; keywords.len()];
    for i in 0..new_data.len() {
        let (s, k) = (new_data.subject_ids[i], new_data.keywords[i]);
        if s != subject {
            return Err(Error::Invalid(format!("adaptation data contains subject {s}, expected only {subject}")));
        }
        if k >= keywords.len() {
            return Err(Error::Invalid(format!("keyword {k} outside the model's {} classes", keywords.len())));
        }
        if taken[k] < shots {
            taken[k] += 1;
            out.push(new_data.images[i].clone(), s, k);
        }
    }
    if let Some((k, &n)) = taken.iter().enumerate().find(|(_, &n)| n < shots) {
        return Err(Error::Unsatisfiable { subject, keyword: keywords[k].clone(), requested: shots, available: n });
    }
    Ok(out)
}

/// The untrained starting point: roster grown by one, `reinit` networks rebuilt.
pub fn grow_model(model: &S2CModel, plan: &AdaptPlan, seed: u64) -> Result<S2CModel> {
    plan.validate()?;
    if model.roster.index_of(plan.new_subject_id).is_some() {
        return Err(Error::DuplicateSubject(plan.new_subject_id));
    }
    let mut out = model.clone();
    out.roster.push(plan.new_subject_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada7_0000 ^ plan.new_subject_id as u64);
    let c = model.channels();
    let d = model.heads.speaker_head.input_width();
    let (m, n) = (out.roster.len(), model.num_keywords());
    for net in &plan.reinit {
        match net {
            Network::Backbone => out.backbone = crate::model::Backbone::build(&model.config.backbone, model.config.image_size, &mut rng)?,
            Network::SubjectProjection => out.heads.subject_projection = Projection::new(c, &mut rng),
            Network::KeywordProjection => out.heads.keyword_projection = Projection::new(c, &mut rng),
            Network::SpeakerHead => out.heads.speaker_head = ClassifierHead::new(d, m, model.config.speaker_shape.clone(), &mut rng),
            Network::KeywordHead => out.heads.keyword_head = ClassifierHead::new(d, n, model.config.keyword_shape.clone(), &mut rng),
        }
    }
    out.lambda = None;
    Ok(out)
}

/// Adds one speaker from a few clips per keyword, replaying the old training data.
pub fn adapt_add_subject(
    model: &S2CModel,
    old_train: &LabeledSet,
    old_val: &LabeledSet,
    new_data: &LabeledSet,
    new_val: Option<&LabeledSet>,
    cfg: &TrainConfig,
    plan: &AdaptPlan,
) -> Result<Trained> {
    plan.validate()?;
    if model.roster.index_of(plan.new_subject_id).is_some() {
        return Err(Error::DuplicateSubject(plan.new_subject_id));
    }
    let shots = take_shots(new_data, plan.new_subject_id, &model.keywords, plan.utterances_per_keyword)?;
    let start = grow_model(model, plan, cfg.seed)?;
    let mut train = old_train.clone();
    train.extend(&shots);
    let mut val = old_val.clone();
    if let Some(v) = new_val {
        val.extend(v);
    }
    let mut out = train_two_stage(start, &train, &val, cfg)?;
    log::info!(
        "threshold after adding subject {}: {:.3} (was {})",
        plan.new_subject_id,
        out.model.lambda.unwrap_or(f64::NAN),
        model.lambda.map_or("unset".to_string(), |l| format!("{l:.3}"))
    );
    out.model.lineage.parent = Some(model.id.clone());
    out.model.lineage.events = model.lineage.events.clone();
    out.model.lineage.events.push(format!(
        "added subject {} with {} utterances per keyword; threshold {} -> {:.4}",
        plan.new_subject_id,
        plan.utterances_per_keyword,
        model.lambda.map_or("unset".to_string(), |l| format!("{l:.4}")),
        out.model.lambda.unwrap_or(f64::NAN)
    ));
    Ok(out)
}

/// Marks a speaker inactive; parameters are untouched.
pub fn deactivate_subject(model: &S2CModel, subject_id: u32) -> Result<S2CModel> {
    if !model.roster.contains_active(subject_id) {
        return Err(model.roster.index_of(subject_id).map_or(Error::UnknownSubject(subject_id), |_| {
            Error::Invalid(format!("subject {subject_id} is already inactive"))
        }));
    }
    let mut out = model.clone();
    out.roster.set_active(subject_id, false)?;
    Ok(out)
}

pub fn reactivate_subject(model: &S2CModel, subject_id: u32) -> Result<S2CModel> {
    let i = model.roster.index_of(subject_id).ok_or(Error::UnknownSubject(subject_id))?;
    if model.roster.entries[i].active {
        return Err(Error::Invalid(format!("subject {subject_id} is already active")));
    }
    let mut out = model.clone();
    out.roster.set_active(subject_id, true)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{FeatureImage, FrontendParams, Mode, NormStats};
    use crate::model::{BackboneSpec, HeadShape, ModelConfig};
    use crate::nn::Activation;
    use ndarray::Array2;

    fn tiny() -> S2CModel {
        let cfg = ModelConfig {
            backbone: BackboneSpec::Small { widths: vec![4, 4, 4, 4, 4] },
            image_size: 28,
            speaker_shape: HeadShape { hidden1: 8, act1: Activation::Relu, hidden2: 6 },
            keyword_shape: HeadShape { hidden1: 8, act1: Activation::Sigmoid, hidden2: 8 },
        };
        let kws = (0..3).map(|k| format!("k{k}")).collect();
        S2CModel::new(cfg, &[1, 2, 3, 4, 5], kws, Mode::Mel, FrontendParams::default().with_image_size(28), 3).unwrap()
    }

    fn img(v: f32) -> FeatureImage {
        FeatureImage { plane: Array2::from_elem((28, 28), v), mode: Mode::Mel, stats: NormStats { min: 0.0, max: 1.0 } }
    }

    #[test]
    fn plan_defaults_partition_the_networks() {
        let p = AdaptPlan::new(8);
        p.validate().unwrap();
        assert_eq!(p.utterances_per_keyword, 5);
        let mut bad = p.clone();
        bad.warm_start.insert(Network::SpeakerHead);
        assert!(bad.validate().is_err());
        let mut bad = p.clone();
        bad.warm_start.remove(&Network::Backbone);
        assert!(bad.validate().is_err());
        assert!(p.with_shots(0).validate().is_err());
    }

    #[test]
    fn growth_keeps_warm_networks_and_redraws_the_rest() {
        let m = tiny();
        let g = grow_model(&m, &AdaptPlan::new(8), 1).unwrap();
        assert_eq!(g.speakers(), 6);
        assert_eq!(g.num_keywords(), 3);
        assert_eq!(g.roster.ids(), vec![1, 2, 3, 4, 5, 8]);
        for warm in ["backbone", "keyword_projection", "keyword_head"] {
            assert_eq!(g.param_hash(warm), m.param_hash(warm), "{warm}");
        }
        assert_ne!(g.param_hash("subject_projection"), m.param_hash("subject_projection"));
        let p = g.forward_full(&img(0.5)).unwrap();
        assert_eq!((p.y_s_hat.len(), p.y_w_hat.len()), (6, 3));
        assert!(matches!(grow_model(&m, &AdaptPlan::new(3), 1), Err(Error::DuplicateSubject(3))));
    }

    #[test]
    fn shots_are_counted_per_keyword() {
        let mut d = LabeledSet::default();
        for k in 0..3 {
            for i in 0..6 {
                d.push(img(i as f32 / 6.0), 8, k);
            }
        }
        let kws: Vec<String> = (0..3).map(|k| format!("k{k}")).collect();
        assert_eq!(take_shots(&d, 8, &kws, 5).unwrap().len(), 15);
        assert!(matches!(take_shots(&d, 8, &kws, 7), Err(Error::Unsatisfiable { requested: 7, available: 6, .. })));
        let empty = LabeledSet::default();
        assert!(take_shots(&empty, 8, &kws, 5).is_err());
    }

    #[test]
    fn deactivation_is_metadata_only() {
        let m = tiny();
        let d = deactivate_subject(&m, 3).unwrap();
        assert_eq!(d.param_hash(""), m.param_hash(""));
        assert!(!d.roster.contains_active(3));
        assert_eq!(d.forward_full(&img(0.3)).unwrap(), m.forward_full(&img(0.3)).unwrap());
        assert_eq!(reactivate_subject(&d, 3).unwrap(), m);
        assert!(matches!(deactivate_subject(&m, 99), Err(Error::UnknownSubject(99))));
        assert!(deactivate_subject(&d, 3).is_err());
    }
}
