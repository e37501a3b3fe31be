//! Directory checkpoints: `params.safetensors` plus `meta.json`.

use super::{Lineage, ModelConfig, Roster, S2CModel};
use crate::error::{Error, IoContext, Result};
use crate::frontend::{FrontendParams, Mode};
use crate::nn::Parameterized;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.safetensors";
const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub id: String,
    pub config: ModelConfig,
    pub channels: usize,
    pub speakers: usize,
    pub keywords_n: usize,
    pub roster: Roster,
    pub keywords: Vec<String>,
    pub mode: Mode,
    pub frontend: FrontendParams,
    pub frontend_hash: String,
    pub lambda: Option<f64>,
    pub lineage: Lineage,
}

impl CheckpointMeta {
    pub fn of(model: &S2CModel) -> Self {
        Self {
            version: FORMAT_VERSION,
            id: model.id.clone(),
            config: model.config.clone(),
            channels: model.channels(),
            speakers: model.speakers(),
            keywords_n: model.num_keywords(),
            roster: model.roster.clone(),
            keywords: model.keywords.clone(),
            mode: model.mode,
            frontend: model.frontend.clone(),
            frontend_hash: model.frontend.hash(model.mode),
            lambda: model.lambda,
            lineage: model.lineage.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::Checkpoint(r));
        if self.version != FORMAT_VERSION {
            return bad(format!("format version {} (expected {FORMAT_VERSION})", self.version));
        }
        if self.frontend_hash != self.frontend.hash(self.mode) {
            return bad("front-end hash does not match the stored front-end parameters".into());
        }
        if self.roster.len() != self.speakers {
            return bad(format!("roster lists {} speakers, heads have {}", self.roster.len(), self.speakers));
        }
        if self.keywords.len() != self.keywords_n {
            return bad(format!("{} keyword names for {} keyword classes", self.keywords.len(), self.keywords_n));
        }
        if self.frontend.image_size != self.config.image_size {
            return bad("front-end image size differs from model input size".into());
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l <= 0.0 {
                return bad(format!("threshold {l} is not a positive number"));
            }
        }
        Ok(())
    }
}

/// Writes `model` into `dir`, creating it if needed.
pub fn save(model: &S2CModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit("", &mut |name, p| {
        let bytes = p.values().iter().flat_map(|v| v.to_le_bytes()).collect();
        tensors.push((name.to_string(), p.shape().to_vec(), bytes));
    });
    let views = tensors
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let p = dir.join(PARAMS_FILE);
    std::fs::write(&p, bytes).at(&p)?;
    let m = dir.join(META_FILE);
    std::fs::write(&m, serde_json::to_string_pretty(&CheckpointMeta::of(model))?).at(&m)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let m = dir.join(META_FILE);
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&m).at(&m)?)?;
    meta.validate()?;
    Ok(meta)
}

/// Reads a checkpoint, rejecting metadata that disagrees with itself or with the tensors.
pub fn load(dir: &Path) -> Result<S2CModel> {
    let meta = read_meta(dir)?;
    let ids = meta.roster.ids();
    let mut model = S2CModel::new(meta.config.clone(), &ids, meta.keywords.clone(), meta.mode, meta.frontend.clone(), 0)?;
    if model.channels() != meta.channels {
        return Err(Error::Checkpoint(format!("backbone has {} channels, metadata says {}", model.channels(), meta.channels)));
    }
    let p = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&p).at(&p)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut stored: BTreeMap<String, TensorView<'_>> = st.tensors().into_iter().collect();
    let mut err = None;
    model.visit_mut("", &mut |name, param| {
        if err.is_some() {
            return;
        }
        let Some(t) = stored.remove(name) else {
            err = Some(format!("missing tensor {name}"));
            return;
        };
        if t.dtype() != Dtype::F32 || t.shape() != param.shape() {
            err = Some(format!("tensor {name}: {:?}{:?}, expected F32{:?}", t.dtype(), t.shape(), param.shape()));
            return;
        }
        for (v, c) in param.values_mut().iter_mut().zip(t.data().chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    });
    if let Some(e) = err {
        return Err(Error::Checkpoint(e));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    model.roster = meta.roster;
    model.lambda = meta.lambda;
    model.id = meta.id;
    model.lineage = meta.lineage;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneSpec, HeadShape};
    use crate::nn::Activation;

    fn model() -> S2CModel {
        let cfg = ModelConfig {
            backbone: BackboneSpec::Small { widths: vec![4, 4, 4, 4, 4] },
            image_size: 28,
            speaker_shape: HeadShape { hidden1: 8, act1: Activation::Relu, hidden2: 6 },
            keyword_shape: HeadShape { hidden1: 8, act1: Activation::Sigmoid, hidden2: 8 },
        };
        let kws = (0..4).map(|k| format!("k{k}")).collect();
        let mut m = S2CModel::new(cfg, &[3, 7, 9], kws, Mode::Spectrogram, FrontendParams::default().with_image_size(28), 4).unwrap();
        m.lambda = Some(12.5);
        m.roster.set_active(7, false).unwrap();
        m.lineage.events.push("trained".into());
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save(&m, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), m);
    }

    #[test]
    fn rejects_tampered_metadata() {
        let dir = tempfile::tempdir().unwrap();
        save(&model(), dir.path()).unwrap();
        let path = dir.path().join(META_FILE);
        let orig = std::fs::read_to_string(&path).unwrap();
        for (from, to) in [("\"n_mels\": 128", "\"n_mels\": 64"), ("\"speakers\": 3", "\"speakers\": 4"), ("\"version\": 1", "\"version\": 9")] {
            assert!(orig.contains(from), "{from}");
            std::fs::write(&path, orig.replace(from, to)).unwrap();
            assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))), "{from}");
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save(&m, dir.path()).unwrap();
        // same metadata, different backbone width in the tensors
        let mut other = m.clone();
        other.config.backbone = BackboneSpec::Small { widths: vec![4, 4, 4, 4, 5] };
        let path = dir.path().join(META_FILE);
        let mut meta = CheckpointMeta::of(&m);
        meta.config = other.config;
        meta.channels = 5;
        std::fs::write(&path, serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
