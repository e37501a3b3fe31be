//! Generates (or reuses) a synthetic inspection corpus and trains a base model on
//! the (20,30,20,20,20) plan, then reports held-out accuracies.
//!
//! cargo run --release --example train_base -- /tmp/s2c-corpus

use s2c::dataset::{apply_plan, scan_corpus, split_stratified, SamplePlan, Split, INSPECTION_KEYWORDS};
use s2c::frontend::{FeatureCache, FrontendParams, Mode};
use s2c::model::{argmax, BackboneSpec, ModelConfig, S2CModel};
use s2c::synth::{generate_corpus, CorpusSpec};
use s2c::trainer::{predict_set, train_two_stage, LabeledSet, TrainConfig};
use std::path::PathBuf;

fn main() -> s2c::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "/tmp/s2c-corpus".into()));
    let size: usize = std::env::var("S2C_IMAGE").ok().and_then(|v| v.parse().ok()).unwrap_or(56);
    let lr: f64 = std::env::var("S2C_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    generate_corpus(&root, &CorpusSpec::inspection(7))?;
    let corpus = split_stratified(&scan_corpus(&root, &INSPECTION_KEYWORDS)?, (0.6, 0.2, 0.2), 7)?;
    let subjects = [1, 2, 3, 4, 5];
    let params = FrontendParams::default().with_image_size(size);
    let cache = FeatureCache::new(root.join(".features"))?;
    let load = |split, plan: &SamplePlan| -> s2c::Result<LabeledSet> {
        LabeledSet::load(&apply_plan(&corpus, plan, split, 7)?, Mode::Mel, &params, Some(&cache))
    };
    let t = std::time::Instant::now();
    let train = load(Split::Train, &SamplePlan::from_counts(&subjects, &[20, 30, 20, 20, 20])?)?;
    let val = load(Split::Val, &SamplePlan::uniform(subjects, 10))?;
    let test = load(Split::Test, &SamplePlan::uniform(subjects, 10))?;
    println!("features: {:.1}s", t.elapsed().as_secs_f64());

    let cfg = ModelConfig::new(BackboneSpec::desk("small")?, size);
    let kws = corpus.keywords.clone();
    let model = S2CModel::new(cfg, &subjects, kws, Mode::Mel, params.clone(), 1)?;
    let tc = TrainConfig { initial_lr: lr, seed: 1, ..Default::default() };
    let out = train_two_stage(model, &train, &val, &tc)?;
    let p = predict_set(&out.model, &test)?;
    let labels = test.labels(&out.model.roster)?;
    let n = test.len() as f64;
    let s = (0..test.len()).filter(|&i| argmax(p.s.row(i).as_slice().unwrap()) == labels.subjects[i]).count() as f64 / n;
    let w = (0..test.len()).filter(|&i| argmax(p.w.row(i).as_slice().unwrap()) == labels.keywords[i]).count() as f64 / n;
    println!(
        "epochs {} wall {:.1}s lambda {:.3} test keyword {w:.3} speaker {s:.3}",
        out.history.records.len(),
        out.history.wall_seconds,
        out.model.lambda.unwrap()
    );
    Ok(())
}
