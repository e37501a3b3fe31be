//! Trains a small model on three speakers, round-trips it through a checkpoint,
//! verifies held-out clips from a fourth (unseen) speaker, compares ratio and
//! d-vector ROC curves, then enrolls the fourth speaker from five shots.
//!
//! cargo run --release --example enroll_and_verify -- /tmp/s2c-enroll

use s2c::adaptation::{adapt_add_subject, AdaptPlan};
use s2c::dataset::{SamplePlan, Split};
use s2c::evalkit::evaluate_model;
use s2c::evalkit::experiments::{verification_scores, DataSource};
use s2c::frontend::{FrontendParams, Mode};
use s2c::model::{checkpoint, BackboneSpec, ModelConfig, S2CModel};
use s2c::synth::{generate_corpus, CorpusSpec, Lexicon};
use s2c::trainer::{train_two_stage, TrainConfig};
use s2c::verifier::{roc_curve, VerificationPolicy};
use std::path::PathBuf;

fn main() -> s2c::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "/tmp/s2c-enroll".into()));
    let spec = CorpusSpec { subjects: vec![1, 2, 3, 4], clips_per_keyword: 15, ..CorpusSpec::inspection(7) };
    generate_corpus(&root, &spec)?;
    let src = DataSource::open(&root, Lexicon::Inspection, 7, Some(&root.join(".features")))?;
    let params = FrontendParams::default().with_image_size(28);
    let group = [1, 2, 3];

    let train = src.load_split(Split::Train, &group, Mode::Mel, &params)?;
    let val = src.load_split(Split::Val, &group, Mode::Mel, &params)?;
    let test = src.load_split(Split::Test, &[1, 2, 3, 4], Mode::Mel, &params)?;
    let cfg = ModelConfig::new(BackboneSpec::desk("small")?, 28);
    let model = S2CModel::new(cfg, &group, src.corpus.keywords.clone(), Mode::Mel, params.clone(), 1)?;
    let tc = TrainConfig { initial_lr: 1e-3, seed: 1, ..Default::default() };
    let trained = train_two_stage(model, &train, &val, &tc)?;

    let ck = root.join("ckpt");
    checkpoint::save(&trained.model, &ck)?;
    let base = checkpoint::load(&ck)?;
    println!("checkpoint {} lambda {:.3}", ck.display(), base.lambda.unwrap_or(f64::NAN));

    let report = evaluate_model(&base, &test, Some(&VerificationPolicy::from_model(&base)?))?;
    let v = report.verification.as_ref().expect("policy given");
    println!(
        "base: keyword {:.3}, authorized accepted {}/{}, outsider rejected {}/{}",
        report.keyword_acc().unwrap_or(f64::NAN),
        v.authorized_accepted,
        v.authorized_total,
        v.unauthorized_rejected,
        v.unauthorized_total
    );
    let scores = verification_scores(&base, &train, &test)?;
    println!(
        "AUC ratio {:.3}, d-vector {:.3}",
        roc_curve(&scores.ratio)?.auc,
        roc_curve(&scores.dvector)?.auc
    );

    let val4 = src.load_split(Split::Val, &[1, 2, 3, 4], Mode::Mel, &params)?;
    let shots = src.load_plan(Split::Train, &SamplePlan::uniform([4], 5), 0, Mode::Mel, &params)?;
    let grown = adapt_add_subject(&base, &train, &val4, &shots, None, &tc, &AdaptPlan::new(4).with_shots(5))?;
    let report = evaluate_model(&grown.model, &test, Some(&VerificationPolicy::from_model(&grown.model)?))?;
    println!(
        "after enrolling subject 4: roster {:?}, keyword {:.3}, speaker {:.3}, subject-4 speaker {:.3}",
        grown.model.roster.ids(),
        report.keyword_acc().unwrap_or(f64::NAN),
        report.speaker_acc().unwrap_or(f64::NAN),
        report.subject_speaker_acc(4).unwrap_or(f64::NAN)
    );
    Ok(())
}
