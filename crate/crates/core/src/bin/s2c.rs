use clap::{Parser, Subcommand, ValueEnum};
use s2c::adaptation::{adapt_add_subject, AdaptPlan};
use s2c::dataset::{SamplePlan, Split};
use s2c::evalkit::experiments::{verification_scores, verification_tables, DataSource};
use s2c::evalkit::{emit_report, evaluate_model, ExperimentConfig, Profile, ReportBundle, Runner, Table};
use s2c::frontend::{acoustic_image, load_utterance, Mode};
use s2c::model::{argmax, checkpoint, ModelConfig, S2CModel};
use s2c::synth::{generate_corpus, CorpusSpec, Lexicon};
use s2c::trainer::{train_two_stage, TrainConfig};
use s2c::verifier::{roc_curve, verify_speaker, VerificationPolicy};
use s2c::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "s2c", version, about = "Joint keyword spotting, speaker identification and verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Inspection,
    Digits,
}

impl From<Kind> for Lexicon {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Inspection => Lexicon::Inspection,
            Kind::Digits => Lexicon::Digits,
        }
    }
}

#[derive(clap::Args)]
struct CorpusArgs {
    /// Corpus directory (`<subject>/<keyword>/<clip>.wav`) or a split manifest.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "inspection")]
    lexicon: Kind,
    /// Seed for splitting unassigned records 60/20/20.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Feature cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl CorpusArgs {
    fn open(&self) -> Result<DataSource> {
        DataSource::open(&self.corpus, self.lexicon.into(), self.split_seed, self.cache.as_deref())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long, value_enum, default_value = "inspection")]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        /// Subject ids, e.g. `1-8` or `1-30,51-60`; defaults to 1-8 / 1-60.
        #[arg(long)]
        subjects: Option<String>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Scan a corpus, split it per (subject, keyword) cell and write a manifest.
    Prepare {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Manifest path; defaults to `<corpus>/split.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a per-subject sample plan and save a checkpoint.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value = "1-5")]
        subjects: String,
        /// Training utterances per keyword, one count per subject or one for all.
        #[arg(long, default_value = "20,30,20,20,20")]
        plan: String,
        #[arg(long, default_value = "mel")]
        mode: String,
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Overrides the profile's backbone.
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add one subject to a trained model from a few utterances per keyword.
    Adapt {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        subject: u32,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        /// Replayed training counts for the existing roster, one per subject or one for all.
        #[arg(long, default_value = "20")]
        plan: String,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify and verify audio files, or score a corpus test split.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Threshold override; defaults to the model's own.
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        corpus: Option<CorpusArgs>,
        /// Test subjects when scoring a corpus; defaults to every subject.
        #[arg(long)]
        subjects: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        audio: Vec<PathBuf>,
    },
    /// ROC of the ratio and group d-vector methods; unauthorized speakers are positive.
    Roc {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        /// Unauthorized test subjects.
        #[arg(long)]
        unauthorized: String,
        /// Enrollment clips per keyword per roster subject, from the train split.
        #[arg(long, default_value_t = 5)]
        enroll: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one of the nine experiments and write its report.
    Experiment {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=9))]
        id: u8,
        #[arg(long)]
        inspection: Option<PathBuf>,
        #[arg(long)]
        digits: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `1-5,8` → `[1, 2, 3, 4, 5, 8]`.
fn parse_ids(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::Invalid(format!("bad subject list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn parse_plan(subjects: &[u32], counts: &str) -> Result<SamplePlan> {
    let c: Vec<usize> = counts
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Invalid(format!("bad count `{v}`"))))
        .collect::<Result<_>>()?;
    match c.len() {
        1 => Ok(SamplePlan::uniform(subjects.iter().copied(), c[0])),
        _ => SamplePlan::from_counts(subjects, &c),
    }
}

fn train_config(profile: &Profile, lr: Option<f64>, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig { seed, ..profile.train.clone() };
    if let Some(lr) = lr {
        tc.initial_lr = lr;
    }
    tc
}

fn save_with_history(model: &S2CModel, history: &s2c::trainer::TrainHistory, out: &Path) -> Result<()> {
    checkpoint::save(model, out)?;
    history.write_jsonl(&out.join("history.log"))?;
    println!(
        "saved {} (λ = {}) to {}; {} epochs in {:.0}s",
        model.id,
        model.lambda.map_or("none".into(), |l| format!("{l:.3}")),
        out.display(),
        history.records.len(),
        history.wall_seconds
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { kind, out, subjects, seed } => {
            let spec = match (kind, subjects) {
                (Kind::Inspection, None) => CorpusSpec::inspection(seed),
                (Kind::Digits, None) => CorpusSpec::digits(1..=60, seed),
                (k, Some(s)) => CorpusSpec { subjects: parse_ids(&s)?, lexicon: k.into(), ..CorpusSpec::inspection(seed) },
            };
            let n = generate_corpus(&out, &spec)?;
            println!("wrote {n} clips under {}", out.display());
        }
        Cmd::Prepare { corpus, out } => {
            let src = corpus.open()?;
            let out = out.unwrap_or_else(|| corpus.corpus.join("split.tsv"));
            src.corpus.write_manifest(&out)?;
            let count = |s| src.corpus.records.iter().filter(|r| r.split == s).count();
            println!(
                "{} records, {} subjects: train {} / val {} / test {} → {}",
                src.corpus.len(),
                src.corpus.subjects.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test),
                out.display()
            );
        }
        Cmd::Train { corpus, subjects, plan, mode, profile, backbone, image_size, lr, seed, out } => {
            let src = corpus.open()?;
            let profile = Profile::by_name(&profile)?;
            let ids = parse_ids(&subjects)?;
            let plan = parse_plan(&ids, &plan)?;
            let mode: Mode = mode.parse()?;
            let size = image_size.unwrap_or(profile.image_size);
            let params = profile.frontend(size);
            let train = src.load_plan(Split::Train, &plan, seed, mode, &params)?;
            let val = src.load_split(Split::Val, &ids, mode, &params)?;
            let spec = profile.backbone_spec(backbone.as_deref().unwrap_or(&profile.backbone))?;
            let model = S2CModel::new(ModelConfig::new(spec, size), &ids, src.corpus.keywords.clone(), mode, params.clone(), seed)?;
            let out_model = train_two_stage(model, &train, &val, &train_config(&profile, lr, seed))?;
            let test = src.load_split(Split::Test, &ids, mode, &params)?;
            let r = evaluate_model(&out_model.model, &test, None)?;
            println!(
                "test keyword accuracy {:.3}, speaker accuracy {:.3}",
                r.keyword_acc().unwrap_or(f64::NAN),
                r.speaker_acc().unwrap_or(f64::NAN)
            );
            save_with_history(&out_model.model, &out_model.history, &out)?;
        }
        Cmd::Adapt { corpus, model, subject, shots, plan, profile, lr, seed, out } => {
            let src = corpus.open()?;
            let base = checkpoint::load(&model)?;
            let profile = Profile::by_name(&profile)?;
            let ids = base.roster.ids();
            let params = base.frontend.clone();
            let old_train = src.load_plan(Split::Train, &parse_plan(&ids, &plan)?, seed, base.mode, &params)?;
            let old_val = src.load_split(Split::Val, &ids, base.mode, &params)?;
            let pool = src.load_plan(Split::Train, &SamplePlan::uniform([subject], shots), seed, base.mode, &params)?;
            let new_val = src.load_split(Split::Val, &[subject], base.mode, &params)?;
            let ap = AdaptPlan::new(subject).with_shots(shots);
            let t = adapt_add_subject(&base, &old_train, &old_val, &pool, Some(&new_val), &train_config(&profile, lr, seed), &ap)?;
            let mut test_ids = ids.clone();
            test_ids.push(subject);
            let r = evaluate_model(&t.model, &src.load_split(Split::Test, &test_ids, base.mode, &params)?, None)?;
            for id in &test_ids {
                println!("subject {id}: keyword accuracy {:.3}", r.subject_keyword_acc(*id).unwrap_or(f64::NAN));
            }
            save_with_history(&t.model, &t.history, &out)?;
        }
        Cmd::Verify { model, lambda, corpus, subjects, out, audio } => {
            let m = checkpoint::load(&model)?;
            let policy = match lambda {
                Some(l) => VerificationPolicy::new(l, m.speakers(), "command line")?,
                None => VerificationPolicy::from_model(&m)?,
            };
            for path in &audio {
                let img = acoustic_image(&load_utterance(path, &m.frontend)?, m.mode, &m.frontend)?;
                let p = m.forward_full(&img)?;
                let v = verify_speaker(&p.y_s_hat, &policy, &m.roster)?;
                println!(
                    "{}\tkeyword {}\tspeaker {}\tλ_v {:.3}\t{}",
                    path.display(),
                    m.keywords[argmax(&p.y_w_hat)],
                    m.roster.entries[argmax(&p.y_s_hat)].subject_id,
                    v.lambda_v,
                    v.decision
                );
            }
            if let Some(c) = corpus {
                let src = c.open()?;
                let ids = match subjects {
                    Some(s) => parse_ids(&s)?,
                    None => src.corpus.subjects.iter().copied().collect(),
                };
                let test = src.load_split(Split::Test, &ids, m.mode, &m.frontend)?;
                let r = evaluate_model(&m, &test, Some(&policy))?;
                let v = r.verification.as_ref().expect("policy given");
                let (t5, t6) = verification_tables(v)?;
                print!("{}\n{}", t5.to_tsv(), t6.to_tsv());
                println!("λ = {:.4}; authorized success {:.3}", policy.lambda, v.success_rate());
                if v.unauthorized_total > 0 {
                    println!("unauthorized detection {:.3}", v.detection_rate());
                }
                if let Some(dir) = out {
                    let b = ReportBundle { experiment: 4, title: "verification".into(), tables: vec![t5, t6], ..Default::default() };
                    emit_report(&b, &dir)?;
                }
            } else if audio.is_empty() {
                return Err(Error::Invalid("give audio files or --corpus".into()));
            }
        }
        Cmd::Roc { corpus, model, unauthorized, enroll, out } => {
            let src = corpus.open()?;
            let m = checkpoint::load(&model)?;
            let ids = m.roster.ids();
            let intruders = parse_ids(&unauthorized)?;
            let enroll_set = src.load_plan(Split::Train, &SamplePlan::uniform(ids.iter().copied(), enroll), 0, m.mode, &m.frontend)?;
            let all: Vec<u32> = ids.iter().chain(&intruders).copied().collect();
            let test = src.load_split(Split::Test, &all, m.mode, &m.frontend)?;
            let inputs = verification_scores(&m, &enroll_set, &test)?;
            let mut b = ReportBundle { title: "ratio versus d-vector".into(), ..Default::default() };
            let mut t = Table::new("roc_auc", &["method", "auc"]);
            for (name, scores) in [("ratio", &inputs.ratio), ("dvector", &inputs.dvector)] {
                let c = roc_curve(scores)?;
                println!("{name}\tAUC {:.4}", c.auc);
                t.push(vec![name.into(), format!("{:.4}", c.auc)]);
                b.roc.push((name.into(), c));
            }
            b.tables.push(t);
            emit_report(&b, &out)?;
        }
        Cmd::Experiment { id, inspection, digits, profile, repeats, seed, cache, out } => {
            let mut cfg = ExperimentConfig::new(Profile::by_name(&profile)?);
            cfg.inspection = inspection;
            cfg.digits = digits;
            cfg.repeats = repeats;
            cfg.seed = seed;
            cfg.cache_dir = cache;
            let b = Runner::new(cfg).run(id)?;
            emit_report(&b, &out)?;
            for t in &b.tables {
                println!("== {}\n{}", t.name, t.to_tsv());
            }
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
