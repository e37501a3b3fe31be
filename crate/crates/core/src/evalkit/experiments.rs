//! The nine experiment protocols, built from reusable training/evaluation steps.

use super::stats::{ttest_two_sample, BoxStats, IntervalEstimate};
use super::{collect_repeats, evaluate_model, EvalReport, ReportBundle, Table};
use crate::adaptation::{adapt_add_subject, take_shots, AdaptPlan};
use crate::dataset::{apply_plan, scan_corpus, split_stratified, Corpus, SamplePlan, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::frontend::{FeatureCache, FeatureImage, FrontendParams, Mode};
use crate::model::{BackboneSpec, ModelConfig, S2CModel};
use crate::synth::Lexicon;
use crate::trainer::{train_two_stage, LabeledSet, TrainConfig, TrainHistory, Trained};
use crate::verifier::{dvector_baseline, ratio_score, roc_curve, DVectorMode, RocCurve, VerificationPolicy};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::rc::Rc;

/// The five-subject group every inspection experiment trains on.
pub const GROUP: [u32; 5] = [1, 2, 3, 4, 5];
/// Held-out inspection subjects: new inspectors in adaptation, intruders in verification.
pub const OUTSIDERS: [u32; 3] = [6, 7, 8];
/// Per-subject training counts of the base model.
pub const BASE_COUNTS: [usize; 5] = [20, 30, 20, 20, 20];
/// Digit-corpus speakers never added to a growing group.
pub const UNAUTHORIZED_DIGITS: std::ops::RangeInclusive<u32> = 51..=60;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Compute scale: image sizes, backbone family and training schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    /// Default backbone name (`small`, `resnet`, `vgg`, `incres`).
    pub backbone: String,
    /// Full-width backbones instead of the narrow desk variants.
    pub reference_backbones: bool,
    pub image_size: usize,
    /// Image size for the 60-speaker digit experiments.
    pub growth_image_size: usize,
    pub train: TrainConfig,
    /// Schedule for each incremental step of the growth loop.
    pub growth_train: TrainConfig,
    /// Validation clips per keyword for growth-loop subjects; `None` keeps the whole split.
    pub growth_val_per_keyword: Option<usize>,
}

impl Profile {
    /// Single-core CPU scale; trains from scratch, hence the larger learning rate.
    pub fn desk() -> Self {
        let train = TrainConfig { initial_lr: 1e-3, ..Default::default() };
        Self {
            name: "desk".into(),
            backbone: "small".into(),
            reference_backbones: false,
            image_size: 56,
            growth_image_size: 28,
            growth_train: TrainConfig { stage1_epochs: 4, stage2_epochs: 4, patience: 3, ..train.clone() },
            train,
            growth_val_per_keyword: Some(3),
        }
    }

    /// The original scale: 224-pixel images, full-width ResNet-50 and the 1e-4 schedule.
    pub fn reference() -> Self {
        let train = TrainConfig::default();
        Self {
            name: "reference".into(),
            backbone: "resnet".into(),
            reference_backbones: true,
            image_size: 224,
            growth_image_size: 224,
            growth_train: train.clone(),
            train,
            growth_val_per_keyword: None,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "reference" => Ok(Self::reference()),
            o => Err(Error::Invalid(format!("unknown profile `{o}` (desk, reference)"))),
        }
    }

    pub fn backbone_spec(&self, name: &str) -> Result<BackboneSpec> {
        if self.reference_backbones {
            BackboneSpec::reference(name)
        } else {
            BackboneSpec::desk(name)
        }
    }

    pub fn frontend(&self, size: usize) -> FrontendParams {
        FrontendParams::default().with_image_size(size)
    }
}

/// A split corpus plus memoized featurization.
pub struct DataSource {
    pub corpus: Corpus,
    pub lexicon: Lexicon,
    cache: Option<FeatureCache>,
    memo: RefCell<HashMap<(PathBuf, String), FeatureImage>>,
}

impl DataSource {
    /// Opens a corpus directory or a manifest file; unassigned records are split 60/20/20 with `split_seed`.
    pub fn open(path: &Path, lexicon: Lexicon, split_seed: u64, cache_dir: Option<&Path>) -> Result<Self> {
        let corpus = if path.is_file() {
            Corpus::read_manifest(path, lexicon.keywords())?
        } else {
            scan_corpus(path, lexicon.keywords())?
        };
        Self::from_corpus(corpus, lexicon, split_seed, cache_dir)
    }

    pub fn from_corpus(corpus: Corpus, lexicon: Lexicon, split_seed: u64, cache_dir: Option<&Path>) -> Result<Self> {
        let corpus = if corpus.records.iter().any(|r| r.split == Split::Unassigned) {
            split_stratified(&corpus, SPLIT_RATIOS, split_seed)?
        } else {
            corpus
        };
        let cache = cache_dir.map(FeatureCache::new).transpose()?;
        Ok(Self { corpus, lexicon, cache, memo: RefCell::new(HashMap::new()) })
    }

    /// Errors unless every subject in `ids` is present.
    pub fn require(&self, ids: impl IntoIterator<Item = u32>, what: &str) -> Result<()> {
        let missing: Vec<u32> = ids.into_iter().filter(|s| !self.corpus.subjects.contains(s)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingCorpus(format!("{what} needs subjects {missing:?}")))
        }
    }

    pub fn load(&self, records: &[UtteranceRecord], mode: Mode, params: &FrontendParams) -> Result<LabeledSet> {
        let hash = params.hash(mode);
        let mut set = LabeledSet::default();
        let mut memo = self.memo.borrow_mut();
        for r in records {
            let key = (r.path.clone(), hash.clone());
            let img = match memo.get(&key) {
                Some(img) => img.clone(),
                None => {
                    let img = match &self.cache {
                        Some(c) => c.load_or_compute(&r.path, mode, params)?,
                        None => crate::frontend::featurize(&[r.path.as_path()], mode, params, None)?.remove(0),
                    };
                    memo.insert(key, img.clone());
                    img
                }
            };
            set.push(img, r.subject_id, r.keyword_id);
        }
        Ok(set)
    }

    /// Planned subset of `split`, drawn with `seed`.
    pub fn load_plan(&self, split: Split, plan: &SamplePlan, seed: u64, mode: Mode, p: &FrontendParams) -> Result<LabeledSet> {
        self.load(&apply_plan(&self.corpus, plan, split, seed)?, mode, p)
    }

    /// Every record of `split` for `subjects`.
    pub fn load_split(&self, split: Split, subjects: &[u32], mode: Mode, p: &FrontendParams) -> Result<LabeledSet> {
        self.load(&self.corpus.select(split, Some(subjects)), mode, p)
    }
}

/// Where the corpora live and how hard to work.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub inspection: Option<PathBuf>,
    pub digits: Option<PathBuf>,
    pub profile: Profile,
    pub repeats: usize,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    /// Largest group in the growth loop.
    pub growth_max: usize,
}

impl ExperimentConfig {
    pub fn new(profile: Profile) -> Self {
        Self { inspection: None, digits: None, profile, repeats: 10, seed: 0, cache_dir: None, growth_max: 30 }
    }
}

/// One model trained on a plan and scored on a test set.
pub struct Outcome {
    pub trained: Trained,
    pub report: EvalReport,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

impl Outcome {
    /// Headline metrics: overall and per-subject accuracies plus training time.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (&sid, e) in &self.report.subjects {
            m.insert(format!("kw.{sid}"), e.keyword_acc());
            if let Some(a) = e.speaker_acc() {
                m.insert(format!("spk.{sid}"), a);
            }
        }
        m.extend(self.report.keyword_acc().map(|a| ("kw".to_string(), a)));
        m.extend(self.report.speaker_acc().map(|a| ("spk".to_string(), a)));
        m.insert("time".into(), self.trained.history.wall_seconds);
        m
    }
}

/// What the inspection-corpus trainings vary.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub plan: SamplePlan,
    pub mode: Mode,
    pub backbone: String,
    /// Extra subjects scored on their test split besides the trained ones.
    pub extra_test: Vec<u32>,
}

impl RunSpec {
    pub fn base() -> Self {
        Self {
            plan: SamplePlan::from_counts(&GROUP, &BASE_COUNTS).expect("aligned"),
            mode: Mode::Mel,
            backbone: String::new(),
            extra_test: Vec::new(),
        }
    }
}

/// One step of the growth loop.
pub struct GrowthStep {
    pub size: usize,
    pub model: S2CModel,
    pub report: EvalReport,
    pub history: TrainHistory,
}

pub struct GrowthRun {
    pub shots: usize,
    pub steps: Vec<GrowthStep>,
    pub unauthorized: Vec<u32>,
}

impl GrowthRun {
    pub fn at(&self, size: usize) -> Option<&GrowthStep> {
        self.steps.iter().find(|s| s.size == size)
    }
}

fn subject_values(r: &EvalReport, ids: &[u32], f: impl Fn(&super::SubjectEval) -> Option<f64>) -> Vec<f64> {
    ids.iter().filter_map(|id| r.subjects.get(id).and_then(&f)).collect()
}

/// Subject-level keyword accuracies of the roster and of the unauthorized speakers, and subject-level speaker accuracy.
pub fn group_accuracies(r: &EvalReport, unauthorized: &[u32]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        subject_values(r, &r.roster, |e| Some(e.keyword_acc())),
        subject_values(r, unauthorized, |e| Some(e.keyword_acc())),
        subject_values(r, &r.roster, |e| e.speaker_acc()),
    )
}

/// Detection scores with unauthorized speakers as the positive class.
pub struct RocInputs {
    pub ratio: Vec<(f64, bool)>,
    pub dvector: Vec<(f64, bool)>,
}

/// Ratio and group-average d-vector scores of `test`; enrollment uses `enroll`.
pub fn verification_scores(model: &S2CModel, enroll: &LabeledSet, test: &LabeledSet) -> Result<RocInputs> {
    let positive: Vec<bool> = test.subject_ids.iter().map(|&s| !model.roster.contains_active(s)).collect();
    let preds = model.forward_batch(&test.image_refs())?;
    let ratio = (0..test.len())
        .map(|i| Ok((-ratio_score(preds.get(i).y_s_hat.as_slice())?, positive[i])))
        .collect::<Result<Vec<_>>>()?;
    let cos = dvector_baseline(model, &enroll.image_refs(), &enroll.subject_ids, &test.image_refs(), DVectorMode::Group)?;
    let dvector = cos.into_iter().zip(&positive).map(|(c, &p)| (-c, p)).collect();
    Ok(RocInputs { ratio, dvector })
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn plan_label(plan: &SamplePlan, subjects: &[u32]) -> String {
    let v: Vec<String> =
        subjects.iter().map(|s| plan.per_subject_counts.get(s).copied().unwrap_or(0).to_string()).collect();
    format!("({})", v.join(","))
}

fn ci(samples: &BTreeMap<String, Vec<f64>>, key: &str) -> Result<IntervalEstimate> {
    let v = samples.get(key).ok_or_else(|| Error::Invalid(format!("metric `{key}` missing")))?;
    IntervalEstimate::from_samples(v)
}

fn mean_of(samples: &BTreeMap<String, Vec<f64>>, key: &str) -> String {
    samples.get(key).map_or("-".into(), |v| f3(super::stats::mean(v)))
}

/// Runs protocols against shared, memoized corpora.
pub struct Runner {
    pub cfg: ExperimentConfig,
    inspection: RefCell<Option<Rc<DataSource>>>,
    digits: RefCell<Option<Rc<DataSource>>>,
    growth: RefCell<BTreeMap<usize, Rc<GrowthRun>>>,
    base: RefCell<Option<Rc<Outcome>>>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Self {
            cfg,
            inspection: RefCell::new(None),
            digits: RefCell::new(None),
            growth: RefCell::new(BTreeMap::new()),
            base: RefCell::new(None),
        }
    }

    fn open(&self, slot: &RefCell<Option<Rc<DataSource>>>, path: &Option<PathBuf>, lex: Lexicon, what: &str) -> Result<Rc<DataSource>> {
        if let Some(d) = slot.borrow().as_ref() {
            return Ok(d.clone());
        }
        let path = path.as_ref().ok_or_else(|| Error::MissingCorpus(format!("{what} corpus not configured")))?;
        if !path.exists() {
            return Err(Error::MissingCorpus(format!("{what} corpus not found at {}", path.display())));
        }
        let d = Rc::new(DataSource::open(path, lex, self.cfg.seed, self.cfg.cache_dir.as_deref())?);
        *slot.borrow_mut() = Some(d.clone());
        Ok(d)
    }

    /// Inspection-style corpus with subjects 1–8.
    pub fn inspection(&self) -> Result<Rc<DataSource>> {
        let d = self.open(&self.inspection, &self.cfg.inspection, Lexicon::Inspection, "inspection-keyword")?;
        d.require(GROUP.into_iter().chain(OUTSIDERS), "the inspection corpus")?;
        Ok(d)
    }

    /// Multi-speaker digit corpus with subjects 1..=growth_max and 51–60.
    pub fn digits(&self) -> Result<Rc<DataSource>> {
        let d = self.open(&self.digits, &self.cfg.digits, Lexicon::Digits, "multi-speaker digit")?;
        d.require((1..=self.cfg.growth_max as u32).chain(UNAUTHORIZED_DIGITS), "the digit corpus")?;
        Ok(d)
    }

    fn fresh_model(&self, backbone: &str, size: usize, subjects: &[u32], keywords: &[String], mode: Mode, seed: u64) -> Result<S2CModel> {
        let p = &self.cfg.profile;
        let name = if backbone.is_empty() { p.backbone.as_str() } else { backbone };
        let cfg = ModelConfig::new(p.backbone_spec(name)?, size);
        S2CModel::new(cfg, subjects, keywords.to_vec(), mode, p.frontend(size), seed)
    }

    /// Trains one inspection model on `spec` and scores its test split.
    pub fn train_inspection(&self, spec: &RunSpec, seed: u64) -> Result<Outcome> {
        let src = self.inspection()?;
        let p = &self.cfg.profile;
        let params = p.frontend(p.image_size);
        let subjects = spec.plan.active_subjects();
        let train = src.load_plan(Split::Train, &spec.plan, seed, spec.mode, &params)?;
        let val = src.load_split(Split::Val, &subjects, spec.mode, &params)?;
        let mut test_ids = subjects.clone();
        test_ids.extend(spec.extra_test.iter().filter(|s| !subjects.contains(s)));
        let test = src.load_split(Split::Test, &test_ids, spec.mode, &params)?;
        let model = self.fresh_model(&spec.backbone, p.image_size, &subjects, &src.corpus.keywords, spec.mode, seed)?;
        let tc = TrainConfig { seed, ..p.train.clone() };
        let trained = train_two_stage(model, &train, &val, &tc)?;
        let policy = VerificationPolicy::from_model(&trained.model).ok();
        let report = evaluate_model(&trained.model, &test, policy.as_ref())?;
        Ok(Outcome { trained, report, train, val, test })
    }

    /// The (20,30,20,20,20) Mel model at the configured seed, scored on subjects 1–8; memoized.
    pub fn base(&self) -> Result<Rc<Outcome>> {
        if let Some(b) = self.base.borrow().as_ref() {
            return Ok(b.clone());
        }
        let spec = RunSpec { extra_test: OUTSIDERS.to_vec(), ..RunSpec::base() };
        let b = Rc::new(self.train_inspection(&spec, self.cfg.seed)?);
        *self.base.borrow_mut() = Some(b.clone());
        Ok(b)
    }

    /// Adds one inspection subject to the base model and scores subjects 1–8.
    pub fn adapt_base(&self, subject: u32, shots: usize) -> Result<Outcome> {
        let base = self.base()?;
        let src = self.inspection()?;
        let p = &self.cfg.profile;
        let params = p.frontend(p.image_size);
        let pool = src.load_plan(Split::Train, &SamplePlan::uniform([subject], shots), self.cfg.seed, Mode::Mel, &params)?;
        let new_val = src.load_split(Split::Val, &[subject], Mode::Mel, &params)?;
        let tc = TrainConfig { seed: self.cfg.seed.wrapping_add(subject as u64), ..p.train.clone() };
        let plan = AdaptPlan::new(subject).with_shots(shots);
        let trained = adapt_add_subject(&base.trained.model, &base.train, &base.val, &pool, Some(&new_val), &tc, &plan)?;
        let mut train = base.train.clone();
        train.extend(&take_shots(&pool, subject, &trained.model.keywords, shots)?);
        let mut val = base.val.clone();
        val.extend(&new_val);
        let policy = VerificationPolicy::from_model(&trained.model).ok();
        let report = evaluate_model(&trained.model, &base.test, policy.as_ref())?;
        Ok(Outcome { trained, report, train, val, test: base.test.clone() })
    }

    fn digit_params(&self) -> FrontendParams {
        self.cfg.profile.frontend(self.cfg.profile.growth_image_size)
    }

    fn digit_val(&self, src: &DataSource, subjects: &[u32]) -> Result<LabeledSet> {
        let p = self.digit_params();
        match self.cfg.profile.growth_val_per_keyword {
            Some(k) => src.load_plan(Split::Val, &SamplePlan::uniform(subjects.iter().copied(), k), self.cfg.seed, Mode::Mel, &p),
            None => src.load_split(Split::Val, subjects, Mode::Mel, &p),
        }
    }

    /// Test split of subjects `1..=growth_max` and the unauthorized speakers.
    pub fn digit_test(&self) -> Result<LabeledSet> {
        let src = self.digits()?;
        let ids: Vec<u32> = (1..=self.cfg.growth_max as u32).chain(UNAUTHORIZED_DIGITS).collect();
        src.load_split(Split::Test, &ids, Mode::Mel, &self.digit_params())
    }

    /// Digit model for subjects `1..=n` with `per_keyword` training clips each.
    pub fn train_digits_direct(&self, n: u32, per_keyword: usize) -> Result<(Trained, LabeledSet)> {
        let src = self.digits()?;
        let p = &self.cfg.profile;
        let ids: Vec<u32> = (1..=n).collect();
        let params = self.digit_params();
        let train = src.load_plan(Split::Train, &SamplePlan::uniform(ids.iter().copied(), per_keyword), self.cfg.seed, Mode::Mel, &params)?;
        let val = self.digit_val(&src, &ids)?;
        let model = self.fresh_model("", p.growth_image_size, &ids, &src.corpus.keywords, Mode::Mel, self.cfg.seed)?;
        let trained = train_two_stage(model, &train, &val, &TrainConfig { seed: self.cfg.seed, ..p.train.clone() })?;
        Ok((trained, train))
    }

    /// Five-subject start, then one subject at a time with `shots` clips per keyword up to `growth_max`; memoized.
    pub fn growth(&self, shots: usize) -> Result<Rc<GrowthRun>> {
        if let Some(g) = self.growth.borrow().get(&shots) {
            return Ok(g.clone());
        }
        let src = self.digits()?;
        let p = &self.cfg.profile;
        let params = self.digit_params();
        let unauthorized: Vec<u32> = UNAUTHORIZED_DIGITS.collect();
        let test_all = self.digit_test()?;
        let initial: Vec<u32> = (1..=5).collect();
        let mut train = src.load_plan(Split::Train, &SamplePlan::uniform(initial.iter().copied(), 20), self.cfg.seed, Mode::Mel, &params)?;
        let mut val = self.digit_val(&src, &initial)?;
        let model = self.fresh_model("", p.growth_image_size, &initial, &src.corpus.keywords, Mode::Mel, self.cfg.seed)?;
        let mut cur = train_two_stage(model, &train, &val, &TrainConfig { seed: self.cfg.seed, ..p.train.clone() })?;
        let mut steps = Vec::new();
        let score = |m: &S2CModel| {
            let ids = m.roster.ids();
            evaluate_model(m, &test_all.filter(|s, _| ids.contains(&s) || unauthorized.contains(&s)), None)
        };
        steps.push(GrowthStep { size: 5, report: score(&cur.model)?, model: cur.model.clone(), history: cur.history.clone() });
        for sid in 6..=self.cfg.growth_max as u32 {
            let pool = src.load_plan(Split::Train, &SamplePlan::uniform([sid], shots), self.cfg.seed, Mode::Mel, &params)?;
            let new_val = self.digit_val(&src, &[sid])?;
            let tc = TrainConfig { seed: self.cfg.seed.wrapping_add(sid as u64), ..p.growth_train.clone() };
            let plan = AdaptPlan::new(sid).with_shots(shots);
            let next = adapt_add_subject(&cur.model, &train, &val, &pool, Some(&new_val), &tc, &plan)?;
            train.extend(&take_shots(&pool, sid, &next.model.keywords, shots)?);
            val.extend(&new_val);
            let report = score(&next.model)?;
            let (a, u, s) = group_accuracies(&report, &unauthorized);
            log::info!(
                "growth ({shots} shots) size {}: authorized kw {:.3} unauthorized kw {:.3} speaker {:.3} ({:.0}s)",
                sid,
                super::stats::mean(&a),
                super::stats::mean(&u),
                super::stats::mean(&s),
                next.history.wall_seconds
            );
            steps.push(GrowthStep { size: sid as usize, model: next.model.clone(), report, history: next.history.clone() });
            cur = next;
        }
        let g = Rc::new(GrowthRun { shots, steps, unauthorized });
        self.growth.borrow_mut().insert(shots, g.clone());
        Ok(g)
    }

    pub fn run(&self, id: u8) -> Result<ReportBundle> {
        let mut b = match id {
            1 => self.exp_data_size()?,
            2 => self.exp_pooling()?,
            3 => self.exp_adaptation()?,
            4 => self.exp_verification()?,
            5 => self.exp_growth_keywords()?,
            6 => self.exp_growth_speakers()?,
            7 => self.exp_frontends()?,
            8 => self.exp_backbones()?,
            9 => self.exp_roc()?,
            o => return Err(Error::Invalid(format!("experiment id {o} outside 1..=9"))),
        };
        b.experiment = id;
        b.config = serde_json::to_value(&self.cfg)?;
        Ok(b)
    }

    fn repeats(&self, spec: &RunSpec, histories: &mut Vec<(String, TrainHistory)>, tag: &str) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut first = None;
        let s = collect_repeats(self.cfg.repeats, self.cfg.seed, |seed| {
            let o = self.train_inspection(spec, seed)?;
            first.get_or_insert_with(|| o.trained.history.clone());
            Ok(o.metrics())
        })?;
        histories.extend(first.map(|h| (tag.to_string(), h)));
        Ok(s)
    }

    fn exp_data_size(&self) -> Result<ReportBundle> {
        let mut b = ReportBundle { title: "training data size".into(), ..Default::default() };
        let plans = [[10; 5], [20; 5], BASE_COUNTS, [30; 5]];
        let mut header = vec!["plan".to_string()];
        header.extend(GROUP.iter().map(|s| format!("kw_sub{s}")));
        header.push("kw_overall".into());
        header.extend(GROUP.iter().map(|s| format!("spk_sub{s}")));
        header.push("spk_overall".into());
        let mut t = Table { name: "data_size".into(), header, rows: vec![] };
        let mut time = Table::new("data_size_time", &["plan", "train_seconds"]);
        let mut all = Vec::new();
        for counts in plans {
            let spec = RunSpec { plan: SamplePlan::from_counts(&GROUP, &counts)?, ..RunSpec::base() };
            let label = plan_label(&spec.plan, &GROUP);
            let s = self.repeats(&spec, &mut b.histories, &format!("plan{}", counts.map(|c| c.to_string()).join("-")))?;
            let mut row = vec![label.clone()];
            row.extend(GROUP.iter().map(|g| mean_of(&s, &format!("kw.{g}"))));
            row.push(ci(&s, "kw")?.to_string());
            row.extend(GROUP.iter().map(|g| mean_of(&s, &format!("spk.{g}"))));
            row.push(ci(&s, "spk")?.to_string());
            t.push(row);
            time.push(vec![label.clone(), ci(&s, "time")?.format(0)]);
            b.metrics.insert(format!("{label}.kw"), ci(&s, "kw")?.mean);
            b.metrics.insert(format!("{label}.spk"), ci(&s, "spk")?.mean);
            all.push(s);
        }
        let mut tt = Table::new("data_size_ttests", &["comparison", "subject", "task", "t", "p"]);
        for g in GROUP {
            for task in ["kw", "spk"] {
                let k = format!("{task}.{g}");
                let r = ttest_two_sample(&all[0][&k], &all[1][&k])?;
                tt.push(vec!["(10x5) vs (20x5)".into(), g.to_string(), task.into(), f3(r.t), f3(r.p)]);
            }
        }
        let r = ttest_two_sample(&all[1]["kw.2"], &all[2]["kw.2"])?;
        tt.push(vec!["(20x5) vs (20,30,20,20,20)".into(), "2".into(), "kw".into(), f3(r.t), f3(r.p)]);
        b.tables = vec![t, tt];
        b.timing = vec![time];
        Ok(b)
    }

    fn exp_pooling(&self) -> Result<ReportBundle> {
        let mut b = ReportBundle { title: "single-subject versus pooled training".into(), ..Default::default() };
        let mut plans: Vec<Vec<usize>> = Vec::new();
        for i in 0..GROUP.len() {
            for n in [10, 20, 30] {
                let mut c = vec![0; GROUP.len()];
                c[i] = n;
                plans.push(c);
            }
        }
        plans.extend([vec![6; 5], vec![10; 5], BASE_COUNTS.to_vec()]);
        let mut header = vec!["plan".to_string()];
        header.extend(GROUP.iter().map(|s| format!("sub{s}")));
        let mut t = Table { name: "pooling".into(), header, rows: vec![] };
        let mut boxes = Table::new("pooling_box", &["plan", "subject", "min", "q1", "q2", "q3", "max", "mean"]);
        for counts in &plans {
            let spec = RunSpec { plan: SamplePlan::from_counts(&GROUP, counts)?, extra_test: GROUP.to_vec(), ..RunSpec::base() };
            let label = plan_label(&spec.plan, &GROUP);
            let s = self.repeats(&spec, &mut b.histories, &format!("plan{}", counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-")))?;
            let mut row = vec![label.clone()];
            for g in GROUP {
                let k = format!("kw.{g}");
                row.push(mean_of(&s, &k));
                let bs = BoxStats::from_samples(&s[&k])?;
                boxes.push(vec![label.clone(), g.to_string(), f3(bs.min), f3(bs.q1), f3(bs.q2), f3(bs.q3), f3(bs.max), f3(bs.mean)]);
                b.metrics.insert(format!("{label}.kw.{g}"), bs.mean);
            }
            t.push(row);
        }
        b.tables = vec![t, boxes];
        Ok(b)
    }

    fn exp_adaptation(&self) -> Result<ReportBundle> {
        let mut b = ReportBundle { title: "adaptation to new inspectors".into(), ..Default::default() };
        let all: Vec<u32> = GROUP.into_iter().chain(OUTSIDERS).collect();
        let mut header = vec!["source".to_string(), "shots".into()];
        header.extend(all.iter().map(|s| format!("sub{s}")));
        let mut t = Table { name: "adaptation".into(), header, rows: vec![] };
        let base = self.base()?;
        let row = |src: &str, shots: usize, r: &EvalReport| {
            let mut v = vec![src.to_string(), shots.to_string()];
            v.extend(all.iter().map(|s| r.subject_keyword_acc(*s).map_or("-".into(), f3)));
            v
        };
        t.push(row("base", 0, &base.report));
        b.histories.push(("base".into(), base.trained.history.clone()));
        for s in OUTSIDERS {
            for shots in [5, 10] {
                let o = self.adapt_base(s, shots)?;
                t.push(row(&format!("sub{s}"), shots, &o.report));
                let drop = GROUP
                    .iter()
                    .map(|g| base.report.subject_keyword_acc(*g).unwrap_or(0.0) - o.report.subject_keyword_acc(*g).unwrap_or(0.0))
                    .fold(f64::NEG_INFINITY, f64::max);
                b.metrics.insert(format!("sub{s}.{shots}.new_kw"), o.report.subject_keyword_acc(s).unwrap_or(0.0));
                b.metrics.insert(format!("sub{s}.{shots}.max_drop"), drop);
                b.histories.push((format!("adapt-sub{s}-{shots}"), o.trained.history));
            }
        }
        b.tables = vec![t];
        Ok(b)
    }

    fn exp_verification(&self) -> Result<ReportBundle> {
        let base = self.base()?;
        let mut b = ReportBundle { title: "inspector verification".into(), ..Default::default() };
        let v = base.report.verification.as_ref().ok_or_else(|| Error::Invalid("base model has no threshold".into()))?;
        let (t5, t6) = verification_tables(v)?;
        b.metrics.insert("lambda".into(), v.lambda);
        b.metrics.insert("authorized_success".into(), v.success_rate());
        b.metrics.insert("unauthorized_detection".into(), v.detection_rate());
        b.tables = vec![t5, t6];
        b.histories.push(("base".into(), base.trained.history.clone()));
        Ok(b)
    }

    fn growth_tables(&self, runs: &[Rc<GrowthRun>]) -> Result<(Table, Table, BTreeMap<String, f64>)> {
        let mut kw = Table::new("growth_keyword", &["size", "shots", "authorized_kw", "unauthorized_kw"]);
        let mut spk = Table::new("growth_speaker", &["size", "shots", "speaker_acc", "ci_width"]);
        let mut m = BTreeMap::new();
        for g in runs {
            for st in &g.steps {
                let (a, u, s) = group_accuracies(&st.report, &g.unauthorized);
                let (a, u, s) = (IntervalEstimate::from_samples(&a)?, IntervalEstimate::from_samples(&u)?, IntervalEstimate::from_samples(&s)?);
                kw.push(vec![st.size.to_string(), g.shots.to_string(), a.to_string(), u.to_string()]);
                spk.push(vec![st.size.to_string(), g.shots.to_string(), s.to_string(), f3(s.width())]);
                m.insert(format!("shots{}.size{}.authorized_kw", g.shots, st.size), a.mean);
                m.insert(format!("shots{}.size{}.unauthorized_kw", g.shots, st.size), u.mean);
                m.insert(format!("shots{}.size{}.speaker", g.shots, st.size), s.mean);
                m.insert(format!("shots{}.size{}.speaker_ci_width", g.shots, st.size), s.width());
            }
        }
        Ok((kw, spk, m))
    }

    fn exp_growth_keywords(&self) -> Result<ReportBundle> {
        let g = self.growth(5)?;
        let (kw, _, metrics) = self.growth_tables(std::slice::from_ref(&g))?;
        let histories = g.steps.iter().map(|s| (format!("size{:02}", s.size), s.history.clone())).collect();
        Ok(ReportBundle { title: "growing groups: keyword accuracy".into(), tables: vec![kw], metrics, histories, ..Default::default() })
    }

    fn exp_growth_speakers(&self) -> Result<ReportBundle> {
        let runs = [self.growth(5)?, self.growth(20)?];
        let (_, spk, metrics) = self.growth_tables(&runs)?;
        Ok(ReportBundle { title: "growing groups: speaker accuracy at 5 vs 20 shots".into(), tables: vec![spk], metrics, ..Default::default() })
    }

    fn ablation(&self, name: &str, title: &str, rows: Vec<(String, RunSpec)>) -> Result<ReportBundle> {
        let mut b = ReportBundle { title: title.into(), ..Default::default() };
        let mut t = Table::new(name, &[name.trim_end_matches('s'), "keyword_acc", "speaker_acc"]);
        let mut time = Table::new(&format!("{name}_time"), &[name.trim_end_matches('s'), "train_seconds"]);
        for (label, spec) in rows {
            let s = self.repeats(&spec, &mut b.histories, &label)?;
            let (k, sp) = (ci(&s, "kw")?, ci(&s, "spk")?);
            t.push(vec![label.clone(), k.to_string(), sp.to_string()]);
            time.push(vec![label.clone(), ci(&s, "time")?.format(0)]);
            b.metrics.insert(format!("{label}.kw"), k.mean);
            b.metrics.insert(format!("{label}.kw_margin"), k.margin);
            b.metrics.insert(format!("{label}.spk"), sp.mean);
            b.metrics.insert(format!("{label}.spk_margin"), sp.margin);
        }
        b.tables = vec![t];
        b.timing = vec![time];
        Ok(b)
    }

    fn exp_frontends(&self) -> Result<ReportBundle> {
        let rows = Mode::ALL.iter().map(|&m| (m.label().to_string(), RunSpec { mode: m, ..RunSpec::base() })).collect();
        self.ablation("frontends", "acoustic frontends", rows)
    }

    fn exp_backbones(&self) -> Result<ReportBundle> {
        let rows = ["resnet", "vgg", "incres"]
            .iter()
            .map(|&n| (n.to_string(), RunSpec { backbone: n.into(), ..RunSpec::base() }))
            .collect();
        self.ablation("backbones", "feature extractors", rows)
    }

    /// Training clips of a grown model's roster: 20 per keyword for the initial five, `shots` for the rest.
    pub fn growth_enrollment(&self, model: &S2CModel, shots: usize) -> Result<LabeledSet> {
        let src = self.digits()?;
        let plan = SamplePlan {
            per_subject_counts: model.roster.ids().into_iter().map(|s| (s, if s <= 5 { 20 } else { shots })).collect(),
        };
        src.load_plan(Split::Train, &plan, self.cfg.seed, Mode::Mel, &self.digit_params())
    }

    /// Ratio and d-vector ROC for (a) the initial five, (b) thirty grown at five shots, (c) thirty trained at twenty.
    pub fn roc_models(&self) -> Result<Vec<(String, S2CModel, LabeledSet)>> {
        let g = self.growth(5)?;
        let first = &g.steps[0].model;
        let last = &g.steps.last().expect("growth has steps").model;
        let (direct, direct_train) = self.train_digits_direct(self.cfg.growth_max as u32, 20)?;
        Ok(vec![
            ("a-initial5".into(), first.clone(), self.growth_enrollment(first, g.shots)?),
            (format!("b-grown{}-5shot", self.cfg.growth_max), last.clone(), self.growth_enrollment(last, g.shots)?),
            (format!("c-direct{}-20", self.cfg.growth_max), direct.model, direct_train),
        ])
    }

    fn exp_roc(&self) -> Result<ReportBundle> {
        let test = self.digit_test()?;
        let mut b = ReportBundle { title: "ratio versus d-vector verification".into(), ..Default::default() };
        let mut t = Table::new("roc_auc", &["model", "method", "auc"]);
        let unauthorized: Vec<u32> = UNAUTHORIZED_DIGITS.collect();
        for (name, model, enroll) in self.roc_models()? {
            let ids = model.roster.ids();
            let scoped = test.filter(|s, _| ids.contains(&s) || unauthorized.contains(&s));
            let inputs = verification_scores(&model, &enroll, &scoped)?;
            for (method, scores) in [("ratio", &inputs.ratio), ("dvector", &inputs.dvector)] {
                let c: RocCurve = roc_curve(scores)?;
                t.push(vec![name.clone(), method.into(), format!("{:.4}", c.auc)]);
                b.metrics.insert(format!("{name}.{method}.auc"), c.auc);
                b.roc.push((format!("{name}-{method}"), c));
            }
        }
        b.tables = vec![t];
        Ok(b)
    }
}

/// Per-subject ratio-score summary and the 2×2 verification confusion matrix.
pub fn verification_tables(v: &super::VerificationSummary) -> Result<(Table, Table)> {
    let mut t5 = Table::new("verification_ratio", &["subject", "n", "min", "q1", "q2", "q3", "max", "mean", "count", "percent"]);
    for (sid, scores) in &v.lambda_v {
        let bs = BoxStats::from_samples(scores)?;
        let count = scores.iter().filter(|&&x| x >= v.lambda).count();
        t5.push(vec![
            sid.to_string(),
            scores.len().to_string(),
            f3(bs.min),
            f3(bs.q1),
            f3(bs.q2),
            f3(bs.q3),
            f3(bs.max),
            f3(bs.mean),
            count.to_string(),
            format!("{:.1}%", 100.0 * count as f64 / scores.len() as f64),
        ]);
    }
    let c = v.confusion();
    let mut t6 = Table::new("verification_confusion", &["truth", "pred_authorized", "pred_unauthorized", "total"]);
    t6.push(vec!["authorized".into(), c[0][0].to_string(), c[0][1].to_string(), (c[0][0] + c[0][1]).to_string()]);
    t6.push(vec!["unauthorized".into(), c[1][0].to_string(), c[1][1].to_string(), (c[1][0] + c[1][1]).to_string()]);
    t6.push(vec![
        "total".into(),
        (c[0][0] + c[1][0]).to_string(),
        (c[0][1] + c[1][1]).to_string(),
        c.iter().flatten().sum::<usize>().to_string(),
    ]);
    Ok((t5, t6))
}

/// Runs experiment `id` (1–9) on the corpora named in `cfg`.
pub fn run_experiment(id: u8, cfg: &ExperimentConfig) -> Result<ReportBundle> {
    Runner::new(cfg.clone()).run(id)
}
