//! Metrics, repeated-run intervals, the experiment runner and report files.

pub mod experiments;
pub mod stats;

pub use experiments::{run_experiment, DataSource, ExperimentConfig, Profile, Runner};
pub use stats::{ttest_two_sample, BoxStats, IntervalEstimate, TTest};

use crate::error::{Error, IoContext, Result};
use crate::model::{argmax, S2CModel};
use crate::trainer::{LabeledSet, TrainHistory};
use crate::verifier::{verify_speaker, Decision, RocCurve, VerificationPolicy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectEval {
    pub n: usize,
    pub keyword_correct: usize,
    /// Only for subjects on the model's roster.
    pub speaker_correct: Option<usize>,
    pub authorized: bool,
}

impl SubjectEval {
    pub fn keyword_acc(&self) -> f64 {
        self.keyword_correct as f64 / self.n as f64
    }

    pub fn speaker_acc(&self) -> Option<f64> {
        self.speaker_correct.map(|c| c as f64 / self.n as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub lambda: f64,
    pub authorized_total: usize,
    pub authorized_accepted: usize,
    pub unauthorized_total: usize,
    pub unauthorized_rejected: usize,
    /// Ratio scores per subject, in test order.
    pub lambda_v: BTreeMap<u32, Vec<f64>>,
}

impl VerificationSummary {
    pub fn success_rate(&self) -> f64 {
        self.authorized_accepted as f64 / self.authorized_total as f64
    }

    pub fn detection_rate(&self) -> f64 {
        self.unauthorized_rejected as f64 / self.unauthorized_total as f64
    }

    /// Rows: true authorized / unauthorized; columns: predicted authorized / unauthorized.
    pub fn confusion(&self) -> [[usize; 2]; 2] {
        [
            [self.authorized_accepted, self.authorized_total - self.authorized_accepted],
            [self.unauthorized_total - self.unauthorized_rejected, self.unauthorized_rejected],
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub keywords: Vec<String>,
    pub roster: Vec<u32>,
    pub subjects: BTreeMap<u32, SubjectEval>,
    /// Over roster subjects; rows are true keywords.
    pub keyword_confusion: Vec<Vec<usize>>,
    /// Rows are true roster positions.
    pub speaker_confusion: Vec<Vec<usize>>,
    pub verification: Option<VerificationSummary>,
}

impl EvalReport {
    fn roster_counts(&self) -> (usize, usize, usize) {
        self.subjects.values().filter(|s| s.speaker_correct.is_some()).fold((0, 0, 0), |(n, k, s), e| {
            (n + e.n, k + e.keyword_correct, s + e.speaker_correct.unwrap_or(0))
        })
    }

    /// Keyword accuracy over roster subjects.
    pub fn keyword_acc(&self) -> Option<f64> {
        let (n, k, _) = self.roster_counts();
        (n > 0).then(|| k as f64 / n as f64)
    }

    pub fn speaker_acc(&self) -> Option<f64> {
        let (n, _, s) = self.roster_counts();
        (n > 0).then(|| s as f64 / n as f64)
    }

    pub fn subject_keyword_acc(&self, id: u32) -> Option<f64> {
        self.subjects.get(&id).map(SubjectEval::keyword_acc)
    }

    pub fn subject_speaker_acc(&self, id: u32) -> Option<f64> {
        self.subjects.get(&id).and_then(SubjectEval::speaker_acc)
    }
}

/// Scores every test clip and tallies accuracies, confusions and, with a policy, verification.
pub fn evaluate_model(model: &S2CModel, test: &LabeledSet, policy: Option<&VerificationPolicy>) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let (m, n) = (model.speakers(), model.num_keywords());
    if let Some(&k) = test.keywords.iter().find(|&&k| k >= n) {
        return Err(Error::Invalid(format!("test keyword {k} outside the model's {n} classes")));
    }
    if let Some(p) = policy {
        if p.m != m {
            return Err(Error::Shape(format!("policy for {} speakers, model has {m}", p.m)));
        }
    }
    let preds = model.forward_batch(&test.image_refs())?;
    let mut r = EvalReport {
        keywords: model.keywords.clone(),
        roster: model.roster.ids(),
        keyword_confusion: vec![vec![0; n]; n],
        speaker_confusion: vec![vec![0; m]; m],
        verification: policy.map(|p| VerificationSummary { lambda: p.lambda, ..Default::default() }),
        ..Default::default()
    };
    for i in 0..test.len() {
        let (sid, kw) = (test.subject_ids[i], test.keywords[i]);
        let row = model.roster.index_of(sid);
        let p = preds.get(i);
        let kw_hat = argmax(&p.y_w_hat);
        let e = r.subjects.entry(sid).or_default();
        e.n += 1;
        e.keyword_correct += (kw_hat == kw) as usize;
        e.authorized = model.roster.contains_active(sid);
        if let Some(row) = row {
            let s_hat = argmax(&p.y_s_hat);
            *e.speaker_correct.get_or_insert(0) += (s_hat == row) as usize;
            r.keyword_confusion[kw][kw_hat] += 1;
            r.speaker_confusion[row][s_hat] += 1;
        }
        if let (Some(policy), Some(v)) = (policy, r.verification.as_mut()) {
            let res = verify_speaker(&p.y_s_hat, policy, &model.roster)?;
            v.lambda_v.entry(sid).or_default().push(res.lambda_v);
            if model.roster.contains_active(sid) {
                v.authorized_total += 1;
                v.authorized_accepted += (res.decision == Decision::Authorized) as usize;
            } else {
                v.unauthorized_total += 1;
                v.unauthorized_rejected += (res.decision == Decision::Unauthorized) as usize;
            }
        }
    }
    Ok(r)
}

/// Runs `run` once per seed `base_seed + i`, collecting every named metric.
pub fn collect_repeats<F>(n: usize, base_seed: u64, mut run: F) -> Result<BTreeMap<String, Vec<f64>>>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if n < 2 {
        return Err(Error::Invalid("repeats must be at least 2".into()));
    }
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..n {
        let seed = base_seed + i as u64;
        let metrics = run(seed).inspect_err(|e| log::error!("repeat {i} (seed {seed}) failed after {i} completed runs: {e}"))?;
        log::info!("repeat {}/{n} (seed {seed}): {metrics:?}", i + 1);
        for (k, v) in metrics {
            samples.entry(k).or_default().push(v);
        }
    }
    Ok(samples)
}

/// [`collect_repeats`] reduced to one interval per metric.
pub fn repeat_with_ci<F>(n: usize, base_seed: u64, run: F) -> Result<BTreeMap<String, IntervalEstimate>>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    collect_repeats(n, base_seed, run)?.into_iter().map(|(k, v)| Ok((k, IntervalEstimate::from_samples(&v)?))).collect()
}

/// A delimited table with a header row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }
}

/// Everything one experiment produced.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportBundle {
    pub experiment: u8,
    pub title: String,
    pub config: serde_json::Value,
    /// Deterministic for fixed seeds.
    pub tables: Vec<Table>,
    /// Wall-clock measurements; vary between runs.
    pub timing: Vec<Table>,
    pub roc: Vec<(String, RocCurve)>,
    pub histories: Vec<(String, TrainHistory)>,
    /// Headline numbers keyed by name.
    pub metrics: BTreeMap<String, f64>,
}

impl ReportBundle {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).at(path)
}

/// Writes `tables/`, `timing/`, `roc/`, `history/`, `metrics.tsv` and `config.snapshot` under `dir`.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<()> {
    if bundle.tables.is_empty() && bundle.roc.is_empty() {
        return Err(Error::Invalid(format!("experiment {} produced nothing to write", bundle.experiment)));
    }
    for sub in ["tables", "timing", "roc", "history"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).at(&d)?;
    }
    for t in &bundle.tables {
        write(&dir.join("tables").join(format!("{}.tsv", t.name)), &t.to_tsv())?;
    }
    for t in &bundle.timing {
        write(&dir.join("timing").join(format!("{}.tsv", t.name)), &t.to_tsv())?;
    }
    for (name, c) in &bundle.roc {
        let mut s = format!("# auc\t{:.6}\nthreshold\tfpr\ttpr\n", c.auc);
        for p in &c.points {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\n", p.threshold, p.fpr, p.tpr));
        }
        write(&dir.join("roc").join(format!("{name}.tsv")), &s)?;
    }
    for (name, h) in &bundle.histories {
        h.write_jsonl(&dir.join("history").join(format!("{name}.log")))?;
    }
    let mut m = String::from("metric\tvalue\n");
    for (k, v) in &bundle.metrics {
        m.push_str(&format!("{k}\t{v:.6}\n"));
    }
    write(&dir.join("metrics.tsv"), &m)?;
    let snap = serde_json::json!({ "experiment": bundle.experiment, "title": bundle.title, "config": bundle.config });
    write(&dir.join("config.snapshot"), &serde_json::to_string_pretty(&snap)?)
}
