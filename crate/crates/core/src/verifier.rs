//! Speaker verification from classification scores, plus the d-vector baseline.

use crate::error::{Error, Result};
use crate::frontend::FeatureImage;
use crate::model::{argmax, Roster, S2CModel};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Guard against a vanishing runner-up score.
pub const RATIO_EPS: f64 = 1e-12;
/// A zero-variance training prediction contributes this multiple of the lower bound.
pub const UNIFORM_CAP_FACTOR: f64 = 10.0;

fn check_scores(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::Invalid(format!("verification needs at least 2 speakers, got {}", p.len())));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::NonFinite(format!("score {v} in speaker scores")));
    }
    Ok(())
}

/// Top score over runner-up score; at least 1.
pub fn ratio_score(y_s_hat: &[f64]) -> Result<f64> {
    check_scores(y_s_hat)?;
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in y_s_hat {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    Ok(a / b.max(RATIO_EPS))
}

/// Variance with divisor `len`.
pub fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// `M + 1 + 1/(M−1)`, written as `M²/(M−1)`.
pub fn threshold_lower_bound(m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::Invalid(format!("threshold needs M ≥ 2, got {m}")));
    }
    let m = m as f64;
    Ok(m * m / (m - 1.0))
}

/// Mean inverse population variance of the training speaker scores (one row each).
pub fn compute_threshold(train_preds: ArrayView2<'_, f64>) -> Result<f64> {
    let (k, m) = train_preds.dim();
    if k == 0 {
        return Err(Error::Invalid("threshold needs at least one prediction".into()));
    }
    let cap = UNIFORM_CAP_FACTOR * threshold_lower_bound(m)?;
    let mut acc = 0.0;
    let mut flat = 0;
    for row in train_preds.rows() {
        let row = row.to_vec();
        check_scores(&row)?;
        let var = population_variance(&row);
        if var > 0.0 {
            acc += 1.0 / var;
        } else {
            flat += 1;
            acc += cap;
        }
    }
    if flat > 0 {
        log::warn!("{flat} of {k} training predictions are exactly uniform; capped at {cap}");
    }
    Ok(acc / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    pub lambda: f64,
    pub m: usize,
    pub source: String,
}

impl VerificationPolicy {
    pub fn new(lambda: f64, m: usize, source: impl Into<String>) -> Result<Self> {
        let lb = threshold_lower_bound(m)?;
        // tolerate rounding on the all-one-hot boundary
        if !lambda.is_finite() || lambda < lb * (1.0 - 1e-12) {
            return Err(Error::Invalid(format!("threshold {lambda} is below the lower bound {lb} for M={m}")));
        }
        Ok(Self { lambda, m, source: source.into() })
    }

    pub fn from_model(model: &S2CModel) -> Result<Self> {
        let lambda = model.lambda.ok_or_else(|| Error::Invalid(format!("model {} has no threshold", model.id)))?;
        Self::new(lambda, model.speakers(), model.id.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Authorized,
    Unauthorized,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Authorized => "authorized",
            Decision::Unauthorized => "unauthorized",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub lambda_v: f64,
    pub decision: Decision,
    pub top_subject: Option<u32>,
}

/// Authorized iff the ratio clears the threshold and the top speaker is active.
pub fn verify_speaker(y_s_hat: &[f64], policy: &VerificationPolicy, roster: &Roster) -> Result<VerificationResult> {
    if y_s_hat.len() != policy.m || roster.len() != policy.m {
        return Err(Error::Shape(format!(
            "{} scores, policy for M={}, roster of {}",
            y_s_hat.len(),
            policy.m,
            roster.len()
        )));
    }
    let lambda_v = ratio_score(y_s_hat)?;
    let top = roster.entries[argmax(y_s_hat)];
    let ok = lambda_v >= policy.lambda && top.active;
    Ok(VerificationResult {
        lambda_v,
        decision: if ok { Decision::Authorized } else { Decision::Unauthorized },
        top_subject: ok.then_some(top.subject_id),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DVectorMode {
    PerSpeaker,
    Group,
}

impl FromStr for DVectorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-speaker" => Ok(Self::PerSpeaker),
            "group" | "group-average" => Ok(Self::Group),
            o => Err(Error::UnknownMode(o.to_string())),
        }
    }
}

impl fmt::Display for DVectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerSpeaker => "per-speaker",
            Self::Group => "group",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileOwner {
    Subject(u32),
    Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DVectorProfile {
    pub embedding: Vec<f64>,
    pub owner: ProfileOwner,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embeddings of width {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::NonFinite("zero-norm or non-finite embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

/// Averages enrollment embeddings into one group profile or one profile per speaker.
pub fn enroll_profiles(dvectors: &Array2<f32>, owners: &[u32], mode: DVectorMode) -> Result<Vec<DVectorProfile>> {
    if dvectors.nrows() == 0 || dvectors.nrows() != owners.len() {
        return Err(Error::Invalid(format!("{} enrollment embeddings for {} owners", dvectors.nrows(), owners.len())));
    }
    let rows: Vec<Vec<f64>> = dvectors.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    Ok(match mode {
        DVectorMode::Group => vec![DVectorProfile { embedding: mean_rows(&rows), owner: ProfileOwner::Group }],
        DVectorMode::PerSpeaker => {
            let mut ids: Vec<u32> = owners.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter()
                .map(|id| {
                    let mine: Vec<Vec<f64>> =
                        rows.iter().zip(owners).filter(|(_, &o)| o == id).map(|(r, _)| r.clone()).collect();
                    DVectorProfile { embedding: mean_rows(&mine), owner: ProfileOwner::Subject(id) }
                })
                .collect()
        }
    })
}

/// Best cosine similarity of `embedding` against the profiles.
pub fn profile_score(embedding: &[f64], profiles: &[DVectorProfile]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for p in profiles {
        best = best.max(cosine(embedding, &p.embedding)?);
    }
    Ok(best)
}

/// Cosine score of every test utterance against profiles built from the enrollment set.
pub fn dvector_baseline(
    model: &S2CModel,
    enroll: &[&FeatureImage],
    enroll_subjects: &[u32],
    test: &[&FeatureImage],
    mode: DVectorMode,
) -> Result<Vec<f64>> {
    let profiles = enroll_profiles(&model.dvectors(enroll)?, enroll_subjects, mode)?;
    let dv = model.dvectors(test)?;
    dv.rows()
        .into_iter()
        .map(|r| profile_score(&r.iter().map(|&v| v as f64).collect::<Vec<_>>(), &profiles))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over `(score, is_positive)` pairs; higher scores mean "more likely positive".
pub fn roc_curve(scored: &[(f64, bool)]) -> Result<RocCurve> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(format!("ROC needs both classes, got {pos} positive and {neg} negative")));
    }
    if scored.iter().any(|s| s.0.is_nan()) {
        return Err(Error::NonFinite("NaN detection score".into()));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: t, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    let auc = points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
    Ok(RocCurve { points, auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ratio_examples() {
        assert_relative_eq!(ratio_score(&[0.5, 0.25, 0.25]).unwrap(), 2.0);
        assert_eq!(ratio_score(&[0.2; 5]).unwrap(), 1.0);
        assert_relative_eq!(ratio_score(&[0.9, 0.05, 0.03, 0.01, 0.01]).unwrap(), 18.0, max_relative = 1e-12);
        assert!(ratio_score(&[1.0]).is_err());
        assert!(ratio_score(&[1.0, 0.0]).unwrap() >= 1e11);
    }

    #[test]
    fn lower_bound_examples() {
        assert_eq!(threshold_lower_bound(5).unwrap(), 6.25);
        assert_eq!(threshold_lower_bound(2).unwrap(), 4.0);
        assert_relative_eq!(threshold_lower_bound(10).unwrap(), 100.0 / 9.0);
        assert!(threshold_lower_bound(1).is_err());
    }

    #[test]
    fn threshold_examples() {
        let eye = Array2::<f64>::eye(5);
        assert_relative_eq!(compute_threshold(eye.view()).unwrap(), 6.25, max_relative = 1e-12);
        // population variance by definition: mean 0.2, squared deviations 0.5776 + 4·0.0361
        let p = array![[0.96, 0.01, 0.01, 0.01, 0.01]];
        let var = (0.76f64.powi(2) + 4.0 * 0.19f64.powi(2)) / 5.0;
        assert_relative_eq!(var, 0.1444, max_relative = 1e-12);
        assert_relative_eq!(compute_threshold(p.view()).unwrap(), 1.0 / var, max_relative = 1e-12);
        assert_relative_eq!(1.0 / var, 6.9252, epsilon = 1e-4);
        let flat = Array2::from_elem((1, 5), 0.2);
        assert_relative_eq!(compute_threshold(flat.view()).unwrap(), 62.5);
    }

    #[test]
    fn decisions_follow_ratio_and_roster() {
        let mut roster = Roster::new(&[1, 2, 3, 4, 5]).unwrap();
        let policy = VerificationPolicy::new(7.048, 5, "t").unwrap();
        let strong = [0.95, 0.0134, 0.0122, 0.0122, 0.0122];
        let r = verify_speaker(&strong, &policy, &roster).unwrap();
        assert_eq!((r.decision, r.top_subject), (Decision::Authorized, Some(1)));
        let r = verify_speaker(&[0.2; 5], &policy, &roster).unwrap();
        assert_eq!((r.lambda_v, r.decision), (1.0, Decision::Unauthorized));
        let edge = [0.7, 0.1, 0.1, 0.05, 0.05];
        let r = verify_speaker(&edge, &policy, &roster).unwrap();
        assert_relative_eq!(r.lambda_v, 7.0, max_relative = 1e-12);
        assert_eq!((r.decision, r.top_subject), (Decision::Unauthorized, None));
        roster.set_active(1, false).unwrap();
        assert_eq!(verify_speaker(&strong, &policy, &roster).unwrap().decision, Decision::Unauthorized);
        assert!(verify_speaker(&[0.5, 0.5], &policy, &roster).is_err());
        assert!(VerificationPolicy::new(6.0, 5, "t").is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_relative_eq!(cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, max_relative = 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn profiles_average_per_owner() {
        let d = array![[1.0f32, 0.0], [3.0, 0.0], [0.0, 2.0]];
        let g = enroll_profiles(&d, &[1, 1, 2], DVectorMode::Group).unwrap();
        assert_eq!(g[0].embedding, vec![4.0 / 3.0, 2.0 / 3.0]);
        let p = enroll_profiles(&d, &[1, 1, 2], DVectorMode::PerSpeaker).unwrap();
        assert_eq!(p[0], DVectorProfile { embedding: vec![2.0, 0.0], owner: ProfileOwner::Subject(1) });
        assert_relative_eq!(profile_score(&[0.0, 5.0], &p).unwrap(), 1.0);
    }

    #[test]
    fn roc_separated_and_random() {
        let sep: Vec<(f64, bool)> = (0..10).map(|i| (i as f64, i >= 5)).collect();
        let c = roc_curve(&sep).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<(f64, bool)> = (0..20_000).map(|_| (rng.random::<f64>(), rng.random::<bool>())).collect();
        // Monte-Carlo oracle: fraction of (positive, negative) pairs ordered correctly
        let pos: Vec<f64> = noise.iter().filter(|s| s.1).map(|s| s.0).collect();
        let neg: Vec<f64> = noise.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut correct = 0u64;
        for (i, p) in pos.iter().enumerate().step_by(7) {
            for n in neg.iter().skip(i % 5).step_by(5) {
                correct += (p > n) as u64;
            }
        }
        let pairs = pos.iter().step_by(7).count() as f64 * (neg.len() as f64 / 5.0);
        let auc = roc_curve(&noise).unwrap().auc;
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
        assert!((auc - correct as f64 / pairs).abs() < 0.02);
        assert!(roc_curve(&[(1.0, true)]).is_err());
    }

    #[test]
    fn roc_ties_give_diagonal_segment() {
        let c = roc_curve(&[(0.5, true), (0.5, false)]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.points.len(), 2);
    }
}
