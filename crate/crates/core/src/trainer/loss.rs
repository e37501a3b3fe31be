//! The four-part collaborative loss and its gradient with respect to the logits.

use crate::error::{Error, Result};
use crate::model::{Heads, PathLogits, PredictionBatch};
use crate::nn::linear::{log_sum_exp_rows, softmax_rows};
use crate::nn::{Float, Parameterized};
use ndarray::{Array2, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_w: f64,
    pub l_sw: f64,
    pub l_ws: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_s: f64, l_w: f64, l_sw: f64, l_ws: f64) -> Self {
        Self { l_s, l_w, l_sw, l_ws, total: l_s + l_w + l_sw + l_ws }
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(sum(|b| b.l_s), sum(|b| b.l_w), sum(|b| b.l_sw), sum(|b| b.l_ws))
    }

    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_w, self.l_sw, self.l_ws, self.total].iter().all(|v| v.is_finite())
    }
}

/// Class indices for a batch; the one-hot targets are implied.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Labels {
    pub subjects: Vec<usize>,
    pub keywords: Vec<usize>,
}

impl Labels {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        Labels {
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
            keywords: idx.iter().map(|&i| self.keywords[i]).collect(),
        }
    }

    fn check(&self, k: usize, m: usize, n: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if self.subjects.len() != k || self.keywords.len() != k {
            return Err(Error::Shape(format!("{} rows, {} / {} labels", k, self.subjects.len(), self.keywords.len())));
        }
        if let Some(s) = self.subjects.iter().find(|&&s| s >= m) {
            return Err(Error::Invalid(format!("speaker label {s} outside {m} classes")));
        }
        if let Some(w) = self.keywords.iter().find(|&&w| w >= n) {
            return Err(Error::Invalid(format!("keyword label {w} outside {n} classes")));
        }
        Ok(())
    }
}

/// Which terms contribute; all four in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub s: bool,
    pub w: bool,
    pub sw: bool,
    pub ws: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { s: true, w: true, sw: true, ws: true };
}

/// `Σ_k −ln p_k[y_k]`.
pub fn cross_entropy_sum(p: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(k, &y)| -p[[k, y]].max(f64::MIN_POSITIVE).ln()).sum()
}

/// `(1/K) Σ_k ‖p_k − 1/n‖²`.
pub fn uniform_penalty(p: ArrayView2<'_, f64>) -> f64 {
    let (k, n) = p.dim();
    let u = 1.0 / n as f64;
    p.iter().map(|v| (v - u).powi(2)).sum::<f64>() / k as f64
}

fn check_finite(p: &Array2<f64>, what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} scores")));
    }
    Ok(())
}

/// Loss of a batch of probability outputs.
pub fn loss_components(preds: &PredictionBatch, labels: &Labels) -> Result<LossBreakdown> {
    labels.check(preds.len(), preds.s.ncols(), preds.w.ncols())?;
    for (p, what) in [(&preds.s, "speaker"), (&preds.w, "keyword"), (&preds.sw, "subject→keyword"), (&preds.ws, "keyword→speaker")] {
        check_finite(p, what)?;
    }
    Ok(LossBreakdown::new(
        cross_entropy_sum(preds.s.view(), &labels.subjects),
        cross_entropy_sum(preds.w.view(), &labels.keywords),
        uniform_penalty(preds.sw.view()),
        uniform_penalty(preds.ws.view()),
    ))
}

fn ce_with_grad<T: Float>(z: &Array2<T>, labels: &[usize], on: bool) -> Result<(f64, Array2<T>)> {
    let p = softmax_rows(&z.view());
    check_finite(&p, "logit")?;
    if !on {
        return Ok((0.0, Array2::zeros(z.raw_dim())));
    }
    let lse = log_sum_exp_rows(&z.view());
    let loss = labels.iter().enumerate().map(|(k, &y)| lse[k] - z[[k, y]].f64()).sum();
    let mut d = p;
    for (k, &y) in labels.iter().enumerate() {
        d[[k, y]] -= 1.0;
    }
    Ok((loss, d.mapv(T::of)))
}

fn penalty_with_grad<T: Float>(z: &Array2<T>, on: bool) -> Result<(f64, Array2<T>)> {
    let p = softmax_rows(&z.view());
    check_finite(&p, "logit")?;
    if !on {
        return Ok((0.0, Array2::zeros(z.raw_dim())));
    }
    let (k, n) = p.dim();
    let u = 1.0 / n as f64;
    let loss = uniform_penalty(p.view());
    let mut d = Array2::zeros((k, n));
    for r in 0..k {
        let g: Vec<f64> = (0..n).map(|i| 2.0 / k as f64 * (p[[r, i]] - u)).collect();
        let dot: f64 = (0..n).map(|i| p[[r, i]] * g[i]).sum();
        for i in 0..n {
            d[[r, i]] = T::of(p[[r, i]] * (g[i] - dot));
        }
    }
    Ok((loss, d))
}

/// Loss and gradient with respect to the four logit matrices.
pub fn loss_and_grad<T: Float>(logits: &PathLogits<T>, labels: &Labels) -> Result<(LossBreakdown, PathLogits<T>)> {
    loss_and_grad_terms(logits, labels, Terms::ALL)
}

pub fn loss_and_grad_terms<T: Float>(
    logits: &PathLogits<T>,
    labels: &Labels,
    terms: Terms,
) -> Result<(LossBreakdown, PathLogits<T>)> {
    labels.check(logits.s.nrows(), logits.s.ncols(), logits.w.ncols())?;
    let (l_s, s) = ce_with_grad(&logits.s, &labels.subjects, terms.s)?;
    let (l_w, w) = ce_with_grad(&logits.w, &labels.keywords, terms.w)?;
    let (l_sw, sw) = penalty_with_grad(&logits.sw, terms.sw)?;
    let (l_ws, ws) = penalty_with_grad(&logits.ws, terms.ws)?;
    Ok((LossBreakdown::new(l_s, l_w, l_sw, l_ws), PathLogits { s, w, sw, ws }))
}

/// Largest relative disagreement between analytic and central-difference
/// gradients of the loss over every projection and head parameter.
pub fn grad_check(heads: &Heads<f64>, features: &Array4<f64>, labels: &Labels, terms: Terms, step: f64) -> Result<f64> {
    let loss = |h: &Heads<f64>| -> Result<f64> {
        let (logits, _) = h.forward(features.clone())?;
        Ok(loss_and_grad_terms(&logits, labels, terms)?.0.total)
    };
    let mut work = heads.clone();
    let (logits, cache) = work.forward(features.clone())?;
    let (_, d) = loss_and_grad_terms(&logits, labels, terms)?;
    work.zero_grad();
    work.backward(&cache, &d, false);
    let mut analytic = Vec::new();
    work.visit("", &mut |_, p| analytic.extend_from_slice(p.grads()));
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let mut worst: f64 = 0.0;
    for (idx, &a) in analytic.iter().enumerate() {
        let nudge = |delta: f64| {
            let mut probe = heads.clone();
            let mut k = 0;
            probe.visit_mut("", &mut |_, p| {
                if idx >= k && idx < k + p.len() {
                    p.values_mut()[idx - k] += delta;
                }
                k += p.len();
            });
            loss(&probe)
        };
        let num = (nudge(step)? - nudge(-step)?) / (2.0 * step);
        if !num.is_finite() {
            return Err(Error::NonFinite("finite-difference gradient".into()));
        }
        // absolute floor keeps near-zero gradients from dominating
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Gradient check at reduced size: C=8, M=3, N=4, a five-sample batch, double precision.
pub fn reduced_grad_check(terms: Terms, seed: u64) -> Result<f64> {
    use crate::model::HeadShape;
    use crate::nn::Activation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = HeadShape { hidden1: 6, act1: Activation::Relu, hidden2: 5 };
    let kw = HeadShape { hidden1: 7, act1: Activation::Sigmoid, hidden2: 6 };
    let mut heads = Heads::<f64>::new(8, 2, 3, 4, sp, kw, &mut rng);
    let u = Uniform::new(-0.5, 0.5).expect("valid range");
    // random biases keep ReLU inputs away from the kink
    heads.visit_mut("", &mut |_, p| p.values_mut().iter_mut().for_each(|v| *v += u.sample(&mut rng)));
    let features = Array4::from_shape_fn((5, 8, 2, 2), |_| u.sample(&mut rng) * 2.0);
    let labels = Labels { subjects: vec![0, 1, 2, 1, 0], keywords: vec![3, 0, 1, 2, 3] };
    grad_check(&heads, &features, &labels, terms, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn batch(s: Array2<f64>, w: Array2<f64>, sw: Array2<f64>, ws: Array2<f64>) -> PredictionBatch {
        PredictionBatch { s, w, sw, ws }
    }

    #[test]
    fn perfect_predictions_have_zero_classification_loss() {
        let one = |n: usize, i: usize| Array2::from_shape_fn((1, n), |(_, j)| (j == i) as u8 as f64);
        let b = batch(one(5, 2), one(10, 7), Array2::from_elem((1, 10), 0.1), Array2::from_elem((1, 5), 0.2));
        let l = loss_components(&b, &Labels { subjects: vec![2], keywords: vec![7] }).unwrap();
        assert_eq!((l.l_s, l.l_w), (0.0, 0.0));
        assert!(l.l_sw.abs() < 1e-30 && l.l_ws.abs() < 1e-30);
    }

    #[test]
    fn uniform_and_one_hot_examples() {
        let uni = Array2::from_elem((1, 10), 0.1);
        let hot = Array2::from_shape_fn((1, 10), |(_, j)| (j == 4) as u8 as f64);
        let b = batch(Array2::from_elem((1, 5), 0.2), uni, hot, Array2::from_elem((1, 5), 0.2));
        let l = loss_components(&b, &Labels { subjects: vec![0], keywords: vec![3] }).unwrap();
        assert!((l.l_w - 10f64.ln()).abs() < 1e-9);
        assert_relative_eq!(l.l_w, 2.302585, epsilon = 1e-6);
        assert_relative_eq!(l.l_sw, 0.9, max_relative = 1e-12);
        assert_eq!(l.total, l.l_s + l.l_w + l.l_sw + l.l_ws);
    }

    #[test]
    fn penalty_is_bounded_by_vertex_value() {
        // the maximum over the simplex sits at a vertex: (N−1)/N² · N + … = 1 − 1/N
        for n in 2..6 {
            let bound = (n as f64 - 1.0) / n as f64;
            let hot = Array2::from_shape_fn((1, n), |(_, j)| (j == 0) as u8 as f64);
            assert_relative_eq!(uniform_penalty(hot.view()), bound, max_relative = 1e-12);
            // exhaustive grid over the simplex with step 1/6
            let steps = 6usize;
            let mut stack = vec![(Vec::<usize>::new(), steps)];
            while let Some((prefix, left)) = stack.pop() {
                if prefix.len() == n - 1 {
                    let mut v: Vec<f64> = prefix.iter().map(|&c| c as f64 / steps as f64).collect();
                    v.push(left as f64 / steps as f64);
                    let p = Array2::from_shape_vec((1, n), v).unwrap();
                    assert!(uniform_penalty(p.view()) <= bound + 1e-12);
                    continue;
                }
                for c in 0..=left {
                    let mut q = prefix.clone();
                    q.push(c);
                    stack.push((q, left - c));
                }
            }
        }
        assert_relative_eq!(0.9 + 0.09, 0.99);
    }

    #[test]
    fn nan_predictions_are_rejected() {
        let b = batch(array![[f64::NAN, 0.5]], array![[0.5, 0.5]], array![[0.5, 0.5]], array![[0.5, 0.5]]);
        assert!(matches!(loss_components(&b, &Labels { subjects: vec![0], keywords: vec![0] }), Err(Error::NonFinite(_))));
    }

    #[test]
    fn logit_loss_matches_probability_loss() {
        let z = PathLogits {
            s: array![[1.0, -0.5, 0.3], [0.2, 0.1, -2.0]],
            w: array![[0.0, 1.0, 2.0, 3.0], [3.0, 1.0, 0.0, 0.5]],
            sw: array![[0.4, 0.0, -0.3, 0.1], [1.0, 1.0, 1.0, 1.0]],
            ws: array![[2.0, -1.0, 0.0], [0.5, 0.5, 0.1]],
        };
        let labels = Labels { subjects: vec![0, 2], keywords: vec![3, 1] };
        let (a, _) = loss_and_grad(&z, &labels).unwrap();
        let b = loss_components(&PredictionBatch::from_logits(&z), &labels).unwrap();
        assert_relative_eq!(a.total, b.total, max_relative = 1e-12);
        assert_relative_eq!(a.l_sw, b.l_sw, max_relative = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ce = Terms { s: true, w: true, sw: false, ws: false };
        let quad = Terms { s: false, w: false, sw: true, ws: false };
        for (terms, seed) in [(ce, 1), (quad, 2), (Terms::ALL, 3), (Terms::ALL, 4)] {
            let err = reduced_grad_check(terms, seed).unwrap();
            assert!(err < 1e-4, "{terms:?}: {err}");
        }
    }
}
