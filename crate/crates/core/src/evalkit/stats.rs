//! Interval estimates, pooled t-tests and box-plot summaries.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::fmt;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (divisor `n − 1`).
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Two-sided 95% critical value of Student's t with `df` degrees of freedom.
pub fn t_critical(df: f64) -> Result<f64> {
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(t.inverse_cdf(0.975))
}

/// `mean ± t·s/√n` at 95% confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub mean: f64,
    pub margin: f64,
    pub n: usize,
}

impl IntervalEstimate {
    pub fn from_samples(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Invalid(format!("an interval needs at least 2 samples, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sample for interval estimate".into()));
        }
        let n = v.len();
        let s = sample_variance(v).sqrt();
        Ok(Self { mean: mean(v), margin: t_critical(n as f64 - 1.0)? * s / (n as f64).sqrt(), n })
    }

    pub fn width(&self) -> f64 {
        2.0 * self.margin
    }

    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*}±{:.*}", decimals, self.mean, decimals, self.margin)
    }
}

impl fmt::Display for IntervalEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format(3))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Two-sided two-sample t-test assuming equal variances.
pub fn ttest_two_sample(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("each sample needs at least 2 values".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / df;
    let diff = mean(a) - mean(b);
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest { t: diff.signum() * f64::INFINITY, p: 0.0, df }
        });
    }
    let t = diff / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(TTest { t, p: (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0), df })
}

/// Five-number summary plus mean; quartiles are medians of the halves with the
/// median itself included in both halves when `n` is odd.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub n: usize,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl BoxStats {
    pub fn from_samples(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Invalid("box statistics of an empty sample".into()));
        }
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("NaN in box-plot sample".into()));
        }
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let half = n.div_ceil(2);
        Ok(Self {
            min: s[0],
            q1: median_sorted(&s[..half]),
            q2: median_sorted(&s),
            q3: median_sorted(&s[n - half..]),
            max: s[n - 1],
            mean: mean(&s),
            n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_metric_has_zero_margin() {
        let e = IntervalEstimate::from_samples(&[0.5; 10]).unwrap();
        assert_eq!((e.mean, e.margin), (0.5, 0.0));
        assert!(IntervalEstimate::from_samples(&[1.0]).is_err());
    }

    #[test]
    fn margin_matches_t_table() {
        let v = [0.97, 0.98, 0.99, 0.96, 0.98];
        // mean 0.976, s² = (0.000036+0.000016+0.000196+0.000256+0.000016)/4 = 0.00013
        let s = (0.00013f64).sqrt();
        // t(0.975, 4) from printed tables
        let expected = 2.776_445 * s / 5f64.sqrt();
        let e = IntervalEstimate::from_samples(&v).unwrap();
        assert_relative_eq!(e.mean, 0.976, max_relative = 1e-12);
        assert_relative_eq!(e.margin, expected, max_relative = 1e-5);
        assert_relative_eq!(t_critical(9.0).unwrap(), 2.262_157, max_relative = 1e-5);
        assert_eq!(IntervalEstimate { mean: 63.2, margin: 2.9, n: 10 }.format(0), "63±3");
    }

    /// Two-sided p-value by Simpson integration of the t density.
    fn p_by_quadrature(t: f64, df: f64) -> f64 {
        let c = statrs::function::gamma::gamma((df + 1.0) / 2.0)
            / ((df * std::f64::consts::PI).sqrt() * statrs::function::gamma::gamma(df / 2.0));
        let pdf = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut s = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn pooled_t_test_oracle() {
        let r = ttest_two_sample(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        // pooled variance 1, standard error √(2/3)
        assert_relative_eq!(r.t, -1.0 / (2.0f64 / 3.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(r.t, -1.224745, epsilon = 1e-6);
        assert_eq!(r.df, 4.0);
        assert_relative_eq!(r.p, p_by_quadrature(r.t, 4.0), epsilon = 1e-8);
        assert_relative_eq!(r.p, 0.2879, epsilon = 1e-4);
    }

    #[test]
    fn degenerate_t_tests() {
        let same = ttest_two_sample(&[0.9, 0.9], &[0.9, 0.9]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        assert_eq!(ttest_two_sample(&[0.9, 0.9], &[0.8, 0.8]).unwrap().p, 0.0);
        let ident = ttest_two_sample(&[0.1, 0.5, 0.3], &[0.1, 0.5, 0.3]).unwrap();
        assert_eq!((ident.t, ident.p), (0.0, 1.0));
        assert!(ttest_two_sample(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn interval_coverage_is_near_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = Normal::new(0.9, 0.02).unwrap();
        let trials = 1000;
        let covered = (0..trials)
            .filter(|_| {
                let v: Vec<f64> = (0..10).map(|_| d.sample(&mut rng)).collect();
                let e = IntervalEstimate::from_samples(&v).unwrap();
                (e.mean - 0.9).abs() <= e.margin
            })
            .count();
        let rate = covered as f64 / trials as f64;
        assert!((0.90..=0.99).contains(&rate), "{rate}");
    }

    #[test]
    fn box_stats_inclusive_quartiles() {
        let b = BoxStats::from_samples(&[7.0, 1.0, 3.0, 5.0, 9.0]).unwrap();
        // halves {1,3,5} and {5,7,9}
        assert_eq!((b.min, b.q1, b.q2, b.q3, b.max, b.mean), (1.0, 3.0, 5.0, 7.0, 9.0, 5.0));
        let b = BoxStats::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((b.q1, b.q2, b.q3), (1.5, 2.5, 3.5));
        assert!(BoxStats::from_samples(&[]).is_err());
    }
}
