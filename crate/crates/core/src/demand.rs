//! Poisson pseudonym-change demand.
//!
//! A VMU that changes pseudonyms at frequency `f` over an observation period
//! `T` wants `D ~ Poisson(f * T)` pseudonyms. One pseudonym is consumed per
//! change.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Default tail tolerance for truncated probability mass functions.
pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Above this rate `exp(-rate)` underflows, so terms are generated in log space.
const DIRECT_RECURRENCE_LIMIT: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("change frequency must be finite and non-negative, got {0}")]
    BadFrequency(f64),
    #[error("observation period must be finite and positive, got {0}")]
    BadPeriod(f64),
    #[error("tail tolerance must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("observation window must be positive, got {0}")]
    BadWindow(f64),
    #[error("timestamp {0} is out of order or outside the observation window")]
    BadTimestamp(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    frequency: f64,
    period: f64,
}

impl DemandModel {
    pub fn new(frequency: f64, period: f64) -> Result<Self, DemandError> {
        if !(frequency >= 0.0) || !frequency.is_finite() {
            return Err(DemandError::BadFrequency(frequency));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(DemandError::BadPeriod(period));
        }
        Ok(Self { frequency, period })
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Expected number of changes in the period.
    pub fn rate(&self) -> f64 {
        self.frequency * self.period
    }

    /// Arrival epochs of change requests in `[0, period)`.
    ///
    /// Their count is distributed as `Poisson(rate)`.
    pub fn arrival_times<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::new();
        if self.frequency == 0.0 {
            return out;
        }
        let gap = Exp::new(self.frequency).expect("positive frequency");
        let mut t = gap.sample(rng);
        while t < self.period {
            out.push(t);
            t += gap.sample(rng);
        }
        out
    }
}

/// One `Poisson(rate)` draw from a ChaCha8 stream keyed by `seed`.
pub fn sample_demand(model: &DemandModel, seed: u64) -> u64 {
    let mut rng = seed::rng(seed, &[seed::stream::DEMAND]);
    sample_with(model, &mut rng)
}

pub fn sample_with<R: Rng + ?Sized>(model: &DemandModel, rng: &mut R) -> u64 {
    let rate = model.rate();
    if rate == 0.0 {
        return 0;
    }
    let dist = Poisson::new(rate).expect("positive rate");
    dist.sample(rng) as u64
}

/// Iterator over `P(D = 0), P(D = 1), ...` for `D ~ Poisson(rate)`.
#[derive(Debug, Clone)]
pub struct PoissonTerms {
    rate: f64,
    k: u64,
    current: f64,
    ln_rate: f64,
    ln_factorial: f64,
}

impl PoissonTerms {
    pub fn new(rate: f64) -> Self {
        Self {
            rate,
            k: 0,
            current: (-rate).exp(),
            ln_rate: rate.ln(),
            ln_factorial: 0.0,
        }
    }
}

impl Iterator for PoissonTerms {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let k = self.k;
        let value = if self.rate == 0.0 {
            if k == 0 {
                1.0
            } else {
                0.0
            }
        } else if self.rate <= DIRECT_RECURRENCE_LIMIT {
            let v = self.current;
            self.current = v * self.rate / (k + 1) as f64;
            v
        } else {
            if k > 0 {
                self.ln_factorial += (k as f64).ln();
            }
            (-self.rate + k as f64 * self.ln_rate - self.ln_factorial).exp()
        };
        self.k += 1;
        Some(value)
    }
}

/// Truncated Poisson pmf over `0..=n_trunc` plus the residual tail mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandPmf {
    pub rate: f64,
    pub probabilities: Vec<f64>,
    pub truncation_mass: f64,
}

pub fn demand_pmf(model: &DemandModel, epsilon: f64) -> Result<DemandPmf, DemandError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(DemandError::BadEpsilon(epsilon));
    }
    let rate = model.rate();
    let mut probabilities = Vec::new();
    let mut cumulative = 0.0;
    let mut terms = PoissonTerms::new(rate);
    // Past the mode, terms only shrink; stop once the remainder is below epsilon
    // or no further term can move the sum.
    loop {
        let p = terms.next().expect("infinite iterator");
        probabilities.push(p);
        cumulative += p;
        let k = probabilities.len() as f64 - 1.0;
        if cumulative >= 1.0 - epsilon || (k > rate && p == 0.0) {
            break;
        }
    }
    Ok(DemandPmf {
        rate,
        probabilities,
        truncation_mass: (1.0 - cumulative).max(0.0),
    })
}

impl DemandPmf {
    pub fn n_trunc(&self) -> usize {
        self.probabilities.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probabilities.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// Survival values `P(D > k)` for `k = 0..=max_k`, extending past the
    /// truncation point with further Poisson terms. The sequence is
    /// non-increasing and non-negative by construction.
    pub fn survival(&self, max_k: usize) -> Vec<f64> {
        survival_curve(self.rate, max_k)
    }
}

/// `P(D > k)` for `k = 0..=max_k` with `D ~ Poisson(rate)`.
pub fn survival_curve(rate: f64, max_k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_k + 1);
    let mut cdf = 0.0;
    for p in PoissonTerms::new(rate).take(max_k + 1) {
        cdf += p;
        let s = (1.0 - cdf).max(0.0);
        let s = match out.last() {
            Some(&prev) if s > prev => prev,
            _ => s,
        };
        out.push(s);
    }
    out
}

/// Maximum-likelihood Poisson frequency from change timestamps observed over
/// `[0, window]`.
pub fn estimate_frequency(change_timestamps: &[f64], window: f64) -> Result<f64, DemandError> {
    if !(window > 0.0) || !window.is_finite() {
        return Err(DemandError::BadWindow(window));
    }
    let mut prev = f64::NEG_INFINITY;
    for &t in change_timestamps {
        if !(t > prev) || t < 0.0 || t > window {
            return Err(DemandError::BadTimestamp(t));
        }
        prev = t;
    }
    Ok(change_timestamps.len() as f64 / window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial_pmf(rate: f64, k: u64) -> f64 {
        let fact: f64 = (1..=k).map(|i| i as f64).product();
        (-rate).exp() * rate.powi(k as i32) / fact
    }

    #[test]
    fn zero_frequency_never_demands() {
        let m = DemandModel::new(0.0, 60.0).unwrap();
        for s in 0..100 {
            assert_eq!(sample_demand(&m, s), 0);
        }
        let pmf = demand_pmf(&m, 1e-9).unwrap();
        assert_eq!(pmf.probabilities, vec![1.0]);
        assert_eq!(pmf.truncation_mass, 0.0);
    }

    #[test]
    fn sample_mean_and_variance() {
        let m = DemandModel::new(1.0, 60.0).unwrap();
        let n = 100_000u64;
        let mean = (0..n).map(|s| sample_demand(&m, s) as f64).sum::<f64>() / n as f64;
        assert!((mean - 60.0).abs() < 3.0 * 60f64.sqrt() / (n as f64).sqrt());

        let m2 = DemandModel::new(2.0, 60.0).unwrap();
        let xs: Vec<f64> = (0..n).map(|s| sample_demand(&m2, s) as f64).collect();
        let mu = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 120.0).abs() < 0.05 * 120.0, "variance {var}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = DemandModel::new(1.7, 60.0).unwrap();
        assert_eq!(sample_demand(&m, 99), sample_demand(&m, 99));
    }

    #[test]
    fn pmf_head_and_mean() {
        let m = DemandModel::new(2.0, 1.0).unwrap();
        let pmf = demand_pmf(&m, 1e-9).unwrap();
        assert!((pmf.probabilities[0] - (-2.0f64).exp()).abs() < 1e-9);
        assert!(pmf.truncation_mass <= 1e-9);
        let total: f64 = pmf.probabilities.iter().sum();
        assert!((total + pmf.truncation_mass - 1.0).abs() < 1e-12);
        assert!((pmf.mean() - 2.0).abs() <= 1e-9 * pmf.n_trunc() as f64 + 1e-12);
    }

    #[test]
    fn pmf_matches_factorial_formula() {
        for rate in [0.3, 1.0, 4.5, 12.0, 20.0] {
            let m = DemandModel::new(rate, 1.0).unwrap();
            let pmf = demand_pmf(&m, 1e-12).unwrap();
            for (k, p) in pmf.probabilities.iter().enumerate() {
                assert!((p - factorial_pmf(rate, k as u64)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn truncation_point_is_minimal() {
        let m = DemandModel::new(3.0, 2.0).unwrap();
        let eps = 1e-6;
        let pmf = demand_pmf(&m, eps).unwrap();
        let before: f64 = pmf.probabilities[..pmf.n_trunc()].iter().sum();
        assert!(before < 1.0 - eps);
        assert!(demand_pmf(&m, 0.0).is_err());
        assert!(demand_pmf(&m, 1.0).is_err());
    }

    #[test]
    fn large_rates_stay_finite() {
        let m = DemandModel::new(20.0, 60.0).unwrap(); // rate 1200
        let pmf = demand_pmf(&m, 1e-9).unwrap();
        assert!((pmf.mean() - 1200.0).abs() < 1e-3);
        let s = survival_curve(1200.0, 1500);
        assert!(s[0] > 0.999_999 && s[1500] < 1e-9);
    }

    #[test]
    fn chi_square_against_pmf() {
        let m = DemandModel::new(5.0, 1.0).unwrap();
        let pmf = demand_pmf(&m, 1e-12).unwrap();
        let n = 100_000u64;
        let mut rng = seed::rng(2024, &[]);
        let mut counts = [0u64; 13];
        for _ in 0..n {
            let d = sample_with(&m, &mut rng).min(12) as usize;
            counts[d] += 1;
        }
        let mut stat = 0.0;
        for (k, &c) in counts.iter().enumerate() {
            let p = if k < 12 {
                pmf.probabilities[k]
            } else {
                1.0 - pmf.probabilities[..12].iter().sum::<f64>()
            };
            let e = p * n as f64;
            stat += (c as f64 - e).powi(2) / e;
        }
        // 12 degrees of freedom, significance 0.001
        assert!(stat < 32.909, "chi-square {stat}");
    }

    #[test]
    fn arrival_counts_are_poisson() {
        let m = DemandModel::new(1.5, 60.0).unwrap();
        let n = 20_000;
        let mut rng = seed::rng(5, &[]);
        let mean = (0..n).map(|_| m.arrival_times(&mut rng).len() as f64).sum::<f64>() / n as f64;
        assert!((mean - 90.0).abs() < 3.0 * (90.0f64 / n as f64).sqrt());
    }

    #[test]
    fn frequency_estimates() {
        let ts: Vec<f64> = (0..60).map(|i| i as f64 + 0.5).collect();
        assert_eq!(estimate_frequency(&ts, 60.0).unwrap(), 1.0);
        assert_eq!(estimate_frequency(&[], 60.0).unwrap(), 0.0);
        let ts: Vec<f64> = (0..90).map(|i| i as f64 * 0.6 + 0.1).collect();
        assert_eq!(estimate_frequency(&ts, 60.0).unwrap(), 1.5);
        assert!(estimate_frequency(&ts, 0.0).is_err());
        assert!(estimate_frequency(&[2.0, 1.0], 60.0).is_err());
    }
}
