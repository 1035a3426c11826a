//! Sawtooth privacy-entropy model.
//!
//! A pseudonym change lifts a VMU's privacy entropy to a reset level of
//! `h_max - p * h_0`, after which it decays linearly with slope `alpha` until
//! it reaches the floor `h_min`. Repeating this at every change yields a
//! sawtooth. Everything here is measured in bits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("invalid entropy parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("{what} must be {expected}, got {value}")]
    Domain {
        what: &'static str,
        expected: &'static str,
        value: f64,
    },
    #[error("change epochs must be strictly increasing and within [0, {horizon}] (offending epoch {epoch})")]
    BadEpochs { epoch: f64, horizon: f64 },
}

/// Parameters of one VMU's sawtooth curve.
///
/// Constructed through [`EntropyParams::new`], which enforces
/// `0 < p <= 1`, `h_min >= 0`, `alpha >= 0` and
/// `h_min <= h_max - p * h_0 <= h_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyParams {
    h_max: f64,
    h_0: f64,
    h_min: f64,
    alpha: f64,
    p: f64,
}

impl EntropyParams {
    pub fn new(h_max: f64, h_0: f64, h_min: f64, alpha: f64, p: f64) -> Result<Self, EntropyError> {
        let bad = |field, reason: &str| EntropyError::InvalidParams {
            field,
            reason: reason.to_string(),
        };
        for (field, v) in [
            ("h_max", h_max),
            ("h_0", h_0),
            ("h_min", h_min),
            ("alpha", alpha),
            ("p", p),
        ] {
            if !v.is_finite() {
                return Err(bad(field, "must be finite"));
            }
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(bad("p", "must lie in (0, 1]"));
        }
        if h_min < 0.0 {
            return Err(bad("h_min", "must be non-negative"));
        }
        if alpha < 0.0 {
            return Err(bad("alpha", "must be non-negative"));
        }
        let reset = h_max - p * h_0;
        if reset > h_max {
            return Err(bad("h_0", "reset level h_max - p*h_0 exceeds h_max (h_0 < 0)"));
        }
        if reset < h_min {
            return Err(bad("h_min", "exceeds the reset level h_max - p*h_0"));
        }
        Ok(Self {
            h_max,
            h_0,
            h_min,
            alpha,
            p,
        })
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn h_0(&self) -> f64 {
        self.h_0
    }

    pub fn h_min(&self) -> f64 {
        self.h_min
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Entropy right after a pseudonym change.
    pub fn reset_level(&self) -> f64 {
        self.h_max - self.p * self.h_0
    }

    /// Time after a change at which the curve hits the floor; infinite when
    /// there is no decay.
    pub fn decay_time(&self) -> f64 {
        if self.alpha == 0.0 {
            f64::INFINITY
        } else {
            (self.reset_level() - self.h_min) / self.alpha
        }
    }

    pub fn instantaneous_entropy(&self, t_since_change: f64) -> Result<f64, EntropyError> {
        if !(t_since_change >= 0.0) {
            return Err(EntropyError::Domain {
                what: "time since change",
                expected: "non-negative",
                value: t_since_change,
            });
        }
        Ok(self.value_after(t_since_change))
    }

    fn value_after(&self, t: f64) -> f64 {
        (self.reset_level() - self.alpha * t).max(self.h_min)
    }

    /// Time-average of the sawtooth over one inter-change interval `tau`.
    pub fn average_entropy(&self, tau: f64) -> Result<f64, EntropyError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(EntropyError::Domain {
                what: "inter-change interval",
                expected: "positive and finite",
                value: tau,
            });
        }
        let reset = self.reset_level();
        let t_f = self.decay_time();
        if tau <= t_f {
            Ok(reset - self.alpha * tau / 2.0)
        } else {
            Ok((t_f * (reset + self.h_min) / 2.0 + (tau - t_f) * self.h_min) / tau)
        }
    }

    /// Piecewise-linear curve over `[0, horizon]` that starts at the reset
    /// level and resets again at every epoch in `change_epochs`.
    pub fn timeline(&self, change_epochs: &[f64], horizon: f64) -> Result<EntropyTimeline, EntropyError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(EntropyError::Domain {
                what: "horizon",
                expected: "positive and finite",
                value: horizon,
            });
        }
        let mut prev = f64::NEG_INFINITY;
        for &e in change_epochs {
            if !(e > prev) || e < 0.0 || e > horizon {
                return Err(EntropyError::BadEpochs { epoch: e, horizon });
            }
            prev = e;
        }

        // An epoch at 0 coincides with the implicit start-of-horizon reset.
        let mut starts: Vec<f64> = vec![0.0];
        starts.extend(change_epochs.iter().copied().filter(|&e| e > 0.0));
        let mut segments = Vec::with_capacity(starts.len());
        for (i, &start) in starts.iter().enumerate() {
            let end = starts.get(i + 1).copied().unwrap_or(horizon);
            segments.push(self.segment(start, end));
        }
        Ok(EntropyTimeline { segments })
    }

    fn segment(&self, start: f64, end: f64) -> TimelineSegment {
        let mut points = vec![(start, self.reset_level())];
        let floor_at = start + self.decay_time();
        if floor_at < end {
            if floor_at > start {
                points.push((floor_at, self.h_min));
            }
            points.push((end, self.h_min));
        } else if end > start {
            points.push((end, self.value_after(end - start)));
        }
        TimelineSegment { points }
    }
}

/// `-log2 p`: bits of identity uncertainty when tracked with probability `p`.
pub fn tracking_entropy(p: f64) -> Result<f64, EntropyError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(EntropyError::Domain {
            what: "tracking probability",
            expected: "in (0, 1]",
            value: p,
        });
    }
    Ok(-p.log2())
}

/// One decaying run of the sawtooth between two resets. Point times are
/// strictly increasing, except for a degenerate zero-length segment which
/// holds a single point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSegment {
    pub points: Vec<(f64, f64)>,
}

impl TimelineSegment {
    pub fn start(&self) -> f64 {
        self.points[0].0
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1].0
    }

    fn value_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        pts[pts.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTimeline {
    pub segments: Vec<TimelineSegment>,
}

impl EntropyTimeline {
    /// Right-continuous value: at a reset epoch this is the post-change level.
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.segments.iter().rposition(|s| s.start() <= t).unwrap_or(0);
        self.segments[idx].value_at(t)
    }

    /// Left limit at `t`, i.e. the level just before a change at `t`.
    pub fn value_before(&self, t: f64) -> f64 {
        match self.segments.iter().rposition(|s| s.start() < t) {
            Some(idx) => self.segments[idx].value_at(t),
            None => self.segments[0].value_at(t),
        }
    }

    pub fn minimum(&self) -> f64 {
        self.breakpoints().map(|(_, v)| v).fold(f64::INFINITY, f64::min)
    }

    /// Reset epochs, including the implicit one at time zero.
    pub fn reset_epochs(&self) -> Vec<f64> {
        self.segments.iter().map(TimelineSegment::start).collect()
    }

    /// All breakpoints in order; a reset shows up as two points sharing a time.
    pub fn breakpoints(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.segments.iter().flat_map(|s| s.points.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(p: f64) -> EntropyParams {
        EntropyParams::new(1.5, 1.0, 0.25, 1.0, p).unwrap()
    }

    fn trapezoid(params: &EntropyParams, tau: f64, steps: usize) -> f64 {
        let h = tau / steps as f64;
        let mut acc = 0.5 * (params.value_after(0.0) + params.value_after(tau));
        for i in 1..steps {
            acc += params.value_after(i as f64 * h);
        }
        acc * h / tau
    }

    #[test]
    fn reset_level_examples() {
        assert_eq!(curve(0.5).reset_level(), 1.0);
        assert_eq!(curve(1.0).reset_level(), 0.5);
        let flat = EntropyParams::new(2.0, 0.0, 0.0, 1.0, 0.3).unwrap();
        assert_eq!(flat.reset_level(), 2.0);
    }

    #[test]
    fn instantaneous_examples() {
        let p = curve(0.5);
        assert_eq!(p.instantaneous_entropy(0.0).unwrap(), 1.0);
        assert_eq!(p.instantaneous_entropy(0.5).unwrap(), 0.5);
        assert_eq!(p.instantaneous_entropy(2.0).unwrap(), 0.25);
        assert!(p.instantaneous_entropy(-0.1).is_err());
    }

    #[test]
    fn tracking_entropy_examples() {
        assert_eq!(tracking_entropy(1.0).unwrap(), 0.0);
        assert_eq!(tracking_entropy(0.5).unwrap(), 1.0);
        assert_eq!(tracking_entropy(0.25).unwrap(), 2.0);
        assert!(tracking_entropy(0.0).is_err());
        assert!(tracking_entropy(1.5).is_err());
    }

    #[test]
    fn average_entropy_matches_trapezoid_oracle() {
        // Oracle values frozen from 10^6-step trapezoid integration.
        let p = curve(0.5);
        let a = trapezoid(&p, 0.75, 1_000_000);
        let b = trapezoid(&p, 1.5, 1_000_000);
        assert!((a - 0.625).abs() < 1e-6);
        assert!((b - 0.4375).abs() < 1e-6);
        assert!((p.average_entropy(0.75).unwrap() - 0.625).abs() < 1e-12);
        assert!((p.average_entropy(1.5).unwrap() - 0.4375).abs() < 1e-12);
        assert!(p.average_entropy(0.0).is_err());
    }

    #[test]
    fn zero_slope_is_constant() {
        let p = EntropyParams::new(1.5, 1.0, 0.25, 0.0, 0.2).unwrap();
        assert_eq!(p.decay_time(), f64::INFINITY);
        for tau in [0.1, 1.0, 100.0] {
            assert_eq!(p.average_entropy(tau).unwrap(), p.reset_level());
        }
    }

    #[test]
    fn rejects_inconsistent_params() {
        assert!(EntropyParams::new(1.5, 1.0, 0.25, 1.0, 0.0).is_err());
        assert!(EntropyParams::new(1.5, 1.0, -0.1, 1.0, 0.5).is_err());
        assert!(EntropyParams::new(1.5, 1.0, 0.25, -1.0, 0.5).is_err());
        // floor above the reset level
        assert!(EntropyParams::new(1.5, 1.0, 1.2, 1.0, 0.5).is_err());
        // negative h_0 lifts the reset level above h_max
        assert!(EntropyParams::new(1.5, -1.0, 0.25, 1.0, 0.5).is_err());
    }

    #[test]
    fn timeline_without_epochs_is_one_segment() {
        let p = curve(0.5);
        let tl = p.timeline(&[], 1.0).unwrap();
        assert_eq!(tl.segments.len(), 1);
        assert_eq!(tl.value_at(0.0), 1.0);
        assert!((tl.value_at(1.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn timeline_resets_at_epoch() {
        let p = curve(0.5);
        let tl = p.timeline(&[0.5], 1.0).unwrap();
        assert!((tl.value_before(0.5) - 0.5).abs() < 1e-12);
        assert_eq!(tl.value_at(0.5), 1.0);
        assert_eq!(tl.reset_epochs(), vec![0.0, 0.5]);
    }

    #[test]
    fn frequent_changes_keep_entropy_above_floor() {
        let p = curve(0.5);
        let tau = 0.5; // t_f = 0.75
        let epochs: Vec<f64> = (1..10).map(|k| k as f64 * tau).collect();
        let tl = p.timeline(&epochs, 5.0).unwrap();
        let expected = p.reset_level() - p.alpha() * tau;
        assert!((tl.minimum() - expected).abs() < 1e-12);
        assert!(tl.minimum() > p.h_min());
    }

    #[test]
    fn timeline_rejects_unsorted_epochs() {
        let p = curve(0.5);
        assert!(p.timeline(&[0.6, 0.4], 1.0).is_err());
        assert!(p.timeline(&[0.4, 0.4], 1.0).is_err());
        assert!(p.timeline(&[1.5], 1.0).is_err());
    }
}
