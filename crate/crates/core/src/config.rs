//! Scenario configuration: strict TOML schema, defaults and validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AttackerConfig, Observability};
use crate::allocator::GaConfig;
use crate::entropy::EntropyParams;
use crate::protocol::ProtocolConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    OnDemand,
    Equal,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::OnDemand => "on_demand",
            Scheme::Equal => "equal",
        }
    }

    pub fn other(self) -> Scheme {
        match self {
            Scheme::OnDemand => Scheme::Equal,
            Scheme::Equal => Scheme::OnDemand,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ga,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandMode {
    Realized,
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub h_max: f64,
    pub h_0: f64,
    pub h_min: f64,
    pub alpha: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            h_max: 1.5,
            h_0: 1.0,
            h_min: 0.25,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmuSpec {
    /// Pseudonym-change frequency, changes per unit time.
    pub frequency: f64,
    /// Tracking probability; drawn from U(0, 0.5] per seed when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<f64>,
}

/// A VT accusing another pair's VT at `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevocationSpec {
    pub time: f64,
    pub reporter: usize,
    pub accused: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::rsu_count")]
    pub rsu_count: u32,
    #[serde(default = "defaults::one")]
    pub segment_length: f64,
    /// CA pseudonym rate per unit time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Observation period `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    #[serde(default = "defaults::mode")]
    pub mode: ChangeMode,
    #[serde(default = "defaults::scheme")]
    pub scheme: Scheme,
    #[serde(default = "defaults::solver")]
    pub solver: Solver,
    #[serde(default = "defaults::demand_mode")]
    pub demand_mode: DemandMode,
    #[serde(default = "defaults::one")]
    pub beta: f64,
    #[serde(default = "defaults::h_store")]
    pub h_store: f64,
    #[serde(default = "defaults::r_penalty")]
    pub r_penalty: f64,
    #[serde(default = "defaults::one")]
    pub broadcast_interval: f64,
    #[serde(default = "defaults::shuffle_interval")]
    pub shuffle_interval: f64,
    /// VT pseudonyms stocked at every RSU before the period starts.
    #[serde(default = "defaults::vt_initial_stock")]
    pub vt_initial_stock: usize,
    #[serde(default)]
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default = "defaults::attackers")]
    pub attackers: Vec<AttackerConfig>,
    #[serde(default)]
    pub revocations: Vec<RevocationSpec>,
    #[serde(default)]
    pub vmus: Vec<VmuSpec>,
}

mod defaults {
    use super::*;

    pub fn rsu_count() -> u32 {
        6
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn h_store() -> f64 {
        0.1
    }
    pub fn r_penalty() -> f64 {
        0.3
    }
    pub fn shuffle_interval() -> f64 {
        10.0
    }
    pub fn vt_initial_stock() -> usize {
        100
    }
    pub fn mode() -> ChangeMode {
        ChangeMode::Sync
    }
    pub fn scheme() -> Scheme {
        Scheme::OnDemand
    }
    pub fn solver() -> Solver {
        Solver::Ga
    }
    pub fn demand_mode() -> DemandMode {
        DemandMode::Realized
    }
    pub fn attackers() -> Vec<AttackerConfig> {
        vec![
            AttackerConfig::default(),
            AttackerConfig {
                name: "physical".into(),
                observability: Observability::physical_only(),
            },
        ]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

fn check(cond: bool, path: &str, message: &str) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(invalid(path, message))
    }
}

fn non_negative(x: f64, path: &str) -> Result<(), ConfigError> {
    check(x.is_finite() && x >= 0.0, path, "must be a finite number >= 0")
}

fn positive(x: f64, path: &str) -> Result<(), ConfigError> {
    check(x.is_finite() && x > 0.0, path, "must be a finite number > 0")
}

impl ScenarioConfig {
    /// Minimal config with every optional field at its default. VMU
    /// positions and velocities stay unset until [`Self::fill_defaults`].
    pub fn new(theta: f64, period: f64, frequencies: &[f64]) -> Self {
        let mut c: ScenarioConfig = toml::from_str("").expect("all fields have defaults");
        c.theta = Some(theta);
        c.period = Some(period);
        c.vmus = frequencies
            .iter()
            .map(|&frequency| VmuSpec {
                frequency,
                p: None,
                position: None,
                velocity: None,
            })
            .collect();
        c
    }

    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or(0.0)
    }

    pub fn period(&self) -> f64 {
        self.period.unwrap_or(0.0)
    }

    pub fn road_length(&self) -> f64 {
        self.rsu_count as f64 * self.segment_length
    }

    /// Spreads VMUs evenly around the road with slightly different speeds
    /// (about one segment every ten time units) so their features differ.
    pub fn fill_defaults(&mut self) {
        let m = self.vmus.len().max(1) as f64;
        let length = self.road_length();
        let seg = self.segment_length;
        for (i, v) in self.vmus.iter_mut().enumerate() {
            v.position.get_or_insert(length * i as f64 / m);
            v.velocity.get_or_insert(seg * 0.1 * (1.0 + 0.05 * i as f64));
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let theta = self.theta.ok_or_else(|| invalid("theta", "is required"))?;
        let period = self.period.ok_or_else(|| invalid("period", "is required"))?;
        non_negative(theta, "theta")?;
        positive(period, "period")?;
        check(self.rsu_count >= 1, "rsu_count", "at least one RSU is required")?;
        positive(self.segment_length, "segment_length")?;
        non_negative(self.beta, "beta")?;
        non_negative(self.h_store, "h_store")?;
        non_negative(self.r_penalty, "r_penalty")?;
        positive(self.broadcast_interval, "broadcast_interval")?;
        positive(self.shuffle_interval, "shuffle_interval")?;

        let e = &self.entropy;
        non_negative(e.h_max, "entropy.h_max")?;
        non_negative(e.h_0, "entropy.h_0")?;
        non_negative(e.h_min, "entropy.h_min")?;
        non_negative(e.alpha, "entropy.alpha")?;

        let p = &self.protocol;
        positive(p.delta_sync, "protocol.delta_sync")?;
        non_negative(p.change_slot, "protocol.change_slot")?;
        check(p.vmu_set_size >= 1, "protocol.vmu_set_size", "must be >= 1")?;
        check(p.vt_set_size >= 1, "protocol.vt_set_size", "must be >= 1")?;
        positive(p.vt_cadence_ratio, "protocol.vt_cadence_ratio")?;
        non_negative(p.hot_spot_radius, "protocol.hot_spot_radius")?;

        self.ga.validate().map_err(|err| invalid("ga", err.to_string()))?;

        let mut names = BTreeSet::new();
        for (i, a) in self.attackers.iter().enumerate() {
            let path = format!("attackers[{i}].name");
            check(!a.name.is_empty(), &path, "must not be empty")?;
            check(names.insert(a.name.as_str()), &path, "duplicate attacker name")?;
        }

        check(!self.vmus.is_empty(), "vmus", "at least one VMU is required")?;
        let length = self.road_length();
        for (i, v) in self.vmus.iter().enumerate() {
            non_negative(v.frequency, &format!("vmus[{i}].frequency"))?;
            let p_max = match v.p {
                Some(p) => {
                    check(p > 0.0 && p <= 1.0, &format!("vmus[{i}].p"), "must lie in (0, 1]")?;
                    p
                }
                None => 0.5,
            };
            EntropyParams::new(e.h_max, e.h_0, e.h_min, e.alpha, p_max)
                .map_err(|err| invalid(format!("vmus[{i}].p"), format!("entropy parameters rejected: {err}")))?;
            if let Some(x) = v.position {
                check(
                    x.is_finite() && (0.0..length).contains(&x),
                    &format!("vmus[{i}].position"),
                    "must lie on the road [0, rsu_count * segment_length)",
                )?;
            }
            if let Some(s) = v.velocity {
                non_negative(s, &format!("vmus[{i}].velocity"))?;
            }
        }

        for (i, r) in self.revocations.iter().enumerate() {
            non_negative(r.time, &format!("revocations[{i}].time"))?;
            check(
                r.reporter < self.vmus.len(),
                &format!("revocations[{i}].reporter"),
                "no such VMU",
            )?;
            check(
                r.accused < self.vmus.len(),
                &format!("revocations[{i}].accused"),
                "no such VMU",
            )?;
            check(
                r.reporter != r.accused,
                &format!("revocations[{i}].accused"),
                "a VT cannot accuse itself",
            )?;
        }
        Ok(())
    }

    /// Serializes the config with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

/// Parses, fills defaults and validates a scenario. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut config: ScenarioConfig = toml::from_str(text).map_err(|err| {
        let (line, column) = err.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse {
            line,
            column,
            message: err.message().to_string(),
        }
    })?;
    config.validate()?;
    config.fill_defaults();
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|err| ConfigError::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "theta = 10\nperiod = 60\n[[vmus]]\nfrequency = 1.0\n";

    #[test]
    fn defaults_are_filled() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.rsu_count, 6);
        assert_eq!(c.beta, 1.0);
        assert_eq!(c.entropy, EntropyConfig::default());
        assert_eq!(c.vmus[0].position, Some(0.0));
        assert_eq!(c.attackers.len(), 2);
    }

    #[test]
    fn missing_theta_names_the_field() {
        let err = parse_config("period = 60\n[[vmus]]\nfrequency = 1.0\n").unwrap_err();
        assert!(
            matches!(err, ConfigError::Validation { ref path, .. } if path == "theta"),
            "{err}"
        );
    }

    #[test]
    fn negative_frequency_rejected() {
        let err = parse_config("theta = 10\nperiod = 60\n[[vmus]]\nfrequency = -1.0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { ref path, .. } if path == "vmus[0].frequency"));
    }

    #[test]
    fn unknown_key_reports_location() {
        let err = parse_config("theta = 10\nperiod = 60\nthetta = 3\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
        assert!(parse_config("theta = 10\nperiod = 60\n[protocol]\nslot = 1\n").is_err());
    }

    #[test]
    fn zero_vmus_rejected() {
        let err = parse_config("theta = 10\nperiod = 60\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { ref path, .. } if path == "vmus"));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.vmus[0].p = Some(0.3);
        c.revocations.push(RevocationSpec {
            time: 5.0,
            reporter: 0,
            accused: 0,
        });
        c.revocations.clear();
        let again = parse_config(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }
}
