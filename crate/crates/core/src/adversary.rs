//! Linkage-mapping adversary.
//!
//! The attacker watches safety messages on the physical layer and VT
//! activity on the virtual layer, links co-temporal pseudonyms that share
//! features, and tries to stay locked on a target across pseudonym-change
//! boundaries. A boundary where an observed layer keeps its pseudonym is
//! always bridged. Otherwise the target is picked out of its co-changing
//! group uniformly at random.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{EntityKind, IntraTwinMessage, PairId, PseudonymId, PseudonymSystem, RsuId};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Physical,
    Virtual,
}

impl Layer {
    pub fn carries(self) -> EntityKind {
        match self {
            Layer::Physical => EntityKind::Vmu,
            Layer::Virtual => EntityKind::Vt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub layer: Layer,
    pub pseudonym: PseudonymId,
    pub region: RsuId,
    pub velocity: f64,
    pub heading: u8,
}

/// Which layers and regions the attacker can see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Observability {
    pub physical: bool,
    #[serde(rename = "virtual")]
    pub virtual_layer: bool,
    /// Visible regions; `None` is a passive-global attacker.
    pub regions: Option<BTreeSet<u32>>,
}

impl Default for Observability {
    fn default() -> Self {
        Self::full()
    }
}

impl Observability {
    pub fn full() -> Self {
        Self {
            physical: true,
            virtual_layer: true,
            regions: None,
        }
    }

    pub fn physical_only() -> Self {
        Self {
            virtual_layer: false,
            ..Self::full()
        }
    }

    pub fn sees(&self, layer: Layer, region: RsuId) -> bool {
        let layer_on = match layer {
            Layer::Physical => self.physical,
            Layer::Virtual => self.virtual_layer,
        };
        layer_on && self.regions.as_ref().is_none_or(|r| r.contains(&region.0))
    }
}

/// Velocity tolerance for treating two observations as the same object.
pub const FEATURE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackerBelief {
    /// Current (VMU, VT) pseudonyms of the tracked target.
    pub current: Option<(PseudonymId, PseudonymId)>,
    pub links: BTreeSet<(PseudonymId, PseudonymId)>,
    /// Group size faced at each boundary so far.
    pub boundary_candidates: Vec<usize>,
    recent: Vec<Observation>,
}

impl AttackerBelief {
    pub fn locked_on(vmu: PseudonymId, vt: PseudonymId) -> Self {
        Self {
            current: Some((vmu, vt)),
            ..Self::default()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.current.is_some()
    }

    fn extends_track(&self, obs: &Observation) -> bool {
        match (self.current, obs.layer) {
            (Some((v, _)), Layer::Physical) => v == obs.pseudonym,
            (Some((_, t)), Layer::Virtual) => t == obs.pseudonym,
            (None, _) => false,
        }
    }
}

fn features_match(a: &Observation, b: &Observation) -> bool {
    a.time == b.time
        && a.region == b.region
        && a.heading == b.heading
        && (a.velocity - b.velocity).abs() <= FEATURE_TOLERANCE
}

/// Folds one observation into the belief. Observations on a hidden layer or
/// region are ignored. When the observation continues the target's track,
/// every co-temporal, feature-matching observation on the other layer is
/// linked to it.
pub fn observe(mut belief: AttackerBelief, obs: Observation, observability: &Observability) -> AttackerBelief {
    if !observability.sees(obs.layer, obs.region) {
        return belief;
    }
    if belief.recent.first().is_some_and(|r| r.time != obs.time) {
        belief.recent.clear();
    }
    let ours = belief.extends_track(&obs);
    for other in belief.recent.iter().filter(|o| o.layer != obs.layer) {
        if !features_match(&obs, other) {
            continue;
        }
        if ours || belief.extends_track(other) {
            let link = match obs.layer {
                Layer::Physical => (obs.pseudonym, other.pseudonym),
                Layer::Virtual => (other.pseudonym, obs.pseudonym),
            };
            belief.links.insert(link);
        }
    }
    belief.recent.push(obs);
    belief
}

/// A pseudonym-change boundary of one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    pub time: f64,
    pub vmu_changed: bool,
    pub vt_changed: bool,
    /// Co-changing members including the target (1 for a lone change).
    pub group_size: usize,
    pub synchronous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// An observed, unchanged layer carried the track across.
    Linked,
    /// Picked the target out of its group.
    Guessed,
    Lost,
}

impl Outcome {
    pub fn reidentified(self) -> bool {
        self != Outcome::Lost
    }
}

/// Re-identification decision given a uniform draw `u` in [0,1).
///
/// Coupling every observability setting to the same `u` makes the outcome
/// monotone in what the attacker sees.
pub fn reidentify_with(event: &BoundaryEvent, observed: &[Layer], u: f64) -> Outcome {
    if observed.is_empty() {
        return Outcome::Lost;
    }
    let bridged = observed.iter().any(|l| match l {
        Layer::Physical => !event.vmu_changed,
        Layer::Virtual => !event.vt_changed,
    });
    if bridged {
        return Outcome::Linked;
    }
    if u * (event.group_size.max(1) as f64) < 1.0 {
        Outcome::Guessed
    } else {
        Outcome::Lost
    }
}

/// Seeded re-identification of one boundary.
pub fn boundary_reidentify(event: &BoundaryEvent, observed: &[Layer], rng_seed: u64) -> Outcome {
    let u: f64 = seed::rng(rng_seed, &[]).gen();
    reidentify_with(event, observed, u)
}

/// New pseudonyms taken on at a change (absent for an unchanged layer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceChange {
    pub time: f64,
    pub pair: usize,
    pub region: RsuId,
    pub vmu: Option<PseudonymId>,
    pub vt: Option<PseudonymId>,
    pub group_size: usize,
    pub synchronous: bool,
}

/// Everything a replay needs: initial identities, broadcasts and changes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub horizon: f64,
    pub initial: Vec<(PseudonymId, PseudonymId)>,
    pub observations: Vec<Observation>,
    pub changes: Vec<TraceChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackerConfig {
    pub name: String,
    pub observability: Observability,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            name: "global".into(),
            observability: Observability::full(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOutcome {
    pub time: f64,
    pub group_size: usize,
    pub vmu_changed: bool,
    pub vt_changed: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub target: usize,
    pub horizon: f64,
    pub intervals: Vec<(f64, f64)>,
    pub tracked_fraction: f64,
    pub boundaries: Vec<BoundaryOutcome>,
    pub links: usize,
}

/// Boundaries of one target: simultaneous layer changes merge into one.
fn boundaries_of(
    trace: &Trace,
    target: usize,
) -> Vec<(BoundaryEvent, RsuId, Option<PseudonymId>, Option<PseudonymId>)> {
    let mut out: Vec<(BoundaryEvent, RsuId, Option<PseudonymId>, Option<PseudonymId>)> = Vec::new();
    for c in trace.changes.iter().filter(|c| c.pair == target) {
        if let Some(last) = out.last_mut() {
            if last.0.time == c.time {
                last.0.vmu_changed |= c.vmu.is_some();
                last.0.vt_changed |= c.vt.is_some();
                last.0.group_size = last.0.group_size.max(c.group_size);
                last.2 = c.vmu.or(last.2);
                last.3 = c.vt.or(last.3);
                continue;
            }
        }
        out.push((
            BoundaryEvent {
                time: c.time,
                vmu_changed: c.vmu.is_some(),
                vt_changed: c.vt.is_some(),
                group_size: c.group_size,
                synchronous: c.synchronous,
            },
            c.region,
            c.vmu,
            c.vt,
        ));
    }
    out
}

/// Replays the trace against one target. The attacker starts locked on the
/// target's initial identities and keeps the lock until the first boundary
/// it fails to bridge; a lost target is never reacquired.
pub fn tracking_fraction(trace: &Trace, target: usize, config: &AttackerConfig, attacker_seed: u64) -> TrackRecord {
    let horizon = trace.horizon;
    let obs = &config.observability;
    let (v0, t0) = trace.initial[target];
    let mut belief = AttackerBelief::locked_on(v0, t0);
    let mut records = Vec::new();
    let mut lost_at = if obs.physical || obs.virtual_layer {
        None
    } else {
        Some(0.0)
    };

    let mut observations = trace.observations.iter().peekable();
    for (j, (event, region, new_vmu, new_vt)) in boundaries_of(trace, target).into_iter().enumerate() {
        if event.time >= horizon {
            break;
        }
        while let Some(o) = observations.next_if(|o| o.time < event.time) {
            belief = observe(belief, *o, obs);
        }
        if lost_at.is_some() {
            break;
        }
        let observed: Vec<Layer> = [Layer::Physical, Layer::Virtual]
            .into_iter()
            .filter(|&l| obs.sees(l, region))
            .collect();
        let u: f64 = seed::rng(attacker_seed, &[seed::stream::ATTACKER, target as u64, j as u64]).gen();
        let outcome = reidentify_with(&event, &observed, u);
        belief.boundary_candidates.push(event.group_size);
        records.push(BoundaryOutcome {
            time: event.time,
            group_size: event.group_size,
            vmu_changed: event.vmu_changed,
            vt_changed: event.vt_changed,
            outcome,
        });
        if outcome.reidentified() {
            let (v, t) = belief.current.expect("tracking");
            belief.current = Some((new_vmu.unwrap_or(v), new_vt.unwrap_or(t)));
        } else {
            belief.current = None;
            lost_at = Some(event.time);
        }
    }
    if lost_at.is_none() {
        for o in observations.take_while(|o| o.time < horizon) {
            belief = observe(belief, *o, obs);
        }
    }
    let end = lost_at.unwrap_or(horizon).min(horizon);
    let intervals = if end > 0.0 { vec![(0.0, end)] } else { Vec::new() };
    let tracked: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    TrackRecord {
        target,
        horizon,
        intervals,
        tracked_fraction: if horizon > 0.0 {
            (tracked / horizon).clamp(0.0, 1.0)
        } else {
            0.0
        },
        boundaries: records,
        links: belief.links.len(),
    }
}

/// Asynchronous single-pair trace with VT changes every `t2` and VMU changes
/// every `ratio * t2`. VT changes are offset by half a period so the VMU and
/// VT pseudonym lifetimes interleave; broadcasts come every `t2 / 2`.
pub fn async_linkage_trace(t2: f64, ratio: f64, vmu_changes: usize, vt_changes: usize, horizon: f64) -> Trace {
    let pid = |layer: u128, k: u128| PseudonymId((layer << 64) | k);
    let t1 = ratio * t2;
    let mut changes: Vec<TraceChange> = Vec::new();
    for k in 1..=vmu_changes {
        changes.push(TraceChange {
            time: k as f64 * t1,
            pair: 0,
            region: RsuId(0),
            vmu: Some(pid(1, k as u128)),
            vt: None,
            group_size: 1,
            synchronous: false,
        });
    }
    for k in 1..=vt_changes {
        changes.push(TraceChange {
            time: (k as f64 - 0.5) * t2,
            pair: 0,
            region: RsuId(0),
            vmu: None,
            vt: Some(pid(2, k as u128)),
            group_size: 1,
            synchronous: false,
        });
    }
    changes.sort_by(|a, b| a.time.total_cmp(&b.time));

    let mut observations = Vec::new();
    let step = t2 / 2.0;
    let mut n = 0u32;
    loop {
        let time = n as f64 * step;
        if time >= horizon {
            break;
        }
        let vmu_k = changes.iter().filter(|c| c.vmu.is_some() && c.time <= time).count();
        let vt_k = changes.iter().filter(|c| c.vt.is_some() && c.time <= time).count();
        for (layer, id) in [
            (Layer::Physical, pid(1, vmu_k as u128)),
            (Layer::Virtual, pid(2, vt_k as u128)),
        ] {
            observations.push(Observation {
                time,
                layer,
                pseudonym: id,
                region: RsuId(0),
                velocity: 1.0,
                heading: 0,
            });
        }
        n += 1;
    }
    Trace {
        horizon,
        initial: vec![(pid(1, 0), pid(2, 0))],
        observations,
        changes,
    }
}

/// VMU pseudonym -> linked VT pseudonyms, as established by a full replay.
pub fn link_table(
    trace: &Trace,
    target: usize,
    observability: &Observability,
) -> BTreeMap<PseudonymId, BTreeSet<PseudonymId>> {
    let config = AttackerConfig {
        name: String::new(),
        observability: observability.clone(),
    };
    let mut belief = {
        let (v, t) = trace.initial[target];
        AttackerBelief::locked_on(v, t)
    };
    // Replay with a lock that always survives, to expose every link.
    let mut changes = trace.changes.iter().filter(|c| c.pair == target).peekable();
    for o in &trace.observations {
        while let Some(c) = changes.next_if(|c| c.time <= o.time) {
            let (v, t) = belief.current.expect("tracking");
            belief.current = Some((c.vmu.unwrap_or(v), c.vt.unwrap_or(t)));
        }
        belief = observe(belief, *o, &config.observability);
    }
    let mut table: BTreeMap<PseudonymId, BTreeSet<PseudonymId>> = BTreeMap::new();
    for (v, t) in belief.links {
        table.entry(v).or_default().insert(t);
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misbehavior {
    /// Forged sensing data pushed to a VT without the session token.
    DataInjection,
    /// A VT interacting with others while blacklisted.
    Impersonation,
}

/// Tries a V2T injection against `pair`; true if the protocol let it through.
pub fn attempt_injection(system: &PseudonymSystem, pair: PairId) -> bool {
    let msg = IntraTwinMessage {
        token: None,
        payload: b"forged".to_vec(),
    };
    system.deliver_to_twin(pair, &msg).is_ok()
}

/// Tries a T2T interaction from `rogue` to `victim`; true if it was accepted.
pub fn attempt_impersonation(
    system: &PseudonymSystem,
    rogue: crate::protocol::EntityId,
    victim: crate::protocol::EntityId,
) -> bool {
    system.vt_interact(rogue, victim).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(time: f64, layer: Layer, id: u128, region: u32, velocity: f64) -> Observation {
        Observation {
            time,
            layer,
            pseudonym: PseudonymId(id),
            region: RsuId(region),
            velocity,
            heading: 0,
        }
    }

    #[test]
    fn physical_only_never_links() {
        let trace = async_linkage_trace(1.0, 4.0, 2, 8, 9.0);
        let table = link_table(&trace, 0, &Observability::physical_only());
        assert!(table.is_empty());
    }

    #[test]
    fn fig3_linkage() {
        let trace = async_linkage_trace(1.0, 4.0, 2, 8, 9.0);
        let table = link_table(&trace, 0, &Observability::full());
        let first_vmu = trace.initial[0].0;
        let linked: Vec<u128> = table[&first_vmu].iter().map(|p| p.0 & 0xffff).collect();
        assert_eq!(linked, vec![0, 1, 2, 3, 4]);
        let rec = tracking_fraction(&trace, 0, &AttackerConfig::default(), 1);
        assert_eq!(rec.tracked_fraction, 1.0);
        assert_eq!(rec.boundaries.len(), 10);
        assert!(rec.boundaries.iter().all(|b| b.outcome == Outcome::Linked));
    }

    #[test]
    fn disjoint_regions_do_not_link() {
        let mut b = AttackerBelief::locked_on(PseudonymId(1), PseudonymId(2));
        let all = Observability::full();
        b = observe(b, obs(0.0, Layer::Physical, 1, 0, 1.0), &all);
        b = observe(b, obs(0.0, Layer::Virtual, 9, 1, 1.0), &all);
        b = observe(b, obs(0.0, Layer::Virtual, 8, 0, 2.0), &all);
        assert!(b.links.is_empty());
        b = observe(b, obs(0.0, Layer::Virtual, 2, 0, 1.0), &all);
        assert_eq!(b.links.len(), 1);
    }

    #[test]
    fn boundary_rules() {
        let lone = BoundaryEvent {
            time: 1.0,
            vmu_changed: true,
            vt_changed: false,
            group_size: 1,
            synchronous: false,
        };
        let both = [Layer::Physical, Layer::Virtual];
        assert_eq!(boundary_reidentify(&lone, &both, 3), Outcome::Linked);
        let sync1 = BoundaryEvent {
            vt_changed: true,
            synchronous: true,
            ..lone
        };
        for s in 0..100 {
            assert_eq!(boundary_reidentify(&sync1, &both, s), Outcome::Guessed);
        }
        let sync4 = BoundaryEvent { group_size: 4, ..sync1 };
        let n = 100_000;
        let hits = (0..n)
            .filter(|&s| boundary_reidentify(&sync4, &both, s).reidentified())
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.25).abs() < 0.01, "{rate}");
        assert_eq!(reidentify_with(&sync4, &[], 0.0), Outcome::Lost);
    }

    #[test]
    fn hot_spot_change_drops_physical_attacker() {
        let mut trace = async_linkage_trace(1.0, 4.0, 0, 0, 10.0);
        trace.changes.push(TraceChange {
            time: 5.0,
            pair: 0,
            region: RsuId(0),
            vmu: Some(PseudonymId(77)),
            vt: None,
            group_size: 1_000_000,
            synchronous: false,
        });
        let phys = AttackerConfig {
            name: "p".into(),
            observability: Observability::physical_only(),
        };
        let rec = tracking_fraction(&trace, 0, &phys, 5);
        assert_eq!(rec.tracked_fraction, 0.5);
        let full = tracking_fraction(&trace, 0, &AttackerConfig::default(), 5);
        assert_eq!(full.tracked_fraction, 1.0);
    }

    #[test]
    fn blind_attacker_tracks_nothing() {
        let trace = async_linkage_trace(1.0, 4.0, 2, 8, 9.0);
        let blind = AttackerConfig {
            name: "blind".into(),
            observability: Observability {
                physical: false,
                virtual_layer: false,
                regions: None,
            },
        };
        assert_eq!(tracking_fraction(&trace, 0, &blind, 0).tracked_fraction, 0.0);
    }
}
