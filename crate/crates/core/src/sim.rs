//! Discrete-event scenario engine and the two comparative experiments.
//!
//! Events at equal timestamps run in this order: crossing, restock,
//! revocation, change execution, change request, VT cadence change,
//! broadcast, shuffle; then by entity id, then by insertion order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    attempt_impersonation, attempt_injection, tracking_fraction, Layer, Observation, Trace, TraceChange,
};
use crate::allocator::{
    equal_allocation, optimize_exact, optimize_ga, realized_utility, AllocError, AllocationPlan, AllocationProblem,
    GaConfig, UtilityParams, VmuDemand,
};
use crate::config::{ChangeMode, ConfigError, DemandMode, ScenarioConfig, Scheme, Solver};
use crate::demand::{DemandError, DemandModel};
use crate::entropy::{EntropyError, EntropyParams};
use crate::ledger::{Chain, DigestEntry, LedgerError, HASH_ALGORITHM};
use crate::protocol::{
    BlacklistDecision, CaLogRecord, EntityId, EntityKind, Evidence, IntraTwinMessage, InvariantViolation, PairId,
    ProtocolError, PseudonymSystem, RsuId, StatusCounts,
};
use crate::seed::{self, stream, RNG_ALGORITHM};

pub const TOOL_NAME: &str = "vtwin-privacy";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("allocation: {0}")]
    Alloc(#[from] AllocError),
    #[error("entropy: {0}")]
    Entropy(#[from] EntropyError),
    #[error("demand: {0}")]
    Demand(#[from] DemandError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("invariant violated: {0}")]
    Invariant(#[from] InvariantViolation),
    #[error("inconsistent run: {0}")]
    Consistency(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Crossing,
    Restock,
    Revocation,
    ChangeExecution,
    ChangeRequest,
    VtCadence,
    Broadcast,
    Shuffle,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: Kind,
    entity: u32,
    seq: u64,
    payload: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so that BinaryHeap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.cmp(&self.kind))
            .then(other.entity.cmp(&self.entity))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Event>,
    seq: u64,
    non_crossing: usize,
}

impl Queue {
    fn push(&mut self, time: f64, kind: Kind, entity: u32, payload: u64) {
        self.seq += 1;
        if kind != Kind::Crossing {
            self.non_crossing += 1;
        }
        self.heap.push(Event {
            time,
            kind,
            entity,
            seq: self.seq,
            payload,
        });
    }

    fn pop(&mut self) -> Option<Event> {
        let e = self.heap.pop()?;
        if e.kind != Kind::Crossing {
            self.non_crossing -= 1;
        }
        Some(e)
    }
}

/// Constant-velocity motion on a ring road.
#[derive(Debug, Clone, Copy)]
struct Mover {
    x0: f64,
    v: f64,
    n0: i64,
}

impl Mover {
    fn position(&self, t: f64, length: f64) -> f64 {
        (self.x0 + self.v * t).rem_euclid(length)
    }

    fn crossing_time(&self, k: u64, seg: f64) -> f64 {
        (seg * (self.n0 + k as i64) as f64 - self.x0) / self.v
    }

    fn region_after(&self, k: u64, n: u32) -> u32 {
        (self.n0 + k as i64).rem_euclid(n as i64) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub tool: String,
    pub version: String,
    pub rng_algorithm: String,
    pub hash_algorithm: String,
    pub master_seed: u64,
    pub mode: ChangeMode,
    pub scheme: Scheme,
    pub solver: Solver,
    pub demand_mode: DemandMode,
    pub ga: GaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmuRow {
    pub index: usize,
    pub frequency: f64,
    pub p: f64,
    pub avg_entropy: f64,
    pub demand: u64,
    pub allocation: u64,
    pub served: u64,
    pub shortage: u64,
    pub leftover: u64,
    pub realized_utility: f64,
    pub expected_utility: f64,
}

impl VmuRow {
    pub fn utility(&self, mode: DemandMode) -> f64 {
        match mode {
            DemandMode::Realized => self.realized_utility,
            DemandMode::Expected => self.expected_utility,
        }
    }
}

/// Per-scheme utilities on the run's demand draws. Only the configured
/// scheme is driven through the event loop; the other is evaluated from
/// the same demands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub simulated: bool,
    pub allocation: Vec<u64>,
    pub realized: Vec<f64>,
    pub expected: Vec<f64>,
    pub mean_realized: f64,
    pub mean_expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerSummary {
    pub name: String,
    pub tracked_fraction: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub blocks: usize,
    pub head: String,
    pub digests: Vec<DigestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevocationOutcome {
    pub time: f64,
    pub reporter: usize,
    pub accused: usize,
    pub result: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub audits: u64,
    pub one_active_checks: u64,
    pub minted: u64,
    pub final_counts: StatusCounts,
    pub synchrony_holds: bool,
    pub migration_mismatches: u64,
    pub served_matches_min: bool,
    pub sensing_rejected: u64,
    pub revoked_auth_accepted: u64,
    pub blocked_changes: u64,
    pub vt_shortage: u64,
    pub group_sizes: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub header: ReportHeader,
    pub config: ScenarioConfig,
    pub budget: u64,
    pub vmus: Vec<VmuRow>,
    pub schemes: Vec<SchemeSummary>,
    pub tracking: Vec<AttackerSummary>,
    pub revocations: Vec<RevocationOutcome>,
    /// Per-VMU entropy breakpoints `(time, bits)`.
    pub timelines: Vec<Vec<(f64, f64)>>,
    pub ledger: LedgerSummary,
    pub ca_log: Vec<CaLogRecord>,
    pub invariants: InvariantReport,
}

impl SimReport {
    pub fn scheme(&self, scheme: Scheme) -> &SchemeSummary {
        self.schemes
            .iter()
            .find(|s| s.scheme == scheme)
            .expect("both schemes reported")
    }
}

/// Everything a run produces, including the state behind the report.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: SimReport,
    pub chain: Chain,
    pub trace: Trace,
    pub system: PseudonymSystem,
}

/// Tracking probabilities: configured values, or U(0, 0.5] per seed.
pub fn resolve_p(config: &ScenarioConfig) -> Vec<f64> {
    config
        .vmus
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.p.unwrap_or_else(|| {
                let u: f64 = seed::rng(config.seed, &[stream::ENTROPY_P, i as u64]).gen();
                0.5 * (1.0 - u)
            })
        })
        .collect()
}

/// The allocation problem a scenario poses, with each VMU's entropy curve.
pub fn allocation_problem(
    config: &ScenarioConfig,
    ps: &[f64],
) -> Result<(AllocationProblem, Vec<EntropyParams>), SimError> {
    let e = &config.entropy;
    let mut vmus = Vec::with_capacity(config.vmus.len());
    let mut curves = Vec::with_capacity(config.vmus.len());
    for (spec, &p) in config.vmus.iter().zip(ps) {
        let params = EntropyParams::new(e.h_max, e.h_0, e.h_min, e.alpha, p)?;
        let avg = if spec.frequency > 0.0 {
            params.average_entropy(1.0 / spec.frequency)?
        } else if params.alpha() == 0.0 {
            params.reset_level()
        } else {
            params.h_min()
        };
        vmus.push(VmuDemand {
            model: DemandModel::new(spec.frequency, config.period())?,
            params: UtilityParams::new(config.beta, config.h_store, config.r_penalty, avg)?,
        });
        curves.push(params);
    }
    let budget = AllocationProblem::budget_from_rate(config.theta(), config.period());
    Ok((AllocationProblem::new(vmus, budget)?, curves))
}

pub fn plan_for(
    problem: &AllocationProblem,
    config: &ScenarioConfig,
    scheme: Scheme,
) -> Result<AllocationPlan, SimError> {
    Ok(match (scheme, config.solver) {
        (Scheme::Equal, _) => equal_allocation(problem),
        (Scheme::OnDemand, Solver::Exact) => optimize_exact(problem),
        (Scheme::OnDemand, Solver::Ga) => optimize_ga(problem, &config.ga, seed::derive(config.seed, &[stream::GA]))?,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn run(config: &ScenarioConfig) -> Result<SimReport, SimError> {
    Ok(simulate(config)?.report)
}

struct Counters {
    served: Vec<u64>,
    blocked: u64,
    vt_shortage: u64,
    one_active_checks: u64,
    audits: u64,
    migration_mismatches: u64,
    sensing_rejected: u64,
    revoked_auth_accepted: u64,
    group_sizes: BTreeMap<usize, u64>,
}

struct Engine {
    cfg: ScenarioConfig,
    sys: PseudonymSystem,
    chain: Chain,
    trace: Trace,
    movers: Vec<Mover>,
    revoked: Vec<bool>,
    queue: Queue,
    counters: Counters,
    shuffle_index: u64,
    credited: u64,
    restock_cursor: u32,
    revocation_log: Vec<RevocationOutcome>,
    /// Change-execution instants already queued.
    slots: BTreeSet<u64>,
}

impl Engine {
    fn length(&self) -> f64 {
        self.cfg.road_length()
    }

    fn check_active(&mut self, pair: PairId) -> Result<(), SimError> {
        let p = self.sys.pair(pair);
        let (vmu, vt) = (p.vmu, p.vt);
        self.sys.check_one_active(vmu)?;
        self.sys.check_one_active(vt)?;
        self.counters.one_active_checks += 2;
        Ok(())
    }

    fn active_of(&self, id: EntityId) -> Option<crate::protocol::PseudonymId> {
        self.sys.entity(id).ok().and_then(|e| e.active)
    }

    fn update_positions(&mut self, t: f64) {
        let length = self.length();
        let seg = self.cfg.segment_length;
        for (i, m) in self.movers.clone().iter().enumerate() {
            let x = m.position(t, length);
            self.sys.set_position(PairId(i), x);
            let boundary_gap = {
                let r = x / seg;
                (r - r.round()).abs() * seg
            };
            if boundary_gap > 1e-9 * length.max(1.0) {
                let expected = ((x / seg).floor() as u32).min(self.cfg.rsu_count - 1);
                let pair = self.sys.pair(PairId(i));
                let (vmu, vt) = (pair.vmu, pair.vt);
                let r_vmu = self.sys.entity(vmu).map(|e| e.region.0).unwrap_or(u32::MAX);
                let r_vt = self.sys.entity(vt).map(|e| e.region.0).unwrap_or(u32::MAX);
                if r_vmu != expected || r_vt != expected {
                    self.counters.migration_mismatches += 1;
                }
            }
        }
    }

    fn record_change(&mut self, time: f64, pair: PairId, vmu: bool, vt: bool, group_size: usize, synchronous: bool) {
        let p = self.sys.pair(pair);
        let (vmu_id, vt_id) = (p.vmu, p.vt);
        let region = self.sys.entity(vt_id).map(|e| e.region).unwrap_or(RsuId(0));
        self.trace.changes.push(TraceChange {
            time,
            pair: pair.0,
            region,
            vmu: if vmu { self.active_of(vmu_id) } else { None },
            vt: if vt { self.active_of(vt_id) } else { None },
            group_size,
            synchronous,
        });
    }

    fn crossing(&mut self, pair: usize, k: u64, t: f64) -> Result<(), SimError> {
        let m = self.movers[pair];
        let to = RsuId(m.region_after(k, self.cfg.rsu_count));
        let x = m.position(t, self.length());
        self.sys.migrate(PairId(pair), to, x)?;
        if self.queue.non_crossing > 0 {
            let next = m.crossing_time(k + 1, self.cfg.segment_length);
            self.queue.push(next, Kind::Crossing, pair as u32, k + 1);
        }
        Ok(())
    }

    fn restock(&mut self, t: f64) -> Result<(), SimError> {
        let target = (self.cfg.theta() * t).floor() as u64;
        let add = target.saturating_sub(self.credited);
        self.credited = target.max(self.credited);
        let n = self.cfg.rsu_count;
        let mut per_rsu = vec![0usize; n as usize];
        for j in 0..add {
            per_rsu[((self.restock_cursor as u64 + j) % n as u64) as usize] += 1;
        }
        self.restock_cursor = ((self.restock_cursor as u64 + add) % n as u64) as u32;
        for (r, count) in per_rsu.into_iter().enumerate() {
            if count > 0 {
                self.sys.mint(RsuId(r as u32), EntityKind::Vt, count)?;
            }
        }
        Ok(())
    }

    fn revocation(&mut self, idx: usize, t: f64) -> Result<(), SimError> {
        let spec = self.cfg.revocations[idx].clone();
        let reporter = self.sys.pair(PairId(spec.reporter)).vt;
        let accused = self.sys.pair(PairId(spec.accused)).vt;
        let result = match self.active_of(accused) {
            Some(pid) => match self.sys.report_malicious(
                reporter,
                Evidence {
                    accused: pid,
                    timestamp: t,
                },
                t,
            ) {
                Ok(BlacklistDecision::Revoked(_)) => {
                    self.revoked[spec.accused] = true;
                    "revoked".to_string()
                }
                Ok(BlacklistDecision::AlreadyRevoked(_)) => "already_revoked".to_string(),
                Err(e) => format!("rejected: {e}"),
            },
            None => "rejected: accused has no active pseudonym".to_string(),
        };
        self.revocation_log.push(RevocationOutcome {
            time: t,
            reporter: spec.reporter,
            accused: spec.accused,
            result,
        });
        Ok(())
    }

    fn change_request(&mut self, pair: PairId, t: f64) -> Result<(), SimError> {
        let vmu = self.sys.pair(pair).vmu;
        match self.cfg.mode {
            ChangeMode::Sync => match self.sys.schedule_synchronous_change(pair, t) {
                Ok(s) => {
                    if self.slots.insert(s.t_star.to_bits()) {
                        self.queue.push(s.t_star, Kind::ChangeExecution, 0, 0);
                    }
                }
                Err(ProtocolError::NoUnusedPseudonym(id)) if id == vmu => {}
                Err(ProtocolError::RevokedCounterpart(_)) => self.counters.blocked += 1,
                Err(ProtocolError::PoolExhausted {
                    kind: EntityKind::Vt, ..
                }) => self.counters.vt_shortage += 1,
                Err(e) => return Err(e.into()),
            },
            ChangeMode::Async => match self.sys.execute_single_change(vmu, t) {
                Ok(_) => {
                    self.counters.served[pair.0] += 1;
                    *self.counters.group_sizes.entry(1).or_default() += 1;
                    self.record_change(t, pair, true, false, 1, false);
                    let _ = self.sys.mutual_authenticate(pair);
                    self.check_active(pair)?;
                }
                Err(ProtocolError::NoUnusedPseudonym(_)) => {}
                Err(e) => return Err(e.into()),
            },
        }
        Ok(())
    }

    fn vt_cadence(&mut self, pair: PairId, t: f64) -> Result<(), SimError> {
        let vt = self.sys.pair(pair).vt;
        match self.sys.execute_single_change(vt, t) {
            Ok(_) => {
                self.record_change(t, pair, false, true, 1, false);
                let _ = self.sys.mutual_authenticate(pair);
                self.check_active(pair)?;
            }
            Err(ProtocolError::RevokedCounterpart(_)) => self.counters.blocked += 1,
            Err(ProtocolError::PoolExhausted { .. }) => self.counters.vt_shortage += 1,
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn change_execution(&mut self, t: f64) -> Result<(), SimError> {
        self.update_positions(t);
        let mut groups: BTreeMap<u32, Vec<(PairId, EntityId)>> = BTreeMap::new();
        for i in 0..self.sys.pairs().len() {
            let pair = PairId(i);
            if self.sys.next_scheduled(pair).is_none_or(|s| s.t_star != t) {
                continue;
            }
            if self.revoked[i] {
                self.sys.cancel_next(pair);
                self.counters.blocked += 1;
                continue;
            }
            let vt = self.sys.pair(pair).vt;
            let region = self.sys.entity(vt)?.region.0;
            groups.entry(region).or_default().push((pair, vt));
        }
        for members in groups.into_values() {
            let vts: Vec<EntityId> = members.iter().map(|m| m.1).collect();
            let g = self.sys.group_change(&vts, EntityKind::Vt, t, true)?;
            *self.counters.group_sizes.entry(g.size).or_default() += 1;
            for &(pair, _) in &members {
                self.counters.served[pair.0] += 1;
                self.record_change(t, pair, true, true, g.size, true);
                self.sys.mutual_authenticate(pair)?;
                self.check_active(pair)?;
            }
        }
        Ok(())
    }

    fn broadcast(&mut self, t: f64) -> Result<(), SimError> {
        self.update_positions(t);
        for i in 0..self.sys.pairs().len() {
            let pair = PairId(i);
            let (vmu, vt) = (self.sys.pair(pair).vmu, self.sys.pair(pair).vt);
            let velocity = self.movers[i].v;
            for (layer, id) in [(Layer::Physical, vmu), (Layer::Virtual, vt)] {
                let e = self.sys.entity(id)?;
                if let Some(pid) = e.active {
                    self.trace.observations.push(Observation {
                        time: t,
                        layer,
                        pseudonym: pid,
                        region: e.region,
                        velocity,
                        heading: 0,
                    });
                }
            }
            if self.revoked[i] {
                if self.sys.mutual_authenticate(pair).is_ok() {
                    self.counters.revoked_auth_accepted += 1;
                }
                continue;
            }
            let msg = IntraTwinMessage {
                token: self.sys.pair(pair).session,
                payload: Vec::new(),
            };
            if self.sys.deliver_to_twin(pair, &msg).is_err() {
                self.counters.sensing_rejected += 1;
            }
        }
        Ok(())
    }

    /// Returns every used pseudonym to the RSU its holder is in, one shuffled
    /// batch per (RSU, pool), and recounts the whole system.
    fn shuffle(&mut self, t: f64) -> Result<(), SimError> {
        let k = self.shuffle_index;
        self.shuffle_index += 1;
        let mut buckets: BTreeMap<(u32, u8), Vec<crate::protocol::Pseudonym>> = BTreeMap::new();
        let ids: Vec<(EntityId, u32, EntityKind)> =
            self.sys.entities().iter().map(|e| (e.id, e.region.0, e.kind)).collect();
        for (id, region, kind) in ids {
            let used = self.sys.take_used(id)?;
            if !used.is_empty() {
                buckets.entry((region, kind as u8)).or_default().extend(used);
            }
        }
        for ((region, kind), mut used) in buckets {
            let kind = if kind == EntityKind::Vmu as u8 {
                EntityKind::Vmu
            } else {
                EntityKind::Vt
            };
            let s = seed::derive(self.cfg.seed, &[stream::SHUFFLE, k, region as u64, kind as u64]);
            let txn = self.sys.return_and_shuffle(RsuId(region), kind, &mut used, t, s)?;
            self.chain.append(txn)?;
        }
        self.sys.audit()?;
        self.counters.audits += 1;
        Ok(())
    }
}

/// Runs one scenario and keeps the chain, trace and final protocol state.
pub fn simulate(config: &ScenarioConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.fill_defaults();
    let period = cfg.period();
    let m = cfg.vmus.len();
    let n = cfg.rsu_count;
    let seg = cfg.segment_length;

    let ps = resolve_p(&cfg);
    let (problem, entropy) = allocation_problem(&cfg, &ps)?;
    let budget = problem.budget();
    let plans: BTreeMap<Scheme, AllocationPlan> = [Scheme::OnDemand, Scheme::Equal]
        .into_iter()
        .map(|s| plan_for(&problem, &cfg, s).map(|p| (s, p)))
        .collect::<Result<_, _>>()?;
    let plan = plans[&cfg.scheme].clone();

    let arrivals: Vec<Vec<f64>> = problem
        .vmus()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.model
                .arrival_times(&mut seed::rng(cfg.seed, &[stream::DEMAND, i as u64]))
        })
        .collect();

    let mut sys = PseudonymSystem::new(cfg.protocol.clone(), n, cfg.seed);
    let mut movers = Vec::with_capacity(m);
    for spec in &cfg.vmus {
        let x0 = spec.position.unwrap_or(0.0);
        let v = spec.velocity.unwrap_or(0.0);
        let n0 = (x0 / seg).floor() as i64;
        let region = RsuId(n0.rem_euclid(n as i64) as u32);
        sys.add_pair(region, x0, v);
        movers.push(Mover { x0, v, n0 });
    }

    // Period start: one identity pseudonym per entity, VT stock, then the
    // VMU budget minted at the allocating RSU and handed out per plan.
    for i in 0..m {
        let pair = sys.pair(PairId(i)).clone();
        for id in [pair.vmu, pair.vt] {
            let (region, kind) = {
                let e = sys.entity(id)?;
                (e.region, e.kind)
            };
            sys.mint(region, kind, 1)?;
            sys.request_pseudonym_set(id, 1, region, 0.0)?;
            sys.activate_next(id, 0.0)?;
        }
    }
    for r in 0..n {
        sys.mint(RsuId(r), EntityKind::Vt, cfg.vt_initial_stock)?;
    }
    sys.mint(RsuId(0), EntityKind::Vmu, budget as usize)?;
    for (i, &r) in plan.r.iter().enumerate() {
        if r > 0 {
            let vmu = sys.pair(PairId(i)).vmu;
            sys.request_pseudonym_set(vmu, r as usize, RsuId(0), 0.0)?;
        }
    }
    let mut initial = Vec::with_capacity(m);
    for i in 0..m {
        sys.mutual_authenticate(PairId(i))?;
        let p = sys.pair(PairId(i));
        let vmu = sys.entity(p.vmu)?.active.expect("activated");
        let vt = sys.entity(p.vt)?.active.expect("activated");
        initial.push((vmu, vt));
    }

    let mut engine = Engine {
        cfg: cfg.clone(),
        sys,
        chain: Chain::new(),
        trace: Trace {
            horizon: period,
            initial,
            observations: Vec::new(),
            changes: Vec::new(),
        },
        movers,
        revoked: vec![false; m],
        queue: Queue::default(),
        counters: Counters {
            served: vec![0; m],
            blocked: 0,
            vt_shortage: 0,
            one_active_checks: 0,
            audits: 0,
            migration_mismatches: 0,
            sensing_rejected: 0,
            revoked_auth_accepted: 0,
            group_sizes: BTreeMap::new(),
        },
        shuffle_index: 0,
        credited: 0,
        restock_cursor: 0,
        revocation_log: Vec::new(),
        slots: BTreeSet::new(),
    };

    let q = &mut engine.queue;
    for k in 1.. {
        let t = k as f64;
        if t >= period {
            break;
        }
        q.push(t, Kind::Restock, 0, 0);
    }
    for (idx, r) in cfg.revocations.iter().enumerate() {
        q.push(r.time, Kind::Revocation, idx as u32, idx as u64);
    }
    for (i, times) in arrivals.iter().enumerate() {
        for &t in times {
            q.push(t, Kind::ChangeRequest, i as u32, i as u64);
        }
    }
    if cfg.mode == ChangeMode::Async {
        for (i, spec) in cfg.vmus.iter().enumerate() {
            let rate = cfg.protocol.vt_cadence_ratio * spec.frequency;
            if rate <= 0.0 {
                continue;
            }
            for k in 1.. {
                let t = k as f64 / rate;
                if t >= period {
                    break;
                }
                q.push(t, Kind::VtCadence, i as u32, i as u64);
            }
        }
    }
    for k in 0.. {
        let t = k as f64 * cfg.broadcast_interval;
        if t >= period {
            break;
        }
        q.push(t, Kind::Broadcast, 0, 0);
    }
    for k in 1.. {
        let t = k as f64 * cfg.shuffle_interval;
        if t >= period {
            break;
        }
        q.push(t, Kind::Shuffle, 0, 0);
    }
    for (i, mv) in engine.movers.iter().enumerate() {
        if mv.v > 0.0 {
            q.push(mv.crossing_time(1, seg), Kind::Crossing, i as u32, 1);
        }
    }

    let mut now = 0.0f64;
    while let Some(ev) = engine.queue.pop() {
        if ev.kind == Kind::Crossing && engine.queue.non_crossing == 0 {
            break;
        }
        now = ev.time;
        match ev.kind {
            Kind::Crossing => engine.crossing(ev.entity as usize, ev.payload, ev.time)?,
            Kind::Restock => engine.restock(ev.time)?,
            Kind::Revocation => engine.revocation(ev.payload as usize, ev.time)?,
            Kind::ChangeExecution => engine.change_execution(ev.time)?,
            Kind::ChangeRequest => engine.change_request(PairId(ev.payload as usize), ev.time)?,
            Kind::VtCadence => engine.vt_cadence(PairId(ev.payload as usize), ev.time)?,
            Kind::Broadcast => engine.broadcast(ev.time)?,
            Kind::Shuffle => engine.shuffle(ev.time)?,
        }
    }
    engine.shuffle(now.max(period))?;
    let final_counts = engine.sys.audit()?;

    // Per-VMU outcomes.
    let curves = problem.curves();
    let mut rows = Vec::with_capacity(m);
    let mut served_matches_min = true;
    for i in 0..m {
        let demand = arrivals[i].len() as u64;
        let allocation = plan.r[i];
        let served = engine.counters.served[i];
        if served != allocation.min(demand) {
            served_matches_min = false;
        }
        let params = &problem.vmus()[i].params;
        let leftover = allocation.saturating_sub(served);
        let shortage = demand.saturating_sub(served);
        let realized = params.unit_profit() * served as f64
            - params.h_store * leftover as f64
            - params.r_penalty * shortage as f64;
        rows.push(VmuRow {
            index: i,
            frequency: cfg.vmus[i].frequency,
            p: ps[i],
            avg_entropy: params.avg_entropy,
            demand,
            allocation,
            served,
            shortage,
            leftover,
            realized_utility: realized,
            expected_utility: curves[i].value(allocation),
        });
    }
    let schemes = [Scheme::OnDemand, Scheme::Equal]
        .into_iter()
        .map(|s| {
            let alloc = plans[&s].r.clone();
            let simulated = s == cfg.scheme;
            let realized: Vec<f64> = if simulated {
                rows.iter().map(|r| r.realized_utility).collect()
            } else {
                alloc
                    .iter()
                    .zip(&rows)
                    .zip(problem.vmus())
                    .map(|((&a, row), v)| realized_utility(a, row.demand, &v.params))
                    .collect()
            };
            let expected: Vec<f64> = alloc.iter().zip(&curves).map(|(&a, c)| c.value(a)).collect();
            SchemeSummary {
                scheme: s,
                simulated,
                mean_realized: mean(&realized),
                mean_expected: mean(&expected),
                allocation: alloc,
                realized,
                expected,
            }
        })
        .collect();

    // Entropy timelines from VMU change epochs inside the period.
    let mut timelines = Vec::with_capacity(m);
    let mut synchrony_holds = true;
    for (i, params) in entropy.iter().enumerate() {
        let pair = engine.sys.pair(PairId(i));
        if cfg.mode == ChangeMode::Sync && pair.vmu_epochs != pair.vt_epochs {
            synchrony_holds = false;
        }
        let epochs: Vec<f64> = pair.vmu_epochs.iter().copied().filter(|&t| t <= period).collect();
        let tl = params.timeline(&epochs, period)?;
        if tl.reset_epochs().len() != epochs.len() + 1 {
            return Err(SimError::Consistency(format!(
                "VMU {i}: entropy resets do not match change epochs"
            )));
        }
        timelines.push(tl.breakpoints().collect());
    }
    if cfg.mode == ChangeMode::Sync && !synchrony_holds {
        return Err(SimError::Consistency("VMU and VT change epochs diverged".into()));
    }

    let tracking = cfg
        .attackers
        .iter()
        .enumerate()
        .map(|(a, att)| {
            let s = seed::derive(cfg.seed, &[stream::ATTACKER, a as u64]);
            let fractions: Vec<f64> = (0..m)
                .map(|target| tracking_fraction(&engine.trace, target, att, s).tracked_fraction)
                .collect();
            AttackerSummary {
                name: att.name.clone(),
                mean: mean(&fractions),
                tracked_fraction: fractions,
            }
        })
        .collect();

    let c = &engine.counters;
    let invariants = InvariantReport {
        audits: c.audits,
        one_active_checks: c.one_active_checks,
        minted: engine.sys.minted(),
        final_counts,
        synchrony_holds,
        migration_mismatches: c.migration_mismatches,
        served_matches_min,
        sensing_rejected: c.sensing_rejected,
        revoked_auth_accepted: c.revoked_auth_accepted,
        blocked_changes: c.blocked,
        vt_shortage: c.vt_shortage,
        group_sizes: c.group_sizes.clone(),
    };
    let report = SimReport {
        header: ReportHeader {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            rng_algorithm: RNG_ALGORITHM.into(),
            hash_algorithm: HASH_ALGORITHM.into(),
            master_seed: cfg.seed,
            mode: cfg.mode,
            scheme: cfg.scheme,
            solver: cfg.solver,
            demand_mode: cfg.demand_mode,
            ga: cfg.ga.clone(),
        },
        config: cfg,
        budget,
        vmus: rows,
        schemes,
        tracking,
        revocations: engine.revocation_log,
        timelines,
        ledger: LedgerSummary {
            blocks: engine.chain.len(),
            head: engine.chain.head().to_hex(),
            digests: engine.chain.digest_listing(),
        },
        ca_log: engine.sys.ca_log().to_vec(),
        invariants,
    };
    Ok(SimOutput {
        report,
        chain: engine.chain,
        trace: engine.trace,
        system: engine.sys,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MisbehaviorReport {
    pub injection_attempts: u64,
    pub injection_successes: u64,
    pub impersonation_attempts: u64,
    pub impersonation_successes: u64,
}

/// V2T and T2T drills on a finished run: every pair receives a forged
/// upload, and pair 0's VT is reported by pair 1's VT and then tries to
/// interact with it.
pub fn misbehavior_drill(system: &mut PseudonymSystem, now: f64) -> MisbehaviorReport {
    let mut out = MisbehaviorReport::default();
    let pairs = system.pairs().len();
    for i in 0..pairs {
        out.injection_attempts += 1;
        if attempt_injection(system, PairId(i)) {
            out.injection_successes += 1;
        }
    }
    if pairs >= 2 {
        let rogue = system.pair(PairId(0)).vt;
        let victim = system.pair(PairId(1)).vt;
        if let Some(pid) = system.entity(rogue).ok().and_then(|e| e.active) {
            let _ = system.report_malicious(
                victim,
                Evidence {
                    accused: pid,
                    timestamp: now,
                },
                now,
            );
        }
        out.impersonation_attempts += 1;
        if attempt_impersonation(system, rogue, victim) {
            out.impersonation_successes += 1;
        }
    }
    out
}

/// Improvement of `ours` over `baseline` in percent, if the baseline is
/// not zero.
pub fn improvement_pct(ours: f64, baseline: f64) -> Option<f64> {
    (baseline.abs() > 1e-12).then(|| 100.0 * (ours - baseline) / baseline.abs())
}

pub const FIG5A_FREQUENCIES: [f64; 6] = [1.0, 1.2, 1.4, 1.6, 1.8, 2.0];
pub const FIG5A_REFERENCE_PCT: f64 = 33.8;
pub const FIG5B_GROUPS: [[f64; 3]; 3] = [[1.0, 1.2, 1.4], [2.0, 2.2, 2.4], [3.0, 3.2, 3.4]];
pub const FIG5B_BETAS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig5aRow {
    pub seed: u64,
    pub vmu_index: usize,
    pub frequency: f64,
    pub scheme: Scheme,
    pub realized: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig5aSeed {
    pub seed: u64,
    pub on_demand_realized: f64,
    pub equal_realized: f64,
    pub on_demand_expected: f64,
    pub equal_expected: f64,
}

impl Fig5aSeed {
    pub fn means(&self, mode: DemandMode) -> (f64, f64) {
        match mode {
            DemandMode::Realized => (self.on_demand_realized, self.equal_realized),
            DemandMode::Expected => (self.on_demand_expected, self.equal_expected),
        }
    }

    pub fn improvement(&self, mode: DemandMode) -> Option<f64> {
        let (a, b) = self.means(mode);
        improvement_pct(a, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig5aTable {
    pub demand_mode: DemandMode,
    pub beta: f64,
    pub rows: Vec<Fig5aRow>,
    pub seeds: Vec<Fig5aSeed>,
}

impl Fig5aTable {
    /// Improvement of the across-seed mean utilities.
    pub fn improvement(&self, mode: DemandMode) -> Option<f64> {
        let (on, eq): (Vec<f64>, Vec<f64>) = self.seeds.iter().map(|s| s.means(mode)).unzip();
        improvement_pct(mean(&on), mean(&eq))
    }

    pub fn utility(&self, seed: u64, vmu: usize, scheme: Scheme, mode: DemandMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.vmu_index == vmu && r.scheme == scheme)
            .map(|r| match mode {
                DemandMode::Realized => r.realized,
                DemandMode::Expected => r.expected,
            })
    }

    pub fn vmu_count(&self) -> usize {
        self.rows.iter().map(|r| r.vmu_index + 1).max().unwrap_or(0)
    }

    /// Share of seeds in which every VMU does at least as well on demand.
    pub fn per_vmu_dominance(&self, mode: DemandMode) -> f64 {
        if self.seeds.is_empty() {
            return 0.0;
        }
        let ok = self
            .seeds
            .iter()
            .filter(|s| {
                (0..self.vmu_count()).all(|i| {
                    let on = self.utility(s.seed, i, Scheme::OnDemand, mode).unwrap_or(f64::NAN);
                    let eq = self.utility(s.seed, i, Scheme::Equal, mode).unwrap_or(f64::NAN);
                    on >= eq - 1e-9
                })
            })
            .count();
        ok as f64 / self.seeds.len() as f64
    }
}

/// Runs both schemes on every seed with shared demand draws.
pub fn experiment_fig5a(base: &ScenarioConfig, seeds: &[u64]) -> Result<Fig5aTable, SimError> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &s in seeds {
        let mut means = BTreeMap::new();
        for scheme in [Scheme::OnDemand, Scheme::Equal] {
            let mut cfg = base.clone();
            cfg.seed = s;
            cfg.scheme = scheme;
            let report = run(&cfg)?;
            for v in &report.vmus {
                rows.push(Fig5aRow {
                    seed: s,
                    vmu_index: v.index,
                    frequency: v.frequency,
                    scheme,
                    realized: v.realized_utility,
                    expected: v.expected_utility,
                });
            }
            let sim = report.scheme(scheme);
            means.insert(scheme, (sim.mean_realized, sim.mean_expected));
        }
        summaries.push(Fig5aSeed {
            seed: s,
            on_demand_realized: means[&Scheme::OnDemand].0,
            equal_realized: means[&Scheme::Equal].0,
            on_demand_expected: means[&Scheme::OnDemand].1,
            equal_expected: means[&Scheme::Equal].1,
        });
    }
    Ok(Fig5aTable {
        demand_mode: base.demand_mode,
        beta: base.beta,
        rows,
        seeds: summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig5bRow {
    /// 1-based group number.
    pub group: usize,
    pub beta: f64,
    pub seed: u64,
    pub global_realized: f64,
    pub global_expected: f64,
}

impl Fig5bRow {
    pub fn global(&self, mode: DemandMode) -> f64 {
        match mode {
            DemandMode::Realized => self.global_realized,
            DemandMode::Expected => self.global_expected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig5bTable {
    pub demand_mode: DemandMode,
    pub rows: Vec<Fig5bRow>,
}

impl Fig5bTable {
    pub fn cell(&self, group: usize, beta: f64, seed: u64) -> Option<&Fig5bRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.beta == beta && r.seed == seed)
    }

    pub fn betas(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.rows.iter().map(|r| r.beta).collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn groups(&self) -> usize {
        self.rows.iter().map(|r| r.group).max().unwrap_or(0)
    }

    /// Share of (beta, seed) cells whose group utilities strictly increase
    /// with the group number.
    pub fn ordering_rate(&self, mode: DemandMode) -> f64 {
        let (betas, seeds) = (self.betas(), self.seeds());
        let mut ok = 0usize;
        let mut total = 0usize;
        for &b in &betas {
            for &s in &seeds {
                total += 1;
                let vals: Option<Vec<f64>> = (1..=self.groups())
                    .map(|g| self.cell(g, b, s).map(|r| r.global(mode)))
                    .collect();
                if let Some(v) = vals {
                    if v.windows(2).all(|w| w[1] > w[0]) {
                        ok += 1;
                    }
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            ok as f64 / total as f64
        }
    }

    /// Across-seed mean global utility per group (rows) and beta (columns).
    pub fn means(&self, mode: DemandMode) -> Vec<Vec<f64>> {
        let betas = self.betas();
        (1..=self.groups())
            .map(|g| {
                betas
                    .iter()
                    .map(|&b| {
                        let v: Vec<f64> = self
                            .rows
                            .iter()
                            .filter(|r| r.group == g && r.beta == b)
                            .map(|r| r.global(mode))
                            .collect();
                        mean(&v)
                    })
                    .collect()
            })
            .collect()
    }
}

/// On-demand global utility of each group across the beta grid. Each group
/// is its own scenario built from `base` with the group's frequencies.
pub fn experiment_fig5b(
    base: &ScenarioConfig,
    groups: &[Vec<f64>],
    betas: &[f64],
    seeds: &[u64],
) -> Result<Fig5bTable, SimError> {
    let mut rows = Vec::new();
    for (g, freqs) in groups.iter().enumerate() {
        for &beta in betas {
            for &s in seeds {
                let mut cfg = ScenarioConfig::new(base.theta(), base.period(), freqs);
                cfg.seed = s;
                cfg.beta = beta;
                cfg.scheme = Scheme::OnDemand;
                cfg.mode = base.mode;
                cfg.solver = base.solver;
                cfg.demand_mode = base.demand_mode;
                cfg.h_store = base.h_store;
                cfg.r_penalty = base.r_penalty;
                cfg.entropy = base.entropy.clone();
                cfg.rsu_count = base.rsu_count;
                cfg.segment_length = base.segment_length;
                cfg.protocol = base.protocol.clone();
                cfg.ga = base.ga.clone();
                cfg.attackers = base.attackers.clone();
                cfg.fill_defaults();
                let report = run(&cfg)?;
                let sim = report.scheme(Scheme::OnDemand);
                rows.push(Fig5bRow {
                    group: g + 1,
                    beta,
                    seed: s,
                    global_realized: sim.realized.iter().sum(),
                    global_expected: sim.expected.iter().sum(),
                });
            }
        }
    }
    Ok(Fig5bTable {
        demand_mode: base.demand_mode,
        rows,
    })
}
