//! Dual-pseudonym protocol state.
//!
//! VMUs and their VTs draw pseudonyms from separate pools kept at RSUs. The
//! pair authenticates by checking each other's presented pseudonym against
//! the counterpart's issued set, and changes pseudonyms either synchronously
//! (both at a preset instant `t*`) or, in the legacy asynchronous mode, on
//! independent cadences. A CA mints pseudonyms, logs every request and
//! activation, and maintains the VT blacklist.
//!
//! Pseudonym status only moves along
//! `Pooled -> Issued -> Active -> Used -> Returned -> Pooled`.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{commit_pseudonym, commit_seed, ShuffleTransaction};
use crate::seed;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PseudonymId(pub u128);

impl fmt::Debug for PseudonymId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pid({:08x}..)", (self.0 >> 96) as u32)
    }
}

impl fmt::Display for PseudonymId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RsuId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Vmu,
    Vt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudonymStatus {
    Pooled,
    Issued,
    Active,
    Used,
    Returned,
}

impl PseudonymStatus {
    pub fn successor(self) -> PseudonymStatus {
        use PseudonymStatus::*;
        match self {
            Pooled => Issued,
            Issued => Active,
            Active => Used,
            Used => Returned,
            Returned => Pooled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pseudonym {
    pub id: PseudonymId,
    pub owner_class: EntityKind,
    pub status: PseudonymStatus,
}

impl Pseudonym {
    fn advance(&mut self, to: PseudonymStatus) -> Result<(), ProtocolError> {
        if self.status.successor() != to {
            return Err(ProtocolError::BadTransition {
                id: self.id,
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("RSU {rsu:?} {kind:?} pool holds {available} pseudonyms, {requested} requested")]
    PoolExhausted {
        rsu: RsuId,
        kind: EntityKind,
        available: usize,
        requested: usize,
    },
    #[error("a pseudonym set request needs a positive count")]
    EmptyRequest,
    #[error("authentication failed: {0}")]
    AuthFailure(&'static str),
    #[error("counterpart VT {0:?} is blacklisted")]
    RevokedCounterpart(EntityId),
    #[error("evidence does not match any logged pseudonym activation")]
    EvidenceMismatch,
    #[error("accused pseudonym does not belong to a VT")]
    NotAVt,
    #[error("entity {0:?} is not allowed to file reports")]
    Unauthorized(EntityId),
    #[error("change scheduled for t*={expected} invoked at {at}")]
    MissedDeadline { expected: f64, at: f64 },
    #[error("change at {0} already executed")]
    AlreadyExecuted(f64),
    #[error("no change is scheduled for this pair")]
    NotScheduled,
    #[error("entity {0:?} has no unused pseudonym")]
    NoUnusedPseudonym(EntityId),
    #[error("group members are not all of the requested kind")]
    MixedKinds,
    #[error("group members are not co-located")]
    NotCoLocated,
    #[error("a group change needs at least one member")]
    EmptyGroup,
    #[error("pseudonym {id} has status {status:?}, expected used")]
    WrongStatus { id: PseudonymId, status: PseudonymStatus },
    #[error("pseudonym {0} belongs to the other pool")]
    WrongPool(PseudonymId),
    #[error("illegal status transition of {id}: {from:?} -> {to:?}")]
    BadTransition {
        id: PseudonymId,
        from: PseudonymStatus,
        to: PseudonymStatus,
    },
    #[error("message lacks a valid session token")]
    Unauthenticated,
    #[error("unknown entity {0:?}")]
    UnknownEntity(EntityId),
    #[error("unknown RSU {0:?}")]
    UnknownRsu(RsuId),
    #[error("schedule state cannot move from {from:?} to {to:?}")]
    ScheduleRegression { from: ScheduleState, to: ScheduleState },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudonymSet {
    pub owner: EntityId,
    pub class: EntityKind,
    pub pseudonyms: Vec<Pseudonym>,
}

impl PseudonymSet {
    pub fn new(owner: EntityId, class: EntityKind) -> Self {
        Self {
            owner,
            class,
            pseudonyms: Vec::new(),
        }
    }

    /// Number of pseudonyms currently held (the set's capacity `w` or `u`).
    pub fn capacity(&self) -> usize {
        self.pseudonyms.len()
    }

    pub fn unused_count(&self) -> usize {
        self.count(PseudonymStatus::Issued)
    }

    pub fn count(&self, status: PseudonymStatus) -> usize {
        self.pseudonyms.iter().filter(|p| p.status == status).count()
    }

    pub fn ids(&self) -> impl Iterator<Item = PseudonymId> + '_ {
        self.pseudonyms.iter().map(|p| p.id)
    }

    pub fn status_of(&self, id: PseudonymId) -> Option<PseudonymStatus> {
        self.pseudonyms.iter().find(|p| p.id == id).map(|p| p.status)
    }

    fn live_ids(&self) -> BTreeSet<PseudonymId> {
        self.pseudonyms
            .iter()
            .filter(|p| matches!(p.status, PseudonymStatus::Issued | PseudonymStatus::Active))
            .map(|p| p.id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityState {
    pub id: EntityId,
    pub kind: EntityKind,
    pub twin: Option<EntityId>,
    pub active: Option<PseudonymId>,
    pub set: PseudonymSet,
    /// Current RSU region; for a VT, the RSU hosting it.
    pub region: RsuId,
    /// Road position and velocity (VTs mirror their VMU).
    pub position: f64,
    pub velocity: f64,
    pub clock: f64,
    /// Counterpart pseudonyms this entity accepts during authentication.
    pub known_counterpart: BTreeSet<PseudonymId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RsuPools {
    pub id: u32,
    pub vmu_pool: Vec<Pseudonym>,
    pub vt_pool: Vec<Pseudonym>,
}

impl RsuPools {
    pub fn new(id: RsuId) -> Self {
        Self {
            id: id.0,
            ..Self::default()
        }
    }

    pub fn pool(&self, kind: EntityKind) -> &Vec<Pseudonym> {
        match kind {
            EntityKind::Vmu => &self.vmu_pool,
            EntityKind::Vt => &self.vt_pool,
        }
    }

    fn pool_mut(&mut self, kind: EntityKind) -> &mut Vec<Pseudonym> {
        match kind {
            EntityKind::Vmu => &mut self.vmu_pool,
            EntityKind::Vt => &mut self.vt_pool,
        }
    }

    /// Takes back used pseudonyms of one class and re-pools them in a
    /// seed-keyed random order. `used` is drained only on success.
    pub fn return_and_shuffle(
        &mut self,
        kind: EntityKind,
        used: &mut Vec<Pseudonym>,
        epoch: f64,
        shuffle_seed: u64,
    ) -> Result<ShuffleTransaction, ProtocolError> {
        for p in used.iter() {
            if p.status != PseudonymStatus::Used {
                return Err(ProtocolError::WrongStatus {
                    id: p.id,
                    status: p.status,
                });
            }
            if p.owner_class != kind {
                return Err(ProtocolError::WrongPool(p.id));
            }
        }
        let mut batch: Vec<Pseudonym> = std::mem::take(used);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        batch.shuffle(&mut rng);
        for p in batch.iter_mut() {
            p.advance(PseudonymStatus::Returned)?;
            p.advance(PseudonymStatus::Pooled)?;
        }
        let commitments = batch.iter().map(|p| commit_pseudonym(p.id)).collect();
        self.pool_mut(kind).extend(batch);
        Ok(ShuffleTransaction {
            epoch,
            rsu: RsuId(self.id),
            pool_kind: kind,
            commitments,
            permutation_seed_commitment: commit_seed(shuffle_seed),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    PseudonymSet,
    ChangeRequest,
    Activation,
    Revocation,
}

/// One line of the CA log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaLogRecord {
    pub epoch: u64,
    pub entity: EntityId,
    pub request: RequestKind,
    pub timestamp: f64,
    pub pseudonym: Option<PseudonymId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub accused: PseudonymId,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlacklistEntry {
    pub vt: EntityId,
    pub evidence: Evidence,
    pub reporter: EntityId,
    pub revoked_at: f64,
}

/// Append-only record of revoked VTs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Blacklist {
    entries: Vec<BlacklistEntry>,
    revoked_pseudonyms: BTreeSet<PseudonymId>,
}

impl Blacklist {
    pub fn contains(&self, vt: EntityId) -> bool {
        self.entries.iter().any(|e| e.vt == vt)
    }

    pub fn is_revoked(&self, id: PseudonymId) -> bool {
        self.revoked_pseudonyms.contains(&id)
    }

    pub fn entries(&self) -> &[BlacklistEntry] {
        &self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlacklistDecision {
    Revoked(EntityId),
    AlreadyRevoked(EntityId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleState {
    Idle,
    Requested,
    Scheduled,
    Changed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSchedule {
    pub vmu: EntityId,
    pub vt: EntityId,
    pub requested_at: f64,
    pub t_star: f64,
    pub state: ScheduleState,
}

impl ChangeSchedule {
    fn advance(&mut self, to: ScheduleState) -> Result<(), ProtocolError> {
        if to <= self.state {
            return Err(ProtocolError::ScheduleRegression { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionToken(pub u128);

/// Sensing upload or feedback on the intra-twin channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraTwinMessage {
    pub token: Option<SessionToken>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinPair {
    pub vmu: EntityId,
    pub vt: EntityId,
    pub pending: VecDeque<ChangeSchedule>,
    pub last_changed: Option<ChangeSchedule>,
    pub session: Option<SessionToken>,
    pub vmu_epochs: Vec<f64>,
    pub vt_epochs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub at: f64,
    pub entity: EntityId,
    pub old: Option<PseudonymId>,
    pub new: PseudonymId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupChange {
    pub t_star: f64,
    pub kind: EntityKind,
    pub size: usize,
    pub records: Vec<ChangeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Request-to-change delay.
    pub delta_sync: f64,
    /// `t*` is rounded up to a multiple of this slot so co-located pairs can
    /// change together; 0 disables rounding.
    pub change_slot: f64,
    pub vmu_set_size: usize,
    pub vt_set_size: usize,
    /// Whether a VMU with an empty set may request a fresh one.
    pub vmu_replenish: bool,
    /// VT-to-VMU change cadence ratio in asynchronous mode.
    pub vt_cadence_ratio: f64,
    /// Maximum spread of VMU positions within one hot-spot group.
    pub hot_spot_radius: f64,
    pub session_tokens: bool,
    pub blacklist_enforced: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            delta_sync: 1.0,
            change_slot: 0.25,
            vmu_set_size: 5,
            vt_set_size: 5,
            vmu_replenish: false,
            vt_cadence_ratio: 4.0,
            hot_spot_radius: 1.0,
            session_tokens: true,
            blacklist_enforced: true,
        }
    }
}

/// Conservation snapshot from [`PseudonymSystem::audit`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pooled: usize,
    pub issued: usize,
    pub active: usize,
    pub used: usize,
    pub returned: usize,
}

impl StatusCounts {
    pub fn total(&self) -> usize {
        self.pooled + self.issued + self.active + self.used + self.returned
    }

    fn add(&mut self, s: PseudonymStatus) {
        match s {
            PseudonymStatus::Pooled => self.pooled += 1,
            PseudonymStatus::Issued => self.issued += 1,
            PseudonymStatus::Active => self.active += 1,
            PseudonymStatus::Used => self.used += 1,
            PseudonymStatus::Returned => self.returned += 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantViolation {
    #[error("conservation: {tracked} pseudonyms tracked, {minted} minted")]
    Conservation { tracked: usize, minted: u64 },
    #[error("entity {0:?} holds more than one active pseudonym")]
    MultipleActive(EntityId),
    #[error("entity {0:?} active field disagrees with its set")]
    ActiveMismatch(EntityId),
    #[error("pseudonym {0} appears twice")]
    Duplicate(PseudonymId),
    #[error("pseudonym {0} sits in a pool or set with the wrong status or class")]
    Misplaced(PseudonymId),
}

/// RSUs, entities, twin pairs and the CA, owned by one event loop.
#[derive(Debug, Clone)]
pub struct PseudonymSystem {
    pub config: ProtocolConfig,
    rsus: Vec<RsuPools>,
    entities: Vec<EntityState>,
    pairs: Vec<TwinPair>,
    ca_log: Vec<CaLogRecord>,
    blacklist: Blacklist,
    minted: u64,
    seen_ids: HashSet<PseudonymId>,
    id_rng: ChaCha8Rng,
    session_rng: ChaCha8Rng,
}

impl PseudonymSystem {
    pub fn new(config: ProtocolConfig, rsu_count: u32, master_seed: u64) -> Self {
        Self {
            config,
            rsus: (0..rsu_count).map(|i| RsuPools::new(RsuId(i))).collect(),
            entities: Vec::new(),
            pairs: Vec::new(),
            ca_log: Vec::new(),
            blacklist: Blacklist::default(),
            minted: 0,
            seen_ids: HashSet::new(),
            id_rng: seed::rng(master_seed, &[seed::stream::PSEUDONYM_IDS]),
            session_rng: seed::rng(master_seed, &[seed::stream::SESSION]),
        }
    }

    pub fn rsus(&self) -> &[RsuPools] {
        &self.rsus
    }

    pub fn rsu(&self, id: RsuId) -> Result<&RsuPools, ProtocolError> {
        self.rsus.get(id.0 as usize).ok_or(ProtocolError::UnknownRsu(id))
    }

    fn rsu_mut(&mut self, id: RsuId) -> Result<&mut RsuPools, ProtocolError> {
        self.rsus.get_mut(id.0 as usize).ok_or(ProtocolError::UnknownRsu(id))
    }

    pub fn entity(&self, id: EntityId) -> Result<&EntityState, ProtocolError> {
        self.entities.get(id.0 as usize).ok_or(ProtocolError::UnknownEntity(id))
    }

    pub fn entity_mut(&mut self, id: EntityId) -> Result<&mut EntityState, ProtocolError> {
        self.entities
            .get_mut(id.0 as usize)
            .ok_or(ProtocolError::UnknownEntity(id))
    }

    pub fn entities(&self) -> &[EntityState] {
        &self.entities
    }

    pub fn pairs(&self) -> &[TwinPair] {
        &self.pairs
    }

    pub fn pair(&self, id: PairId) -> &TwinPair {
        &self.pairs[id.0]
    }

    pub fn ca_log(&self) -> &[CaLogRecord] {
        &self.ca_log
    }

    pub fn blacklist(&self) -> &Blacklist {
        &self.blacklist
    }

    pub fn minted(&self) -> u64 {
        self.minted
    }

    /// Registers a VMU and its VT on `region`.
    pub fn add_pair(&mut self, region: RsuId, position: f64, velocity: f64) -> PairId {
        let vmu = EntityId(self.entities.len() as u32);
        let vt = EntityId(vmu.0 + 1);
        for (id, kind, twin) in [(vmu, EntityKind::Vmu, vt), (vt, EntityKind::Vt, vmu)] {
            self.entities.push(EntityState {
                id,
                kind,
                twin: Some(twin),
                active: None,
                set: PseudonymSet::new(id, kind),
                region,
                position,
                velocity,
                clock: 0.0,
                known_counterpart: BTreeSet::new(),
            });
        }
        self.pairs.push(TwinPair {
            vmu,
            vt,
            pending: VecDeque::new(),
            last_changed: None,
            session: None,
            vmu_epochs: Vec::new(),
            vt_epochs: Vec::new(),
        });
        PairId(self.pairs.len() - 1)
    }

    pub fn pair_of(&self, entity: EntityId) -> Option<PairId> {
        self.pairs
            .iter()
            .position(|p| p.vmu == entity || p.vt == entity)
            .map(PairId)
    }

    fn log(&mut self, entity: EntityId, request: RequestKind, timestamp: f64, pseudonym: Option<PseudonymId>) {
        let epoch = self.ca_log.len() as u64;
        self.ca_log.push(CaLogRecord {
            epoch,
            entity,
            request,
            timestamp,
            pseudonym,
        });
    }

    /// CA restock: mints fresh pseudonyms into an RSU pool.
    pub fn mint(&mut self, rsu: RsuId, kind: EntityKind, count: usize) -> Result<(), ProtocolError> {
        self.rsu(rsu)?;
        let mut fresh = Vec::with_capacity(count);
        while fresh.len() < count {
            let id = PseudonymId(self.id_rng.gen());
            if self.seen_ids.insert(id) {
                fresh.push(Pseudonym {
                    id,
                    owner_class: kind,
                    status: PseudonymStatus::Pooled,
                });
            }
        }
        self.minted += count as u64;
        self.rsu_mut(rsu)?.pool_mut(kind).extend(fresh);
        Ok(())
    }

    /// Moves `count` pseudonyms from the RSU pool into the entity's set.
    /// Fails without side effects when the pool is short.
    pub fn request_pseudonym_set(
        &mut self,
        entity: EntityId,
        count: usize,
        rsu: RsuId,
        now: f64,
    ) -> Result<PseudonymSet, ProtocolError> {
        if count == 0 {
            return Err(ProtocolError::EmptyRequest);
        }
        let kind = self.entity(entity)?.kind;
        if kind == EntityKind::Vt && self.config.blacklist_enforced && self.blacklist.contains(entity) {
            return Err(ProtocolError::RevokedCounterpart(entity));
        }
        let pool = self.rsu_mut(rsu)?.pool_mut(kind);
        if pool.len() < count {
            return Err(ProtocolError::PoolExhausted {
                rsu,
                kind,
                available: pool.len(),
                requested: count,
            });
        }
        let mut batch: Vec<Pseudonym> = pool.drain(..count).collect();
        for p in batch.iter_mut() {
            p.advance(PseudonymStatus::Issued)?;
        }
        let issued = PseudonymSet {
            owner: entity,
            class: kind,
            pseudonyms: batch.clone(),
        };
        self.entity_mut(entity)?.set.pseudonyms.extend(batch);
        self.log(entity, RequestKind::PseudonymSet, now, None);
        self.sync_knowledge(entity)?;
        Ok(issued)
    }

    /// Pushes an entity's live pseudonyms to its twin over the intra-twin link.
    fn sync_knowledge(&mut self, entity: EntityId) -> Result<(), ProtocolError> {
        let (live, twin) = {
            let e = self.entity(entity)?;
            (e.set.live_ids(), e.twin)
        };
        if let Some(t) = twin {
            self.entity_mut(t)?.known_counterpart = live;
        }
        Ok(())
    }

    /// Retires the active pseudonym (if any) and activates the next unused one.
    pub fn activate_next(&mut self, entity: EntityId, at: f64) -> Result<ChangeRecord, ProtocolError> {
        let e = self.entity_mut(entity)?;
        let next = e
            .set
            .pseudonyms
            .iter()
            .position(|p| p.status == PseudonymStatus::Issued)
            .ok_or(ProtocolError::NoUnusedPseudonym(entity))?;
        let old = e.active;
        if let Some(old_id) = old {
            let slot = e
                .set
                .pseudonyms
                .iter_mut()
                .find(|p| p.id == old_id)
                .expect("active pseudonym lives in the set");
            slot.advance(PseudonymStatus::Used)?;
        }
        let p = &mut e.set.pseudonyms[next];
        p.advance(PseudonymStatus::Active)?;
        let new = p.id;
        e.active = Some(new);
        e.clock = at;
        self.log(entity, RequestKind::Activation, at, Some(new));
        self.sync_knowledge(entity)?;
        Ok(ChangeRecord { at, entity, old, new })
    }

    /// Access-control core of mutual authentication.
    pub fn authenticate(
        &self,
        vmu: EntityId,
        vt: EntityId,
        presented_vmu: PseudonymId,
        presented_vt: PseudonymId,
    ) -> Result<(), ProtocolError> {
        let (vmu_state, vt_state) = (self.entity(vmu)?, self.entity(vt)?);
        if vmu_state.kind != EntityKind::Vmu || vt_state.kind != EntityKind::Vt {
            return Err(ProtocolError::AuthFailure("roles do not match"));
        }
        if self.config.blacklist_enforced && (self.blacklist.contains(vt) || self.blacklist.is_revoked(presented_vt)) {
            return Err(ProtocolError::RevokedCounterpart(vt));
        }
        if !vt_state.known_counterpart.contains(&presented_vmu) {
            return Err(ProtocolError::AuthFailure("VMU pseudonym not in the VT's set"));
        }
        if !vmu_state.known_counterpart.contains(&presented_vt) {
            return Err(ProtocolError::AuthFailure("VT pseudonym not in the VMU's set"));
        }
        Ok(())
    }

    /// Both sides verify each other's active pseudonym; on success the pair
    /// shares a fresh 128-bit session token.
    pub fn mutual_authenticate(&mut self, pair: PairId) -> Result<SessionToken, ProtocolError> {
        let (vmu, vt) = (self.pairs[pair.0].vmu, self.pairs[pair.0].vt);
        let presented_vmu = self
            .entity(vmu)?
            .active
            .ok_or(ProtocolError::AuthFailure("VMU has no active pseudonym"))?;
        let presented_vt = self
            .entity(vt)?
            .active
            .ok_or(ProtocolError::AuthFailure("VT has no active pseudonym"))?;
        if let Err(e) = self.authenticate(vmu, vt, presented_vmu, presented_vt) {
            self.pairs[pair.0].session = None;
            return Err(e);
        }
        let token = SessionToken(self.session_rng.gen());
        self.pairs[pair.0].session = Some(token);
        Ok(token)
    }

    /// Accepts a sensing upload for the pair's VT if it carries the session token.
    pub fn deliver_to_twin(&self, pair: PairId, msg: &IntraTwinMessage) -> Result<(), ProtocolError> {
        if !self.config.session_tokens {
            return Ok(());
        }
        match (self.pairs[pair.0].session, msg.token) {
            (Some(s), Some(t)) if s == t => Ok(()),
            _ => Err(ProtocolError::Unauthenticated),
        }
    }

    /// VT-to-VT interaction gate.
    pub fn vt_interact(&self, from: EntityId, to: EntityId) -> Result<(), ProtocolError> {
        for id in [from, to] {
            let e = self.entity(id)?;
            if e.kind != EntityKind::Vt {
                return Err(ProtocolError::AuthFailure("not a VT"));
            }
            if self.config.blacklist_enforced && self.blacklist.contains(id) {
                return Err(ProtocolError::RevokedCounterpart(id));
            }
        }
        Ok(())
    }

    /// Resolves the entity that had `pseudonym` active at `t` from the CA log.
    fn holder_at(&self, pseudonym: PseudonymId, t: f64) -> Option<EntityId> {
        let start = self
            .ca_log
            .iter()
            .find(|r| r.request == RequestKind::Activation && r.pseudonym == Some(pseudonym) && r.timestamp <= t)?;
        let superseded = self.ca_log.iter().any(|r| {
            r.request == RequestKind::Activation
                && r.entity == start.entity
                && r.epoch > start.epoch
                && r.timestamp <= t
        });
        (!superseded).then_some(start.entity)
    }

    /// A VT accuses another VT's pseudonym; the CA checks the evidence
    /// against its activation log and, if it holds, blacklists the owner.
    pub fn report_malicious(
        &mut self,
        reporter: EntityId,
        evidence: Evidence,
        now: f64,
    ) -> Result<BlacklistDecision, ProtocolError> {
        let rep = self.entity(reporter)?;
        if rep.kind != EntityKind::Vt || self.blacklist.contains(reporter) {
            return Err(ProtocolError::Unauthorized(reporter));
        }
        let accused = self
            .holder_at(evidence.accused, evidence.timestamp)
            .ok_or(ProtocolError::EvidenceMismatch)?;
        if self.entity(accused)?.kind != EntityKind::Vt {
            return Err(ProtocolError::NotAVt);
        }
        if self.blacklist.contains(accused) {
            return Ok(BlacklistDecision::AlreadyRevoked(accused));
        }
        let ids: Vec<PseudonymId> = self.entity(accused)?.set.ids().collect();
        self.blacklist.revoked_pseudonyms.extend(ids);
        self.blacklist.entries.push(BlacklistEntry {
            vt: accused,
            evidence,
            reporter,
            revoked_at: now,
        });
        self.log(accused, RequestKind::Revocation, now, Some(evidence.accused));
        if let Some(pair) = self.pair_of(accused) {
            self.pairs[pair.0].session = None;
        }
        Ok(BlacklistDecision::Revoked(accused))
    }

    fn align(&self, t: f64) -> f64 {
        let slot = self.config.change_slot;
        if slot > 0.0 {
            (t / slot - 1e-9).ceil() * slot
        } else {
            t
        }
    }

    /// Steps 1-2 of the synchronous change: make sure both twins hold an
    /// unused pseudonym (replenishing from the RSUs if needed), log the
    /// request with the CA and preset `t*`.
    pub fn schedule_synchronous_change(&mut self, pair: PairId, now: f64) -> Result<ChangeSchedule, ProtocolError> {
        let (vmu, vt) = (self.pairs[pair.0].vmu, self.pairs[pair.0].vt);
        if self.config.blacklist_enforced && self.blacklist.contains(vt) {
            return Err(ProtocolError::RevokedCounterpart(vt));
        }
        let reserved = self.pairs[pair.0].pending.len();

        // Work out every replenishment first so failure leaves no trace.
        let mut refills = Vec::new();
        for (id, size, replenish) in [
            (vmu, self.config.vmu_set_size, self.config.vmu_replenish),
            (vt, self.config.vt_set_size, true),
        ] {
            let e = self.entity(id)?;
            if e.set.unused_count() > reserved {
                continue;
            }
            if !replenish {
                return Err(ProtocolError::NoUnusedPseudonym(id));
            }
            let available = self.rsu(e.region)?.pool(e.kind).len();
            let size = size.max(1);
            if available < size {
                return Err(ProtocolError::PoolExhausted {
                    rsu: e.region,
                    kind: e.kind,
                    available,
                    requested: size,
                });
            }
            refills.push((id, size, e.region));
        }
        for (id, size, region) in refills {
            self.request_pseudonym_set(id, size, region, now)?;
        }

        let mut t_star = self.align(now + self.config.delta_sync);
        if let Some(last) = self.pairs[pair.0].pending.back() {
            if t_star <= last.t_star {
                let step = if self.config.change_slot > 0.0 {
                    self.config.change_slot
                } else {
                    self.config.delta_sync.max(f64::EPSILON)
                };
                t_star = last.t_star + step;
            }
        }
        let mut schedule = ChangeSchedule {
            vmu,
            vt,
            requested_at: now,
            t_star,
            state: ScheduleState::Idle,
        };
        schedule.advance(ScheduleState::Requested)?;
        self.log(vmu, RequestKind::ChangeRequest, now, None);
        schedule.advance(ScheduleState::Scheduled)?;
        self.pairs[pair.0].pending.push_back(schedule.clone());
        Ok(schedule)
    }

    /// Drops the earliest pending change without executing it.
    pub fn cancel_next(&mut self, pair: PairId) -> Option<ChangeSchedule> {
        self.pairs[pair.0].pending.pop_front()
    }

    pub fn next_scheduled(&self, pair: PairId) -> Option<&ChangeSchedule> {
        self.pairs[pair.0].pending.front()
    }

    fn check_executable(&self, pair: PairId, at: f64) -> Result<(), ProtocolError> {
        let p = &self.pairs[pair.0];
        let Some(front) = p.pending.front() else {
            return match &p.last_changed {
                Some(last) if last.t_star == at => Err(ProtocolError::AlreadyExecuted(at)),
                _ => Err(ProtocolError::NotScheduled),
            };
        };
        if front.t_star != at {
            return Err(ProtocolError::MissedDeadline {
                expected: front.t_star,
                at,
            });
        }
        for id in [p.vmu, p.vt] {
            if self.entity(id)?.set.unused_count() == 0 {
                return Err(ProtocolError::NoUnusedPseudonym(id));
            }
        }
        Ok(())
    }

    /// Step 3: both twins switch pseudonyms at `t*`.
    pub fn execute_change(&mut self, pair: PairId, at: f64) -> Result<[ChangeRecord; 2], ProtocolError> {
        self.check_executable(pair, at)?;
        let (vmu, vt) = (self.pairs[pair.0].vmu, self.pairs[pair.0].vt);
        let a = self.activate_next(vmu, at)?;
        let b = self.activate_next(vt, at)?;
        let p = &mut self.pairs[pair.0];
        let mut done = p.pending.pop_front().expect("checked");
        done.advance(ScheduleState::Changed)?;
        p.last_changed = Some(done);
        p.vmu_epochs.push(at);
        p.vt_epochs.push(at);
        Ok([a, b])
    }

    /// Single-layer change used by the asynchronous legacy mode. VTs refill
    /// from their hosting RSU when their set is empty; VMUs only if allowed.
    pub fn execute_single_change(&mut self, entity: EntityId, at: f64) -> Result<ChangeRecord, ProtocolError> {
        let e = self.entity(entity)?;
        let (kind, region) = (e.kind, e.region);
        if kind == EntityKind::Vt && self.config.blacklist_enforced && self.blacklist.contains(entity) {
            return Err(ProtocolError::RevokedCounterpart(entity));
        }
        if e.set.unused_count() == 0 {
            let (size, allowed) = match kind {
                EntityKind::Vmu => (self.config.vmu_set_size, self.config.vmu_replenish),
                EntityKind::Vt => (self.config.vt_set_size, true),
            };
            if !allowed {
                return Err(ProtocolError::NoUnusedPseudonym(entity));
            }
            self.request_pseudonym_set(entity, size.max(1), region, at)?;
        }
        let rec = self.activate_next(entity, at)?;
        if let Some(pair) = self.pair_of(entity) {
            let p = &mut self.pairs[pair.0];
            match kind {
                EntityKind::Vmu => p.vmu_epochs.push(at),
                EntityKind::Vt => p.vt_epochs.push(at),
            }
        }
        Ok(rec)
    }

    /// Collective change of co-located entities at one instant.
    ///
    /// With `synchronous` set, every member's pair executes its scheduled
    /// twin change at `t_star`; otherwise only the members themselves change.
    pub fn group_change(
        &mut self,
        members: &[EntityId],
        kind: EntityKind,
        t_star: f64,
        synchronous: bool,
    ) -> Result<GroupChange, ProtocolError> {
        if members.is_empty() {
            return Err(ProtocolError::EmptyGroup);
        }
        let mut states = Vec::with_capacity(members.len());
        for &m in members {
            let e = self.entity(m)?;
            if e.kind != kind {
                return Err(ProtocolError::MixedKinds);
            }
            states.push(e);
        }
        match kind {
            EntityKind::Vt => {
                if states.iter().any(|e| e.region != states[0].region) {
                    return Err(ProtocolError::NotCoLocated);
                }
            }
            EntityKind::Vmu => {
                let lo = states.iter().map(|e| e.position).fold(f64::INFINITY, f64::min);
                let hi = states.iter().map(|e| e.position).fold(f64::NEG_INFINITY, f64::max);
                if hi - lo > self.config.hot_spot_radius {
                    return Err(ProtocolError::NotCoLocated);
                }
            }
        }
        for &m in members {
            let vt = match kind {
                EntityKind::Vt => Some(m),
                EntityKind::Vmu if synchronous => self.entity(m)?.twin,
                EntityKind::Vmu => None,
            };
            if let Some(vt) = vt {
                if self.config.blacklist_enforced && self.blacklist.contains(vt) {
                    return Err(ProtocolError::RevokedCounterpart(vt));
                }
            }
            if synchronous {
                let pair = self.pair_of(m).ok_or(ProtocolError::NotScheduled)?;
                self.check_executable(pair, t_star)?;
            } else if kind == EntityKind::Vmu && !self.config.vmu_replenish && self.entity(m)?.set.unused_count() == 0 {
                return Err(ProtocolError::NoUnusedPseudonym(m));
            }
        }
        let mut records = Vec::new();
        for &m in members {
            if synchronous {
                let pair = self.pair_of(m).expect("validated");
                records.extend(self.execute_change(pair, t_star)?);
            } else {
                records.push(self.execute_single_change(m, t_star)?);
            }
        }
        Ok(GroupChange {
            t_star,
            kind,
            size: members.len(),
            records,
        })
    }

    /// Removes the entity's used pseudonyms from its set for return to a pool.
    /// Revoked pseudonyms never re-enter circulation; they stay with their
    /// holder as used.
    pub fn take_used(&mut self, entity: EntityId) -> Result<Vec<Pseudonym>, ProtocolError> {
        let blacklist = &self.blacklist;
        let e = self
            .entities
            .get_mut(entity.0 as usize)
            .ok_or(ProtocolError::UnknownEntity(entity))?;
        let (used, keep): (Vec<_>, Vec<_>) = e
            .set
            .pseudonyms
            .drain(..)
            .partition(|p| p.status == PseudonymStatus::Used && !blacklist.is_revoked(p.id));
        e.set.pseudonyms = keep;
        Ok(used)
    }

    /// Returns used pseudonyms to `rsu`; on failure they stay in `used`.
    pub fn return_and_shuffle(
        &mut self,
        rsu: RsuId,
        kind: EntityKind,
        used: &mut Vec<Pseudonym>,
        epoch: f64,
        shuffle_seed: u64,
    ) -> Result<ShuffleTransaction, ProtocolError> {
        self.rsu_mut(rsu)?.return_and_shuffle(kind, used, epoch, shuffle_seed)
    }

    /// Moves a VT to the RSU now covering its VMU.
    pub fn migrate(&mut self, pair: PairId, to: RsuId, position: f64) -> Result<(), ProtocolError> {
        self.rsu(to)?;
        let (vmu, vt) = (self.pairs[pair.0].vmu, self.pairs[pair.0].vt);
        for id in [vmu, vt] {
            let e = self.entity_mut(id)?;
            e.region = to;
            e.position = position;
        }
        Ok(())
    }

    pub fn set_position(&mut self, pair: PairId, position: f64) {
        let (vmu, vt) = (self.pairs[pair.0].vmu, self.pairs[pair.0].vt);
        self.entities[vmu.0 as usize].position = position;
        self.entities[vt.0 as usize].position = position;
    }

    /// At most one active pseudonym, matching the `active` field.
    pub fn check_one_active(&self, entity: EntityId) -> Result<(), InvariantViolation> {
        let e = &self.entities[entity.0 as usize];
        let active: Vec<PseudonymId> = e
            .set
            .pseudonyms
            .iter()
            .filter(|p| p.status == PseudonymStatus::Active)
            .map(|p| p.id)
            .collect();
        if active.len() > 1 {
            return Err(InvariantViolation::MultipleActive(entity));
        }
        if active.first().copied() != e.active {
            return Err(InvariantViolation::ActiveMismatch(entity));
        }
        Ok(())
    }

    /// Full recount: every minted pseudonym sits in exactly one pool or set
    /// with a status that fits its location.
    pub fn audit(&self) -> Result<StatusCounts, InvariantViolation> {
        let mut counts = StatusCounts::default();
        let mut seen = HashSet::with_capacity(self.minted as usize);
        for rsu in &self.rsus {
            for kind in [EntityKind::Vmu, EntityKind::Vt] {
                for p in rsu.pool(kind) {
                    if !seen.insert(p.id) {
                        return Err(InvariantViolation::Duplicate(p.id));
                    }
                    if p.status != PseudonymStatus::Pooled || p.owner_class != kind {
                        return Err(InvariantViolation::Misplaced(p.id));
                    }
                    counts.add(p.status);
                }
            }
        }
        for e in &self.entities {
            self.check_one_active(e.id)?;
            for p in &e.set.pseudonyms {
                if !seen.insert(p.id) {
                    return Err(InvariantViolation::Duplicate(p.id));
                }
                let placed = matches!(
                    p.status,
                    PseudonymStatus::Issued | PseudonymStatus::Active | PseudonymStatus::Used
                );
                if !placed || p.owner_class != e.kind {
                    return Err(InvariantViolation::Misplaced(p.id));
                }
                counts.add(p.status);
            }
        }
        if counts.total() as u64 != self.minted {
            return Err(InvariantViolation::Conservation {
                tracked: counts.total(),
                minted: self.minted,
            });
        }
        Ok(counts)
    }
}
