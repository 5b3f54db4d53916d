//! Deterministic slotted execution engine.
//!
//! The engine applies scheduled transfer directives under per-slot chunk
//! budgets, advances inventories, appends observation records, and injects
//! faults. It never drops a planned transfer silently: directives that cannot
//! execute this slot are returned as deferred and re-presented by the round
//! loop.

use crate::model::{ByzBehavior, Capacities, ChunkId, ChunkUniverse, Inventory, NodeId, Pseudonym};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::{HashMap, HashSet};

/// Directive flags. `SCHEDULED` marks tracker/peer-planned transfers,
/// `SPRAY` pre-round tracker-tunneled seeding, `RETRY` a re-delivery after a
/// failed (hash-discarded) one, and `EMERGENCY` an owner-chunk release issued
/// to keep a starving warm-up live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DirectiveFlags(pub u8);

impl DirectiveFlags {
    pub const SCHEDULED: DirectiveFlags = DirectiveFlags(1);
    pub const SPRAY: DirectiveFlags = DirectiveFlags(2);
    pub const RETRY: DirectiveFlags = DirectiveFlags(4);
    pub const EMERGENCY: DirectiveFlags = DirectiveFlags(8);

    pub fn contains(self, other: DirectiveFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn union(self, other: DirectiveFlags) -> DirectiveFlags {
        DirectiveFlags(self.0 | other.0)
    }
}

/// One scheduled chunk transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransferDirective {
    /// Stage the directive targets; pre-round spray uses the virtual stage -1.
    pub stage: i32,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub chunk: ChunkId,
    pub flags: DirectiveFlags,
}

impl TransferDirective {
    pub fn scheduled(stage: i32, sender: NodeId, receiver: NodeId, chunk: ChunkId) -> Self {
        TransferDirective { stage, sender, receiver, chunk, flags: DirectiveFlags::SCHEDULED }
    }

    pub fn is_spray(&self) -> bool {
        self.flags.contains(DirectiveFlags::SPRAY)
    }

    pub fn is_emergency(&self) -> bool {
        self.flags.contains(DirectiveFlags::EMERGENCY)
    }

    pub fn flags_str(&self) -> String {
        let mut s = String::new();
        if self.flags.contains(DirectiveFlags::SCHEDULED) {
            s.push('s');
        }
        if self.flags.contains(DirectiveFlags::SPRAY) {
            s.push('y');
        }
        if self.flags.contains(DirectiveFlags::RETRY) {
            s.push('r');
        }
        if self.flags.contains(DirectiveFlags::EMERGENCY) {
            s.push('e');
        }
        s
    }

    pub fn flags_from_str(s: &str) -> Option<DirectiveFlags> {
        let mut f = DirectiveFlags::default();
        for c in s.chars() {
            f = f.union(match c {
                's' => DirectiveFlags::SCHEDULED,
                'y' => DirectiveFlags::SPRAY,
                'r' => DirectiveFlags::RETRY,
                'e' => DirectiveFlags::EMERGENCY,
                _ => return None,
            });
        }
        Some(f)
    }
}

/// Protocol phase a delivery belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Spray,
    Warmup,
    Bittorrent,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Spray => "spray",
            Phase::Warmup => "warmup",
            Phase::Bittorrent => "bittorrent",
        })
    }
}

/// What a receiver saw for one completed delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationRecord {
    pub observer: NodeId,
    pub sender_pseudonym: Pseudonym,
    pub chunk: ChunkId,
    pub slot: i32,
    pub phase: Phase,
}

/// Why a directive was skipped or flagged instead of executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// A lied-bitfield transfer carried a chunk the sender does not hold;
    /// the payload failed its hash check and was discarded.
    FailedDelivery { directive: TransferDirective },
    /// Directive referenced an inactive node.
    InactiveParty { directive: TransferDirective, node: NodeId },
    /// Duplicate delivery cancelled: the receiver already holds the chunk.
    DuplicateCancelled { directive: TransferDirective },
}

#[derive(Debug, Default, Clone)]
pub struct StepOutcome {
    pub executed: Vec<TransferDirective>,
    pub deferred: Vec<TransferDirective>,
    pub violations: Vec<Violation>,
}

/// Mutable simulation state for one round.
pub struct SimState {
    pub universe: ChunkUniverse,
    pub slot: i32,
    pub phase: Phase,
    pub inventories: Vec<Inventory>,
    pub capacities: Vec<Capacities>,
    pub active: Vec<bool>,
    pub observations: Vec<ObservationRecord>,
    pub residual_up: Vec<u32>,
    pub residual_down: Vec<u32>,
    /// chunks sent per node per slot, for utilization accounting
    pub sent_per_slot: Vec<Vec<u32>>,
    pub violations: Vec<Violation>,
    /// last slot each node executed a transfer (send or receive)
    pub last_progress: Vec<i32>,
    pub inactive_reasons: Vec<Option<String>>,
    /// (receiver, chunk) pairs that failed a hash check and may be retried
    failed: HashSet<(NodeId, ChunkId)>,
    /// delivered (receiver, chunk) pairs, for duplicate cancellation
    delivered: HashSet<(NodeId, ChunkId)>,
    /// release slots for transfers held back by delay-Byzantine senders
    delayed_until: HashMap<(NodeId, NodeId, ChunkId), i32>,
    byz: HashMap<u32, ByzBehavior>,
    fault_rng: ChaCha20Rng,
    spray_serial: Vec<u32>,
    round: u32,
    /// owner-origin sends by honest post-threshold senders, excluding
    /// emergency releases: the numerator of the per-transfer cap check
    pub owner_sends_post_threshold: u64,
    pub total_sends_post_threshold: u64,
    pub emergency_sends: u64,
    /// per-sender serving-instant buffer extrema (B*, O*) for bound reports
    pub buffer_min: Vec<u32>,
    pub owner_eligible_max: Vec<u32>,
    /// set per stage by the warm-up driver before step() is called
    pub crossed_threshold: Vec<bool>,
    pub eligible_sizes: Vec<u32>,
    pub owner_eligible_sizes: Vec<u32>,
}

impl SimState {
    pub fn new(
        universe: ChunkUniverse,
        capacities: Vec<Capacities>,
        byz: &[(u32, ByzBehavior)],
        fault_rng: ChaCha20Rng,
    ) -> Self {
        let n = universe.n() as usize;
        let round = universe.round();
        let inventories =
            (0..n).map(|v| Inventory::initial(&universe, NodeId(v as u32))).collect();
        SimState {
            universe,
            slot: 0,
            phase: Phase::Warmup,
            inventories,
            capacities,
            active: vec![true; n],
            observations: Vec::new(),
            residual_up: vec![0; n],
            residual_down: vec![0; n],
            sent_per_slot: Vec::new(),
            violations: Vec::new(),
            last_progress: vec![0; n],
            inactive_reasons: vec![None; n],
            failed: HashSet::new(),
            delivered: HashSet::new(),
            delayed_until: HashMap::new(),
            byz: byz.iter().map(|(v, b)| (*v, b.clone())).collect(),
            fault_rng,
            spray_serial: vec![0; n],
            round,
            owner_sends_post_threshold: 0,
            total_sends_post_threshold: 0,
            emergency_sends: 0,
            buffer_min: vec![u32::MAX; n],
            owner_eligible_max: vec![0; n],
            crossed_threshold: vec![false; n],
            eligible_sizes: vec![0; n],
            owner_eligible_sizes: vec![0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.inventories.len()
    }

    pub fn is_active(&self, v: NodeId) -> bool {
        self.active[v.index()]
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.active.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| NodeId(i as u32))
    }

    pub fn is_byzantine(&self, v: NodeId) -> bool {
        self.byz.contains_key(&v.0)
    }

    pub fn byz_behavior(&self, v: NodeId) -> Option<&ByzBehavior> {
        self.byz.get(&v.0)
    }

    /// Reset per-slot budgets. Nodes still inside their start lag get zero
    /// uplink (lags delay initiating transmissions, not receiving).
    pub fn begin_slot(&mut self, lags: &[u32]) {
        for v in 0..self.n() {
            let lagged = (self.slot as i64) < lags.get(v).copied().unwrap_or(0) as i64;
            self.residual_up[v] =
                if self.active[v] && !lagged { self.capacities[v].up_chunks } else { 0 };
            self.residual_down[v] = if self.active[v] { self.capacities[v].down_chunks } else { 0 };
        }
        self.sent_per_slot.push(vec![0; self.n()]);
    }

    /// Remove a node from the active set; pending directives involving it
    /// are skipped from now on.
    pub fn mark_inactive(&mut self, node: NodeId, reason: &str) {
        if self.active[node.index()] {
            self.active[node.index()] = false;
            self.inactive_reasons[node.index()] = Some(reason.to_string());
            self.residual_up[node.index()] = 0;
            self.residual_down[node.index()] = 0;
        }
    }

    /// Nodes that have not made progress within `timeout` slots are marked
    /// inactive. A timeout of 0 disables the check.
    pub fn apply_progress_timeout(&mut self, timeout: u32) {
        if timeout == 0 {
            return;
        }
        for v in 0..self.n() {
            if self.active[v] && self.slot - self.last_progress[v] >= timeout as i32 {
                self.mark_inactive(NodeId(v as u32), "progress_timeout");
            }
        }
    }

    fn next_spray_pseudonym(&mut self, sender: NodeId) -> Pseudonym {
        let tag = self.spray_serial[sender.index()];
        self.spray_serial[sender.index()] += 1;
        Pseudonym::spray_of(sender, self.round, tag)
    }

    /// Execute the pre-round spray. Spray transfers are tracker-tunneled:
    /// off-overlay, exempt from slot budgets, carrying one-off pseudonyms.
    pub fn execute_spray(&mut self, directives: &[TransferDirective]) -> Vec<TransferDirective> {
        let mut executed = Vec::with_capacity(directives.len());
        for d in directives {
            debug_assert!(d.is_spray());
            if !self.active[d.sender.index()] || !self.active[d.receiver.index()] {
                self.violations.push(Violation::InactiveParty {
                    directive: *d,
                    node: if self.active[d.sender.index()] { d.receiver } else { d.sender },
                });
                continue;
            }
            if self.inventories[d.receiver.index()].insert(&self.universe, d.chunk) {
                let pseudonym = self.next_spray_pseudonym(d.sender);
                self.observations.push(ObservationRecord {
                    observer: d.receiver,
                    sender_pseudonym: pseudonym,
                    chunk: d.chunk,
                    slot: -1,
                    phase: Phase::Spray,
                });
                self.delivered.insert((d.receiver, d.chunk));
                executed.push(*d);
            }
        }
        executed
    }

    /// Apply one slot's directives.
    ///
    /// Execution order is a stable sort by `(sender, receiver, chunk)` -- the
    /// deterministic tie-break for whatever order schedulers emitted.
    /// Directives that exceed a residual budget are deferred; directives
    /// whose receiver already holds the chunk are deferred for cancellation
    /// by the round loop; Byzantine withhold/delay defers; lied-bitfield
    /// transfers of chunks the sender lacks execute as failed deliveries.
    pub fn step(&mut self, directives: &[TransferDirective]) -> StepOutcome {
        let mut ordered: Vec<TransferDirective> = directives.to_vec();
        ordered.sort_by_key(|d| (d.sender, d.receiver, d.chunk));

        let mut out = StepOutcome::default();
        for d in ordered {
            debug_assert_eq!(d.stage, self.slot, "directive targets current stage");
            if !self.active[d.sender.index()] {
                out.violations.push(Violation::InactiveParty { directive: d, node: d.sender });
                continue;
            }
            if !self.active[d.receiver.index()] {
                out.violations.push(Violation::InactiveParty { directive: d, node: d.receiver });
                continue;
            }
            if self.inventories[d.receiver.index()].holds(&self.universe, d.chunk) {
                // Receiver already holds it: defer; the round loop cancels.
                out.deferred.push(d);
                continue;
            }
            if self.residual_up[d.sender.index()] == 0 || self.residual_down[d.receiver.index()] == 0
            {
                out.deferred.push(d);
                continue;
            }
            // Byzantine sender deviations. Withheld and delayed transfers
            // move nothing, so no budget is charged.
            if let Some(b) = self.byz.get(&d.sender.0).cloned() {
                if b.withhold > 0.0 && self.fault_rng.gen::<f64>() < b.withhold {
                    out.deferred.push(d);
                    continue;
                }
                if b.delay > 0 {
                    let key = (d.sender, d.receiver, d.chunk);
                    let release =
                        *self.delayed_until.entry(key).or_insert(self.slot + b.delay as i32);
                    if self.slot < release {
                        out.deferred.push(d);
                        continue;
                    }
                }
            }
            let sender_holds = self.inventories[d.sender.index()].holds(&self.universe, d.chunk);
            if !sender_holds {
                // Scheduled off a lied bitfield: bytes move, hash check fails,
                // payload discarded. Budgets are charged; no inventory change.
                self.residual_up[d.sender.index()] -= 1;
                self.residual_down[d.receiver.index()] -= 1;
                self.sent_per_slot.last_mut().unwrap()[d.sender.index()] += 1;
                self.failed.insert((d.receiver, d.chunk));
                out.violations.push(Violation::FailedDelivery { directive: d });
                continue;
            }

            let mut d = d;
            if self.failed.contains(&(d.receiver, d.chunk)) {
                d.flags = d.flags.union(DirectiveFlags::RETRY);
            }
            self.residual_up[d.sender.index()] -= 1;
            self.residual_down[d.receiver.index()] -= 1;
            self.sent_per_slot.last_mut().unwrap()[d.sender.index()] += 1;
            self.inventories[d.receiver.index()].insert(&self.universe, d.chunk);
            self.delivered.insert((d.receiver, d.chunk));
            self.last_progress[d.sender.index()] = self.slot;
            self.last_progress[d.receiver.index()] = self.slot;
            self.observations.push(ObservationRecord {
                observer: d.receiver,
                sender_pseudonym: Pseudonym::round_of(d.sender, self.round),
                chunk: d.chunk,
                slot: self.slot,
                phase: self.phase,
            });

            // Per-transfer owner-fraction accounting for honest senders.
            if self.phase == Phase::Warmup && !self.is_byzantine(d.sender) {
                if d.is_emergency() {
                    self.emergency_sends += 1;
                } else if self.crossed_threshold[d.sender.index()] {
                    self.total_sends_post_threshold += 1;
                    if d.chunk.owner == d.sender {
                        self.owner_sends_post_threshold += 1;
                    }
                }
                let b = self.eligible_sizes[d.sender.index()];
                let o = self.owner_eligible_sizes[d.sender.index()];
                if b > 0 {
                    let bm = &mut self.buffer_min[d.sender.index()];
                    *bm = (*bm).min(b);
                }
                let om = &mut self.owner_eligible_max[d.sender.index()];
                *om = (*om).max(o);
            }
            out.executed.push(d);
        }
        out
    }

    /// Was this (receiver, chunk) pair ever delivered (successfully)?
    pub fn was_delivered(&self, receiver: NodeId, chunk: ChunkId) -> bool {
        self.delivered.contains(&(receiver, chunk))
    }

    /// Chunks sent system-wide in slot `s`.
    pub fn sent_in_slot(&self, s: usize) -> u64 {
        self.sent_per_slot.get(s).map(|v| v.iter().map(|&c| c as u64).sum()).unwrap_or(0)
    }
}

/// Normalized utilization over horizon `H`:
/// `sum_{s<H,v} sent_v[s] / (H * sum_v u_v)` in chunk units.
pub fn utilization(sent_per_slot: &[Vec<u32>], capacities: &[Capacities], horizon: usize) -> f64 {
    assert!(horizon >= 1);
    let cap_total: u64 = capacities.iter().map(|c| c.up_chunks as u64).sum();
    if cap_total == 0 {
        return 0.0;
    }
    let sent: u64 = sent_per_slot
        .iter()
        .take(horizon)
        .map(|slot| slot.iter().map(|&c| c as u64).sum::<u64>())
        .sum();
    sent as f64 / (horizon as u64 * cap_total) as f64
}

/// Render the observation log as CSV
/// (`slot,observer,sender_pseudonym,chunk_owner,chunk_index,phase`).
pub fn observations_csv(observations: &[ObservationRecord]) -> String {
    let mut out = String::from("slot,observer,sender_pseudonym,chunk_owner,chunk_index,phase\n");
    for o in observations {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.slot, o.observer, o.sender_pseudonym, o.chunk.owner, o.chunk.index, o.phase
        ));
    }
    out
}
