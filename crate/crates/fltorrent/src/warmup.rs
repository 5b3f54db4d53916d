//! The warm-up unlinkability mechanisms: pre-round spray, randomized start
//! lags, cover-set gating with owner throttling, and warm-up termination.
//!
//! A sender's *eligible buffer* is what it may upload during warm-up: all
//! held non-owner (relay) chunks, plus -- only once its total inventory has
//! reached `k_beta` -- a rotating window of at most `kappa` of its own
//! chunks. Below the threshold, owner chunks move only through flagged
//! emergency releases, which keep a starving warm-up live.

use crate::engine::{DirectiveFlags, TransferDirective};
use crate::model::{ChunkId, ChunkUniverse, Inventory, NodeId};
use crate::overlay::Overlay;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;

/// Per-round warm-up bookkeeping shared by the schedulers and the driver.
#[derive(Debug, Clone)]
pub struct WarmupState {
    /// Start lags, uniform over `{0, .., t_lag - 1}` slots.
    pub lags: Vec<u32>,
    /// (recipient, chunk) pairs seeded by the pre-round spray.
    pub sprayed: Vec<(NodeId, ChunkId)>,
    /// Rotation cursor over each node's own chunk indices.
    rotation: Vec<u32>,
    /// Whether each node has reached the cover threshold.
    pub crossed_threshold: Vec<bool>,
    /// Chunks this node's owner released under the emergency rule, still
    /// serveable this stage.
    pub emergency_open: Vec<Vec<ChunkId>>,
    pub emergency_releases: u64,
}

impl WarmupState {
    pub fn new(n: usize) -> Self {
        WarmupState {
            lags: vec![0; n],
            sprayed: Vec::new(),
            rotation: vec![0; n],
            crossed_threshold: vec![false; n],
            emergency_open: vec![Vec::new(); n],
            emergency_releases: 0,
        }
    }

    /// Re-evaluate cover-threshold crossings. Crossing is permanent within a
    /// round because inventories only grow.
    pub fn update_thresholds(&mut self, inventories: &[Inventory], k_beta: u32) {
        for (v, inv) in inventories.iter().enumerate() {
            if inv.held() >= k_beta {
                self.crossed_threshold[v] = true;
            }
        }
    }

    /// Advance the per-node owner-chunk rotation by `kappa` indices so all
    /// owner chunks eventually circulate.
    pub fn advance_rotation(&mut self, universe: &ChunkUniverse, kappa: u32) {
        for v in 0..self.rotation.len() {
            let k = universe.chunks_of(NodeId(v as u32));
            if k > 0 {
                self.rotation[v] = (self.rotation[v] + kappa) % k;
            }
        }
    }

    /// The post-threshold owner window: up to `kappa` consecutive own chunk
    /// indices (cyclic) starting at the rotation cursor.
    pub fn owner_window(&self, universe: &ChunkUniverse, node: NodeId, kappa: u32) -> Vec<ChunkId> {
        let k = universe.chunks_of(node);
        let span = kappa.min(k);
        (0..span)
            .map(|i| ChunkId {
                owner: node,
                round: universe.round(),
                index: (self.rotation[node.index()] + i) % k + 1,
            })
            .collect()
    }

    pub fn begin_stage(&mut self) {
        for open in &mut self.emergency_open {
            open.clear();
        }
    }
}

/// Sample i.i.d. start lags, uniform over `{0, .., t_lag - 1}`.
pub fn sample_lags(n: u32, t_lag: u32, seed: u64) -> Vec<u32> {
    assert!(t_lag >= 1);
    let mut rng = rng::stream(seed, rng::Domain::Lags);
    (0..n).map(|_| rng.gen_range(0..t_lag)).collect()
}

/// Plan the pre-round spray: for each node, `floor(R * K_v)` distinct owner
/// chunks, each tunneled to a uniformly random non-neighbor. Executed before
/// slot 0 under one-off pseudonyms; not charged to round budgets.
///
/// Nodes with no non-neighbor (complete overlay) are skipped; their ids are
/// returned as warnings.
pub fn preround_spray(
    overlay: &Overlay,
    universe: &ChunkUniverse,
    spray_ratio: f64,
    seed: u64,
) -> (Vec<TransferDirective>, Vec<NodeId>) {
    assert!((0.0..1.0).contains(&spray_ratio));
    let mut rng = rng::stream(seed, rng::Domain::Spray);
    let mut directives = Vec::new();
    let mut skipped = Vec::new();
    for v in 0..overlay.n() {
        let v = NodeId(v);
        let k_v = universe.chunks_of(v);
        let count = (spray_ratio * k_v as f64).floor() as u32;
        if count == 0 {
            continue;
        }
        let non_neighbors = overlay.non_neighbors(v);
        if non_neighbors.is_empty() {
            skipped.push(v);
            continue;
        }
        let mut indices: Vec<u32> = (1..=k_v).collect();
        indices.shuffle(&mut rng);
        for &index in indices.iter().take(count as usize) {
            let recipient = non_neighbors[rng.gen_range(0..non_neighbors.len())];
            directives.push(TransferDirective {
                stage: -1,
                sender: v,
                receiver: recipient,
                chunk: ChunkId { owner: v, round: universe.round(), index },
                flags: DirectiveFlags::SPRAY,
            });
        }
    }
    (directives, skipped)
}

/// The serve-eligible chunk set of `node` at this instant: all held
/// non-owner chunks, plus the owner window once the node has crossed
/// `k_beta`, plus any emergency-released owner chunks this stage.
pub fn eligible_buffer(
    node: NodeId,
    inventory: &Inventory,
    state: &WarmupState,
    universe: &ChunkUniverse,
    k_beta: u32,
    kappa: u32,
) -> Vec<ChunkId> {
    let own_range = universe.owner_range(node);
    let mut out: Vec<ChunkId> = inventory
        .iter_held_positions()
        .filter(|p| !own_range.contains(p))
        .map(|p| universe.chunk_at(p))
        .collect();
    if inventory.held() >= k_beta {
        out.extend(state.owner_window(universe, node, kappa));
    } else {
        out.extend(state.emergency_open[node.index()].iter().copied());
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Owner chunks currently eligible for `node` (the `O_u` of the buffer).
pub fn owner_eligible(
    node: NodeId,
    inventory: &Inventory,
    state: &WarmupState,
    universe: &ChunkUniverse,
    k_beta: u32,
    kappa: u32,
) -> Vec<ChunkId> {
    if inventory.held() >= k_beta {
        state.owner_window(universe, node, kappa)
    } else {
        state.emergency_open[node.index()].clone()
    }
}

/// Warm-up termination decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupDecision {
    Continue,
    /// Every active node's inventory has reached `k_beta`.
    SwitchToBt,
    /// Deadline hit with stragglers: revert to vanilla BitTorrent and void
    /// the round's unlinkability guarantee.
    FailOpen,
}

pub fn warmup_complete(
    inventories: &[Inventory],
    active: &[bool],
    k_beta: u32,
    slot: u32,
    s_max: u32,
) -> WarmupDecision {
    let all_covered = inventories
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .all(|(inv, _)| inv.held() >= k_beta);
    if all_covered {
        WarmupDecision::SwitchToBt
    } else if slot >= s_max {
        WarmupDecision::FailOpen
    } else {
        WarmupDecision::Continue
    }
}
