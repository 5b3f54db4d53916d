//! Core domain types, unit conversions, and round configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("cover ratio beta={0} out of range (0, 1]")]
    BetaOutOfRange(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Index of a client within a round, in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a receiver sees as the sender identity of a transfer.
///
/// Round pseudonyms are stable within a round. Spray pseudonyms are one-off:
/// every spray transfer carries a fresh `tag`, so no two sprays (and no spray
/// and round pseudonym) ever compare equal. Attacks treat pseudonyms as
/// opaque grouping keys; only ASR scoring may resolve them against ground
/// truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pseudonym {
    pub node: NodeId,
    pub round: u32,
    pub kind: PseudonymKind,
    /// 0 for round pseudonyms; a per-transfer serial for spray pseudonyms.
    pub tag: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PseudonymKind {
    Round,
    Spray,
}

impl Pseudonym {
    pub fn round_of(node: NodeId, round: u32) -> Self {
        Pseudonym { node, round, kind: PseudonymKind::Round, tag: 0 }
    }

    pub fn spray_of(node: NodeId, round: u32, tag: u32) -> Self {
        Pseudonym { node, round, kind: PseudonymKind::Spray, tag }
    }
}

impl std::fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            PseudonymKind::Round => write!(f, "R{}", self.node),
            PseudonymKind::Spray => write!(f, "S{}.{}", self.node, self.tag),
        }
    }
}

/// Analysis label for one fixed-size piece of an update: `(owner, round, index)`.
///
/// `index` is 1-based, in `[1, K_owner]`. These labels stand in for BitTorrent
/// descriptor + piece-index pairs; no payload bytes are modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkId {
    pub owner: NodeId,
    pub round: u32,
    pub index: u32,
}

/// Dense mapping between `ChunkId` labels and `[0, total)` positions.
///
/// Supports heterogeneous per-owner chunk counts via prefix offsets.
#[derive(Debug, Clone)]
pub struct ChunkUniverse {
    round: u32,
    counts: Vec<u32>,
    offsets: Vec<u32>,
    owners: Vec<u32>,
    total: u32,
}

impl ChunkUniverse {
    pub fn new(round: u32, counts: Vec<u32>) -> Self {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        offsets.push(0);
        for &k in &counts {
            acc += k;
            offsets.push(acc);
        }
        let mut owners = Vec::with_capacity(acc as usize);
        for (v, &k) in counts.iter().enumerate() {
            owners.extend(std::iter::repeat(v as u32).take(k as usize));
        }
        ChunkUniverse { round, counts, offsets, owners, total: acc }
    }

    pub fn homogeneous(round: u32, n: u32, k: u32) -> Self {
        Self::new(round, vec![k; n as usize])
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn n(&self) -> u32 {
        self.counts.len() as u32
    }

    /// Chunks published by `owner` (its `K_v`).
    pub fn chunks_of(&self, owner: NodeId) -> u32 {
        self.counts[owner.index()]
    }

    /// Total universe size `|C^r| = sum_v K_v`.
    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn position(&self, chunk: ChunkId) -> usize {
        debug_assert!(chunk.index >= 1 && chunk.index <= self.counts[chunk.owner.index()]);
        (self.offsets[chunk.owner.index()] + chunk.index - 1) as usize
    }

    pub fn chunk_at(&self, pos: usize) -> ChunkId {
        debug_assert!(pos < self.total as usize);
        let owner = self.owners[pos];
        ChunkId {
            owner: NodeId(owner),
            round: self.round,
            index: pos as u32 - self.offsets[owner as usize] + 1,
        }
    }

    pub fn owner_of_pos(&self, pos: usize) -> NodeId {
        NodeId(self.owners[pos])
    }

    /// Positions `[start, end)` of `owner`'s chunks.
    pub fn owner_range(&self, owner: NodeId) -> std::ops::Range<usize> {
        let i = owner.index();
        self.offsets[i] as usize..self.offsets[i + 1] as usize
    }

    pub fn iter_chunks(&self) -> impl Iterator<Item = ChunkId> + '_ {
        (0..self.total as usize).map(move |p| self.chunk_at(p))
    }
}

/// Per-node bitset over the round's chunk universe.
///
/// Grows monotonically within a round; the owner partition is implied by the
/// universe's owner ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventory {
    owner: NodeId,
    bits: Vec<u64>,
    held: u32,
    own_held: u32,
}

impl Inventory {
    /// Start-of-round inventory: the node holds exactly its own chunks.
    pub fn initial(universe: &ChunkUniverse, owner: NodeId) -> Self {
        let words = (universe.total() as usize + 63) / 64;
        let mut inv = Inventory { owner, bits: vec![0; words], held: 0, own_held: 0 };
        for pos in universe.owner_range(owner) {
            inv.insert_pos(pos, true);
        }
        inv
    }

    /// Empty inventory (used for tracker-side scratch views).
    pub fn empty(universe: &ChunkUniverse, owner: NodeId) -> Self {
        let words = (universe.total() as usize + 63) / 64;
        Inventory { owner, bits: vec![0; words], held: 0, own_held: 0 }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn holds_pos(&self, pos: usize) -> bool {
        self.bits[pos / 64] >> (pos % 64) & 1 == 1
    }

    pub fn holds(&self, universe: &ChunkUniverse, chunk: ChunkId) -> bool {
        self.holds_pos(universe.position(chunk))
    }

    fn insert_pos(&mut self, pos: usize, own: bool) -> bool {
        let w = &mut self.bits[pos / 64];
        let mask = 1u64 << (pos % 64);
        if *w & mask == 0 {
            *w |= mask;
            self.held += 1;
            if own {
                self.own_held += 1;
            }
            true
        } else {
            false
        }
    }

    /// Add a chunk; returns false if already held. Inventories never shrink.
    pub fn insert(&mut self, universe: &ChunkUniverse, chunk: ChunkId) -> bool {
        self.insert_pos(universe.position(chunk), chunk.owner == self.owner)
    }

    /// Total chunks held, `|C_v[s]|`.
    pub fn held(&self) -> u32 {
        self.held
    }

    /// Held chunks owned by this node (`<= K_v` always).
    pub fn own_held(&self) -> u32 {
        self.own_held
    }

    /// Held chunks owned by other nodes (the non-owner mass).
    pub fn nonowner_held(&self) -> u32 {
        self.held - self.own_held
    }

    pub fn iter_held_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            let mut out = Vec::with_capacity(w.count_ones() as usize);
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                out.push(wi * 64 + b);
                w &= w - 1;
            }
            out
        })
    }

    /// True iff every chunk position in `range` is held.
    pub fn holds_all(&self, range: std::ops::Range<usize>) -> bool {
        range.clone().all(|p| self.holds_pos(p))
    }
}

/// Link capacities of one node, in both raw bits/s and chunks/slot units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capacities {
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    pub up_chunks: u32,
    pub down_chunks: u32,
}

impl Capacities {
    /// Convert byte budgets to whole-chunk slot budgets (floor; no fractional
    /// chunks in flight).
    pub fn from_rates(uplink_bps: f64, downlink_bps: f64, slot_s: f64, chunk_bytes: u64) -> Self {
        Capacities {
            uplink_bps,
            downlink_bps,
            up_chunks: chunks_per_slot(uplink_bps, slot_s, chunk_bytes),
            down_chunks: chunks_per_slot(downlink_bps, slot_s, chunk_bytes),
        }
    }

    /// Build from whole-chunk budgets, back-filling witness bit rates.
    pub fn from_chunk_budgets(up: u32, down: u32, slot_s: f64, chunk_bytes: u64) -> Self {
        let bits = (chunk_bytes * 8) as f64 / slot_s;
        Capacities {
            uplink_bps: up as f64 * bits,
            downlink_bps: down as f64 * bits,
            up_chunks: up,
            down_chunks: down,
        }
    }
}

/// `k_beta = ceil(beta * |C^r|)`: the global cover-set threshold.
pub fn compute_k_beta(beta: f64, total_chunks: u32) -> Result<u32, ModelError> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(ModelError::BetaOutOfRange(beta));
    }
    Ok((beta * total_chunks as f64).ceil() as u32)
}

/// Whole chunks transferable per slot at `rate_bps`: `floor(rate * slot / (8 * chunk_bytes))`.
pub fn chunks_per_slot(rate_bps: f64, slot_s: f64, chunk_bytes: u64) -> u32 {
    assert!(rate_bps > 0.0 && slot_s > 0.0 && chunk_bytes > 0);
    (rate_bps * slot_s / (8.0 * chunk_bytes as f64)).floor() as u32
}

/// `h_u = max(0, k_beta - K_u)`: non-owner chunks a node must acquire before
/// the cover threshold can be met.
pub fn required_nonowner_mass(k_beta: u32, k_v: u32) -> u32 {
    k_beta.saturating_sub(k_v)
}

/// Warm-up scheduler selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    RandomFifo,
    RandomFf,
    GreedyFf,
    Flooding,
    Distributed,
    /// Offline bandwidth-optimal bound run; not intended for online use.
    Maxflow,
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SchedulerKind::RandomFifo => "random_fifo",
            SchedulerKind::RandomFf => "random_ff",
            SchedulerKind::GreedyFf => "greedy_ff",
            SchedulerKind::Flooding => "flooding",
            SchedulerKind::Distributed => "distributed",
            SchedulerKind::Maxflow => "maxflow",
        };
        f.write_str(s)
    }
}

/// Byzantine behavior of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ByzBehavior {
    /// Probability (per stage) of advertising chunks the node does not hold.
    #[serde(default)]
    pub lie_bitfield: f64,
    /// Probability (per scheduled transfer) of withholding it.
    #[serde(default)]
    pub withhold: f64,
    /// Delay every scheduled transfer by this many slots.
    #[serde(default)]
    pub delay: u32,
}

/// Fault injection plan for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FaultSpec {
    /// `(node, slot)` pairs: the node disconnects at the start of `slot`.
    #[serde(default)]
    pub dropouts: Vec<(u32, u32)>,
    /// Byzantine nodes and their behavior.
    #[serde(default)]
    pub byz_nodes: Vec<(u32, ByzBehavior)>,
    /// Mark a node inactive after this many slots without any executed
    /// transfer involving it. 0 disables the timeout.
    #[serde(default)]
    pub progress_timeout: u32,
}

fn default_chunk_bytes() -> u64 {
    262_144
}
fn default_slot_seconds() -> f64 {
    1.0
}
fn default_s_max() -> u32 {
    50_000
}
fn default_kappa() -> u32 {
    1
}
fn default_tau() -> u32 {
    4
}
fn default_t_lag() -> u32 {
    3
}
fn default_scheduler() -> SchedulerKind {
    SchedulerKind::GreedyFf
}
fn default_uplink_chunks() -> [u32; 2] {
    [7, 12]
}
fn default_downlink_chunks() -> [u32; 2] {
    [18, 60]
}
fn default_update_len() -> u32 {
    64
}

/// Full configuration of one simulated round. The seed determines the run.
///
/// Deserializable from TOML with keys identical to the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    /// Node count.
    pub n: u32,
    /// Minimum overlay degree.
    pub m: u32,
    /// Chunks per update (homogeneous `K` unless `k_per_node` is set).
    pub k: u32,
    /// Heterogeneous per-node chunk counts. Enables descriptor-size
    /// attribution; a warning is recorded when set.
    #[serde(default)]
    pub k_per_node: Option<Vec<u32>>,
    #[serde(default = "default_chunk_bytes")]
    pub chunk_bytes: u64,
    /// Slot duration in seconds (reported durations are slots x this).
    #[serde(default = "default_slot_seconds")]
    pub slot_seconds: f64,
    /// Round deadline slot.
    #[serde(default = "default_s_max")]
    pub s_max: u32,
    /// Global cover ratio in (0, 1].
    pub beta: f64,
    /// Pre-round spray ratio in [0, 1).
    #[serde(default)]
    pub spray_ratio: f64,
    /// Start lags are uniform over `{0, .., t_lag - 1}` slots.
    #[serde(default = "default_t_lag")]
    pub t_lag: u32,
    /// Owner-throttle: max simultaneously serve-eligible owner chunks.
    #[serde(default = "default_kappa")]
    pub kappa: u32,
    /// Max distinct receivers served per sender per stage.
    #[serde(default = "default_tau")]
    pub tau: u32,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerKind,
    pub seed: u64,
    #[serde(default)]
    pub fault_spec: Option<FaultSpec>,
    /// Per-node uplink budgets are drawn uniformly from this inclusive range
    /// of whole chunks per slot.
    #[serde(default = "default_uplink_chunks")]
    pub uplink_chunks: [u32; 2],
    #[serde(default = "default_downlink_chunks")]
    pub downlink_chunks: [u32; 2],
    /// Length of the synthetic update vectors used for aggregation.
    #[serde(default = "default_update_len")]
    pub update_len: u32,
}

impl RoundConfig {
    /// A config with the reference evaluation defaults at the given scale.
    pub fn defaults(n: u32, seed: u64) -> Self {
        RoundConfig {
            n,
            m: 10,
            k: 206,
            k_per_node: None,
            chunk_bytes: default_chunk_bytes(),
            slot_seconds: default_slot_seconds(),
            s_max: default_s_max(),
            beta: 0.10,
            spray_ratio: 0.2,
            t_lag: default_t_lag(),
            kappa: default_kappa(),
            tau: default_tau(),
            scheduler: SchedulerKind::GreedyFf,
            seed,
            fault_spec: None,
            uplink_chunks: default_uplink_chunks(),
            downlink_chunks: default_downlink_chunks(),
            update_len: default_update_len(),
        }
    }

    pub fn parse_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: RoundConfig =
            toml::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n == 0 {
            return err("n must be positive".into());
        }
        if self.n <= self.m {
            return err(format!("n={} must exceed minimum degree m={}", self.n, self.m));
        }
        if self.k == 0 {
            return err("k must be positive".into());
        }
        if let Some(ks) = &self.k_per_node {
            if ks.len() != self.n as usize {
                return err(format!("k_per_node has {} entries, expected n={}", ks.len(), self.n));
            }
            if ks.iter().any(|&k| k == 0) {
                return err("k_per_node entries must be positive".into());
            }
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(ModelError::BetaOutOfRange(self.beta));
        }
        if !(0.0..1.0).contains(&self.spray_ratio) {
            return err(format!("spray_ratio={} out of range [0, 1)", self.spray_ratio));
        }
        if self.t_lag == 0 {
            return err("t_lag must be >= 1".into());
        }
        if self.kappa == 0 {
            return err("kappa must be >= 1".into());
        }
        if self.tau == 0 {
            return err("tau must be >= 1".into());
        }
        if self.chunk_bytes == 0 || self.slot_seconds <= 0.0 {
            return err("chunk_bytes and slot_seconds must be positive".into());
        }
        if self.uplink_chunks[0] > self.uplink_chunks[1]
            || self.downlink_chunks[0] > self.downlink_chunks[1]
            || self.uplink_chunks[0] == 0
            || self.downlink_chunks[0] == 0
        {
            return err("chunk budget ranges must be non-empty and positive".into());
        }
        if let Some(fs) = &self.fault_spec {
            for (node, _) in &fs.dropouts {
                if *node >= self.n {
                    return err(format!("dropout node {node} out of range"));
                }
            }
            for (node, b) in &fs.byz_nodes {
                if *node >= self.n {
                    return err(format!("byzantine node {node} out of range"));
                }
                if !(0.0..=1.0).contains(&b.lie_bitfield) || !(0.0..=1.0).contains(&b.withhold) {
                    return err("byzantine probabilities must be in [0, 1]".into());
                }
            }
        }
        // k_beta must be computable and within the universe.
        let total = self.universe_counts().iter().sum::<u32>();
        let kb = compute_k_beta(self.beta, total)?;
        if kb > total {
            return err(format!("k_beta={kb} exceeds universe {total}"));
        }
        Ok(())
    }

    pub fn universe_counts(&self) -> Vec<u32> {
        match &self.k_per_node {
            Some(ks) => ks.clone(),
            None => vec![self.k; self.n as usize],
        }
    }

    pub fn universe(&self, round: u32) -> ChunkUniverse {
        ChunkUniverse::new(round, self.universe_counts())
    }

    pub fn k_beta(&self) -> u32 {
        let total: u32 = self.universe_counts().iter().sum();
        compute_k_beta(self.beta, total).expect("validated")
    }

    pub fn heterogeneous(&self) -> bool {
        self.k_per_node.is_some()
    }

    /// Stable digest of the semantically relevant fields, for log headers.
    pub fn digest_string(&self) -> String {
        format!(
            "n={};m={};k={};kpn={:?};cb={};ss={};smax={};beta={};R={};tlag={};kappa={};tau={};sched={};up={:?};down={:?};ulen={}",
            self.n, self.m, self.k, self.k_per_node, self.chunk_bytes, self.slot_seconds,
            self.s_max, self.beta, self.spray_ratio, self.t_lag, self.kappa, self.tau,
            self.scheduler, self.uplink_chunks, self.downlink_chunks, self.update_len
        )
    }
}
