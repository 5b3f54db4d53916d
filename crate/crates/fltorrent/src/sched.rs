//! Warm-up stage schedulers.
//!
//! Four centralized heuristics (RandomFIFO, RandomFastestFirst,
//! GreedyFastestFirst, plus the offline max-flow mode driven from
//! [`crate::maxflow`]), uncoordinated flooding, and distributed scheduling
//! over neighborhood-level announcements. All centralized schedulers apply
//! the non-owner-first refinement and the owner-release liveness rule.
//!
//! Demand model: each stage, every receiver's missing set is sampled
//! uniformly at random (bounded oversampling of its downlink budget) and the
//! per-receiver samples are merged in seeded-random order. This realizes the
//! "all (receiver, missing chunk) requests in random order, truncated by
//! budgets" contract without materializing the full cross product, and keeps
//! request demand origin-oblivious.

use crate::engine::{DirectiveFlags, TransferDirective};
use crate::model::{ChunkId, ChunkUniverse, Inventory, NodeId, SchedulerKind};
use crate::overlay::Overlay;
use crate::warmup::WarmupState;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::HashSet;

/// How many candidate requests to sample per unit of downlink budget. Large
/// enough that senders stay saturated when supply exists.
const OVERSAMPLE: u32 = 4;

/// Per-(node, chunk) availability bookkeeping, maintained incrementally as
/// deliveries happen.
///
/// For every node `v` it tracks, over the chunks `v` is missing, how many of
/// `v`'s neighbors hold each chunk, bucketed by that holder count. This
/// yields O(1) updates per delivery, uniform sampling of missing sets for
/// warm-up demand, and rarest-first selection for the BitTorrent phase.
pub struct AvailabilityIndex {
    /// neighbor holder count per (node, chunk position), saturating
    counts: Vec<Vec<u8>>,
    /// per node: bucket[r] lists missing positions with holder count r (>= 1)
    buckets: Vec<Vec<Vec<u32>>>,
    /// location of a position inside its bucket; NONE when not bucketed
    slot_of: Vec<Vec<u32>>,
    /// global replica count per position (holders including the owner)
    replicas: Vec<u32>,
    missing_total: Vec<u32>,
}

const NONE_SLOT: u32 = u32::MAX;
const MAX_RARITY: usize = 255;

impl AvailabilityIndex {
    /// Build from current inventories.
    pub fn new(universe: &ChunkUniverse, overlay: &Overlay, inventories: &[Inventory]) -> Self {
        let n = universe.n() as usize;
        let total = universe.total() as usize;
        let mut idx = AvailabilityIndex {
            counts: vec![vec![0; total]; n],
            buckets: (0..n).map(|_| vec![Vec::new(); MAX_RARITY + 1]).collect(),
            slot_of: vec![vec![NONE_SLOT; total]; n],
            replicas: vec![0; total],
            missing_total: vec![0; n],
        };
        for (w, inv) in inventories.iter().enumerate() {
            let positions: Vec<usize> = inv.iter_held_positions().collect();
            for pos in positions {
                idx.on_gain(NodeId(w as u32), pos, overlay, inventories);
            }
        }
        idx
    }

    fn bucket_insert(&mut self, v: usize, pos: u32, rarity: usize) {
        self.slot_of[v][pos as usize] = self.buckets[v][rarity].len() as u32;
        self.buckets[v][rarity].push(pos);
        self.missing_total[v] += 1;
    }

    fn bucket_remove(&mut self, v: usize, pos: u32, rarity: usize) {
        let slot = self.slot_of[v][pos as usize];
        debug_assert_ne!(slot, NONE_SLOT);
        let bucket = &mut self.buckets[v][rarity];
        bucket.swap_remove(slot as usize);
        if let Some(&moved) = bucket.get(slot as usize) {
            self.slot_of[v][moved as usize] = slot;
        }
        self.slot_of[v][pos as usize] = NONE_SLOT;
        self.missing_total[v] -= 1;
    }

    /// Record that `w` now holds `pos`. `inventories` must already reflect
    /// the gain.
    pub fn on_gain(&mut self, w: NodeId, pos: usize, overlay: &Overlay, inventories: &[Inventory]) {
        self.replicas[pos] += 1;
        // w no longer misses pos.
        if self.slot_of[w.index()][pos] != NONE_SLOT {
            let r = (self.counts[w.index()][pos] as usize).min(MAX_RARITY);
            self.bucket_remove(w.index(), pos as u32, r);
        }
        // Each neighbor sees one more holder.
        for &v in overlay.neighbors(w) {
            let v = v as usize;
            let old = self.counts[v][pos];
            let new = old.saturating_add(1);
            self.counts[v][pos] = new;
            if inventories[v].holds_pos(pos) {
                continue;
            }
            let (old_r, new_r) = (old as usize, (new as usize).min(MAX_RARITY));
            if old == 0 {
                self.bucket_insert(v, pos as u32, new_r);
            } else if old_r != new_r {
                self.bucket_remove(v, pos as u32, old_r);
                self.bucket_insert(v, pos as u32, new_r);
            }
        }
    }

    /// Number of `v`'s neighbors holding `pos`.
    pub fn holder_count(&self, v: NodeId, pos: usize) -> u32 {
        self.counts[v.index()][pos] as u32
    }

    /// Holders of `pos` swarm-wide (including the owner).
    pub fn replica_count(&self, pos: usize) -> u32 {
        self.replicas[pos]
    }

    /// Size of `v`'s missing set (missing chunks held by >= 1 neighbor).
    pub fn missing_len(&self, v: NodeId) -> u32 {
        self.missing_total[v.index()]
    }

    /// All missing positions of `v` that some neighbor holds.
    pub fn iter_missing(&self, v: NodeId) -> impl Iterator<Item = u32> + '_ {
        self.buckets[v.index()].iter().flatten().copied()
    }

    /// Uniform sample (without replacement) of up to `count` positions from
    /// `v`'s missing set.
    pub fn sample_missing(&self, v: NodeId, count: u32, rng: &mut ChaCha20Rng) -> Vec<u32> {
        let v = v.index();
        let total = self.missing_total[v];
        if total == 0 {
            return Vec::new();
        }
        if count >= total {
            return self.buckets[v].iter().flatten().copied().collect();
        }
        if count * 2 >= total {
            // Dense regime: materialize and partial-shuffle instead of
            // rejection sampling.
            let mut all: Vec<u32> = self.buckets[v].iter().flatten().copied().collect();
            let len = all.len();
            for i in 0..count as usize {
                let j = rng.gen_range(i..len);
                all.swap(i, j);
            }
            all.truncate(count as usize);
            return all;
        }
        let sizes: Vec<u32> = self.buckets[v].iter().map(|b| b.len() as u32).collect();
        let mut picked = HashSet::with_capacity(count as usize);
        let mut out = Vec::with_capacity(count as usize);
        while out.len() < count as usize {
            let mut idx = rng.gen_range(0..total);
            let mut bucket = 0;
            while idx >= sizes[bucket] {
                idx -= sizes[bucket];
                bucket += 1;
            }
            let pos = self.buckets[v][bucket][idx as usize];
            if picked.insert(pos) {
                out.push(pos);
            }
        }
        out
    }

    /// The `count` rarest missing positions of `v`; ties within the boundary
    /// rarity class break by a seeded partial shuffle.
    pub fn rarest_missing(&mut self, v: NodeId, count: u32, rng: &mut ChaCha20Rng) -> Vec<u32> {
        let v = v.index();
        let mut out: Vec<u32> = Vec::with_capacity(count as usize);
        for r in 1..=MAX_RARITY {
            let remaining = count as usize - out.len();
            if remaining == 0 {
                break;
            }
            if self.buckets[v][r].is_empty() {
                continue;
            }
            let len = self.buckets[v][r].len();
            if len <= remaining {
                out.extend_from_slice(&self.buckets[v][r]);
            } else {
                // Partial Fisher-Yates: a uniform `remaining`-subset.
                for i in 0..remaining {
                    let j = rng.gen_range(i..len);
                    self.buckets[v][r].swap(i, j);
                    let a = self.buckets[v][r][i];
                    let b = self.buckets[v][r][j];
                    self.slot_of[v][a as usize] = i as u32;
                    self.slot_of[v][b as usize] = j as u32;
                    out.push(a);
                }
            }
        }
        out
    }

    /// Missing set computed directly from the definition (union of neighbor
    /// holdings minus own). The incremental buckets must always agree.
    pub fn missing_set_direct(
        universe: &ChunkUniverse,
        overlay: &Overlay,
        inventories: &[Inventory],
        v: NodeId,
    ) -> Vec<u32> {
        let mut union: Vec<bool> = vec![false; universe.total() as usize];
        for &u in overlay.neighbors(v) {
            for pos in inventories[u as usize].iter_held_positions() {
                union[pos] = true;
            }
        }
        (0..universe.total() as usize)
            .filter(|&p| union[p] && !inventories[v.index()].holds_pos(p))
            .map(|p| p as u32)
            .collect()
    }
}

/// Neighborhood-level availability: the union over a node's neighbors
/// without the chunk-to-neighbor mapping.
#[derive(Debug, Clone)]
pub struct NeighborhoodAnnouncement {
    pub node: NodeId,
    pub available: Vec<u32>,
}

pub fn announcement_for(
    universe: &ChunkUniverse,
    overlay: &Overlay,
    inventories: &[Inventory],
    v: NodeId,
) -> NeighborhoodAnnouncement {
    let mut union: Vec<bool> = vec![false; universe.total() as usize];
    for &u in overlay.neighbors(v) {
        for pos in inventories[u as usize].iter_held_positions() {
            union[pos] = true;
        }
    }
    let available =
        (0..universe.total() as usize).filter(|&p| union[p]).map(|p| p as u32).collect();
    NeighborhoodAnnouncement { node: v, available }
}

/// Stable partition of candidate holders: non-owners of `chunk` first
/// (preserving the scheduler's internal order), the owner last.
pub fn non_owner_first(candidates: &[NodeId], chunk: ChunkId) -> Vec<NodeId> {
    let (relays, owners): (Vec<NodeId>, Vec<NodeId>) =
        candidates.iter().partition(|&&u| u != chunk.owner);
    relays.into_iter().chain(owners).collect()
}

/// Everything a scheduler may look at for one warm-up stage.
pub struct StageView<'a> {
    pub universe: &'a ChunkUniverse,
    pub overlay: &'a Overlay,
    pub stage: u32,
    pub k_beta: u32,
    pub kappa: u32,
    pub tau: u32,
    pub inventories: &'a [Inventory],
    pub active: &'a [bool],
    pub residual_up: &'a [u32],
    pub residual_down: &'a [u32],
    /// positions a Byzantine node advertises without holding, per node
    pub advertised_extra: Vec<Vec<u32>>,
    /// post-threshold owner windows (positions), per node
    pub owner_windows: Vec<Vec<u32>>,
    pub crossed: Vec<bool>,
}

impl<'a> StageView<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        universe: &'a ChunkUniverse,
        overlay: &'a Overlay,
        stage: u32,
        k_beta: u32,
        kappa: u32,
        tau: u32,
        inventories: &'a [Inventory],
        active: &'a [bool],
        residual_up: &'a [u32],
        residual_down: &'a [u32],
        warmup: &WarmupState,
    ) -> Self {
        let n = universe.n() as usize;
        let mut owner_windows = vec![Vec::new(); n];
        let mut crossed = vec![false; n];
        for v in 0..n {
            crossed[v] = inventories[v].held() >= k_beta;
            if crossed[v] {
                owner_windows[v] = warmup
                    .owner_window(universe, NodeId(v as u32), kappa)
                    .iter()
                    .map(|c| universe.position(*c) as u32)
                    .collect();
            }
        }
        StageView {
            universe,
            overlay,
            stage,
            k_beta,
            kappa,
            tau,
            inventories,
            active,
            residual_up,
            residual_down,
            advertised_extra: vec![Vec::new(); n],
            owner_windows,
            crossed,
        }
    }

    fn advertises(&self, u: usize, pos: usize) -> bool {
        self.inventories[u].holds_pos(pos) || self.advertised_extra[u].contains(&(pos as u32))
    }

    /// Is `pos` in `u`'s eligible serving buffer (as the tracker sees it)?
    pub fn eligible(&self, u: usize, pos: usize) -> bool {
        if !self.advertises(u, pos) {
            return false;
        }
        if self.universe.owner_of_pos(pos).index() == u {
            self.crossed[u] && self.owner_windows[u].contains(&(pos as u32))
        } else {
            true
        }
    }

    /// Eligible buffer size and owner-eligible count per node, recorded at
    /// serving instants for the bound reports.
    pub fn buffer_sizes(&self) -> (Vec<u32>, Vec<u32>) {
        let n = self.inventories.len();
        let mut total = vec![0u32; n];
        let mut own = vec![0u32; n];
        for v in 0..n {
            let owner_count = if self.crossed[v] { self.owner_windows[v].len() as u32 } else { 0 };
            total[v] = self.inventories[v].nonowner_held() + owner_count;
            own[v] = owner_count;
        }
        (total, own)
    }
}

/// The missing-chunk set of `v`: chunks any neighbor advertises that `v`
/// does not hold.
pub fn missing_set(view: &StageView, v: NodeId) -> Vec<ChunkId> {
    let mut out: Vec<u32> =
        AvailabilityIndex::missing_set_direct(view.universe, view.overlay, view.inventories, v);
    for &u in view.overlay.neighbors(v) {
        for &pos in &view.advertised_extra[u as usize] {
            if !view.inventories[v.index()].holds_pos(pos as usize) {
                out.push(pos);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out.into_iter().map(|p| view.universe.chunk_at(p as usize)).collect()
}

/// Per-stage scheduling statistics, feeding the availability-factor estimate
/// and the liveness accounting.
#[derive(Debug, Default, Clone, Copy)]
pub struct StageStats {
    /// processed request instances
    pub requests: u64,
    /// requests with at least one non-owner holder available at schedule time
    pub relay_feasible: u64,
    /// requests with no feasible holder at all this stage
    pub starved: u64,
    /// distinct owner chunks released under the liveness rule
    pub emergency_released: u64,
}

#[derive(Debug, Default)]
pub struct SchedulePlan {
    pub directives: Vec<TransferDirective>,
    pub stats: StageStats,
}

struct Planner {
    up_left: Vec<u32>,
    down_left: Vec<u32>,
    receivers_of: Vec<Vec<u32>>,
    scheduled_pairs: HashSet<(u32, u32)>,
}

impl Planner {
    fn new(view: &StageView) -> Self {
        Planner {
            up_left: view.residual_up.to_vec(),
            down_left: view.residual_down.to_vec(),
            receivers_of: vec![Vec::new(); view.inventories.len()],
            scheduled_pairs: HashSet::new(),
        }
    }

    fn tau_allows(&self, tau: u32, sender: usize, receiver: u32) -> bool {
        let rs = &self.receivers_of[sender];
        rs.contains(&receiver) || (rs.len() as u32) < tau
    }

    fn can_send(&self, view: &StageView, sender: usize, receiver: u32) -> bool {
        self.up_left[sender] > 0 && self.tau_allows(view.tau, sender, receiver)
    }

    fn commit(&mut self, sender: usize, receiver: u32) {
        self.up_left[sender] -= 1;
        self.down_left[receiver as usize] -= 1;
        if !self.receivers_of[sender].contains(&receiver) {
            self.receivers_of[sender].push(receiver);
        }
    }
}

/// One sampled request: `receiver` misses `pos`; `key` fixes the global
/// processing order.
#[derive(Debug, Clone, Copy)]
struct Request {
    receiver: u32,
    pos: u32,
    key: u64,
}

fn sample_stage_requests(
    view: &StageView,
    avail: &AvailabilityIndex,
    rng: &mut ChaCha20Rng,
) -> Vec<Request> {
    let n = view.inventories.len();
    let mut requests = Vec::new();
    for w in 0..n {
        if !view.active[w] || view.residual_down[w] == 0 {
            continue;
        }
        let want = view.residual_down[w].saturating_mul(OVERSAMPLE);
        for pos in avail.sample_missing(NodeId(w as u32), want, rng) {
            requests.push(Request { receiver: w as u32, pos, key: rng.gen() });
        }
        // Phantom chunks advertised by lying neighbors become candidates too.
        for &u in view.overlay.neighbors(NodeId(w as u32)) {
            for &pos in &view.advertised_extra[u as usize] {
                if !view.inventories[w].holds_pos(pos as usize) {
                    requests.push(Request { receiver: w as u32, pos, key: rng.gen() });
                }
            }
        }
    }
    requests.sort_by_key(|r| r.key);
    requests
}

fn feasible_candidates(view: &StageView, planner: &Planner, r: &Request) -> Vec<NodeId> {
    view.overlay
        .neighbors(NodeId(r.receiver))
        .iter()
        .filter(|&&u| {
            view.active[u as usize]
                && planner.can_send(view, u as usize, r.receiver)
                && view.eligible(u as usize, r.pos as usize)
        })
        .map(|&u| NodeId(u))
        .collect()
}

/// Owner-release liveness rule: while some active node is still below
/// `k_beta`, a sender with leftover uplink may release up to `kappa` of its
/// own not-yet-relayed chunks per stage. Releases are flagged `EMERGENCY`,
/// counted, and excluded from bound-verification statistics.
fn owner_release_pass(
    view: &StageView,
    avail: &AvailabilityIndex,
    planner: &mut Planner,
    warmup: &mut WarmupState,
    plan: &mut SchedulePlan,
    rng: &mut ChaCha20Rng,
) {
    let n = view.inventories.len();
    let warmup_incomplete =
        (0..n).any(|v| view.active[v] && view.inventories[v].held() < view.k_beta);
    if !warmup_incomplete {
        return;
    }
    let mut senders: Vec<usize> = (0..n).filter(|&u| view.active[u]).collect();
    senders.shuffle(rng);
    for u in senders {
        if planner.up_left[u] == 0 {
            continue;
        }
        let node = NodeId(u as u32);
        let k_u = view.universe.chunks_of(node);
        let start = rng.gen_range(0..k_u);
        let mut released = 0u32;
        for step in 0..k_u {
            if released >= view.kappa || planner.up_left[u] == 0 {
                break;
            }
            let index = (start + step) % k_u + 1;
            let chunk = ChunkId { owner: node, round: view.universe.round(), index };
            let pos = view.universe.position(chunk);
            if !view.inventories[u].holds_pos(pos) || avail.replica_count(pos) > 1 {
                continue; // not held, or already relayed and covered by relays
            }
            let mut recipients: Vec<u32> = view
                .overlay
                .neighbors(node)
                .iter()
                .copied()
                .filter(|&w| {
                    view.active[w as usize]
                        && !view.inventories[w as usize].holds_pos(pos)
                        && planner.down_left[w as usize] > 0
                })
                .collect();
            if recipients.is_empty() {
                continue;
            }
            recipients.shuffle(rng);
            let mut sent_any = false;
            for w in recipients {
                if planner.up_left[u] == 0 || !planner.tau_allows(view.tau, u, w) {
                    break;
                }
                if !planner.scheduled_pairs.insert((w, pos as u32)) {
                    continue;
                }
                planner.commit(u, w);
                plan.directives.push(TransferDirective {
                    stage: view.stage as i32,
                    sender: node,
                    receiver: NodeId(w),
                    chunk,
                    flags: DirectiveFlags::SCHEDULED.union(DirectiveFlags::EMERGENCY),
                });
                sent_any = true;
            }
            if sent_any {
                released += 1;
                warmup.emergency_open[u].push(chunk);
                warmup.emergency_releases += 1;
                plan.stats.emergency_released += 1;
            }
        }
    }
}

fn schedule_centralized(
    kind: SchedulerKind,
    view: &StageView,
    avail: &AvailabilityIndex,
    warmup: &mut WarmupState,
    rng: &mut ChaCha20Rng,
) -> SchedulePlan {
    let mut plan = SchedulePlan::default();
    let mut planner = Planner::new(view);
    let requests = sample_stage_requests(view, avail, rng);

    match kind {
        SchedulerKind::RandomFifo | SchedulerKind::GreedyFf => {
            let mut assigned_count = vec![0u32; view.inventories.len()];
            for r in &requests {
                if planner.down_left[r.receiver as usize] == 0
                    || planner.scheduled_pairs.contains(&(r.receiver, r.pos))
                {
                    continue;
                }
                plan.stats.requests += 1;
                let chunk = view.universe.chunk_at(r.pos as usize);
                // Holder existence (budget-free) feeds the availability
                // factor estimate; assignment additionally needs budgets.
                let mut relay_exists = false;
                let mut holder_exists = false;
                for &u in view.overlay.neighbors(NodeId(r.receiver)) {
                    if view.active[u as usize] && view.eligible(u as usize, r.pos as usize) {
                        holder_exists = true;
                        if NodeId(u) != chunk.owner {
                            relay_exists = true;
                            break;
                        }
                    }
                }
                if relay_exists {
                    plan.stats.relay_feasible += 1;
                }
                if !holder_exists {
                    plan.stats.starved += 1;
                }
                let candidates = feasible_candidates(view, &planner, r);
                if candidates.is_empty() {
                    continue;
                }
                let ordered = non_owner_first(&candidates, chunk);
                let tier_len = if ordered[0] != chunk.owner {
                    ordered.iter().take_while(|&&u| u != chunk.owner).count()
                } else {
                    ordered.len()
                };
                let tier = &ordered[..tier_len];
                let sender = match kind {
                    SchedulerKind::RandomFifo => tier[rng.gen_range(0..tier.len())],
                    SchedulerKind::GreedyFf => {
                        // fastest feasible sender: argmax bottleneck rate;
                        // ties by fewer queued requests, then lowest id
                        *tier
                            .iter()
                            .max_by(|&&a, &&b| {
                                let ka = planner.up_left[a.index()]
                                    .min(planner.down_left[r.receiver as usize]);
                                let kb = planner.up_left[b.index()]
                                    .min(planner.down_left[r.receiver as usize]);
                                ka.cmp(&kb)
                                    .then(
                                        assigned_count[b.index()].cmp(&assigned_count[a.index()]),
                                    )
                                    .then(b.0.cmp(&a.0))
                            })
                            .unwrap()
                    }
                    _ => unreachable!(),
                };
                assigned_count[sender.index()] += 1;
                planner.commit(sender.index(), r.receiver);
                planner.scheduled_pairs.insert((r.receiver, r.pos));
                plan.directives.push(TransferDirective::scheduled(
                    view.stage as i32,
                    sender,
                    NodeId(r.receiver),
                    chunk,
                ));
            }
        }
        SchedulerKind::RandomFf => {
            // Route each request to a uniform random holder; each sender then
            // serves its queue fastest-requester-first up to tau receivers.
            let n = view.inventories.len();
            let mut queues: Vec<Vec<Request>> = vec![Vec::new(); n];
            let mut routed = HashSet::new();
            for r in &requests {
                if !routed.insert((r.receiver, r.pos)) {
                    continue;
                }
                plan.stats.requests += 1;
                let candidates: Vec<NodeId> = view
                    .overlay
                    .neighbors(NodeId(r.receiver))
                    .iter()
                    .filter(|&&u| {
                        view.active[u as usize] && view.eligible(u as usize, r.pos as usize)
                    })
                    .map(|&u| NodeId(u))
                    .collect();
                let chunk = view.universe.chunk_at(r.pos as usize);
                if candidates.iter().any(|&u| u != chunk.owner) {
                    plan.stats.relay_feasible += 1;
                }
                if candidates.is_empty() {
                    plan.stats.starved += 1;
                    continue;
                }
                let ordered = non_owner_first(&candidates, chunk);
                let tier_len = if ordered[0] != chunk.owner {
                    ordered.iter().take_while(|&&u| u != chunk.owner).count()
                } else {
                    ordered.len()
                };
                let sender = ordered[rng.gen_range(0..tier_len)];
                queues[sender.index()].push(*r);
            }
            for u in 0..n {
                if queues[u].is_empty() {
                    continue;
                }
                // descending bottleneck rate, stable in arrival order
                queues[u].sort_by_key(|r| {
                    std::cmp::Reverse(
                        planner.up_left[u].min(planner.down_left[r.receiver as usize]),
                    )
                });
                let queue = std::mem::take(&mut queues[u]);
                for r in queue {
                    if planner.up_left[u] == 0 {
                        break;
                    }
                    if planner.down_left[r.receiver as usize] == 0
                        || !planner.tau_allows(view.tau, u, r.receiver)
                        || planner.scheduled_pairs.contains(&(r.receiver, r.pos))
                    {
                        continue;
                    }
                    planner.commit(u, r.receiver);
                    planner.scheduled_pairs.insert((r.receiver, r.pos));
                    plan.directives.push(TransferDirective::scheduled(
                        view.stage as i32,
                        NodeId(u as u32),
                        NodeId(r.receiver),
                        view.universe.chunk_at(r.pos as usize),
                    ));
                }
            }
        }
        _ => unreachable!("not a centralized kind"),
    }

    owner_release_pass(view, avail, &mut planner, warmup, &mut plan, rng);
    plan
}

/// Flooding: every node independently pushes random (neighbor, eligible
/// chunk) pairs it has never pushed before. No tracker assignment; duplicate
/// deliveries are cancelled by the engine.
fn schedule_flooding(
    view: &StageView,
    avail: &AvailabilityIndex,
    warmup: &mut WarmupState,
    flood_history: &mut [HashSet<(u32, u32)>],
    rng: &mut ChaCha20Rng,
) -> SchedulePlan {
    let mut plan = SchedulePlan::default();
    let mut planner = Planner::new(view);
    let n = view.inventories.len();
    let mut order: Vec<usize> = (0..n).filter(|&u| view.active[u]).collect();
    order.shuffle(rng);
    for u in order {
        if planner.up_left[u] == 0 {
            continue;
        }
        let node = NodeId(u as u32);
        let own_range = view.universe.owner_range(node);
        let mut eligible: Vec<u32> = view.inventories[u]
            .iter_held_positions()
            .filter(|p| !own_range.contains(p))
            .map(|p| p as u32)
            .collect();
        eligible.extend(view.owner_windows[u].iter().copied());
        if eligible.is_empty() {
            continue;
        }
        let neighbors: Vec<u32> = view
            .overlay
            .neighbors(node)
            .iter()
            .copied()
            .filter(|&w| view.active[w as usize])
            .collect();
        if neighbors.is_empty() {
            continue;
        }
        let mut attempts = 0;
        let max_attempts = (planner.up_left[u] as usize) * 20;
        loop {
            if planner.up_left[u] == 0 {
                break;
            }
            let mut pick = None;
            while attempts < max_attempts {
                attempts += 1;
                let w = neighbors[rng.gen_range(0..neighbors.len())];
                let pos = eligible[rng.gen_range(0..eligible.len())];
                if planner.tau_allows(view.tau, u, w) && !flood_history[u].contains(&(w, pos)) {
                    pick = Some((w, pos));
                    break;
                }
            }
            if pick.is_none() {
                // Fall back to enumeration so "never repeat" stays exact.
                let mut all: Vec<(u32, u32)> = Vec::new();
                for &w in &neighbors {
                    if !planner.tau_allows(view.tau, u, w) {
                        continue;
                    }
                    for &pos in &eligible {
                        if !flood_history[u].contains(&(w, pos)) {
                            all.push((w, pos));
                        }
                    }
                }
                if all.is_empty() {
                    break;
                }
                pick = Some(all[rng.gen_range(0..all.len())]);
            }
            let (w, pos) = pick.unwrap();
            flood_history[u].insert((w, pos));
            planner.commit(u, w);
            plan.stats.requests += 1;
            plan.directives.push(TransferDirective::scheduled(
                view.stage as i32,
                node,
                NodeId(w),
                view.universe.chunk_at(pos as usize),
            ));
        }
    }
    owner_release_pass(view, avail, &mut planner, warmup, &mut plan, rng);
    plan
}

/// Distributed scheduling: each node requests against its neighborhood
/// announcement, broadcasts to all neighbors, and each holding neighbor
/// independently serves FIFO up to tau receivers. Duplicate deliveries are
/// possible and cancelled by the engine.
fn schedule_distributed(
    view: &StageView,
    avail: &AvailabilityIndex,
    warmup: &mut WarmupState,
    rng: &mut ChaCha20Rng,
) -> SchedulePlan {
    let mut plan = SchedulePlan::default();
    let mut planner = Planner::new(view);
    let n = view.inventories.len();
    let mut requests: Vec<Request> = Vec::new();
    for w in 0..n {
        if !view.active[w] || view.residual_down[w] == 0 {
            continue;
        }
        for pos in avail.sample_missing(NodeId(w as u32), view.residual_down[w], rng) {
            requests.push(Request { receiver: w as u32, pos, key: rng.gen() });
        }
    }
    requests.sort_by_key(|r| r.key);
    plan.stats.requests = requests.len() as u64;

    for r in &requests {
        let chunk = view.universe.chunk_at(r.pos as usize);
        let mut any_holder = false;
        let mut any_relay = false;
        for &u in view.overlay.neighbors(NodeId(r.receiver)) {
            let u = u as usize;
            if !view.active[u] || !view.eligible(u, r.pos as usize) {
                continue;
            }
            any_holder = true;
            if NodeId(u as u32) != chunk.owner {
                any_relay = true;
            }
            if planner.up_left[u] == 0 || !planner.tau_allows(view.tau, u, r.receiver) {
                continue;
            }
            planner.commit(u, r.receiver);
            plan.directives.push(TransferDirective::scheduled(
                view.stage as i32,
                NodeId(u as u32),
                NodeId(r.receiver),
                chunk,
            ));
        }
        if any_relay {
            plan.stats.relay_feasible += 1;
        }
        if !any_holder {
            plan.stats.starved += 1;
        }
    }
    owner_release_pass(view, avail, &mut planner, warmup, &mut plan, rng);
    plan
}

/// Run one warm-up stage of the selected scheduler. All schedulers are
/// deterministic functions of `(view, rng-state)`.
pub fn schedule_stage(
    kind: SchedulerKind,
    view: &StageView,
    avail: &AvailabilityIndex,
    warmup: &mut WarmupState,
    flood_history: &mut [HashSet<(u32, u32)>],
    rng: &mut ChaCha20Rng,
) -> SchedulePlan {
    match kind {
        SchedulerKind::RandomFifo | SchedulerKind::RandomFf | SchedulerKind::GreedyFf => {
            schedule_centralized(kind, view, avail, warmup, rng)
        }
        SchedulerKind::Flooding => schedule_flooding(view, avail, warmup, flood_history, rng),
        SchedulerKind::Distributed => schedule_distributed(view, avail, warmup, rng),
        SchedulerKind::Maxflow => {
            unreachable!("maxflow scheduling is driven by the bound module")
        }
    }
}
