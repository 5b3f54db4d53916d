//! Post-warm-up vanilla BitTorrent swarming and deadline FedAvg.
//!
//! After the cover threshold is met (or the round failed open), chunk
//! selection is origin-oblivious local rarest-first: each receiver requests
//! its rarest missing chunks (rarity = holder count among its neighbors,
//! ties seeded-random) and holders serve FIFO up to `tau` distinct
//! receivers. At the deadline every node aggregates over its reconstructable
//! set: the owners whose complete chunk sets it holds.

use crate::engine::TransferDirective;
use crate::model::{ChunkUniverse, Inventory, NodeId};
use crate::overlay::Overlay;
use crate::sched::AvailabilityIndex;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("node {0} cannot reconstruct any update by the deadline")]
    NothingReconstructable(NodeId),
    #[error("total weight is zero")]
    ZeroWeight,
}

/// One client's synthetic update: a fixed-length numeric vector plus a
/// positive scalar weight (its local sample count).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    pub owner: NodeId,
    pub weight: f64,
    pub values: Vec<f64>,
}

/// Seeded synthetic updates; length is identical across nodes.
pub fn synthesize_updates(n: u32, len: u32, rng: &mut ChaCha20Rng) -> Vec<UpdateVector> {
    (0..n)
        .map(|v| UpdateVector {
            owner: NodeId(v),
            weight: rng.gen_range(50u32..=500) as f64,
            values: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect()
}

/// Owners whose full chunk sets `v` holds at the deadline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconstructableSet {
    pub node: NodeId,
    pub members: Vec<NodeId>,
}

pub fn reconstructable_set(
    universe: &ChunkUniverse,
    inventory: &Inventory,
    v: NodeId,
) -> ReconstructableSet {
    let members = (0..universe.n())
        .map(NodeId)
        .filter(|&u| inventory.holds_all(universe.owner_range(u)))
        .collect();
    ReconstructableSet { node: v, members }
}

/// Weighted FedAvg over the reconstructable members, summed in ascending
/// owner id for bit-reproducibility across nodes.
pub fn fedavg(
    updates: &[UpdateVector],
    set: &ReconstructableSet,
) -> Result<Vec<f64>, AggregateError> {
    if set.members.is_empty() {
        return Err(AggregateError::NothingReconstructable(set.node));
    }
    let mut members = set.members.clone();
    members.sort_unstable();
    let total_weight: f64 = members.iter().map(|u| updates[u.index()].weight).sum();
    if total_weight <= 0.0 {
        return Err(AggregateError::ZeroWeight);
    }
    let len = updates[members[0].index()].values.len();
    let mut out = vec![0.0f64; len];
    for u in &members {
        let upd = &updates[u.index()];
        let w = upd.weight / total_weight;
        for (acc, x) in out.iter_mut().zip(&upd.values) {
            *acc += w * x;
        }
    }
    Ok(out)
}

/// Short checksum of an aggregate vector for the report CSV.
pub fn aggregate_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in values {
        h.update(x.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Plan one BitTorrent-phase stage.
///
/// Requests never target chunks the receiver holds; holder choice is
/// load-aware (most residual uplink, ties by lowest id), which keeps swarm
/// uplinks saturated and stays origin-oblivious.
#[allow(clippy::too_many_arguments)]
pub fn bt_step(
    universe: &ChunkUniverse,
    overlay: &Overlay,
    inventories: &[Inventory],
    active: &[bool],
    residual_up: &[u32],
    residual_down: &[u32],
    tau: u32,
    stage: i32,
    avail: &mut AvailabilityIndex,
    rng: &mut ChaCha20Rng,
) -> Vec<TransferDirective> {
    let n = inventories.len();
    struct Req {
        receiver: u32,
        pos: u32,
        key: u64,
    }
    let mut requests: Vec<Req> = Vec::new();
    for w in 0..n {
        if !active[w] || residual_down[w] == 0 {
            continue;
        }
        for pos in avail.rarest_missing(NodeId(w as u32), residual_down[w], rng) {
            requests.push(Req { receiver: w as u32, pos, key: rng.gen() });
        }
    }
    requests.sort_by_key(|r| r.key);

    let mut up_left = residual_up.to_vec();
    let mut down_left = residual_down.to_vec();
    let mut receivers_of: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut out = Vec::new();
    for r in &requests {
        if down_left[r.receiver as usize] == 0 {
            continue;
        }
        let mut best: Option<NodeId> = None;
        for &u in overlay.neighbors(NodeId(r.receiver)) {
            let ui = u as usize;
            if !active[ui] || up_left[ui] == 0 || !inventories[ui].holds_pos(r.pos as usize) {
                continue;
            }
            let rs = &receivers_of[ui];
            if !rs.contains(&r.receiver) && rs.len() as u32 >= tau {
                continue;
            }
            best = match best {
                None => Some(NodeId(u)),
                Some(b) => {
                    if up_left[ui] > up_left[b.index()] {
                        Some(NodeId(u))
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let Some(sender) = best else { continue };
        up_left[sender.index()] -= 1;
        down_left[r.receiver as usize] -= 1;
        if !receivers_of[sender.index()].contains(&r.receiver) {
            receivers_of[sender.index()].push(r.receiver);
        }
        out.push(TransferDirective::scheduled(
            stage,
            sender,
            NodeId(r.receiver),
            universe.chunk_at(r.pos as usize),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChunkId;
    use crate::rng;

    fn chunk(owner: u32, index: u32) -> ChunkId {
        ChunkId { owner: NodeId(owner), round: 0, index }
    }

    #[test]
    fn rarest_chunk_requested_first() {
        // receiver 0 has 6 neighbors; chunk A held by 1 of them, chunk B by 5
        let universe = ChunkUniverse::homogeneous(0, 8, 1);
        let edges: Vec<(u32, u32)> = (1..=6).map(|u| (0u32, u)).collect();
        let overlay = Overlay::from_edges(8, 1, &edges);
        let mut inventories: Vec<Inventory> =
            (0..8).map(|v| Inventory::empty(&universe, NodeId(v))).collect();
        let a = chunk(6, 1);
        let b = chunk(7, 1);
        inventories[1].insert(&universe, a);
        for u in 1..=5usize {
            inventories[u].insert(&universe, b);
        }
        let mut avail = AvailabilityIndex::new(&universe, &overlay, &inventories);
        let mut rng = rng::stream(0, rng::Domain::Swarm);
        let active = [true; 8];
        let up = [4u32; 8];
        let down = [1u32; 8]; // room for exactly one request
        let plan = bt_step(
            &universe, &overlay, &inventories, &active, &up, &down, 4, 0, &mut avail, &mut rng,
        );
        let to_0: Vec<_> = plan.iter().filter(|d| d.receiver == NodeId(0)).collect();
        assert_eq!(to_0.len(), 1);
        assert_eq!(to_0[0].chunk, a, "1-holder chunk beats the 5-holder chunk");
    }

    #[test]
    fn fully_disseminated_swarm_is_idle() {
        let universe = ChunkUniverse::homogeneous(0, 3, 2);
        let overlay = Overlay::from_edges(3, 2, &[(0, 1), (1, 2), (0, 2)]);
        let mut inventories: Vec<Inventory> =
            (0..3).map(|v| Inventory::initial(&universe, NodeId(v))).collect();
        let all: Vec<ChunkId> = universe.iter_chunks().collect();
        for inv in inventories.iter_mut() {
            for c in &all {
                inv.insert(&universe, *c);
            }
        }
        let mut avail = AvailabilityIndex::new(&universe, &overlay, &inventories);
        let mut rng = rng::stream(1, rng::Domain::Swarm);
        let active = [true; 3];
        let up = [4u32; 3];
        let down = [4u32; 3];
        let plan = bt_step(
            &universe, &overlay, &inventories, &active, &up, &down, 4, 0, &mut avail, &mut rng,
        );
        assert!(plan.is_empty());
    }

    #[test]
    fn bt_never_schedules_held_chunks() {
        let universe = ChunkUniverse::homogeneous(0, 5, 3);
        let overlay = crate::overlay::generate_overlay(5, 2, 3).unwrap();
        let mut inventories: Vec<Inventory> =
            (0..5).map(|v| Inventory::initial(&universe, NodeId(v))).collect();
        // sprinkle extras
        let mut seed_rng = rng::stream(9, rng::Domain::Swarm);
        let mut avail = AvailabilityIndex::new(&universe, &overlay, &inventories);
        for _ in 0..20 {
            let w = NodeId(seed_rng.gen_range(0..5));
            let pos = seed_rng.gen_range(0..universe.total() as usize);
            if !inventories[w.index()].holds_pos(pos) {
                inventories[w.index()].insert(&universe, universe.chunk_at(pos));
                avail.on_gain(w, pos, &overlay, &inventories);
            }
        }
        let active = [true; 5];
        let up = [3u32; 5];
        let down = [5u32; 5];
        let plan = bt_step(
            &universe, &overlay, &inventories, &active, &up, &down, 4, 0, &mut avail,
            &mut seed_rng,
        );
        for d in &plan {
            assert!(!inventories[d.receiver.index()].holds(&universe, d.chunk));
            assert!(inventories[d.sender.index()].holds(&universe, d.chunk));
            assert!(overlay.are_neighbors(d.sender, d.receiver));
        }
    }

    #[test]
    fn reconstructable_subset_test() {
        let universe = ChunkUniverse::homogeneous(0, 3, 3);
        let mut inv = Inventory::initial(&universe, NodeId(0));
        // all of node 1's chunks, all but one of node 2's
        for i in 1..=3 {
            inv.insert(&universe, chunk(1, i));
        }
        inv.insert(&universe, chunk(2, 1));
        inv.insert(&universe, chunk(2, 2));
        let set = reconstructable_set(&universe, &inv, NodeId(0));
        assert_eq!(set.members, vec![NodeId(0), NodeId(1)]);
    }

    #[test]
    fn owner_dropout_after_replication_stays_reconstructable() {
        // reconstructability depends only on held chunks, not on liveness
        let universe = ChunkUniverse::homogeneous(0, 2, 2);
        let mut inv = Inventory::initial(&universe, NodeId(0));
        inv.insert(&universe, chunk(1, 1));
        inv.insert(&universe, chunk(1, 2));
        let set = reconstructable_set(&universe, &inv, NodeId(0));
        assert!(set.members.contains(&NodeId(1)));
    }

    #[test]
    fn fedavg_reference_values() {
        let updates = vec![
            UpdateVector { owner: NodeId(0), weight: 1.0, values: vec![0.0, 2.0] },
            UpdateVector { owner: NodeId(1), weight: 1.0, values: vec![2.0, 0.0] },
        ];
        let set = ReconstructableSet { node: NodeId(0), members: vec![NodeId(0), NodeId(1)] };
        assert_eq!(fedavg(&updates, &set).unwrap(), vec![1.0, 1.0]);

        let single = ReconstructableSet { node: NodeId(0), members: vec![NodeId(1)] };
        assert_eq!(fedavg(&updates, &single).unwrap(), vec![2.0, 0.0]);

        let weighted = vec![
            UpdateVector { owner: NodeId(0), weight: 1.0, values: vec![4.0] },
            UpdateVector { owner: NodeId(1), weight: 3.0, values: vec![0.0] },
        ];
        let both = ReconstructableSet { node: NodeId(0), members: vec![NodeId(0), NodeId(1)] };
        assert_eq!(fedavg(&weighted, &both).unwrap(), vec![1.0]);
    }

    #[test]
    fn fedavg_empty_set_errors() {
        let updates = vec![UpdateVector { owner: NodeId(0), weight: 1.0, values: vec![1.0] }];
        let set = ReconstructableSet { node: NodeId(0), members: vec![] };
        assert_eq!(
            fedavg(&updates, &set).unwrap_err(),
            AggregateError::NothingReconstructable(NodeId(0))
        );
    }

    #[test]
    fn identical_sets_agree_bitwise_regardless_of_member_order() {
        let mut rng = rng::stream(5, rng::Domain::Updates);
        let updates = synthesize_updates(6, 16, &mut rng);
        let a = ReconstructableSet {
            node: NodeId(0),
            members: vec![NodeId(3), NodeId(1), NodeId(5)],
        };
        let b = ReconstructableSet {
            node: NodeId(2),
            members: vec![NodeId(5), NodeId(3), NodeId(1)],
        };
        let ra = fedavg(&updates, &a).unwrap();
        let rb = fedavg(&updates, &b).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(aggregate_checksum(&ra), aggregate_checksum(&rb));
    }
}
