//! Observation-only attribution attacks and ASR accounting.
//!
//! Attacks consume nothing but the attacker's own observation records:
//! sender pseudonyms (opaque grouping keys), chunk descriptors (in bijection
//! with update owners), and arrival order. Ground truth enters only when
//! scoring: a decision is correct when the attributed descriptor matches the
//! real node behind the pseudonym.
//!
//! Spray deliveries carry one-off pseudonyms and their own phase; they are
//! not warm-up transfers and never enter the decision universe.

use crate::engine::{ObservationRecord, Phase};
use crate::model::{ChunkUniverse, Inventory, NodeId, Pseudonym, PseudonymKind};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    /// Label the first chunk received from each sender pseudonym as owned
    /// by that sender.
    Sequential,
    /// Attribute each sender to the descriptor appearing most often among
    /// its early transfers (first half).
    AmountGreedy,
    /// Attribute each sender to the descriptor with the highest
    /// rank-discounted arrival score.
    Clustering,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Sequential => "sequence",
            AttackKind::AmountGreedy => "count",
            AttackKind::Clustering => "cluster",
        })
    }
}

/// Which deliveries the attacker analyzes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackScope {
    /// Warm-up transfers only (the regime the analytic bounds cover).
    WarmupOnly,
    /// Everything the attacker received during the round (minus spray,
    /// whose pseudonyms are one-off).
    FullRound,
}

fn in_scope(scope: AttackScope, phase: Phase) -> bool {
    match scope {
        AttackScope::WarmupOnly => phase == Phase::Warmup,
        AttackScope::FullRound => phase != Phase::Spray,
    }
}

/// One attack's decisions for one attacker.
#[derive(Debug, Clone)]
pub struct AttackOutput {
    pub attacker: Vec<NodeId>,
    pub kind: AttackKind,
    /// per-transfer decisions: (record, attributed as "sender is source")
    pub transfer_claims: Vec<(ObservationRecord, bool)>,
    /// per-pseudonym descriptor guesses
    pub guesses: Vec<(Pseudonym, NodeId)>,
}

fn observed<'a>(
    observations: &'a [ObservationRecord],
    attacker: NodeId,
    scope: AttackScope,
) -> impl Iterator<Item = &'a ObservationRecord> {
    observations
        .iter()
        .filter(move |o| o.observer == attacker && in_scope(scope, o.phase))
}

/// Group an observation stream by sender pseudonym, preserving both the
/// arrival order within each group and the order of first appearance.
fn group_by_sender<'a>(
    records: impl Iterator<Item = &'a ObservationRecord>,
) -> Vec<(Pseudonym, Vec<&'a ObservationRecord>)> {
    let mut index: HashMap<Pseudonym, usize> = HashMap::new();
    let mut groups: Vec<(Pseudonym, Vec<&ObservationRecord>)> = Vec::new();
    for r in records {
        match index.get(&r.sender_pseudonym) {
            Some(&i) => groups[i].1.push(r),
            None => {
                index.insert(r.sender_pseudonym, groups.len());
                groups.push((r.sender_pseudonym, vec![r]));
            }
        }
    }
    groups
}

/// Sequential greedy: the first chunk from each pseudonym is attributed
/// `src = snd`; every later transfer is left unattributed.
pub fn attack_sequential(
    observations: &[ObservationRecord],
    attacker: NodeId,
    scope: AttackScope,
) -> AttackOutput {
    let groups = group_by_sender(observed(observations, attacker, scope));
    let mut claims = Vec::new();
    let mut guesses = Vec::new();
    for (pseudonym, records) in groups {
        for (i, r) in records.iter().enumerate() {
            claims.push((**r, i == 0));
        }
        // The positive claim doubles as a descriptor guess for collusion
        // accounting: "this sender owns the first chunk's descriptor".
        guesses.push((pseudonym, records[0].chunk.owner));
    }
    AttackOutput { attacker: vec![attacker], kind: AttackKind::Sequential, transfer_claims: claims, guesses }
}

/// Amount greedy: per pseudonym, the modal descriptor among the first
/// `ceil(T/2)` observed transfers; ties break to the lowest descriptor id.
pub fn attack_amount_greedy(
    observations: &[ObservationRecord],
    attacker: NodeId,
    scope: AttackScope,
) -> AttackOutput {
    let groups = group_by_sender(observed(observations, attacker, scope));
    let mut guesses = Vec::new();
    for (pseudonym, records) in &groups {
        let early = (records.len() + 1) / 2;
        let mut counts: HashMap<NodeId, u32> = HashMap::new();
        for r in &records[..early] {
            *counts.entry(r.chunk.owner).or_insert(0) += 1;
        }
        let best = counts
            .iter()
            .max_by(|(da, ca), (db, cb)| ca.cmp(cb).then(db.cmp(da)))
            .map(|(d, _)| *d)
            .expect("non-empty group");
        guesses.push((*pseudonym, best));
    }
    AttackOutput {
        attacker: vec![attacker],
        kind: AttackKind::AmountGreedy,
        transfer_claims: Vec::new(),
        guesses,
    }
}

/// Clustering: per (pseudonym, descriptor), score the descriptor by
/// `sum 1/(1 + arrival_rank)` over that sender's transfers of it, combining
/// the early-time and volume signals; argmax descriptor wins, ties to the
/// lowest id.
pub fn attack_clustering(
    observations: &[ObservationRecord],
    attacker: NodeId,
    scope: AttackScope,
) -> AttackOutput {
    let groups = group_by_sender(observed(observations, attacker, scope));
    let mut guesses = Vec::new();
    for (pseudonym, records) in &groups {
        let mut scores: HashMap<NodeId, f64> = HashMap::new();
        for (rank, r) in records.iter().enumerate() {
            *scores.entry(r.chunk.owner).or_insert(0.0) += 1.0 / (1.0 + rank as f64);
        }
        let best = scores
            .iter()
            .max_by(|(da, sa), (db, sb)| {
                sa.partial_cmp(sb).expect("finite scores").then(db.cmp(da))
            })
            .map(|(d, _)| *d)
            .expect("non-empty group");
        guesses.push((*pseudonym, best));
    }
    AttackOutput {
        attacker: vec![attacker],
        kind: AttackKind::Clustering,
        transfer_claims: Vec::new(),
        guesses,
    }
}

pub fn run_attack(
    kind: AttackKind,
    observations: &[ObservationRecord],
    attacker: NodeId,
    scope: AttackScope,
) -> AttackOutput {
    match kind {
        AttackKind::Sequential => attack_sequential(observations, attacker, scope),
        AttackKind::AmountGreedy => attack_amount_greedy(observations, attacker, scope),
        AttackKind::Clustering => attack_clustering(observations, attacker, scope),
    }
}

/// Is a decision on `pseudonym` correct when it names `descriptor`?
///
/// Spray pseudonyms are one-off tunnel identities: they never resolve to a
/// round identity, so no decision on them is ever scored correct.
fn guess_correct(pseudonym: Pseudonym, descriptor: NodeId) -> bool {
    pseudonym.kind == PseudonymKind::Round && pseudonym.node == descriptor
}

/// ASR of one attack output: the fraction of its positive decisions that
/// are correct (first-chunk claims for the sequential attack, descriptor
/// guesses otherwise). `None` when the attacker made no decision.
pub fn output_asr(output: &AttackOutput) -> Option<f64> {
    let (correct, total) = match output.kind {
        AttackKind::Sequential => {
            let positives: Vec<_> =
                output.transfer_claims.iter().filter(|(_, attributed)| *attributed).collect();
            let correct = positives
                .iter()
                .filter(|(r, _)| guess_correct(r.sender_pseudonym, r.chunk.owner))
                .count();
            (correct, positives.len())
        }
        _ => {
            let correct =
                output.guesses.iter().filter(|(p, d)| guess_correct(*p, *d)).count();
            (correct, output.guesses.len())
        }
    };
    if total == 0 {
        None
    } else {
        Some(correct as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrSummary {
    pub per_receiver: Vec<(NodeId, f64)>,
    pub max: f64,
    pub mean: f64,
}

/// Score a set of per-attacker outputs against ground truth. Receivers with
/// zero decisions are excluded from the summaries.
pub fn asr(outputs: &[AttackOutput]) -> AsrSummary {
    let mut per_receiver = Vec::new();
    for out in outputs {
        if let Some(rate) = output_asr(out) {
            per_receiver.push((out.attacker[0], rate));
        }
    }
    let max = per_receiver.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    let mean = if per_receiver.is_empty() {
        0.0
    } else {
        per_receiver.iter().map(|(_, r)| *r).sum::<f64>() / per_receiver.len() as f64
    };
    AsrSummary { per_receiver, max, mean }
}

/// A colluding coalition of honest-but-curious nodes.
#[derive(Debug, Clone)]
pub struct Coalition {
    pub members: Vec<NodeId>,
    /// recognition strength for alliance filtering, in [0, 1]
    pub phi: f64,
}

/// Alliance-filtering mass report for one honest sender.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredMass {
    pub sender: NodeId,
    /// non-owner mass held by the sender at measurement time
    pub x: u32,
    /// fraction of that mass originating from coalition members
    pub rho: f64,
    /// effective mass (1 - phi * rho) * x at the configured phi
    pub x_eff: f64,
    /// the phi in {0, 1} envelope
    pub x_eff_phi0: f64,
    pub x_eff_phi1: f64,
}

/// Pool the coalition's observations (union, original order) and run the
/// attack on the pooled stream; also report per-sender effective non-owner
/// masses under alliance filtering.
pub fn collude(
    kind: AttackKind,
    observations: &[ObservationRecord],
    coalition: &Coalition,
    universe: &ChunkUniverse,
    inventories: &[Inventory],
    scope: AttackScope,
) -> (AttackOutput, Vec<FilteredMass>) {
    assert!(!coalition.members.is_empty());
    let member_set: Vec<bool> = {
        let mut v = vec![false; universe.n() as usize];
        for m in &coalition.members {
            v[m.index()] = true;
        }
        v
    };
    let pooled: Vec<ObservationRecord> = observations
        .iter()
        .filter(|o| member_set[o.observer.index()] && in_scope(scope, o.phase))
        .copied()
        .collect();
    // Run the attack over the pooled stream under a synthetic observer view:
    // reuse the per-attacker path by tagging all records as one observer.
    let lead = coalition.members[0];
    let retagged: Vec<ObservationRecord> =
        pooled.iter().map(|o| ObservationRecord { observer: lead, ..*o }).collect();
    let mut output = run_attack(kind, &retagged, lead, scope);
    output.attacker = coalition.members.clone();

    let mut masses = Vec::new();
    for (v, inv) in inventories.iter().enumerate() {
        let sender = NodeId(v as u32);
        if member_set[v] {
            continue;
        }
        let own_range = universe.owner_range(sender);
        let mut x = 0u32;
        let mut from_coalition = 0u32;
        for pos in inv.iter_held_positions() {
            if own_range.contains(&pos) {
                continue;
            }
            x += 1;
            if member_set[universe.owner_of_pos(pos).index()] {
                from_coalition += 1;
            }
        }
        let rho = if x == 0 { 0.0 } else { from_coalition as f64 / x as f64 };
        masses.push(FilteredMass {
            sender,
            x,
            rho,
            x_eff: (1.0 - coalition.phi * rho) * x as f64,
            x_eff_phi0: x as f64,
            x_eff_phi1: (1.0 - rho) * x as f64,
        });
    }
    (output, masses)
}

/// Collusion success metrics over individually-attacking members:
/// `any_succeeds` is the fraction of round pseudonyms observed by at least
/// one member for which some observing member's decision is correct;
/// `per_attacker_mean` averages the members' individual ASRs.
pub fn collusion_rates(member_outputs: &[AttackOutput]) -> (f64, f64) {
    let mut per_sender: HashMap<Pseudonym, bool> = HashMap::new();
    for out in member_outputs {
        for (p, d) in &out.guesses {
            if p.kind != PseudonymKind::Round {
                continue;
            }
            let hit = guess_correct(*p, *d);
            per_sender.entry(*p).and_modify(|h| *h |= hit).or_insert(hit);
        }
    }
    let any = if per_sender.is_empty() {
        0.0
    } else {
        per_sender.values().filter(|&&h| h).count() as f64 / per_sender.len() as f64
    };
    let rates: Vec<f64> = member_outputs.iter().filter_map(output_asr).collect();
    let mean =
        if rates.is_empty() { 0.0 } else { rates.iter().sum::<f64>() / rates.len() as f64 };
    (any, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChunkId;

    fn obs(observer: u32, sender: u32, owner: u32, index: u32, slot: i32) -> ObservationRecord {
        ObservationRecord {
            observer: NodeId(observer),
            sender_pseudonym: Pseudonym::round_of(NodeId(sender), 0),
            chunk: ChunkId { owner: NodeId(owner), round: 0, index },
            slot,
            phase: Phase::Warmup,
        }
    }

    #[test]
    fn sequential_first_chunk_rule() {
        // sender 1's first chunk is its own; sender 2's first is a relay
        let trace = vec![
            obs(0, 1, 1, 1, 0),
            obs(0, 1, 5, 1, 1),
            obs(0, 2, 7, 1, 1),
            obs(0, 2, 2, 1, 2),
        ];
        let out = attack_sequential(&trace, NodeId(0), AttackScope::WarmupOnly);
        let positives: Vec<_> =
            out.transfer_claims.iter().filter(|(_, a)| *a).map(|(r, _)| *r).collect();
        assert_eq!(positives.len(), 2);
        assert_eq!(output_asr(&out), Some(0.5));
    }

    #[test]
    fn sequential_all_relayed_first_scores_zero() {
        let trace = vec![obs(0, 1, 9, 1, 0), obs(0, 2, 8, 1, 0)];
        let out = attack_sequential(&trace, NodeId(0), AttackScope::WarmupOnly);
        assert_eq!(output_asr(&out), Some(0.0));
    }

    #[test]
    fn sequential_ignores_other_observers_and_spray() {
        let mut trace = vec![obs(0, 1, 1, 1, 0), obs(3, 2, 2, 1, 0)];
        trace.push(ObservationRecord {
            observer: NodeId(0),
            sender_pseudonym: Pseudonym::spray_of(NodeId(4), 0, 0),
            chunk: ChunkId { owner: NodeId(4), round: 0, index: 2 },
            slot: -1,
            phase: Phase::Spray,
        });
        let out = attack_sequential(&trace, NodeId(0), AttackScope::WarmupOnly);
        assert_eq!(out.transfer_claims.len(), 1);
        assert_eq!(out.guesses.len(), 1);
    }

    #[test]
    fn amount_greedy_majority_and_tie_rule() {
        // 5 chunks of descriptor 1 and 1 of descriptor 9 in the early half
        let mut trace = Vec::new();
        for i in 1..=5 {
            trace.push(obs(0, 1, 1, i, i as i32));
        }
        trace.push(obs(0, 1, 9, 1, 6));
        // tail beyond the early window, all descriptor 9
        for i in 2..=6 {
            trace.push(obs(0, 1, 9, i, 6 + i as i32));
        }
        let out = attack_amount_greedy(&trace, NodeId(0), AttackScope::WarmupOnly);
        assert_eq!(out.guesses, vec![(Pseudonym::round_of(NodeId(1), 0), NodeId(1))]);
        assert_eq!(output_asr(&out), Some(1.0));

        // exact tie in the early window: lowest descriptor id wins
        let tie = vec![obs(0, 2, 7, 1, 0), obs(0, 2, 3, 1, 1), obs(0, 2, 7, 2, 2), obs(0, 2, 3, 2, 3)];
        let out = attack_amount_greedy(&tie, NodeId(0), AttackScope::WarmupOnly);
        assert_eq!(out.guesses[0].1, NodeId(3));
    }

    #[test]
    fn clustering_early_heavy_beats_late_heavy() {
        // equal counts; descriptor 5 arrives at ranks 0,1 and descriptor 2 at
        // ranks 2,3: the early one wins despite its higher id
        let trace = vec![
            obs(0, 1, 5, 1, 0),
            obs(0, 1, 5, 2, 1),
            obs(0, 1, 2, 1, 2),
            obs(0, 1, 2, 2, 3),
        ];
        let out = attack_clustering(&trace, NodeId(0), AttackScope::WarmupOnly);
        assert_eq!(out.guesses[0].1, NodeId(5));
        // single-descriptor sender
        let single = vec![obs(0, 3, 8, 1, 0), obs(0, 3, 8, 2, 1)];
        let out = attack_clustering(&single, NodeId(0), AttackScope::WarmupOnly);
        assert_eq!(out.guesses[0].1, NodeId(8));
    }

    #[test]
    fn asr_summary_excludes_silent_receivers() {
        let trace = vec![obs(0, 1, 1, 1, 0)];
        let outs = vec![
            attack_sequential(&trace, NodeId(0), AttackScope::WarmupOnly),
            attack_sequential(&trace, NodeId(5), AttackScope::WarmupOnly),
        ];
        let summary = asr(&outs);
        assert_eq!(summary.per_receiver.len(), 1);
        assert_eq!(summary.max, 1.0);
        assert_eq!(summary.mean, 1.0);
    }

    #[test]
    fn coalition_of_one_matches_single_attacker() {
        let universe = ChunkUniverse::homogeneous(0, 4, 2);
        let inventories: Vec<Inventory> =
            (0..4).map(|v| Inventory::initial(&universe, NodeId(v))).collect();
        let trace = vec![obs(0, 1, 1, 1, 0), obs(0, 2, 7, 1, 1)];
        let single = attack_sequential(&trace, NodeId(0), AttackScope::WarmupOnly);
        let coalition = Coalition { members: vec![NodeId(0)], phi: 0.5 };
        let (pooled, _) = collude(
            AttackKind::Sequential,
            &trace,
            &coalition,
            &universe,
            &inventories,
            AttackScope::WarmupOnly,
        );
        assert_eq!(output_asr(&pooled), output_asr(&single));
        assert_eq!(pooled.guesses, single.guesses);
    }

    #[test]
    fn phi_zero_leaves_mass_unfiltered() {
        let universe = ChunkUniverse::homogeneous(0, 3, 2);
        let mut inventories: Vec<Inventory> =
            (0..3).map(|v| Inventory::initial(&universe, NodeId(v))).collect();
        // sender 2 holds two relays, one owned by the (future) coalition
        inventories[2].insert(&universe, ChunkId { owner: NodeId(0), round: 0, index: 1 });
        inventories[2].insert(&universe, ChunkId { owner: NodeId(1), round: 0, index: 1 });
        let coalition = Coalition { members: vec![NodeId(0)], phi: 0.0 };
        let (_, masses) = collude(
            AttackKind::Sequential,
            &[],
            &coalition,
            &universe,
            &inventories,
            AttackScope::WarmupOnly,
        );
        let m2 = masses.iter().find(|m| m.sender == NodeId(2)).unwrap();
        assert_eq!(m2.x, 2);
        assert_eq!(m2.rho, 0.5);
        assert_eq!(m2.x_eff, 2.0, "phi = 0 filters nothing");
        assert_eq!(m2.x_eff_phi1, 1.0);
    }

    #[test]
    fn pooled_observations_superset_of_members() {
        let universe = ChunkUniverse::homogeneous(0, 4, 1);
        let inventories: Vec<Inventory> =
            (0..4).map(|v| Inventory::initial(&universe, NodeId(v))).collect();
        let trace = vec![obs(0, 2, 2, 1, 0), obs(1, 3, 5, 1, 0), obs(2, 3, 3, 1, 1)];
        let coalition = Coalition { members: vec![NodeId(0), NodeId(1)], phi: 1.0 };
        let (pooled, _) = collude(
            AttackKind::Sequential,
            &trace,
            &coalition,
            &universe,
            &inventories,
            AttackScope::WarmupOnly,
        );
        // the pooled claim set covers both members' observations exactly
        assert_eq!(pooled.transfer_claims.len(), 2);
    }

    #[test]
    fn collusion_rates_grow_with_pooled_hits() {
        let a = AttackOutput {
            attacker: vec![NodeId(0)],
            kind: AttackKind::AmountGreedy,
            transfer_claims: vec![],
            guesses: vec![(Pseudonym::round_of(NodeId(1), 0), NodeId(9))],
        };
        let b = AttackOutput {
            attacker: vec![NodeId(2)],
            kind: AttackKind::AmountGreedy,
            transfer_claims: vec![],
            guesses: vec![
                (Pseudonym::round_of(NodeId(1), 0), NodeId(1)),
                (Pseudonym::round_of(NodeId(3), 0), NodeId(4)),
            ],
        };
        let (any, mean) = collusion_rates(&[a, b]);
        // sender 1 is hit by member b; sender 3 by nobody
        assert!((any - 0.5).abs() < 1e-12);
        assert!((mean - 0.25).abs() < 1e-12);
    }
}
