//! Per-round overlay generation from a committed seed.
//!
//! The generator is a pure, documented function of `(n, m, seed)` so that
//! auditors can regenerate the exact graph from the revealed seed: every node
//! draws a target degree uniformly from `[m, 2m]`, edges are realized by a
//! seeded random stub pairing, under-degree nodes are repaired with extra
//! edges, and components are bridged until the graph is connected.

use crate::model::NodeId;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OverlayError {
    #[error("minimum degree m={m} infeasible for n={n} nodes (need n >= m+1)")]
    InfeasibleDegree { n: u32, m: u32 },
}

/// Round-scoped undirected neighbor graph.
///
/// Invariants: no self-loops, symmetric, every degree >= m, connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlay {
    n: u32,
    m: u32,
    neighbors: Vec<Vec<u32>>,
}

impl Overlay {
    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn min_degree_param(&self) -> u32 {
        self.m
    }

    pub fn neighbors(&self, v: NodeId) -> &[u32] {
        &self.neighbors[v.index()]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.neighbors[v.index()].len()
    }

    pub fn are_neighbors(&self, a: NodeId, b: NodeId) -> bool {
        self.neighbors[a.index()].binary_search(&b.0).is_ok()
    }

    pub fn avg_degree(&self) -> f64 {
        let total: usize = self.neighbors.iter().map(Vec::len).sum();
        total as f64 / self.n as f64
    }

    /// Nodes that are neither `v` nor adjacent to `v`.
    pub fn non_neighbors(&self, v: NodeId) -> Vec<NodeId> {
        (0..self.n)
            .filter(|&u| u != v.0 && !self.are_neighbors(v, NodeId(u)))
            .map(NodeId)
            .collect()
    }

    /// Build directly from an edge list (used by tests for fixed topologies).
    pub fn from_edges(n: u32, m: u32, edges: &[(u32, u32)]) -> Self {
        let mut neighbors = vec![Vec::new(); n as usize];
        for &(a, b) in edges {
            assert_ne!(a, b, "self-loop");
            if !neighbors[a as usize].contains(&b) {
                neighbors[a as usize].push(b);
                neighbors[b as usize].push(a);
            }
        }
        for adj in &mut neighbors {
            adj.sort_unstable();
        }
        Overlay { n, m, neighbors }
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n as usize];
        let mut stack = vec![0u32];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &self.neighbors[v as usize] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == self.n
    }
}

/// Deterministically generate the round overlay for `(n, m, seed)`.
pub fn generate_overlay(n: u32, m: u32, seed: u64) -> Result<Overlay, OverlayError> {
    if n <= m {
        return Err(OverlayError::InfeasibleDegree { n, m });
    }
    let mut rng = rng::stream(seed, rng::Domain::Overlay);
    let nn = n as usize;
    let max_deg = (n - 1).min(2 * m).max(m);

    // Heterogeneous degree targets in [m, min(2m, n-1)].
    let targets: Vec<u32> = (0..nn).map(|_| rng.gen_range(m..=max_deg)).collect();

    let mut adj: Vec<std::collections::BTreeSet<u32>> =
        vec![std::collections::BTreeSet::new(); nn];

    // Stub pairing pass.
    let mut stubs: Vec<u32> = Vec::new();
    for (v, &t) in targets.iter().enumerate() {
        stubs.extend(std::iter::repeat(v as u32).take(t as usize));
    }
    stubs.shuffle(&mut rng);
    for pair in stubs.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        if a != b {
            adj[a as usize].insert(b);
            adj[b as usize].insert(a);
        }
    }

    // Repair pass: lift any node still below m.
    for v in 0..nn {
        while adj[v].len() < m as usize {
            // Prefer partners that are themselves under target, lowest degree first.
            let mut candidates: Vec<u32> = (0..n)
                .filter(|&u| u as usize != v && !adj[v].contains(&u))
                .collect();
            candidates.sort_by_key(|&u| (adj[u as usize].len(), u));
            let under: Vec<u32> = candidates
                .iter()
                .copied()
                .filter(|&u| adj[u as usize].len() < targets[u as usize] as usize)
                .collect();
            let pool = if under.is_empty() { &candidates } else { &under };
            let u = pool[rng.gen_range(0..pool.len())];
            adj[v].insert(u);
            adj[u as usize].insert(v as u32);
        }
    }

    // Connectivity pass: bridge components with random edges.
    loop {
        let comp = components(&adj);
        if comp.len() <= 1 {
            break;
        }
        let a = &comp[0];
        let b = &comp[1];
        let va = a[rng.gen_range(0..a.len())];
        let vb = b[rng.gen_range(0..b.len())];
        adj[va as usize].insert(vb);
        adj[vb as usize].insert(va);
    }

    let neighbors: Vec<Vec<u32>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();
    Ok(Overlay { n, m, neighbors })
}

fn components(adj: &[std::collections::BTreeSet<u32>]) -> Vec<Vec<u32>> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start as u32];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &w in &adj[v as usize] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}
