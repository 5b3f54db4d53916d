//! Commit-then-reveal tracker accountability.
//!
//! Before a round, the tracker commits to `H(seed)`. Afterwards it reveals
//! the seed and a log of the overlay and every executed transfer. Clients
//! replay the committed randomness and verify the hard constraints:
//! endpoints adjacent (spray exempt), per-stage budget caps, and no redundant
//! deliveries except logged retries. Any violation voids the round's
//! unlinkability guarantee and the swarm fails open to vanilla BitTorrent.

use crate::engine::{DirectiveFlags, TransferDirective};
use crate::model::{Capacities, ChunkId, NodeId, RoundConfig};
use crate::overlay::generate_overlay;
use sha2::{Digest, Sha256};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

pub const DIGEST_ALGORITHM: &str = "sha256";

/// Collision-resistant digest of the canonical (big-endian) seed encoding.
pub fn commit_seed(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.finalize().into()
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the run configuration, pinned in the log header.
pub fn config_digest(config: &RoundConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config.digest_string().as_bytes());
    h.finalize().into()
}

/// The revealed per-round log: header fields plus every executed transfer in
/// stage order. Retries are the flagged subset of `directives`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub seed_commit: [u8; 32],
    pub seed: u64,
    pub n: u32,
    pub m: u32,
    pub config_digest: [u8; 32],
    pub directives: Vec<TransferDirective>,
}

impl RoundLog {
    pub fn retries(&self) -> impl Iterator<Item = &TransferDirective> {
        self.directives.iter().filter(|d| d.flags.contains(DirectiveFlags::RETRY))
    }

    /// Line-oriented wire format: `#`-prefixed header (commit, digest
    /// algorithm, n, m, seed, config digest), then one directive per line as
    /// `stage,sender,receiver,chunk_owner,chunk_index,flags`.
    pub fn to_text(&self, round: u32) -> String {
        let mut out = String::new();
        out.push_str(&format!("# commit={}\n", digest_hex(&self.seed_commit)));
        out.push_str(&format!("# digest={DIGEST_ALGORITHM}\n"));
        out.push_str(&format!("# n={} m={} round={round}\n", self.n, self.m));
        out.push_str(&format!("# seed={}\n", self.seed));
        out.push_str(&format!("# config={}\n", digest_hex(&self.config_digest)));
        for d in &self.directives {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                d.stage,
                d.sender,
                d.receiver,
                d.chunk.owner,
                d.chunk.index,
                d.flags_str()
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<(Self, u32), LogParseError> {
        let mut commit = None;
        let mut seed = None;
        let mut n = None;
        let mut m = None;
        let mut round = 0u32;
        let mut config = None;
        let mut directives = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    let Some((key, value)) = field.split_once('=') else { continue };
                    match key {
                        "commit" => commit = Some(parse_hex32(value, lineno)?),
                        "config" => config = Some(parse_hex32(value, lineno)?),
                        "seed" => seed = Some(parse_num(value, lineno)? as u64),
                        "n" => n = Some(parse_num(value, lineno)? as u32),
                        "m" => m = Some(parse_num(value, lineno)? as u32),
                        "round" => round = parse_num(value, lineno)? as u32,
                        _ => {}
                    }
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(LogParseError::Malformed(lineno));
            }
            let flags = TransferDirective::flags_from_str(parts[5])
                .ok_or(LogParseError::Malformed(lineno))?;
            directives.push(TransferDirective {
                stage: parse_num(parts[0], lineno)? as i32,
                sender: NodeId(parse_num(parts[1], lineno)? as u32),
                receiver: NodeId(parse_num(parts[2], lineno)? as u32),
                chunk: ChunkId {
                    owner: NodeId(parse_num(parts[3], lineno)? as u32),
                    round,
                    index: parse_num(parts[4], lineno)? as u32,
                },
                flags,
            });
        }
        Ok((
            RoundLog {
                seed_commit: commit.ok_or(LogParseError::MissingHeader("commit"))?,
                seed: seed.ok_or(LogParseError::MissingHeader("seed"))?,
                n: n.ok_or(LogParseError::MissingHeader("n"))?,
                m: m.ok_or(LogParseError::MissingHeader("m"))?,
                config_digest: config.ok_or(LogParseError::MissingHeader("config"))?,
                directives,
            },
            round,
        ))
    }
}

fn parse_num(s: &str, lineno: usize) -> Result<i64, LogParseError> {
    s.parse().map_err(|_| LogParseError::Malformed(lineno))
}

fn parse_hex32(s: &str, lineno: usize) -> Result<[u8; 32], LogParseError> {
    if s.len() != 64 {
        return Err(LogParseError::Malformed(lineno));
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| LogParseError::Malformed(lineno))?;
    }
    Ok(out)
}

#[derive(Debug, Error, PartialEq)]
pub enum LogParseError {
    #[error("missing header field {0}")]
    MissingHeader(&'static str),
    #[error("malformed log line {0}")]
    Malformed(usize),
}

/// First violated constraint, in verification order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    CommitMismatch,
    /// A non-spray directive connects nodes that are not overlay neighbors.
    Adjacency { directive: TransferDirective },
    /// A node exceeded its per-stage chunk budget.
    CapExceeded { stage: i32, node: NodeId, sends: bool },
    /// A (receiver, chunk) pair was delivered twice without a retry flag.
    DuplicateDelivery { directive: TransferDirective },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::CommitMismatch => write!(f, "commit mismatch"),
            RejectReason::Adjacency { directive } => write!(
                f,
                "adjacency violation at stage {}: {} -> {}",
                directive.stage, directive.sender, directive.receiver
            ),
            RejectReason::CapExceeded { stage, node, sends } => write!(
                f,
                "{} cap exceeded at stage {stage} by node {node}",
                if *sends { "uplink" } else { "downlink" }
            ),
            RejectReason::DuplicateDelivery { directive } => write!(
                f,
                "redundant delivery of ({}, {}/{}) at stage {}",
                directive.receiver, directive.chunk.owner, directive.chunk.index, directive.stage
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Draw the per-node capacities exactly as the harness does, so auditors can
/// replay them from the revealed seed.
pub fn derive_capacities(config: &RoundConfig, seed: u64) -> Vec<Capacities> {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, crate::rng::Domain::Capacities);
    (0..config.n)
        .map(|_| {
            let up = rng.gen_range(config.uplink_chunks[0]..=config.uplink_chunks[1]);
            let down = rng.gen_range(config.downlink_chunks[0]..=config.downlink_chunks[1]);
            Capacities::from_chunk_budgets(up, down, config.slot_seconds, config.chunk_bytes)
        })
        .collect()
}

/// Verify a revealed round log against its commitment and the configured
/// constraints. Accepts iff (a) `H(seed)` matches the commitment, (b) every
/// non-spray directive connects overlay neighbors of the regenerated graph,
/// (c) per-stage sends/receives stay within each node's chunk budgets (spray
/// is tracker-tunneled and exempt), and (d) no (receiver, chunk) pair is
/// delivered twice unless the duplicate is retry-flagged.
pub fn verify_round_log(
    commit: &[u8; 32],
    seed: u64,
    log: &RoundLog,
    config: &RoundConfig,
) -> Verdict {
    if commit_seed(seed) != *commit || log.seed != seed {
        return Verdict::Reject(RejectReason::CommitMismatch);
    }
    let overlay = match generate_overlay(config.n, config.m, seed) {
        Ok(g) => g,
        Err(_) => return Verdict::Reject(RejectReason::CommitMismatch),
    };
    for d in &log.directives {
        if d.is_spray() {
            continue;
        }
        if d.sender.0 >= config.n
            || d.receiver.0 >= config.n
            || !overlay.are_neighbors(d.sender, d.receiver)
        {
            return Verdict::Reject(RejectReason::Adjacency { directive: *d });
        }
    }
    let capacities = derive_capacities(config, seed);
    let mut per_stage: HashMap<i32, (Vec<u32>, Vec<u32>)> = HashMap::new();
    let mut stages: Vec<i32> = Vec::new();
    for d in &log.directives {
        if d.is_spray() {
            continue;
        }
        let entry = per_stage.entry(d.stage).or_insert_with(|| {
            stages.push(d.stage);
            (vec![0; config.n as usize], vec![0; config.n as usize])
        });
        entry.0[d.sender.index()] += 1;
        entry.1[d.receiver.index()] += 1;
    }
    stages.sort_unstable();
    for stage in stages {
        let (sends, recvs) = &per_stage[&stage];
        for v in 0..config.n as usize {
            if sends[v] > capacities[v].up_chunks {
                return Verdict::Reject(RejectReason::CapExceeded {
                    stage,
                    node: NodeId(v as u32),
                    sends: true,
                });
            }
            if recvs[v] > capacities[v].down_chunks {
                return Verdict::Reject(RejectReason::CapExceeded {
                    stage,
                    node: NodeId(v as u32),
                    sends: false,
                });
            }
        }
    }
    let mut seen: HashSet<(NodeId, ChunkId)> = HashSet::new();
    for d in &log.directives {
        if !seen.insert((d.receiver, d.chunk)) && !d.flags.contains(DirectiveFlags::RETRY) {
            return Verdict::Reject(RejectReason::DuplicateDelivery { directive: *d });
        }
    }
    Verdict::Accept
}
