//! FLTorrent: a deterministic slotted simulator and analysis toolkit for
//! BitTorrent-style dissemination of federated-learning updates with a
//! privacy-hardening warm-up.
//!
//! Each FL round is simulated in discrete slots over a seeded random overlay.
//! Clients first run a *warm-up* that injects attribution uncertainty
//! (pre-round spray to non-neighbors, randomized start lags, tracker-assisted
//! non-owner-first scheduling with cover-set gating and owner throttling),
//! then switch to vanilla BitTorrent swarming, and finally FedAvg over the
//! set of updates each node can reconstruct by the deadline.
//!
//! The toolkit also ships:
//! - a stage-wise max-flow upper bound on deliverable chunks ([`maxflow`]),
//! - observation-only attribution attacks and ASR accounting ([`attack`]),
//! - closed-form unlinkability bound evaluators ([`bounds`]),
//! - a commit-then-reveal audit log with replay verification ([`audit`]),
//! - an experiment harness that reruns the reference scenarios and sweeps
//!   and emits plot-ready CSVs ([`harness`]).
//!
//! Everything is a pure function of `(config, seed)`: two runs with the same
//! inputs produce byte-identical traces and CSVs.

pub mod attack;
pub mod audit;
pub mod bounds;
pub mod engine;
pub mod harness;
pub mod maxflow;
pub mod model;
pub mod overlay;
pub mod rng;
pub mod sched;
pub mod swarm;
pub mod warmup;

pub use engine::{ObservationRecord, Phase, SimState, TransferDirective};
pub use model::{Capacities, ChunkId, ChunkUniverse, Inventory, NodeId, Pseudonym, RoundConfig};
pub use overlay::Overlay;
