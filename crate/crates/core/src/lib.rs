//! Deterministic cache-hierarchy simulator and side-channel laboratory.
//!
//! The crate models an inclusive, sliced three-level hierarchy with pluggable
//! replacement policies (including the quad-age family used by recent Intel
//! LLCs), a cycle-driven scheduler for attacker and victim agents, black-box
//! policy inference, and the RELOAD+REFRESH, FLUSH+RELOAD and PRIME+PROBE
//! attacks against T-table AES and square-and-multiply RSA victims.

pub mod addr;
pub mod attack;
pub mod cache;
pub mod error;
pub mod experiment;
pub mod infer;
pub mod policy;
pub mod profile;
pub mod replay;
pub mod sched;
pub mod telemetry;
pub mod victim;

pub use addr::{CacheAddress, Geometry, LINE_SIZE};
pub use cache::{AccessOutcome, Hierarchy, LevelId, ServedBy};
pub use error::{Error, Result};
pub use policy::{PolicyKind, ReplacementPolicy, SetId};
pub use profile::{InsertionMode, MachineProfile};
