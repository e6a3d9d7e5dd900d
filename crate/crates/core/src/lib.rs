//! Cycle-level simulator of a decoupled access/execute accelerator system.
//!
//! A set of data streaming engines (DSEs) turns N-D affine access patterns
//! into per-channel scratchpad requests, gathers the responses into wide
//! words and hands them to a GeMM core and a requantization core. The crate
//! models the address generator, the banked scratchpad with runtime
//! addressing-mode remapping, the streaming engines with fine-grained
//! prefetch, the on-the-fly datapath extensions, a workload compiler and a
//! deterministic system harness with ablation support.
//!
//! Module map:
//!
//! * [`agu`] - temporal/spatial affine address generation.
//! * [`remap`] - FIMA/GIMA/NIMA bank mapping.
//! * [`memory`] - single-ported multi-bank scratchpad.
//! * [`dse`] - streaming engine (read and write).
//! * [`ext`] - Transposer / Broadcaster datapath extensions.
//! * [`accel`] - GeMM and quantization cores plus golden kernels.
//! * [`compiler`] - workload lowering and tensor allocation.
//! * [`sim`] - system harness, feature flags, metrics, ablation.
//! * [`cli`] - command line front end.

pub mod accel;
pub mod agu;
pub mod cli;
pub mod compiler;
pub mod dse;
pub mod ext;
pub mod memory;
pub mod remap;
pub mod sim;

pub use agu::{address_at, AccessPattern, Agu, AguError};
pub use compiler::{Layout, ModePolicy, Schedule, WorkloadShape, WorkloadSpec};
pub use dse::{Dse, DseDesign, StreamConfig};
pub use ext::WideWord;
pub use memory::Scratchpad;
pub use remap::BankMap;
pub use sim::{run, run_with_policy, FeatureFlags, Metrics, RunResult, SystemConfig};
