//! Library side of a modular network-system simulator.
//!
//! Component simulators (hosts, NICs, switches, packet generators) run as
//! separate processes, exchange timestamped messages over shared-memory
//! channels, and stay causally consistent through pairwise synchronization.

pub mod backoff;
pub mod host;
pub mod net;
pub mod nic;
pub mod orchestrate;
pub mod proto;
pub mod proxy;
pub mod shmq;
pub mod sync;
pub mod trace;
