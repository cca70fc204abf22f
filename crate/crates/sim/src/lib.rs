//! Simulated sequence-parallel execution of chunked linear attention.
//!
//! A world of `W` workers is organized into `G = W / T` sequence-parallel
//! groups. Each group holds one batch's sequence, cut into `T` chunks of
//! `C = N / T` rows. Workers exchange exactly one `d_h x d_h` state per hop
//! over a ring of point-to-point messages: `KV` forward (rank `i -> i + 1`)
//! and `dKV` backward (rank `i + 1 -> i`). Workers are in-process execution
//! contexts; in `lockstep` mode they run round-robin (bit-exact against the
//! serial chunked reference), in `concurrent` mode each worker is a thread
//! with blocking receives.
//!
//! On top of the runtime sit the verification suites (`verify`), the shared
//! tensor fixture format (`fixtures`), the JSON-lines trace format
//! (`tracefile`), and the `lasp` command-line tool.

pub mod config;
mod error;
pub mod fixtures;
pub mod report;
pub mod runtime;
pub mod topology;
pub mod tracefile;
pub mod verify;

pub use error::SimError;
