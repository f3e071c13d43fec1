//! Allocation-only core of the sdnator control framework.
//!
//! Everything in this crate is pure: no sockets, no files, no clocks. Time is
//! always passed in by the caller as microseconds (framework) or virtual
//! minutes (fleet simulation), and randomness comes from caller-supplied RNGs.
//! The `sdnator` crate layers the bus, the archive store, the client library
//! and the command line on top of these pieces.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod archive;
pub mod consolidate;
pub mod coordinator;
pub mod fleet;
pub mod key;
pub mod manifest;
pub mod pacing;
pub mod payload;
pub mod wire;

pub use archive::{ArchiveQuery, ArchiveRecord, SortOrder, TimeRange};
pub use consolidate::{consolidate, ConsolidationResult, Unmet, UnmetReason};
pub use key::{DataKey, KeyError, KeyPattern};
pub use manifest::{
    AppId, AppIdentity, AssignmentSet, Capability, Frequency, InstanceId, Interest, Manifest, Rate,
    Roles, WriteFlags,
};
