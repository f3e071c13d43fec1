//! Services and client runtime for the sdnator data framework: the updates
//! bus, the archive store, the DUE client library, the coordinator service,
//! the networked fleet simulation and the benchmark harness.

pub mod bench;
pub mod bus;
pub mod config;
pub mod coord;
pub mod due;
pub mod error;
pub mod fleetnet;
pub mod store;
pub mod transport;

pub use error::ServiceError;
