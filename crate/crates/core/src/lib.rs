//! Open-circuit camera toolkit: encrypted footage segments whose keys are
//! handed out over a short-range broadcast to whoever is nearby.

pub mod crypto;
pub mod protocol;
pub mod transport;
pub mod store;
pub mod camera;
pub mod client;
pub mod simharness;
