//! Core of the XRI hub: keeps shared objects coherent across their virtual
//! (scene) and physical (IoT device) embodiments.

pub mod model;
pub mod sync;
pub mod wire;
pub mod device;
pub mod config;
pub mod scenario;
pub mod world;
pub mod metrics;
pub mod script;
