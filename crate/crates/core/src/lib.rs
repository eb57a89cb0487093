//! Privacy-preserving sharing of GUI automation scripts.

pub mod client;
pub mod executor;
pub mod harness;
pub mod hashing;
#[cfg(feature = "http")]
pub mod http;
pub mod obfuscator;
pub mod query;
#[cfg(feature = "http")]
pub mod review;
pub mod script;
pub mod server;
pub mod slot;
pub mod ui_model;
