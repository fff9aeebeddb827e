//! Desk-scale continuous navigation: procedural task generation, a
//! standalone HTTP simulator with scene caching and preloading, a compact
//! recurrent action-token policy, and a two-stage training pipeline
//! (imitation learning bootstrap, then multi-turn GRPO with active
//! exploration, dynamic sampling, and dynamic early stopping).
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `gridnav` binary for the end-to-end CLI.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod orchestrator;
pub mod policy;
pub mod protocol;
pub mod scene;
pub mod server;
pub mod sim_client;
pub mod taskgen;
pub mod train_il;
pub mod train_rl;
pub mod world;
