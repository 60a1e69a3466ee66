//! Backdoor attack and defense bench for early-exit (multi-exit) CNNs.
//!
//! The toolkit covers the full deployment-stage attack lifecycle at desk
//! scale: train a small convolutional backbone, inject a backdoor into its
//! shallow blocks through surrogate internal classifiers so that the vanilla
//! model stays clean while any early-exit conversion of it activates the
//! backdoor, then measure the result with victim-side simulations and a
//! defense bench (Neural Cleanse, STRIP, DF-TND, unlearning, fine-tuning).
//!
//! Modules map onto the pipeline stages:
//!
//! - [`data`]: procedural image datasets, subsampling, poisoning
//! - [`trigger`]: mask/pattern triggers and the stamping function
//! - [`nn`]: minimal CPU tensor layers with explicit backward passes
//! - [`models`]: backbone architectures and supervised training
//! - [`multiexit`]: internal classifiers, early-exit inference, partitioning
//! - [`attack`]: surrogate-IC backdoor injection and the data-poisoning baseline
//! - [`defenses`]: detector and removal implementations
//! - [`eval`]: ASR / top-k accuracy / victim simulation sweeps
//! - [`checkpoint`]: self-describing model containers
//! - [`config`]: experiment configuration schema and validation
//! - [`report`]: JSON/CSV/SVG experiment artifacts

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod models;
pub mod multiexit;
pub mod nn;
pub mod report;
pub mod trigger;

pub use error::{Error, Result};
