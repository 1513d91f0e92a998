//! Early-exit cascades over tri-modal compressed-video features.
//!
//! The pipeline: generate seeded synthetic motion-vector / residual /
//! intra-frame datasets (`data`), train one backbone per modality and
//! attach internal classifiers (`model`), train those classifiers with
//! cross-entropy or progressive distillation (`distill`), fit ensemble
//! scaling factors and run thresholded early-exit inference (`wise`),
//! account FLOPs and stream latency (`cost`), and probe loss-landscape
//! flatness around trained classifiers (`landscape`). `config` and
//! `runner` tie these into reproducible experiment recipes.

pub mod config;
pub mod cost;
pub mod data;
pub mod distill;
pub mod landscape;
pub mod model;
pub mod numcore;
pub mod runner;
pub mod wise;

pub use numcore::{derive_seed, NumError};

