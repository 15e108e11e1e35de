//! Desk-scale laboratory for single-source adversarial robustness of
//! multimodal fusion classifiers.
//!
//! A multimodal classifier fuses `k` input modalities. A single-source
//! adversary perturbs exactly one modality within an l-infinity budget while
//! the other `k-1` stay clean. This crate provides everything needed to study
//! that threat model end to end on synthetic tasks:
//!
//! - [`tensor`] / [`graph`]: a minimal dense-tensor type and a define-by-run
//!   reverse-mode differentiation tape, 64-bit throughout.
//! - [`data`]: reproducible synthetic k-modality classification tasks with a
//!   controllable cross-modality redundancy knob, plus a binary on-disk format.
//! - [`models`]: per-modality MLP feature extractors and a zoo of fusion
//!   heads: concat, mean (logit averaging), early fusion, multiplicative
//!   gating, a linear latent-ensembling layer, leave-one-out oracles, and a
//!   robust fusion layer that weighs a set of leave-one-out expert networks
//!   by the output of an odd-one-out detector.
//! - [`attacks`]: batched projected gradient descent under an l-infinity
//!   budget; adaptive white-box, unimodal transfer, feature-level and
//!   targeted variants.
//! - [`training`]: clean SGD training, robust training of the detector and
//!   fusion subnetwork over frozen extractors, and alternating/joint
//!   adversarial training schedules for the baseline heads.
//! - [`eval`] / [`report`]: clean and per-modality robust accuracy, detector
//!   confusion matrices, oracle bounds, and deterministic JSON/CSV reports.
//! - [`pipeline`] / [`config`]: run-directory orchestration behind the
//!   `oolab` command-line tool, with stage done-markers and resume.
//!
//! Per-sample attack and scoring jobs are data-parallel. With the default
//! `parallel` feature they fan out over a rayon pool; without it the same
//! code runs sequentially. Reductions are ordered by sample index either way,
//! so results are bit-identical across thread counts and both modes.

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod models;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

mod binio;

pub use error::{Error, Result};
pub use tensor::Tensor;
