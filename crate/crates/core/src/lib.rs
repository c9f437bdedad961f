//! Batch evaluation harness for one-to-many face identification.
//!
//! The pipeline runs over precomputed embeddings: a [`manifest`] describes
//! images and their degraded variants, [`protocol`] splits each cohort into
//! probes and an enrolled gallery, [`search`] finds the rank-one mated and
//! non-mated scores, and [`metrics`] compares score distributions against
//! the baseline. [`experiment`] runs whole condition grids; [`simulate`]
//! produces synthetic cohorts and [`degrade`] builds degraded probe images.

pub mod degrade;
pub mod embedstore;
pub mod experiment;
pub mod manifest;
pub mod metrics;
pub mod protocol;
pub mod rng;
pub mod search;
pub mod simulate;
