//! Channel charting with split triplet loss and inertial regularization.
//!
//! The pipeline turns raw CSI into features ([`features`]), picks
//! temporally-labelled triplets ([`selection`]), fits a charting network
//! ([`model`], [`losses`], [`train`]) and scores the resulting chart against
//! ground truth ([`metrics`]). [`scenario`] generates synthetic datasets.

pub mod dataset;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod selection;
pub mod train;

pub use error::{Error, Result};
