//! Core of the ADVENT pipeline: a desk-scale VANET traffic generator, per-vehicle
//! packet-rate preprocessing, federated gradient-boosted onset detection with a
//! convolutional mixing head, and MAD-based malicious node detection with
//! server-side list aggregation.

pub mod api;
pub mod balance;
pub mod error;
pub mod fed_mnd;
pub mod fed_onset;
pub mod gbdt;
pub mod head;
pub mod metrics;
pub mod mnd;
pub mod pipeline;
pub mod preprocess;
pub mod protocol;
pub mod scenario;

mod ids;

pub use error::{Error, Result};
pub use ids::{ClientId, VehicleId};
