//! Data-driven background estimation for four-jet resonance searches.
//!
//! The library covers the full chain used to model a blinded multijet
//! signal region from control-region data:
//!
//! * [`event`] — the four-jet event model, dijet pairing, mass regions;
//! * [`metric`] — an event-level earth-mover distance with symmetry search;
//! * [`transport`] — exact Kantorovich couplings between event samples;
//! * [`net`] — a small permutation-aware density-ratio classifier;
//! * [`estimators`] — the FvT, OT-kNN and OT-FvT background estimates;
//! * [`inference`] — histograms, a binned Poisson likelihood and closure
//!   diagnostics;
//! * [`toygen`] — a toy event generator for end-to-end exercises;
//! * [`pipeline`] — file-based stages shared with the CLI driver.

pub mod error;
pub mod estimators;
pub mod event;
pub mod inference;
pub mod io;
pub mod metric;
pub mod net;
pub mod pipeline;
mod simplex;
pub mod toygen;
pub mod transport;

pub use error::{Error, Result};
