//! Continuous-time actor-critic methods for choice-based network revenue management.

// Parameter checks use `!(x > 0.0)` so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod instances;
pub mod learn;
pub mod model;
pub mod policy;
pub mod queueing;
pub mod simulate;
pub mod tinynn;
pub mod value;

pub use model::{ArrivalRate, Assortment, NetworkInstance, RateProfile, Segment, SegmentedMnl};
pub use policy::{DifferentiablePolicy, Policy};
pub use simulate::{RngStream, Trajectory};
