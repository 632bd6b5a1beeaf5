//! Normal-approximation bounds for sums of negatively associated random
//! variables and for block sums of stationary lattice fields, together with
//! samplers, distance computations and a Monte Carlo harness that checks the
//! bounds empirically.

pub mod bounds;
pub mod harness;
pub mod lattice;
pub mod metrics;
pub mod samplers;
pub mod seeds;
pub mod stats;

pub use bounds::{BoundReport, BoundsError, DecayConstants};
pub use lattice::{BlockPartition, BlockSpec, Cell, CovarianceModel, LatticeError, LatticeField, LatticeVector};
pub use metrics::{MetricsError, SmoothTestFunction, StandardizedSample};
pub use samplers::{FieldKind, FieldSpec, SampleBatch, SamplerError};
