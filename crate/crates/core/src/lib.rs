//! Video anomaly detection on the edge: clip preprocessing, an I3D-style
//! feature extractor, a temporal feature-magnitude detector, an inference
//! graph optimizer and a throughput/memory benchmark harness.

// Validation writes `!(x > 0.0)` on purpose: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod eval;
pub mod extractor;
pub mod graph;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod rtfm;
pub mod source;
pub mod tensor;
