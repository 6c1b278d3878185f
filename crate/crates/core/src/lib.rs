//! Framework-free math for anchor-free, rotation-aware people detection in
//! overhead fisheye imagery.
//!
//! * [`geometry`]: oriented boxes, canonical form, angle wrapping, rotated IoU.
//! * [`codec`]: ground truth to dense heatmap/offset/size/orientation maps and back.
//! * [`losses`]: focal, offset, size and periodic angle losses with analytic
//!   gradients, a finite-difference checker and a single-angle descent demo.
//! * [`eval`]: greedy rotated-IoU matching, 101-point AP, precision/recall/F1.
//! * [`synth`]: seeded synthetic scenes with radially oriented people.
//! * [`arpt`] and [`records`]: the tensor and JSONL file formats.

pub mod arpt;
pub mod cli;
pub mod codec;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod records;
pub mod rng;
pub mod synth;

pub use codec::{DenseMaps, Detection, EncodedTargets};
pub use eval::{EvalReport, GroundTruthSet};
pub use geometry::ObbBox;
pub use losses::{AngleLossKind, LossBreakdown, LossWeights, RangeMode};
