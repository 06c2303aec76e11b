//! Classical apple yield estimation: superpixel color clustering with
//! Gaussian mixtures for detection, spatial mixtures for per-cluster fruit
//! counting, multi-view count aggregation and two-sided merging, plus the
//! evaluation harness used to score each stage.

pub mod count;
pub mod data_io;
pub mod detect;
pub mod eval;
pub mod imaging;
pub mod mixture;
pub mod pipeline;
pub mod rle;
pub mod slic;
pub mod yieldmap;

pub use imaging::{BinaryMask, BoundingBox, LabImage, RgbImage};

pub use mixture::{Gaussian, MixtureModel};
