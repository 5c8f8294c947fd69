//! Partially-supervised multi-organ segmentation: a teacher-student U-Net
//! trained from single-class annotations, with cross-set CutMix views and
//! labeled/unlabeled prototype classifiers that align the two feature
//! distributions.

pub mod augment;
pub mod backbone;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod grid;
pub mod inference;
pub mod labels;
pub mod losses;
pub mod prototypes;
pub mod real;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::Grid;
