//! Partially-labeled segmentation data: in-memory records, the synthetic
//! multi-subset generator and the on-disk dataset format.

mod io;
mod synth;

pub use io::{load_manifest, read_f32_grid, read_i16_grid, save_manifest, write_f32_grid, write_i16_grid, Dataset};
pub use synth::{generate_synthetic, render_scene, ShapeKind, SynthConfig};

use crate::error::{Error, Result};
use crate::grid::Grid;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sentinel for pixels whose class is not annotated.
pub const UNKNOWN: i16 = -1;

/// Single-class annotation of one image from a partially-labeled subset.
///
/// `classes` holds `labeled_class` on organ pixels and [`UNKNOWN`] elsewhere.
/// `known_negative` marks pixels annotated as "not `labeled_class`".
#[derive(Clone, Debug, PartialEq)]
pub struct PartialLabelMap {
    pub classes: Grid<i16>,
    pub labeled_class: u8,
    pub known_negative: Option<Grid<bool>>,
}

impl PartialLabelMap {
    pub fn new(classes: Grid<i16>, labeled_class: u8, known_negative: Option<Grid<bool>>) -> Result<Self> {
        if let Some(neg) = &known_negative {
            if !neg.same_dims(&classes) {
                return Err(Error::Shape(format!(
                    "known_negative {:?} vs partial label {:?}",
                    neg.dims(),
                    classes.dims()
                )));
            }
        }
        for &v in &classes.data {
            if v != UNKNOWN && v != labeled_class as i16 {
                return Err(Error::Validation(format!(
                    "partial label value {v} outside {{-1, {labeled_class}}}"
                )));
            }
        }
        Ok(Self {
            classes,
            labeled_class,
            known_negative,
        })
    }

    /// A map with no annotation at all.
    pub fn unknown(height: usize, width: usize, labeled_class: u8) -> Self {
        Self {
            classes: Grid::filled(height, width, UNKNOWN),
            labeled_class,
            known_negative: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.classes.dims()
    }

    #[inline]
    pub fn is_labeled(&self, idx: usize) -> bool {
        self.classes.data[idx] != UNKNOWN
    }

    #[inline]
    pub fn is_known_negative(&self, idx: usize) -> bool {
        self.known_negative.as_ref().is_some_and(|n| n.data[idx])
    }

    /// Binary target `y_c` for foreground class `class` (1-based) at pixel `idx`:
    /// `Some(1.0)`, `Some(0.0)`, or `None` for "unknown".
    #[inline]
    pub fn binary_target(&self, idx: usize, class: u8) -> Option<f64> {
        if class != self.labeled_class {
            return None;
        }
        if self.classes.data[idx] == class as i16 {
            Some(1.0)
        } else if self.is_known_negative(idx) {
            Some(0.0)
        } else {
            None
        }
    }
}

/// Per-pixel class in `0..=C`, 0 being background.
#[derive(Clone, Debug, PartialEq)]
pub struct HardLabelMap {
    pub classes: Grid<u8>,
}

impl HardLabelMap {
    pub fn new(classes: Grid<u8>) -> Self {
        Self { classes }
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            classes: Grid::filled(height, width, 0),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.classes.dims()
    }

    pub fn max_class(&self) -> u8 {
        self.classes.data.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// Intensities normalized to `[-1, 1]`.
    pub image: Grid<f32>,
    pub partial_label: PartialLabelMap,
    pub subset_id: usize,
    /// Complete annotation, used only for evaluation.
    pub full_label: Option<HardLabelMap>,
}

impl SampleRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Checks the record invariants: value ranges, congruent grids, and
    /// agreement between partial and full labels on annotated pixels.
    pub fn validate(&self, num_classes: u8) -> Result<()> {
        if let Some(v) = self.image.data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {v} outside [-1, 1]")));
        }
        if !self.image.same_dims(&self.partial_label.classes) {
            return Err(Error::Shape("image vs partial label".into()));
        }
        if let Some(full) = &self.full_label {
            if !full.classes.same_dims(&self.image) {
                return Err(Error::Shape("image vs full label".into()));
            }
            if let Some(v) = full.classes.data.iter().find(|&&v| v > num_classes) {
                return Err(Error::Validation(format!("full label value {v} > C={num_classes}")));
            }
            let p = &self.partial_label;
            for (i, &v) in p.classes.data.iter().enumerate() {
                if v != UNKNOWN && full.classes.data[i] as i16 != v {
                    return Err(Error::Validation(format!(
                        "partial and full label disagree at pixel {i}"
                    )));
                }
                if p.is_known_negative(i) && full.classes.data[i] == p.labeled_class {
                    return Err(Error::Validation(format!(
                        "known-negative pixel {i} is class {} in the full label",
                        p.labeled_class
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Relative file names of one stored sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_negative: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub subset_id: usize,
    pub labeled_class: u8,
    pub samples: Vec<SampleFiles>,
}

/// Index of a dataset directory (`manifest.json`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(rename = "C")]
    pub num_classes: u8,
    /// `(H, W)`
    pub image_size: (usize, usize),
    pub seed: u64,
    pub subsets: Vec<SubsetEntry>,
    /// Fully-annotated held-out images.
    #[serde(default)]
    pub test: Vec<SampleFiles>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    /// Structural checks that need no file access.
    pub fn check(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!("unsupported manifest version {}", self.version)));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("C must be positive".into()));
        }
        for c in 1..=self.num_classes {
            if !self.subsets.iter().any(|s| s.labeled_class == c) {
                return Err(Error::Validation(format!("class {c} is not labeled by any subset")));
            }
        }
        for s in &self.subsets {
            if s.labeled_class == 0 || s.labeled_class > self.num_classes {
                return Err(Error::Validation(format!(
                    "subset {} labels class {} outside 1..={}",
                    s.subset_id, s.labeled_class, self.num_classes
                )));
            }
            if s.samples.iter().any(|f| f.partial_label.is_none()) {
                return Err(Error::Validation(format!("subset {} sample without partial_label", s.subset_id)));
            }
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        self.subsets.iter().map(|s| s.samples.len()).sum()
    }
}

/// Draws `batch_size` distinct records uniformly from the pooled training
/// subsets, returning their indices into the pool.
pub fn sample_batch<R: Rng + ?Sized>(pool_size: usize, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool_size == 0 {
        return Err(Error::Validation("empty training pool".into()));
    }
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    if batch_size > pool_size {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds training pool of {pool_size}"
        )));
    }
    Ok(rand::seq::index::sample(rng, pool_size, batch_size).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn partial_2x2() -> PartialLabelMap {
        let classes = Grid::from_vec(2, 2, vec![2, -1, -1, 2]);
        let neg = Grid::from_vec(2, 2, vec![false, true, false, false]);
        PartialLabelMap::new(classes, 2, Some(neg)).unwrap()
    }

    #[test]
    fn binary_view_follows_sentinel_encoding() {
        let p = partial_2x2();
        assert_eq!(p.binary_target(0, 2), Some(1.0));
        assert_eq!(p.binary_target(1, 2), Some(0.0));
        assert_eq!(p.binary_target(2, 2), None);
        for idx in 0..4 {
            assert_eq!(p.binary_target(idx, 1), None);
            assert_eq!(p.binary_target(idx, 3), None);
        }
    }

    #[test]
    fn partial_rejects_foreign_foreground_ids() {
        let classes = Grid::from_vec(1, 2, vec![1, 2]);
        assert!(PartialLabelMap::new(classes, 2, None).is_err());
    }

    #[test]
    fn validate_catches_partial_full_disagreement() {
        let rec = SampleRecord {
            image: Grid::filled(2, 2, 0.0),
            partial_label: partial_2x2(),
            subset_id: 0,
            full_label: Some(HardLabelMap::new(Grid::from_vec(2, 2, vec![2, 0, 1, 1]))),
        };
        assert!(rec.validate(3).is_err());
        let mut ok = rec.clone();
        ok.full_label = Some(HardLabelMap::new(Grid::from_vec(2, 2, vec![2, 0, 1, 2])));
        ok.validate(3).unwrap();
    }

    #[test]
    fn sample_batch_is_seeded_and_distinct() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = sample_batch(40, 4, &mut a).unwrap();
            assert_eq!(x, sample_batch(40, 4, &mut b).unwrap());
            let mut s = x.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 4);
        }
        assert!(sample_batch(0, 4, &mut a).is_err());
        assert!(sample_batch(10, 1, &mut a).is_err());
        assert_eq!(sample_batch(10, 2, &mut a).unwrap().len(), 2);
    }
}
