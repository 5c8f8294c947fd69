//! Masked pseudo-labels from the EMA teacher.

use crate::backbone::{Tensor, UNet};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::inference::{check_tau, classify_pixel, ForegroundProbMaps};
use crate::labels::{HardLabelMap, PartialLabelMap};
use crate::real::Real;
use serde::{Deserialize, Serialize};

/// What happens to a known-negative pixel the teacher assigns to the
/// annotated class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictRule {
    /// Best remaining class at or above the threshold, else background.
    #[default]
    NextBest,
    Background,
}

/// Thresholded teacher prediction with the partial annotation written over it.
pub fn make_masked_pseudo<T: Real>(
    probs: &ForegroundProbMaps<T>,
    partial: &PartialLabelMap,
    tau: f64,
    conflict: ConflictRule,
) -> Result<HardLabelMap> {
    check_tau(tau)?;
    let (h, w) = partial.dims();
    if (probs.height, probs.width) != (h, w) {
        return Err(Error::Shape(format!(
            "teacher maps {}x{} vs partial label {h}x{w}",
            probs.height, probs.width
        )));
    }
    let labeled = partial.labeled_class;
    let t = T::from_f64_lossy(tau);
    let c = probs.num_classes;
    let mut out = Vec::with_capacity(h * w);
    for idx in 0..h * w {
        let mut y = classify_pixel((1..=c).map(|k| probs.get(k, idx)), t);
        if partial.is_labeled(idx) {
            y = labeled;
        } else if y == labeled && partial.is_known_negative(idx) {
            y = match conflict {
                ConflictRule::Background => 0,
                ConflictRule::NextBest => {
                    let others = (1..=c).map(|k| if k as u8 == labeled { T::zero() } else { probs.get(k, idx) });
                    classify_pixel(others, t)
                }
            };
        }
        out.push(y);
    }
    Ok(HardLabelMap::new(Grid::from_vec(h, w, out)))
}

/// Runs the teacher on a weak batch and returns one masked pseudo-label per
/// sample. The teacher is borrowed immutably and its activations are
/// dropped, so nothing downstream can differentiate through it.
pub fn teacher_step<T: Real>(
    teacher: &UNet<T>,
    weak: &Tensor<T>,
    partials: &[&PartialLabelMap],
    tau: f64,
    conflict: ConflictRule,
) -> Result<Vec<HardLabelMap>> {
    if partials.len() != weak.n {
        return Err(Error::Shape(format!("{} partial labels for a batch of {}", partials.len(), weak.n)));
    }
    let probs = teacher.forward(weak)?.probs;
    partials
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let maps = ForegroundProbMaps::new(probs.c, probs.h, probs.w, probs.sample(i).to_vec())?;
            make_masked_pseudo(&maps, p, tau, conflict)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(c: usize, h: usize, w: usize, v: Vec<f64>) -> ForegroundProbMaps<f64> {
        ForegroundProbMaps::new(c, h, w, v).unwrap()
    }

    #[test]
    fn annotated_organ_overrides_background_prediction() {
        let probs = maps(2, 1, 3, vec![0.1; 6]);
        let partial = PartialLabelMap::new(Grid::from_vec(1, 3, vec![2, 2, -1]), 2, None).unwrap();
        let y = make_masked_pseudo(&probs, &partial, 0.5, ConflictRule::NextBest).unwrap();
        assert_eq!(y.classes.data, vec![2, 2, 0]);
    }

    #[test]
    fn known_negative_conflict_goes_to_next_best() {
        // 2x2, classes 1..=3, labeled class 1; pixel 0 predicted 1 (0.9) with class 3 at 0.6
        let probs = maps(
            3,
            2,
            2,
            vec![
                0.9, 0.9, 0.2, 0.1, // class 1
                0.3, 0.2, 0.7, 0.1, // class 2
                0.6, 0.4, 0.1, 0.1, // class 3
            ],
        );
        let neg = Grid::from_vec(2, 2, vec![true, true, true, false]);
        let partial = PartialLabelMap::new(Grid::filled(2, 2, -1), 1, Some(neg)).unwrap();
        let next = make_masked_pseudo(&probs, &partial, 0.5, ConflictRule::NextBest).unwrap();
        assert_eq!(next.classes.data, vec![3, 0, 2, 0]);
        let bg = make_masked_pseudo(&probs, &partial, 0.5, ConflictRule::Background).unwrap();
        assert_eq!(bg.classes.data, vec![0, 0, 2, 0]);
    }
}
