//! Linear threshold-based decision rule: a pixel takes the most probable
//! foreground class when that probability reaches `tau`, background otherwise.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labels::HardLabelMap;
use crate::real::Real;

/// Per-class foreground probabilities of one image, class-major (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundProbMaps<T> {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<T>,
}

impl<T: Real> ForegroundProbMaps<T> {
    pub fn new(num_classes: usize, height: usize, width: usize, probs: Vec<T>) -> Result<Self> {
        if probs.len() != num_classes * height * width {
            return Err(Error::Shape(format!(
                "{} probabilities for {num_classes}x{height}x{width}",
                probs.len()
            )));
        }
        Ok(Self {
            num_classes,
            height,
            width,
            probs,
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Probability of foreground class `class` (1-based) at pixel `idx`.
    #[inline]
    pub fn get(&self, class: usize, idx: usize) -> T {
        self.probs[(class - 1) * self.plane() + idx]
    }
}

/// Class decided for one pixel from its `C` foreground probabilities.
/// Ties go to the lowest class index.
#[inline]
pub fn classify_pixel<T: Real>(probs: impl IntoIterator<Item = T>, tau: T) -> u8 {
    let mut best = 0u8;
    let mut best_p = T::neg_infinity();
    for (c, p) in probs.into_iter().enumerate() {
        if p > best_p {
            best_p = p;
            best = c as u8 + 1;
        }
    }
    if best_p >= tau {
        best
    } else {
        0
    }
}

/// Accepts `0 < tau <= 1`; `tau = 1` labels every strict-sigmoid pixel as
/// background. Training configs additionally exclude 1.
pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")))
    }
}

pub fn threshold_classify<T: Real>(maps: &ForegroundProbMaps<T>, tau: f64) -> Result<HardLabelMap> {
    check_tau(tau)?;
    let t = T::from_f64_lossy(tau);
    let plane = maps.plane();
    let data = (0..plane)
        .map(|idx| classify_pixel((1..=maps.num_classes).map(|c| maps.get(c, idx)), t))
        .collect();
    Ok(HardLabelMap::new(Grid::from_vec(maps.height, maps.width, data)))
}
