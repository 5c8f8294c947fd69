//! Synthetic partially-labeled dataset: each image holds one parametric
//! shape per class on a noisy, smoothly varying background. Subset `i`
//! reveals only class `i + 1`; every other pixel is a known negative for it.

use super::{io, DatasetManifest, HardLabelMap, PartialLabelMap, SampleFiles, SubsetEntry, MANIFEST_VERSION, UNKNOWN};
use crate::error::{Error, Result};
use crate::grid::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f32::consts::PI;
use std::path::Path;

const BACKGROUND_LEVEL: f32 = -0.45;
const PLACEMENT_RETRIES: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Annulus,
    Crescent,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class - 1) % 4 {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            2 => ShapeKind::Annulus,
            _ => ShapeKind::Crescent,
        }
    }

    /// Bounding radius as a fraction of the short image side.
    fn radius_range(self) -> (f32, f32) {
        match self {
            ShapeKind::Ellipse => (0.15, 0.20),
            ShapeKind::Rectangle => (0.11, 0.15),
            ShapeKind::Annulus => (0.10, 0.13),
            ShapeKind::Crescent => (0.10, 0.14),
        }
    }

    /// Mean intensity range before the per-domain gain/offset. The crescent
    /// sits just above the background level (low-contrast organ).
    fn intensity_range(self) -> (f32, f32) {
        match self {
            ShapeKind::Ellipse => (0.33, 0.57),
            ShapeKind::Rectangle => (0.03, 0.27),
            ShapeKind::Annulus => (0.18, 0.42),
            ShapeKind::Crescent => (-0.26, -0.14),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: u8,
    pub per_subset: usize,
    pub test_images: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f32,
}

impl SynthConfig {
    pub fn new(num_classes: u8, per_subset: usize, size: usize, seed: u64) -> Self {
        Self {
            num_classes,
            per_subset,
            test_images: per_subset,
            height: size,
            width: size,
            seed,
            noise: 0.10,
        }
    }

    fn check(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need C >= 2, got {}", self.num_classes)));
        }
        if self.per_subset < 1 {
            return Err(Error::Config("need at least one sample per subset".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "image size {}x{} below the 32x32 minimum",
                self.height, self.width
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Intensity transform shared by all images of one acquisition domain.
#[derive(Clone, Copy, Debug)]
struct Domain {
    gain: f32,
    offset: f32,
}

impl Domain {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            gain: rng.random_range(0.6..1.4),
            offset: rng.random_range(-0.3..0.3),
        }
    }
}

struct Placed {
    cx: f32,
    cy: f32,
    radius: f32,
}

struct Shape {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
    aspect: f32,
    inner: f32,
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.radius;
        match self.kind {
            ShapeKind::Ellipse => {
                let (a, b) = (r, r * self.aspect);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            ShapeKind::Rectangle => {
                // half-diagonal equals the bounding radius
                let phi = 0.45 + 0.35 * self.aspect;
                u.abs() <= r * phi.cos() && v.abs() <= r * phi.sin()
            }
            ShapeKind::Annulus => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r * self.inner).powi(2)
            }
            ShapeKind::Crescent => {
                let off = 0.45 * r;
                let (ox, oy) = (u - off, v);
                u * u + v * v <= r * r && ox * ox + oy * oy > (r * 0.85).powi(2)
            }
        }
    }
}

fn place<R: Rng + ?Sized>(
    rng: &mut R,
    radius: f32,
    height: usize,
    width: usize,
    placed: &[Placed],
    gap: f32,
) -> Option<(f32, f32)> {
    let (lo_x, hi_x) = (radius + 1.0, width as f32 - radius - 1.0);
    let (lo_y, hi_y) = (radius + 1.0, height as f32 - radius - 1.0);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None;
    }
    for _ in 0..PLACEMENT_RETRIES {
        let cx = rng.random_range(lo_x..hi_x);
        let cy = rng.random_range(lo_y..hi_y);
        let clear = placed.iter().all(|p| {
            let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
            d > p.radius + radius + gap
        });
        if clear {
            return Some((cx, cy));
        }
    }
    None
}

fn sample_shape<R: Rng + ?Sized>(rng: &mut R, kind: ShapeKind, radius: f32, cx: f32, cy: f32) -> Shape {
    Shape {
        kind,
        cx,
        cy,
        radius,
        angle: rng.random_range(0.0..PI),
        aspect: rng.random_range(0.55..0.9),
        inner: rng.random_range(0.45..0.6),
    }
}

/// Renders one image and its complete label map.
pub fn render_scene<R: Rng + ?Sized>(
    rng: &mut R,
    num_classes: u8,
    height: usize,
    width: usize,
    noise: f32,
) -> Result<(Grid<f32>, HardLabelMap)> {
    let domain = Domain::sample(rng);
    render_in_domain(rng, num_classes, height, width, noise, domain)
}

fn render_in_domain<R: Rng + ?Sized>(
    rng: &mut R,
    num_classes: u8,
    height: usize,
    width: usize,
    noise: f32,
    domain: Domain,
) -> Result<(Grid<f32>, HardLabelMap)> {
    let side = height.min(width) as f32;
    // shrink shapes when there are more classes than the base layout holds
    let crowd = (4.0 / num_classes as f32).sqrt().min(1.0);
    let gap = (side * 0.03).max(2.0);

    let mut placed = Vec::with_capacity(num_classes as usize + 3);
    let mut organs = Vec::with_capacity(num_classes as usize);
    for class in 1..=num_classes {
        let kind = ShapeKind::for_class(class);
        let (lo, hi) = kind.radius_range();
        let radius = rng.random_range(lo..hi) * side * crowd;
        let (cx, cy) = place(rng, radius, height, width, &placed, gap).ok_or_else(|| {
            Error::Generation(format!(
                "no room for class {class} ({kind:?}, radius {radius:.1}) after {PLACEMENT_RETRIES} tries"
            ))
        })?;
        placed.push(Placed { cx, cy, radius });
        let (ilo, ihi) = kind.intensity_range();
        let level = rng.random_range(ilo..ihi);
        organs.push((class, sample_shape(rng, kind, radius, cx, cy), level));
    }

    // background clutter with organ-like intensities but no label
    let mut distractors = Vec::new();
    let n_distractors = rng.random_range(1..=3);
    for _ in 0..n_distractors {
        let radius = rng.random_range(0.04..0.07) * side;
        if let Some((cx, cy)) = place(rng, radius, height, width, &placed, gap) {
            placed.push(Placed { cx, cy, radius });
            let level = rng.random_range(-0.1..0.5);
            distractors.push((sample_shape(rng, ShapeKind::Ellipse, radius, cx, cy), level));
        }
    }

    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.5..3.0) * 2.0 * PI / side,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();

    let normal = Normal::new(0.0f32, noise.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut image = Grid::filled(height, width, 0.0f32);
    let mut label = Grid::filled(height, width, 0u8);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut v = BACKGROUND_LEVEL;
            for &(amp, freq, phase, dir) in &waves {
                v += amp * ((px * dir.cos() + py * dir.sin()) * freq + phase).sin();
            }
            for (shape, level) in &distractors {
                if shape.contains(px, py) {
                    v = *level;
                }
            }
            for (class, shape, level) in &organs {
                if shape.contains(px, py) {
                    v = *level;
                    *label.get_mut(y, x) = *class;
                }
            }
            if noise > 0.0 {
                v += normal.sample(rng);
            }
            *image.get_mut(y, x) = (domain.gain * v + domain.offset).clamp(-1.0, 1.0);
        }
    }
    Ok((image, HardLabelMap::new(label)))
}

/// Partial annotation revealing only `labeled_class`; all other pixels are
/// marked as known negatives for that class.
pub(crate) fn partial_from_full(full: &HardLabelMap, labeled_class: u8) -> PartialLabelMap {
    let classes = full
        .classes
        .map(|&v| if v == labeled_class { labeled_class as i16 } else { UNKNOWN });
    let known_negative = full.classes.map(|&v| v != labeled_class);
    PartialLabelMap {
        classes,
        labeled_class,
        known_negative: Some(known_negative),
    }
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes a synthetic dataset with `C` partially-labeled subsets and a
/// fully-labeled test split to `out_dir`, returning its manifest.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.check()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (cfg.height, cfg.width);

    let mut subsets = Vec::with_capacity(cfg.num_classes as usize);
    for subset_id in 0..cfg.num_classes as usize {
        let labeled_class = subset_id as u8 + 1;
        let dir = format!("subset_{subset_id}");
        std::fs::create_dir_all(out_dir.join(&dir)).map_err(|e| Error::io(out_dir.join(&dir), e))?;
        let domain = Domain::sample(&mut scene_rng(cfg.seed, 1 << 32 | subset_id as u64));
        let mut samples = Vec::with_capacity(cfg.per_subset);
        for j in 0..cfg.per_subset {
            let mut rng = scene_rng(cfg.seed, ((subset_id as u64) << 20) | j as u64);
            let (image, full) = render_in_domain(&mut rng, cfg.num_classes, h, w, cfg.noise, domain)?;
            let partial = partial_from_full(&full, labeled_class);
            let files = SampleFiles {
                image: format!("{dir}/img_{j:03}.f32"),
                partial_label: Some(format!("{dir}/partial_{j:03}.i16")),
                known_negative: Some(format!("{dir}/negative_{j:03}.u8")),
                full_label: Some(format!("{dir}/full_{j:03}.i16")),
            };
            io::write_sample(out_dir, &files, &image, Some(&partial), Some(&full))?;
            samples.push(files);
        }
        subsets.push(SubsetEntry {
            subset_id,
            labeled_class,
            samples,
        });
    }

    std::fs::create_dir_all(out_dir.join("test")).map_err(|e| Error::io(out_dir.join("test"), e))?;
    let mut test = Vec::with_capacity(cfg.test_images);
    for j in 0..cfg.test_images {
        let mut rng = scene_rng(cfg.seed, (1 << 40) | j as u64);
        let (image, full) = render_scene(&mut rng, cfg.num_classes, h, w, cfg.noise)?;
        let files = SampleFiles {
            image: format!("test/img_{j:03}.f32"),
            partial_label: None,
            known_negative: None,
            full_label: Some(format!("test/full_{j:03}.i16")),
        };
        io::write_sample(out_dir, &files, &image, None, Some(&full))?;
        test.push(files);
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_classes: cfg.num_classes,
        image_size: (h, w),
        seed: cfg.seed,
        subsets,
        test,
    };
    io::save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_has_every_class_and_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (img, full) = render_scene(&mut rng, 4, 64, 64, 0.1).unwrap();
            assert!(img.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            for c in 1..=4u8 {
                assert!(full.classes.data.contains(&c), "class {c} missing");
            }
            assert!(full.classes.data.contains(&0));
        }
    }

    #[test]
    fn too_many_classes_for_canvas_fail_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = render_scene(&mut rng, 60, 32, 32, 0.1).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "{err}");
    }

    #[test]
    fn partial_reveals_only_labeled_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, full) = render_scene(&mut rng, 4, 48, 48, 0.1).unwrap();
        let p = partial_from_full(&full, 3);
        for (i, &v) in p.classes.data.iter().enumerate() {
            assert!(v == UNKNOWN || v == 3);
            assert_eq!(v == 3, full.classes.data[i] == 3);
            assert_eq!(p.is_known_negative(i), v == UNKNOWN);
        }
    }

    #[test]
    fn config_preconditions() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(&SynthConfig::new(1, 1, 64, 0), tmp.path()).is_err());
        assert!(generate_synthetic(&SynthConfig::new(4, 0, 64, 0), tmp.path()).is_err());
        assert!(generate_synthetic(&SynthConfig::new(4, 1, 16, 0), tmp.path()).is_err());
    }
}
