//! Weak geometric augmentation and cross-set CutMix.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labels::{HardLabelMap, PartialLabelMap, SampleRecord, UNKNOWN};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Rotation (degrees, counter-clockwise in image coordinates) and isotropic
/// scale about the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakAugSpec {
    pub angle: f64,
    pub scale: f64,
}

impl WeakAugSpec {
    pub const IDENTITY: WeakAugSpec = WeakAugSpec { angle: 0.0, scale: 1.0 };

    pub fn sample<R: Rng + ?Sized>(max_angle: f64, scale_range: (f64, f64), rng: &mut R) -> Self {
        let angle = if max_angle > 0.0 { rng.random_range(-max_angle..=max_angle) } else { 0.0 };
        let (lo, hi) = scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self { angle, scale }
    }
}

/// Inverse map from output pixel to source coordinates.
struct Warp {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    inv_scale: f64,
}

impl Warp {
    fn new(spec: WeakAugSpec, h: usize, w: usize) -> Self {
        let (sin, cos) = match spec.angle {
            a if a == 0.0 => (0.0, 1.0),
            a if a == 90.0 => (1.0, 0.0),
            a if a == -90.0 => (-1.0, 0.0),
            a if a.abs() == 180.0 => (0.0, -1.0),
            a => a.to_radians().sin_cos(),
        };
        Self {
            cy: (h as f64 - 1.0) / 2.0,
            cx: (w as f64 - 1.0) / 2.0,
            cos,
            sin,
            inv_scale: 1.0 / spec.scale,
        }
    }

    #[inline]
    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        let sy = (self.cos * dy - self.sin * dx) * self.inv_scale + self.cy;
        let sx = (self.sin * dy + self.cos * dx) * self.inv_scale + self.cx;
        (sy, sx)
    }
}

fn nearest_index(sy: f64, sx: f64, h: usize, w: usize) -> Option<usize> {
    let (ry, rx) = (sy.round(), sx.round());
    (ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64).then(|| ry as usize * w + rx as usize)
}

/// Nearest-neighbour resampling; `fill` outside the source canvas.
pub fn warp_nearest<T: Clone>(grid: &Grid<T>, spec: WeakAugSpec, fill: T) -> Grid<T> {
    let (h, w) = grid.dims();
    let warp = Warp::new(spec, h, w);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = warp.source(y, x);
            data.push(match nearest_index(sy, sx, h, w) {
                Some(i) => grid.data[i].clone(),
                None => fill.clone(),
            });
        }
    }
    Grid::from_vec(h, w, data)
}

/// Bilinear resampling; `fill` outside the source canvas.
pub fn warp_bilinear(grid: &Grid<f32>, spec: WeakAugSpec, fill: f32) -> Grid<f32> {
    let (h, w) = grid.dims();
    let warp = Warp::new(spec, h, w);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            fill as f64
        } else {
            grid.data[y as usize * w + x as usize] as f64
        }
    };
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = warp.source(y, x);
            if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
                data.push(fill);
                continue;
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let mut v = at(y0, x0) * (1.0 - fy) * (1.0 - fx);
            if fx > 0.0 {
                v += at(y0, x0 + 1) * (1.0 - fy) * fx;
            }
            if fy > 0.0 {
                v += at(y0 + 1, x0) * fy * (1.0 - fx);
                if fx > 0.0 {
                    v += at(y0 + 1, x0 + 1) * fy * fx;
                }
            }
            data.push(v as f32);
        }
    }
    Grid::from_vec(h, w, data)
}

/// Background intensity used to fill uncovered canvas: the mean of the
/// image border.
pub fn border_mean(grid: &Grid<f32>) -> f32 {
    let (h, w) = grid.dims();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                sum += grid.data[y * w + x] as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

/// Applies `spec` jointly to the image (bilinear) and every label grid
/// (nearest). Uncovered pixels get the border intensity, label `-1`, no
/// known negative and full label background.
pub fn weak_augment(record: &SampleRecord, spec: WeakAugSpec) -> SampleRecord {
    if spec == WeakAugSpec::IDENTITY {
        return record.clone();
    }
    let fill = border_mean(&record.image);
    let partial = &record.partial_label;
    SampleRecord {
        image: warp_bilinear(&record.image, spec, fill),
        partial_label: PartialLabelMap {
            classes: warp_nearest(&partial.classes, spec, UNKNOWN),
            labeled_class: partial.labeled_class,
            known_negative: partial.known_negative.as_ref().map(|g| warp_nearest(g, spec, false)),
        },
        subset_id: record.subset_id,
        full_label: record
            .full_label
            .as_ref()
            .map(|f| HardLabelMap::new(warp_nearest(&f.classes, spec, 0))),
    }
}

/// Where the box cut from the partner is pasted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Same,
    Random,
    Prior,
}

/// One CutMix draw: the unclipped box `(r_x, r_y, r_w, r_h)` with its top-left
/// corner at `(r_x, r_y)`, the ratio `lam` and the clipped binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    pub r_x: usize,
    pub r_y: usize,
    pub r_w: usize,
    pub r_h: usize,
    pub lam: f64,
    pub mask: Grid<bool>,
    pub partner_index: usize,
}

impl MixSpec {
    pub fn from_box(height: usize, width: usize, lam: f64, r_x: usize, r_y: usize) -> Self {
        let side = (1.0 - lam).max(0.0).sqrt();
        let r_w = (width as f64 * side).round() as usize;
        let r_h = (height as f64 * side).round() as usize;
        let mut mask = Grid::filled(height, width, false);
        for y in r_y.min(height)..(r_y + r_h).min(height) {
            for x in r_x.min(width)..(r_x + r_w).min(width) {
                mask.data[y * width + x] = true;
            }
        }
        Self {
            r_x,
            r_y,
            r_w,
            r_h,
            lam,
            mask,
            partner_index: 0,
        }
    }

    /// `r_w * r_h / (H * W)` before clipping.
    pub fn unclipped_fraction(&self) -> f64 {
        let (h, w) = self.mask.dims();
        (self.r_w * self.r_h) as f64 / (h * w) as f64
    }

    pub fn mask_count(&self) -> usize {
        self.mask.data.iter().filter(|&&m| m).count()
    }
}

/// Draws `lam ~ U(0, 1)` and a box corner uniformly over the canvas.
pub fn sample_mixspec<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> MixSpec {
    let lam: f64 = rng.random();
    let r_x = rng.random_range(0..width.max(1));
    let r_y = rng.random_range(0..height.max(1));
    MixSpec::from_box(height, width, lam, r_x, r_y)
}

/// Mixing strategy hook. Only CutMix is provided.
pub trait Mixer {
    fn sample_spec(&self, height: usize, width: usize, rng: &mut dyn rand::RngCore) -> Result<MixSpec>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CutMix {
    pub placement: Placement,
}

impl Mixer for CutMix {
    fn sample_spec(&self, height: usize, width: usize, rng: &mut dyn rand::RngCore) -> Result<MixSpec> {
        match self.placement {
            Placement::Same => Ok(sample_mixspec(height, width, rng)),
            other => Err(Error::Config(format!("placement {other:?} is not implemented"))),
        }
    }
}

/// `(1 - M) * a + M * b`, elementwise by the binary mask.
pub fn mix_grid<T: Clone>(a: &Grid<T>, b: &Grid<T>, mask: &Grid<bool>) -> Result<Grid<T>> {
    if !a.same_dims(b) || !a.same_dims(mask) {
        return Err(Error::Shape(format!(
            "cutmix operands {:?}, {:?}, mask {:?}",
            a.dims(),
            b.dims(),
            mask.dims()
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .zip(&mask.data)
        .map(|((x, y), &m)| if m { y.clone() } else { x.clone() })
        .collect();
    Ok(Grid::from_vec(a.height, a.width, data))
}

/// A weakly augmented sample with its masked pseudo-label.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakView {
    pub image: Grid<f32>,
    pub pseudo: HardLabelMap,
    /// Partial annotation classes (`-1` where unknown).
    pub partial: Grid<i16>,
}

/// Mixed image and labels for one sample of a strong view.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Grid<f32>,
    pub pseudo: HardLabelMap,
    pub partial: Grid<i16>,
    pub spec: MixSpec,
}

pub fn cutmix(a: &WeakView, b: &WeakView, spec: &MixSpec) -> Result<MixedSample> {
    Ok(MixedSample {
        image: mix_grid(&a.image, &b.image, &spec.mask)?,
        pseudo: HardLabelMap::new(mix_grid(&a.pseudo.classes, &b.pseudo.classes, &spec.mask)?),
        partial: mix_grid(&a.partial, &b.partial, &spec.mask)?,
        spec: spec.clone(),
    })
}

/// Uniform random permutation without fixed points.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Validation(format!("pairing needs at least 2 samples, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// `views` independent CutMix batches, each with its own partner pairing and
/// per-sample box.
pub fn strong_views<R: Rng>(batch: &[WeakView], views: usize, mixer: &dyn Mixer, rng: &mut R) -> Result<Vec<Vec<MixedSample>>> {
    if views == 0 {
        return Err(Error::Validation("at least one strong view is required".into()));
    }
    let (h, w) = batch.first().map(|v| v.image.dims()).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(views);
    for _ in 0..views {
        let partners = derangement(batch.len(), rng)?;
        let mut mixed = Vec::with_capacity(batch.len());
        for (i, a) in batch.iter().enumerate() {
            let mut spec = mixer.sample_spec(h, w, rng)?;
            spec.partner_index = partners[i];
            mixed.push(cutmix(a, &batch[partners[i]], &spec)?);
        }
        out.push(mixed);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Grid<f32> {
        Grid::from_vec(h, w, (0..h * w).map(|i| i as f32 / (h * w) as f32).collect())
    }

    #[test]
    fn identity_spec_is_exact() {
        let g = ramp(6, 5);
        assert_eq!(warp_bilinear(&g, WeakAugSpec::IDENTITY, -1.0), g);
        assert_eq!(warp_nearest(&g, WeakAugSpec::IDENTITY, -1.0), g);
    }

    #[test]
    fn quarter_turn_is_an_index_rotation() {
        let n = 5;
        let g = Grid::from_vec(n, n, (0..(n * n) as i16).collect());
        let r = warp_nearest(&g, WeakAugSpec { angle: 90.0, scale: 1.0 }, -1);
        for y in 0..n {
            for x in 0..n {
                // output (y, x) samples source (cy - dx, cx + dy) = (n-1-x, y)
                assert_eq!(*r.get(y, x), *g.get(n - 1 - x, y));
            }
        }
    }

    #[test]
    fn lambda_limits() {
        let full = MixSpec::from_box(8, 6, 0.0, 0, 0);
        assert!(full.mask.data.iter().all(|&m| m));
        let none = MixSpec::from_box(8, 6, 1.0, 3, 2);
        assert_eq!((none.r_w, none.r_h), (0, 0));
        assert!(none.mask.data.iter().all(|&m| !m));
    }

    #[test]
    fn box_is_clipped_at_the_border() {
        let s = MixSpec::from_box(10, 10, 0.75, 8, 9);
        assert_eq!((s.r_w, s.r_h), (5, 5));
        assert_eq!(s.mask_count(), 2);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..8 {
            let p = derangement(n, &mut rng).unwrap();
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
        assert!(derangement(1, &mut rng).is_err());
    }

    #[test]
    fn unsupported_placement_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = CutMix { placement: Placement::Prior };
        assert!(m.sample_spec(4, 4, &mut rng).is_err());
    }
}
