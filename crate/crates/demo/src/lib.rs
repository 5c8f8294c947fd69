//! Browser bindings over the core crate. Every op returns an RGBA buffer of
//! `size * size * 4` bytes ready for `ImageData`.

use ltuda::augment::{cutmix, MixSpec, WeakView};
use ltuda::inference::{threshold_classify, ForegroundProbMaps};
use ltuda::labels::render_scene;
use ltuda::labels::HardLabelMap;
use ltuda::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const NUM_CLASSES: u8 = 4;
const NOISE: f32 = 0.05;
const PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [230, 80, 60], [70, 170, 90], [70, 120, 230], [240, 200, 60]];

fn to_js(e: ltuda::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A rendered scene with its complete label map.
pub fn scene(seed: u64, size: usize) -> ltuda::Result<(Grid<f32>, HardLabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_scene(&mut rng, NUM_CLASSES, size, size, NOISE)
}

/// Grey image in `[-1, 1]` blended with class colours at `alpha`.
pub fn overlay(image: &Grid<f32>, label: &HardLabelMap, alpha: f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len() * 4);
    for (&v, &c) in image.data.iter().zip(&label.classes.data) {
        let grey = ((v + 1.0) * 127.5).clamp(0.0, 255.0);
        let a = if c == 0 { 0.0 } else { alpha };
        for &ch in &PALETTE[c as usize % PALETTE.len()] {
            out.push((grey * (1.0 - a) + ch as f32 * a).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Smooth stand-in for network output: each class map is the box-blurred
/// indicator of that class scaled by `confidence`.
pub fn soft_maps(label: &HardLabelMap, radius: usize, confidence: f64) -> ForegroundProbMaps<f64> {
    let (h, w) = label.dims();
    let mut probs = Vec::with_capacity(NUM_CLASSES as usize * h * w);
    for class in 1..=NUM_CLASSES {
        for y in 0..h {
            for x in 0..w {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
                let mut hits = 0usize;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        hits += (*label.classes.get(yy, xx) == class) as usize;
                    }
                }
                probs.push(confidence * hits as f64 / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    ForegroundProbMaps::new(NUM_CLASSES as usize, h, w, probs).expect("consistent map sizes")
}

/// Scene `seed` at `size x size` with its labels overlaid.
#[wasm_bindgen]
pub fn render_sample(seed: u64, size: usize, alpha: f32) -> Result<Vec<u8>, JsError> {
    let (image, label) = scene(seed, size).map_err(to_js)?;
    Ok(overlay(&image, &label, alpha))
}

/// Pastes the box `(r_x, r_y)` sized by `lam` from scene `seed_b` into `seed_a`.
#[wasm_bindgen]
pub fn cutmix_preview(seed_a: u64, seed_b: u64, size: usize, lam: f64, r_x: usize, r_y: usize) -> Result<Vec<u8>, JsError> {
    let view = |seed| -> ltuda::Result<WeakView> {
        let (image, pseudo) = scene(seed, size)?;
        Ok(WeakView { image, pseudo, partial: Grid::filled(size, size, -1) })
    };
    let (a, b) = (view(seed_a).map_err(to_js)?, view(seed_b).map_err(to_js)?);
    let mixed = cutmix(&a, &b, &MixSpec::from_box(size, size, lam.clamp(0.0, 1.0), r_x, r_y)).map_err(to_js)?;
    Ok(overlay(&mixed.image, &mixed.pseudo, 0.5))
}

/// Thresholds blurred class maps of scene `seed` at `tau`.
#[wasm_bindgen]
pub fn threshold_preview(seed: u64, size: usize, blur: usize, confidence: f64, tau: f64) -> Result<Vec<u8>, JsError> {
    let (image, label) = scene(seed, size).map_err(to_js)?;
    let maps = soft_maps(&label, blur, confidence.clamp(0.0, 1.0));
    let pred = threshold_classify(&maps, tau).map_err(to_js)?;
    Ok(overlay(&image, &pred, 0.6))
}
