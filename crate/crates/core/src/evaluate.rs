//! Segmentation metrics, feature-compactness diagnostics and run evaluation.

use crate::backbone::{Tensor, UNet};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::inference::{threshold_classify, ForegroundProbMaps};
use crate::labels::{HardLabelMap, SampleRecord};
use crate::prototypes::UnitEmbeddings;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Cap applied to the inter/intra ratio when the intra variance vanishes.
pub const RATIO_CAP: f64 = 1e9;

fn class_mask(labels: &HardLabelMap, class: u8) -> Grid<bool> {
    labels.classes.map(|&v| v == class)
}

/// Overlap `2|A n B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(pred: &HardLabelMap, gt: &HardLabelMap, class: u8) -> f64 {
    assert_eq!(pred.dims(), gt.dims(), "label maps differ in size");
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.classes.data.iter().zip(&gt.classes.data) {
        let (ip, ig) = (p == class, g == class);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// Mask pixels with at least one 4-neighbour outside the mask (the canvas
/// edge counts as outside).
pub fn boundary(mask: &Grid<bool>) -> Grid<bool> {
    let (h, w) = mask.dims();
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask.data[y as usize * w + x as usize];
    let mut out = Grid::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if !mask.data[y * w + x] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            out.data[y * w + x] = !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1));
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform of a sampled function.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates the first one everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_edt(sites: &Grid<bool>) -> Grid<f64> {
    let (h, w) = sites.dims();
    let mut g: Vec<f64> = sites.data.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut o) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = g[y * w + x];
        }
        dt_1d(&f[..h], &mut o[..h], &mut v, &mut z);
        for y in 0..h {
            g[y * w + x] = o[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&g[y * w..(y + 1) * w]);
        dt_1d(&f[..w], &mut o[..w], &mut v, &mut z);
        g[y * w..(y + 1) * w].copy_from_slice(&o[..w]);
    }
    Grid::from_vec(h, w, g)
}

fn directed(from: &Grid<bool>, to_dt: &Grid<f64>) -> f64 {
    from.data
        .iter()
        .zip(&to_dt.data)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Hausdorff distance in pixels between the boundaries of the two class
/// masks; NaN when either mask is empty.
pub fn hausdorff(pred: &HardLabelMap, gt: &HardLabelMap, class: u8) -> f64 {
    assert_eq!(pred.dims(), gt.dims(), "label maps differ in size");
    let a = boundary(&class_mask(pred, class));
    let b = boundary(&class_mask(gt, class));
    if !a.data.contains(&true) || !b.data.contains(&true) {
        return f64::NAN;
    }
    directed(&a, &squared_edt(&b)).max(directed(&b, &squared_edt(&a)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVariance {
    /// Per class in `0..=C`; `None` for classes without pixels.
    pub intra: Vec<Option<f64>>,
    pub inter: f64,
    pub ratio: f64,
}

/// Intra-class spread around each class mean and mean squared distance
/// between class means, on unit-normalized embeddings.
pub fn feature_variance(emb: &UnitEmbeddings, labels: &[u8], num_outputs: usize) -> Result<FeatureVariance> {
    if labels.len() != emb.len() {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), emb.len())));
    }
    let dim = emb.dim;
    let mut sums = vec![vec![0.0; dim]; num_outputs];
    let mut counts = vec![0usize; num_outputs];
    for (p, &c) in labels.iter().enumerate() {
        let c = c as usize;
        if c >= num_outputs {
            return Err(Error::Validation(format!("label {c} outside 0..{num_outputs}")));
        }
        counts[c] += 1;
        sums[c].iter_mut().zip(emb.row(p)).for_each(|(s, v)| *s += v);
    }
    let means: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut intra_sum = vec![0.0; num_outputs];
    for (p, &c) in labels.iter().enumerate() {
        let m = means[c as usize].as_ref().expect("class with pixels has a mean");
        intra_sum[c as usize] += emb.row(p).iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let intra: Vec<Option<f64>> = (0..num_outputs).map(|c| (counts[c] > 0).then(|| intra_sum[c] / counts[c] as f64)).collect();
    let present: Vec<&Vec<f64>> = means.iter().flatten().collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            inter += present[i].iter().zip(present[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            pairs += 1;
        }
    }
    let inter = if pairs > 0 { inter / pairs as f64 } else { 0.0 };
    let vals: Vec<f64> = intra.iter().flatten().copied().collect();
    let mean_intra = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    let ratio = if mean_intra > 0.0 { (inter / mean_intra).min(RATIO_CAP) } else if inter > 0.0 { RATIO_CAP } else { 0.0 };
    Ok(FeatureVariance { intra, inter, ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub dice: f64,
    /// Mean over images with a defined distance; NaN serializes as `null`.
    pub hd: Option<f64>,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tau: f64,
    /// One row per class followed by the `mean` row.
    pub rows: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_hd: Option<f64>,
    pub variance: Option<FeatureVariance>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dice,hd,n_images\n");
        for r in &self.rows {
            let hd = r.hd.map_or("nan".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{},{:.6},{},{}\n", r.class, r.dice, hd, r.n_images));
        }
        s
    }

    pub fn write(&self, json_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: json_path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))
    }
}

fn finite_mean(v: &[f64]) -> Option<f64> {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
}

/// Per-class Dice and HD averaged over images.
pub fn score_predictions(preds: &[HardLabelMap], gts: &[&HardLabelMap], num_classes: usize, tau: f64) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    let n = preds.len();
    let mut rows = Vec::with_capacity(num_classes + 1);
    let (mut dices, mut hds) = (Vec::new(), Vec::new());
    for c in 1..=num_classes as u8 {
        let d: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| dice(p, g, c)).collect();
        let h: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| hausdorff(p, g, c)).collect();
        let dm = if n == 0 { f64::NAN } else { d.iter().sum::<f64>() / n as f64 };
        let hm = finite_mean(&h);
        dices.push(dm);
        if let Some(v) = hm {
            hds.push(v);
        }
        rows.push(ClassMetrics {
            class: c.to_string(),
            dice: dm,
            hd: hm,
            n_images: n,
        });
    }
    let mean_dice = dices.iter().sum::<f64>() / dices.len().max(1) as f64;
    let mean_hd = finite_mean(&hds);
    rows.push(ClassMetrics {
        class: "mean".into(),
        dice: mean_dice,
        hd: mean_hd,
        n_images: n,
    });
    Ok(MetricReport {
        tau,
        rows,
        mean_dice,
        mean_hd,
        variance: None,
    })
}

/// Model outputs for a set of images.
pub struct Predictions {
    pub probs: Vec<ForegroundProbMaps<f32>>,
    /// Unit embeddings of all pixels, image by image.
    pub embeddings: UnitEmbeddings,
}

/// Runs `model` over `images` in chunks of `batch`.
pub fn run_model(model: &UNet<f32>, images: &[&Grid<f32>], batch: usize, keep_embeddings: bool) -> Result<Predictions> {
    let dim = model.config.embed_dim;
    let mut probs = Vec::with_capacity(images.len());
    let mut raw: Vec<f64> = Vec::new();
    for chunk in images.chunks(batch.max(1)) {
        let (h, w) = chunk[0].dims();
        let mut data = Vec::with_capacity(chunk.len() * h * w);
        for g in chunk {
            if g.dims() != (h, w) {
                return Err(Error::Shape("images in a batch differ in size".into()));
            }
            data.extend_from_slice(&g.data);
        }
        let tape = model.forward(&Tensor::from_vec(chunk.len(), 1, h, w, data))?;
        for i in 0..chunk.len() {
            probs.push(ForegroundProbMaps::new(tape.probs.c, h, w, tape.probs.sample(i).to_vec())?);
        }
        if keep_embeddings {
            let e = &tape.embeddings;
            let u = UnitEmbeddings::from_nchw(&e.data, e.n, e.c, e.h * e.w);
            raw.extend_from_slice(&u.vectors);
        }
    }
    Ok(Predictions {
        probs,
        embeddings: UnitEmbeddings::from_pixel_major(&raw, dim),
    })
}

/// Scores `model` on every record with a full label, with the feature
/// variance computed against the ground-truth classes.
pub fn evaluate_model(model: &UNet<f32>, records: &[SampleRecord], tau: f64, with_variance: bool) -> Result<MetricReport> {
    let labeled: Vec<&SampleRecord> = records.iter().filter(|r| r.full_label.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Validation("no records with full labels to evaluate".into()));
    }
    let images: Vec<&Grid<f32>> = labeled.iter().map(|r| &r.image).collect();
    let out = run_model(model, &images, 4, with_variance)?;
    let preds = out.probs.iter().map(|p| threshold_classify(p, tau)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<&HardLabelMap> = labeled.iter().map(|r| r.full_label.as_ref().expect("filtered")).collect();
    let mut report = score_predictions(&preds, &gts, model.num_classes, tau)?;
    if with_variance {
        let labels: Vec<u8> = gts.iter().flat_map(|g| g.classes.data.iter().copied()).collect();
        report.variance = Some(feature_variance(&out.embeddings, &labels, model.num_classes + 1)?);
    }
    Ok(report)
}
