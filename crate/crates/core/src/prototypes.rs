//! Class prototype banks: `K` unit-norm sub-centroids per class (background
//! included), maintained by momentum online clustering, and the
//! nearest-prototype softmax classifier built on them.

use crate::error::{Error, Result};
use crate::real::Real;
use rand::Rng;

/// Per-pixel L2-normalized embeddings stored pixel-major (`n x dim`), with
/// the original norms kept for the chain rule back to raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitEmbeddings {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub norms: Vec<f64>,
}

const MIN_NORM: f64 = 1e-12;

impl UnitEmbeddings {
    /// `raw` is a batch of channel-major maps (`n x dim x hw`), the layout
    /// produced by the backbone. Pixels are numbered sample by sample.
    pub fn from_nchw<T: Real>(raw: &[T], n: usize, dim: usize, hw: usize) -> Self {
        assert!(dim > 0 && raw.len() == n * dim * hw, "embedding length");
        let mut vectors = vec![0.0; n * hw * dim];
        for b in 0..n {
            for d in 0..dim {
                let row = &raw[(b * dim + d) * hw..(b * dim + d + 1) * hw];
                for (p, &v) in row.iter().enumerate() {
                    vectors[(b * hw + p) * dim + d] = v.as_f64();
                }
            }
        }
        Self::normalize_rows(vectors, dim)
    }

    /// `raw` is pixel-major (`pixels x dim`).
    pub fn from_pixel_major(raw: &[f64], dim: usize) -> Self {
        assert!(dim > 0 && raw.len() % dim == 0, "embedding length");
        Self::normalize_rows(raw.to_vec(), dim)
    }

    fn normalize_rows(mut vectors: Vec<f64>, dim: usize) -> Self {
        let n = vectors.len() / dim;
        let mut norms = vec![0.0; n];
        for (p, row) in vectors.chunks_exact_mut(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[p] = norm;
            let inv = 1.0 / norm.max(MIN_NORM);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Self { dim, vectors, norms }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f64] {
        &self.vectors[p * self.dim..(p + 1) * self.dim]
    }

    /// Maps a gradient w.r.t. the unit vectors (pixel-major) to a gradient
    /// w.r.t. the raw embeddings, returned in the `n x dim x hw` layout.
    pub fn backprop_nchw<T: Real>(&self, grad_unit: &[f64], hw: usize) -> Vec<T> {
        let (total, dim) = (self.len(), self.dim);
        assert!(hw > 0 && total % hw == 0 && grad_unit.len() == total * dim);
        let mut out = vec![T::zero(); total * dim];
        for q in 0..total {
            let (b, p) = (q / hw, q % hw);
            let u = self.row(q);
            let g = &grad_unit[q * dim..(q + 1) * dim];
            let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
            let inv = 1.0 / self.norms[q].max(MIN_NORM);
            for d in 0..dim {
                out[(b * dim + d) * hw + p] = T::from_f64_lossy((g[d] - u[d] * dot) * inv);
            }
        }
        out
    }
}

/// `(C + 1) x K` unit prototypes of dimension `dim`; slot `(c, k)` is stored
/// at row `c * K + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub num_classes: usize,
    pub k: usize,
    pub dim: usize,
    pub momentum: f64,
    pub protos: Vec<f64>,
    pub initialized: Vec<bool>,
}

/// Per-pixel class distribution over `0..=C`, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub num_outputs: usize,
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn pixels(&self) -> usize {
        self.probs.len() / self.num_outputs
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.probs[p * self.num_outputs..(p + 1) * self.num_outputs]
    }
}

/// Result of scoring every pixel against a bank.
#[derive(Clone, Debug)]
pub struct ProtoScores {
    /// Cosine similarity to every prototype, `pixels x (C+1)K`.
    pub sims: Vec<f64>,
    /// Per-pixel, per-class index `k` of the nearest prototype.
    pub nearest: Vec<usize>,
    pub dist: ClassDistribution,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, k: usize, dim: usize, momentum: f64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("prototype K and dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("prototype momentum {momentum} outside [0, 1]")));
        }
        let slots = (num_classes + 1) * k;
        Ok(Self {
            num_classes,
            k,
            dim,
            momentum,
            protos: vec![0.0; slots * dim],
            initialized: vec![false; slots],
        })
    }

    pub fn slots(&self) -> usize {
        (self.num_classes + 1) * self.k
    }

    #[inline]
    pub fn proto(&self, class: usize, k: usize) -> &[f64] {
        let s = class * self.k + k;
        &self.protos[s * self.dim..(s + 1) * self.dim]
    }

    #[inline]
    pub fn slot(&self, s: usize) -> &[f64] {
        &self.protos[s * self.dim..(s + 1) * self.dim]
    }

    fn proto_mut(&mut self, class: usize, k: usize) -> &mut [f64] {
        let s = class * self.k + k;
        &mut self.protos[s * self.dim..(s + 1) * self.dim]
    }

    pub fn is_class_initialized(&self, class: usize) -> bool {
        self.initialized[class * self.k..(class + 1) * self.k].iter().all(|&b| b)
    }

    pub fn is_fully_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    /// Writes the given unit vectors into class `class` and marks it initialized.
    pub fn set_class(&mut self, class: usize, protos: &[Vec<f64>]) {
        assert_eq!(protos.len(), self.k);
        for (k, p) in protos.iter().enumerate() {
            assert_eq!(p.len(), self.dim);
            self.proto_mut(class, k).copy_from_slice(p);
            self.initialized[class * self.k + k] = true;
        }
    }

    /// Cosine similarities, nearest prototype per class and the softmax over
    /// classes of the best per-class similarity.
    pub fn score(&self, emb: &UnitEmbeddings) -> Result<ProtoScores> {
        if !self.is_fully_initialized() {
            let missing: Vec<usize> = (0..=self.num_classes).filter(|&c| !self.is_class_initialized(c)).collect();
            return Err(Error::UninitializedBank(format!("classes {missing:?}")));
        }
        if emb.dim != self.dim {
            return Err(Error::Shape(format!("embedding dim {} vs bank dim {}", emb.dim, self.dim)));
        }
        let n = emb.len();
        let slots = self.slots();
        let mut sims = vec![0.0; n * slots];
        f64::gemm(
            n,
            self.dim,
            slots,
            1.0,
            &emb.vectors,
            (self.dim as isize, 1),
            &self.protos,
            (1, self.dim as isize),
            0.0,
            &mut sims,
        );
        let outs = self.num_classes + 1;
        let mut nearest = vec![0usize; n * outs];
        let mut probs = vec![0.0; n * outs];
        for p in 0..n {
            let row = &sims[p * slots..(p + 1) * slots];
            let logits = &mut probs[p * outs..(p + 1) * outs];
            for c in 0..outs {
                let (mut bk, mut bs) = (0, f64::NEG_INFINITY);
                for k in 0..self.k {
                    let s = row[c * self.k + k];
                    if s > bs {
                        bs = s;
                        bk = k;
                    }
                }
                nearest[p * outs + c] = bk;
                logits[c] = bs;
            }
            softmax_in_place(logits);
        }
        Ok(ProtoScores {
            sims,
            nearest,
            dist: ClassDistribution {
                num_outputs: outs,
                probs,
            },
        })
    }

    /// Momentum online-clustering update from the pixels with `Some(class)`.
    ///
    /// Classes seen for the first time are seeded k-means++ style from this
    /// batch; for initialized classes every pixel is hard-assigned to its
    /// nearest same-class prototype and each assigned prototype moves toward
    /// the normalized mean of its pixels.
    pub fn update<R: Rng + ?Sized>(&mut self, emb: &UnitEmbeddings, labels: &[Option<u8>], rng: &mut R) -> Result<()> {
        if labels.len() != emb.len() {
            return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), emb.len())));
        }
        if emb.dim != self.dim {
            return Err(Error::Shape(format!("embedding dim {} vs bank dim {}", emb.dim, self.dim)));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes + 1];
        for (p, l) in labels.iter().enumerate() {
            if let Some(c) = *l {
                let c = c as usize;
                if c > self.num_classes {
                    return Err(Error::Validation(format!("class {c} outside bank range")));
                }
                members[c].push(p);
            }
        }
        for (class, pix) in members.iter().enumerate() {
            if pix.is_empty() {
                continue;
            }
            if !self.is_class_initialized(class) {
                let seeds = kmeanspp_seeds(emb, pix, self.k, rng);
                self.set_class(class, &seeds);
                continue;
            }
            if self.momentum >= 1.0 {
                continue;
            }
            let mut sums = vec![vec![0.0; self.dim]; self.k];
            let mut counts = vec![0usize; self.k];
            for &p in pix {
                let u = emb.row(p);
                let (mut bk, mut bs) = (0, f64::NEG_INFINITY);
                for k in 0..self.k {
                    let s = dot(u, self.proto(class, k));
                    if s > bs {
                        bs = s;
                        bk = k;
                    }
                }
                counts[bk] += 1;
                sums[bk].iter_mut().zip(u).for_each(|(a, b)| *a += b);
            }
            let mu = self.momentum;
            for k in 0..self.k {
                if counts[k] == 0 {
                    continue;
                }
                let Some(fresh) = normalized(&sums[k]) else { continue };
                let blended: Vec<f64> = self
                    .proto(class, k)
                    .iter()
                    .zip(&fresh)
                    .map(|(old, new)| mu * old + (1.0 - mu) * new)
                    .collect();
                if let Some(unit) = normalized(&blended) {
                    self.proto_mut(class, k).copy_from_slice(&unit);
                }
            }
        }
        Ok(())
    }

    /// Seeds still-uninitialized classes from the pixels labeled with them,
    /// leaving initialized classes untouched.
    pub fn seed_missing<R: Rng + ?Sized>(&mut self, emb: &UnitEmbeddings, labels: &[u8], rng: &mut R) {
        for class in 0..=self.num_classes {
            if self.is_class_initialized(class) {
                continue;
            }
            let pix: Vec<usize> = (0..labels.len()).filter(|&p| labels[p] as usize == class).collect();
            if !pix.is_empty() {
                let seeds = kmeanspp_seeds(emb, &pix, self.k, rng);
                self.set_class(class, &seeds);
            }
        }
    }

    /// Copies the background (class 0) prototypes and flags from `source`.
    pub fn copy_background_from(&mut self, source: &PrototypeBank) {
        assert_eq!((self.k, self.dim), (source.k, source.dim), "bank geometry");
        let len = self.k * self.dim;
        self.protos[..len].copy_from_slice(&source.protos[..len]);
        self.initialized[..self.k].copy_from_slice(&source.initialized[..self.k]);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > MIN_NORM && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    v.iter_mut().for_each(|x| *x /= z);
}

fn kmeanspp_seeds<R: Rng + ?Sized>(emb: &UnitEmbeddings, pix: &[usize], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = pix[rng.random_range(0..pix.len())];
    seeds.push(emb.row(first).to_vec());
    // squared Euclidean distance between unit vectors: 2 - 2 cos
    let mut d2: Vec<f64> = pix.iter().map(|&p| (2.0 - 2.0 * dot(emb.row(p), &seeds[0])).max(0.0)).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = pix.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..pix.len())
        };
        let s = emb.row(pix[pick]).to_vec();
        for (i, &p) in pix.iter().enumerate() {
            d2[i] = d2[i].min((2.0 - 2.0 * dot(emb.row(p), &s)).max(0.0));
        }
        seeds.push(s);
    }
    seeds
        .into_iter()
        .map(|s| normalized(&s).unwrap_or_else(|| unit_axis(emb.dim)))
        .collect()
}

fn unit_axis(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

/// Nearest-prototype softmax prediction `p(c | i)` for every pixel.
pub fn proto_predict(emb: &UnitEmbeddings, bank: &PrototypeBank) -> Result<ClassDistribution> {
    Ok(bank.score(emb)?.dist)
}

/// Targets for the labeled bank: foreground classes only where the
/// (strong-view) partial annotation provides them. Background comes from the
/// unlabeled bank through [`PrototypeBank::copy_background_from`].
pub fn labeled_bank_targets(partial_classes: &[i16]) -> Vec<Option<u8>> {
    partial_classes.iter().map(|&v| (v > 0).then_some(v as u8)).collect()
}

/// Targets for the unlabeled bank: pseudo-labels (all classes) on pixels
/// without a partial annotation.
pub fn unlabeled_bank_targets(partial_classes: &[i16], pseudo: &[u8]) -> Vec<Option<u8>> {
    partial_classes
        .iter()
        .zip(pseudo)
        .map(|(&v, &y)| (v < 0).then_some(y))
        .collect()
}

/// Dual banks with the background copy rule applied after each update.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBanks {
    pub labeled: PrototypeBank,
    pub unlabeled: PrototypeBank,
}

impl DualBanks {
    pub fn new(num_classes: usize, k: usize, dim: usize, momentum: f64) -> Result<Self> {
        Ok(Self {
            labeled: PrototypeBank::new(num_classes, k, dim, momentum)?,
            unlabeled: PrototypeBank::new(num_classes, k, dim, momentum)?,
        })
    }

    /// One update from a strong view. `partial_classes` holds the mixed
    /// partial annotation (`-1` where unknown), `pseudo` the mixed masked
    /// pseudo-labels.
    pub fn update<R: Rng + ?Sized>(&mut self, emb: &UnitEmbeddings, partial_classes: &[i16], pseudo: &[u8], rng: &mut R) -> Result<()> {
        self.unlabeled.update(emb, &unlabeled_bank_targets(partial_classes, pseudo), rng)?;
        self.unlabeled.seed_missing(emb, pseudo, rng);
        self.labeled.update(emb, &labeled_bank_targets(partial_classes), rng)?;
        self.labeled.copy_background_from(&self.unlabeled);
        Ok(())
    }

    pub fn is_fully_initialized(&self) -> bool {
        self.labeled.is_fully_initialized() && self.unlabeled.is_fully_initialized()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_class_bank() -> PrototypeBank {
        // C = 1 -> classes {0, 1}, K = 1, orthogonal prototypes
        let mut b = PrototypeBank::new(1, 1, 2, 0.9).unwrap();
        b.set_class(0, &[vec![1.0, 0.0]]);
        b.set_class(1, &[vec![0.0, 1.0]]);
        b
    }

    #[test]
    fn pixel_on_prototype_scores_e_over_e_plus_one() {
        let emb = UnitEmbeddings::from_pixel_major(&[0.0, 3.0], 2);
        let d = proto_predict(&emb, &two_class_bank()).unwrap();
        let e = std::f64::consts::E;
        assert!((d.row(0)[1] - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn uninitialized_bank_is_rejected() {
        let b = PrototypeBank::new(2, 2, 3, 0.9).unwrap();
        let emb = UnitEmbeddings::from_pixel_major(&[1.0, 0.0, 0.0], 3);
        assert!(matches!(proto_predict(&emb, &b), Err(Error::UninitializedBank(_))));
    }

    #[test]
    fn first_update_seeds_from_batch_members() {
        let mut b = PrototypeBank::new(1, 2, 2, 0.5).unwrap();
        let emb = UnitEmbeddings::from_pixel_major(&[1.0, 0.0, 0.0, 2.0, 1.0, 1.0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.update(&emb, &[Some(1), Some(1), None], &mut rng).unwrap();
        assert!(b.is_class_initialized(1));
        assert!(!b.is_class_initialized(0));
        for k in 0..2 {
            let p = b.proto(1, k);
            assert!(p == emb.row(0) || p == emb.row(1), "{p:?}");
        }
    }

    #[test]
    fn copy_rule_makes_backgrounds_identical() {
        let mut banks = DualBanks::new(2, 2, 3, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..8 * 3).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let emb = UnitEmbeddings::from_pixel_major(&raw, 3);
        let partial = [1, 1, -1, -1, -1, 2, -1, -1];
        let pseudo = [1, 1, 0, 0, 2, 2, 1, 0];
        for _ in 0..3 {
            banks.update(&emb, &partial, &pseudo, &mut rng).unwrap();
            assert_eq!(banks.labeled.proto(0, 0), banks.unlabeled.proto(0, 0));
            assert_eq!(banks.labeled.proto(0, 1), banks.unlabeled.proto(0, 1));
            assert_eq!(&banks.labeled.initialized[..2], &banks.unlabeled.initialized[..2]);
        }
    }

    #[test]
    fn bank_targets_split_by_annotation() {
        let partial = [3, -1, -1, 3];
        let pseudo = [3, 0, 2, 1];
        assert_eq!(labeled_bank_targets(&partial), vec![Some(3), None, None, Some(3)]);
        assert_eq!(unlabeled_bank_targets(&partial, &pseudo), vec![None, Some(0), Some(2), None]);
    }
}
