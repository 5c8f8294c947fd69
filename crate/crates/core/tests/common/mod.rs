#![allow(dead_code)]

use ltuda::prototypes::{dot, PrototypeBank, UnitEmbeddings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RTOL: f64 = 1e-3;

/// Largest mismatch between `analytic` and central differences of `f`,
/// measured as `|fd - an| / max(|fd|, |an|, floor)`.
pub fn fd_mismatch(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64, floor: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max((fd - analytic[i]).abs() / scale);
    }
    worst
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_bank(seed: u64, num_classes: usize, k: usize, dim: usize) -> PrototypeBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = PrototypeBank::new(num_classes, k, dim, 0.9).unwrap();
    for c in 0..=num_classes {
        let protos: Vec<Vec<f64>> = (0..k).map(|_| random_unit(&mut rng, dim)).collect();
        bank.set_class(c, &protos);
    }
    bank
}

/// Embeddings whose `vectors` are taken verbatim, so that losses can be
/// differentiated coordinate by coordinate.
pub fn raw_embeddings(vectors: &[f64], dim: usize) -> UnitEmbeddings {
    UnitEmbeddings {
        dim,
        vectors: vectors.to_vec(),
        norms: vec![1.0; vectors.len() / dim],
    }
}

pub fn sims(emb: &UnitEmbeddings, bank: &PrototypeBank) -> Vec<f64> {
    let mut out = Vec::with_capacity(emb.len() * bank.slots());
    for p in 0..emb.len() {
        for s in 0..bank.slots() {
            out.push(dot(emb.row(p), bank.slot(s)));
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
