//! Training objectives. Every loss is a pixel mean and returns its value
//! together with the analytic gradient of that value.

use crate::error::{Error, Result};
use crate::labels::{HardLabelMap, PartialLabelMap};
use crate::prototypes::{PrototypeBank, ProtoScores, UnitEmbeddings};
use serde::{Deserialize, Serialize};

/// Clamp applied inside every logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub w_lproto: f64,
    pub w_ulproto: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda1: 0.001,
            lambda2: 0.01,
            w_lproto: 1.0,
            w_ulproto: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("w_lproto", self.w_lproto),
            ("w_ulproto", self.w_ulproto),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("loss.alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn prototypes_active(&self) -> bool {
        self.w_lproto > 0.0 || self.w_ulproto > 0.0
    }
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-class binary targets in `{-1, 0, 1}` laid out like the probability
/// tensor (`batch x classes x pixels`); `-1` means the term is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryTargets {
    pub batch: usize,
    pub num_classes: usize,
    pub pixels: usize,
    pub values: Vec<i8>,
}

impl BinaryTargets {
    /// Targets from partial annotations: only the labeled class of each map
    /// contributes, as positive on the organ and negative on known negatives.
    pub fn from_partial(maps: &[&PartialLabelMap], num_classes: usize) -> Self {
        let pixels = maps.first().map_or(0, |m| m.classes.len());
        let mut values = vec![-1i8; maps.len() * num_classes * pixels];
        for (b, m) in maps.iter().enumerate() {
            assert_eq!(m.classes.len(), pixels, "partial maps differ in size");
            let c = m.labeled_class as usize;
            if c == 0 || c > num_classes {
                continue;
            }
            let base = (b * num_classes + c - 1) * pixels;
            for p in 0..pixels {
                if let Some(t) = m.binary_target(p, m.labeled_class) {
                    values[base + p] = t as i8;
                }
            }
        }
        Self {
            batch: maps.len(),
            num_classes,
            pixels,
            values,
        }
    }

    /// Fully specified targets from hard labels: one-hot over foreground
    /// classes, all zeros on background.
    pub fn from_hard(labels: &[u8], batch: usize, num_classes: usize) -> Self {
        assert!(batch > 0 && labels.len() % batch == 0, "label length");
        let pixels = labels.len() / batch;
        let mut values = vec![0i8; batch * num_classes * pixels];
        for b in 0..batch {
            for p in 0..pixels {
                let y = labels[b * pixels + p] as usize;
                if y > 0 && y <= num_classes {
                    values[(b * num_classes + y - 1) * pixels + p] = 1;
                }
            }
        }
        Self {
            batch,
            num_classes,
            pixels,
            values,
        }
    }

    pub fn from_hard_maps(maps: &[&HardLabelMap], num_classes: usize) -> Self {
        let flat: Vec<u8> = maps.iter().flat_map(|m| m.classes.data.iter().copied()).collect();
        Self::from_hard(&flat, maps.len(), num_classes)
    }

    /// Number of pixels with at least one present term.
    pub fn contributing_pixels(&self) -> usize {
        let mut n = 0;
        for b in 0..self.batch {
            for p in 0..self.pixels {
                if (0..self.num_classes).any(|c| self.values[(b * self.num_classes + c) * self.pixels + p] >= 0) {
                    n += 1;
                }
            }
        }
        n
    }
}

fn bce_term(y: f64, p: f64) -> f64 {
    -(y * p.max(EPS).ln() + (1.0 - y) * (1.0 - p).max(EPS).ln())
}

/// Partial binary cross-entropy: the sum over present `(class, pixel)` terms
/// divided by the number of contributing pixels. Gradient is w.r.t. the
/// probabilities and is exactly zero on absent terms.
pub fn partial_bce(probs: &[f64], targets: &BinaryTargets) -> LossGrad {
    assert_eq!(probs.len(), targets.values.len(), "probability/target size");
    let n = targets.contributing_pixels();
    let mut grad = vec![0.0; probs.len()];
    if n == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for (i, (&t, &p)) in targets.values.iter().zip(probs).enumerate() {
        if t < 0 {
            continue;
        }
        let y = t as f64;
        value += bce_term(y, p);
        let dp = if p > EPS { -y / p } else { 0.0 };
        let dq = if 1.0 - p > EPS { (1.0 - y) / (1.0 - p) } else { 0.0 };
        grad[i] = (dp + dq) * inv;
    }
    LossGrad { value: value * inv, grad }
}

/// Same value as [`partial_bce`] with the gradient taken w.r.t. the logits
/// behind the sigmoid, `(p - y) / n`, which does not vanish at the clamp.
pub fn partial_bce_logits(probs: &[f64], targets: &BinaryTargets) -> LossGrad {
    assert_eq!(probs.len(), targets.values.len(), "probability/target size");
    let n = targets.contributing_pixels();
    let mut grad = vec![0.0; probs.len()];
    if n == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for (i, (&t, &p)) in targets.values.iter().zip(probs).enumerate() {
        if t < 0 {
            continue;
        }
        let y = t as f64;
        value += bce_term(y, p);
        grad[i] = (p - y) * inv;
    }
    LossGrad { value: value * inv, grad }
}

/// Mean of `-log pred[target]` over pixels; `pred` is pixel-major with
/// `num_outputs` entries per pixel. Gradient is w.r.t. `pred`.
pub fn hard_ce_multiclass(pred: &[f64], num_outputs: usize, target: &[u8]) -> LossGrad {
    assert_eq!(pred.len(), num_outputs * target.len(), "prediction/target size");
    let mut grad = vec![0.0; pred.len()];
    if target.is_empty() {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / target.len() as f64;
    let mut value = 0.0;
    for (p, &t) in target.iter().enumerate() {
        let i = p * num_outputs + t as usize;
        let q = pred[i];
        value -= q.max(EPS).ln();
        if q > EPS {
            grad[i] = -inv / q;
        }
    }
    LossGrad { value: value * inv, grad }
}

/// Slot (`class * K + k`) of the nearest prototype of each pixel's target class.
pub fn assigned_slots(scores: &ProtoScores, bank: &PrototypeBank, target: &[u8]) -> Vec<usize> {
    let outs = bank.num_classes + 1;
    target
        .iter()
        .enumerate()
        .map(|(p, &t)| t as usize * bank.k + scores.nearest[p * outs + t as usize])
        .collect()
}

/// Value and per-(pixel, slot) coefficients `g` such that the gradient
/// w.r.t. the unit embedding of pixel `p` is `sum_s g[p][s] * proto_s`.
struct SlotCoef {
    value: f64,
    coef: Vec<f64>,
}

fn coef_to_grad(coef: &[f64], bank: &PrototypeBank, pixels: usize) -> Vec<f64> {
    let mut grad = vec![0.0; pixels * bank.dim];
    if pixels > 0 {
        let slots = bank.slots();
        crate::real::Real::gemm(
            pixels,
            slots,
            bank.dim,
            1.0,
            coef,
            (slots as isize, 1),
            &bank.protos,
            (bank.dim as isize, 1),
            0.0,
            &mut grad,
        );
    }
    grad
}

fn ppd_coef(emb: &UnitEmbeddings, bank: &PrototypeBank, assigned: &[usize]) -> SlotCoef {
    assert_eq!(assigned.len(), emb.len());
    let slots = bank.slots();
    let mut coef = vec![0.0; emb.len() * slots];
    if emb.is_empty() {
        return SlotCoef { value: 0.0, coef };
    }
    let inv = 1.0 / emb.len() as f64;
    let mut value = 0.0;
    for (p, &a) in assigned.iter().enumerate() {
        let gap = 1.0 - crate::prototypes::dot(emb.row(p), bank.slot(a));
        value += gap * gap;
        coef[p * slots + a] = -2.0 * gap * inv;
    }
    SlotCoef { value: value * inv, coef }
}

fn ppc_coef(emb: &UnitEmbeddings, bank: &PrototypeBank, sims: &[f64], assigned: &[usize], alpha: f64) -> SlotCoef {
    let slots = bank.slots();
    assert_eq!(sims.len(), emb.len() * slots);
    assert_eq!(assigned.len(), emb.len());
    let mut coef = vec![0.0; emb.len() * slots];
    if emb.is_empty() {
        return SlotCoef { value: 0.0, coef };
    }
    let inv = 1.0 / emb.len() as f64;
    let mut value = 0.0;
    for (p, &a) in assigned.iter().enumerate() {
        let row = &sims[p * slots..(p + 1) * slots];
        let w = &mut coef[p * slots..(p + 1) * slots];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / alpha;
        let mut z = 0.0;
        for (wj, &s) in w.iter_mut().zip(row) {
            *wj = (s / alpha - m).exp();
            z += *wj;
        }
        value += z.ln() + m - row[a] / alpha;
        let scale = inv / alpha;
        w.iter_mut().for_each(|x| *x *= scale / z);
        w[a] -= scale;
    }
    SlotCoef { value: value * inv, coef }
}

/// Mean of `(1 - i.p)^2` between each unit embedding and its assigned
/// prototype. Gradient is w.r.t. the unit embeddings, pixel-major.
pub fn ppd(emb: &UnitEmbeddings, bank: &PrototypeBank, assigned: &[usize]) -> LossGrad {
    let c = ppd_coef(emb, bank, assigned);
    LossGrad {
        value: c.value,
        grad: coef_to_grad(&c.coef, bank, emb.len()),
    }
}

/// Pixel-prototype contrastive loss: mean InfoNCE over all `(C+1)K` slots
/// with logits `i.p / alpha` and the assigned slot as positive. `sims` are
/// the pixel-by-slot cosine similarities.
pub fn ppc(emb: &UnitEmbeddings, bank: &PrototypeBank, sims: &[f64], assigned: &[usize], alpha: f64) -> LossGrad {
    let c = ppc_coef(emb, bank, sims, assigned, alpha);
    LossGrad {
        value: c.value,
        grad: coef_to_grad(&c.coef, bank, emb.len()),
    }
}

/// Breakdown of one prototype classifier's loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoLoss {
    pub value: f64,
    pub ce: f64,
    pub ppd: f64,
    pub ppc: f64,
    /// Gradient w.r.t. the unit embeddings, pixel-major.
    pub grad: Vec<f64>,
}

/// `CE + lambda1 * PPD + lambda2 * PPC` for one bank.
pub fn proto_loss(emb: &UnitEmbeddings, bank: &PrototypeBank, target: &[u8], weights: &LossWeights) -> Result<ProtoLoss> {
    if target.len() != emb.len() {
        return Err(Error::Shape(format!("{} targets for {} pixels", target.len(), emb.len())));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize > bank.num_classes) {
        return Err(Error::Validation(format!("target class {bad} outside bank range")));
    }
    let scores = bank.score(emb)?;
    let outs = bank.num_classes + 1;
    let slots = bank.slots();
    let ce = hard_ce_multiclass(&scores.dist.probs, outs, target);
    let assigned = assigned_slots(&scores, bank, target);
    let d = ppd_coef(emb, bank, &assigned);
    let c = ppc_coef(emb, bank, &scores.sims, &assigned, weights.alpha);

    let mut coef: Vec<f64> = d
        .coef
        .iter()
        .zip(&c.coef)
        .map(|(a, b)| weights.lambda1 * a + weights.lambda2 * b)
        .collect();
    // chain the CE gradient through the softmax over best-per-class similarities
    for p in 0..emb.len() {
        let q = scores.dist.row(p);
        let gq = &ce.grad[p * outs..(p + 1) * outs];
        let inner: f64 = gq.iter().zip(q).map(|(g, q)| g * q).sum();
        for class in 0..outs {
            let k = scores.nearest[p * outs + class];
            coef[p * slots + class * bank.k + k] += q[class] * (gq[class] - inner);
        }
    }
    Ok(ProtoLoss {
        value: ce.value + weights.lambda1 * d.value + weights.lambda2 * c.value,
        ce: ce.value,
        ppd: d.value,
        ppc: c.value,
        grad: coef_to_grad(&coef, bank, emb.len()),
    })
}

/// Which quantity the linear-branch gradient is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearGrad {
    Probs,
    Logits,
}

/// One strong view's inputs: linear probabilities (`batch x C x pixels`),
/// unit embeddings over the same pixels and the mixed hard targets.
pub struct StrongView<'a> {
    pub probs: &'a [f64],
    pub embeddings: &'a UnitEmbeddings,
    pub targets: &'a [u8],
    pub batch: usize,
    pub num_classes: usize,
}

/// Value and gradients of a strong-view loss.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongViewLoss {
    pub value: f64,
    pub linear: f64,
    pub lproto: Option<ProtoLoss>,
    pub ulproto: Option<ProtoLoss>,
    pub grad_linear: Vec<f64>,
    /// Gradient w.r.t. the unit embeddings; empty when no bank is used.
    pub grad_embed: Vec<f64>,
}

/// Linear pBCE on the hard targets plus, when banks are given, the weighted
/// labeled and unlabeled prototype losses.
pub fn strong_view_loss(
    view: &StrongView<'_>,
    banks: Option<(&PrototypeBank, &PrototypeBank)>,
    weights: &LossWeights,
    linear_grad: LinearGrad,
) -> Result<StrongViewLoss> {
    let targets = BinaryTargets::from_hard(view.targets, view.batch, view.num_classes);
    if targets.values.len() != view.probs.len() {
        return Err(Error::Shape("strong-view probabilities do not match targets".into()));
    }
    let lin = match linear_grad {
        LinearGrad::Probs => partial_bce(view.probs, &targets),
        LinearGrad::Logits => partial_bce_logits(view.probs, &targets),
    };
    let mut out = StrongViewLoss {
        value: lin.value,
        linear: lin.value,
        lproto: None,
        ulproto: None,
        grad_linear: lin.grad,
        grad_embed: Vec::new(),
    };
    let Some((labeled, unlabeled)) = banks else {
        return Ok(out);
    };
    let mut grad = vec![0.0; view.embeddings.len() * view.embeddings.dim];
    for (bank, w, slot) in [(labeled, weights.w_lproto, &mut out.lproto), (unlabeled, weights.w_ulproto, &mut out.ulproto)] {
        if w == 0.0 {
            continue;
        }
        let l = proto_loss(view.embeddings, bank, view.targets, weights)?;
        out.value += w * l.value;
        grad.iter_mut().zip(&l.grad).for_each(|(g, x)| *g += w * x);
        *slot = Some(l);
    }
    out.grad_embed = grad;
    Ok(out)
}

/// Logged loss components of one step. `ppd` and `ppc` are diagnostic
/// breakdowns already contained in `lproto` and `ulproto`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pbce_weak: f64,
    pub linear_s: f64,
    pub lproto: f64,
    pub ulproto: f64,
    pub ppd: f64,
    pub ppc: f64,
    pub total: f64,
}

impl LossComponents {
    /// Combines the weak-view loss with strong-view losses averaged over views.
    pub fn combine(pbce_weak: f64, views: &[StrongViewLoss], weights: &LossWeights) -> Self {
        let mut c = LossComponents {
            pbce_weak,
            ..Default::default()
        };
        if !views.is_empty() {
            let m = views.len() as f64;
            for v in views {
                c.linear_s += v.linear / m;
                if let Some(l) = &v.lproto {
                    c.lproto += l.value / m;
                    c.ppd += weights.w_lproto * l.ppd / m;
                    c.ppc += weights.w_lproto * l.ppc / m;
                }
                if let Some(l) = &v.ulproto {
                    c.ulproto += l.value / m;
                    c.ppd += weights.w_ulproto * l.ppd / m;
                    c.ppc += weights.w_ulproto * l.ppc / m;
                }
            }
        }
        c.total = c.pbce_weak + c.linear_s + weights.w_lproto * c.lproto + weights.w_ulproto * c.ulproto;
        c
    }

    pub fn is_finite(&self) -> bool {
        [self.pbce_weak, self.linear_s, self.lproto, self.ulproto, self.ppd, self.ppc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Total objective: weak pBCE plus the mean strong-view loss.
pub fn total_loss(pbce_weak: f64, views: &[StrongViewLoss]) -> f64 {
    let strong = if views.is_empty() {
        0.0
    } else {
        views.iter().map(|v| v.value).sum::<f64>() / views.len() as f64
    };
    pbce_weak + strong
}
