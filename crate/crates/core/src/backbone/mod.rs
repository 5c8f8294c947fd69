//! Encoder-decoder segmentation network (2D U-Net) with an embedding layer
//! and a linear per-class sigmoid head, plus the EMA teacher update.
//!
//! Parameters live in one flat vector so optimizer, EMA and checkpoint code
//! can treat the model as a single array.

pub mod layers;
mod tensor;

pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::real::Real;
use layers::{concat_channels, maxpool2_backward, maxpool2_forward, split_channels, Conv, NormCache, NormRelu, UpConv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Number of 2x downsamplings.
    pub depth: usize,
    pub base_width: usize,
    /// Embedding width consumed by the prototype classifiers.
    pub embed_dim: usize,
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
}

fn default_groups() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 16,
            embed_dim: 64,
            norm_groups: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    norm1: NormRelu,
    conv2: Conv,
    norm2: NormRelu,
}

#[derive(Clone, Debug)]
struct Layout {
    entries: Vec<ParamEntry>,
    total: usize,
    enc: Vec<Block>,
    up: Vec<UpConv>,
    dec: Vec<Block>,
    embed: Conv,
    head: Conv,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        self.entries.push(ParamEntry {
            name,
            shape,
            offset: self.total,
            len,
        });
        self.total += len;
        self.entries.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = self.add(format!("{name}.weight"), vec![cout, cin, k, k]);
        let bias = self.add(format!("{name}.bias"), vec![cout]);
        Conv { cin, cout, k, weight, bias }
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> NormRelu {
        let groups = if groups > 0 && channels % groups == 0 { groups } else { 1 };
        let gamma = self.add(format!("{name}.gamma"), vec![channels]);
        let beta = self.add(format!("{name}.beta"), vec![channels]);
        NormRelu {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, groups: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            norm1: self.norm(&format!("{name}.norm1"), cout, groups),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            norm2: self.norm(&format!("{name}.norm2"), cout, groups),
        }
    }
}

impl Layout {
    fn new(cfg: &BackboneConfig, num_classes: usize) -> Self {
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            total: 0,
        };
        let widths: Vec<usize> = (0..=cfg.depth).map(|l| cfg.base_width << l).collect();
        let mut enc = Vec::new();
        let mut cin = 1;
        for (l, &w) in widths.iter().enumerate() {
            enc.push(b.block(&format!("enc{l}"), cin, w, cfg.norm_groups));
            cin = w;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..cfg.depth).rev() {
            let weight = b.add(format!("up{l}.weight"), vec![widths[l] * 4, widths[l + 1]]);
            let bias = b.add(format!("up{l}.bias"), vec![widths[l]]);
            up.push(UpConv {
                cin: widths[l + 1],
                cout: widths[l],
                weight,
                bias,
            });
            dec.push(b.block(&format!("dec{l}"), 2 * widths[l], widths[l], cfg.norm_groups));
        }
        let embed = b.conv("embed", widths[0], cfg.embed_dim, 1);
        let head = b.conv("head", cfg.embed_dim, num_classes, 1);
        Layout {
            entries: b.entries,
            total: b.total,
            enc,
            up,
            dec,
            embed,
            head,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockTape<T> {
    input: Tensor<T>,
    mid: Tensor<T>,
    cache1: NormCache<T>,
    out: Tensor<T>,
    cache2: NormCache<T>,
}

/// Intermediate activations of one forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    enc: Vec<BlockTape<T>>,
    pool_arg: Vec<Vec<u8>>,
    up_in: Vec<Tensor<T>>,
    dec: Vec<BlockTape<T>>,
    /// Raw (un-normalized) per-pixel embeddings, `N x D x H x W`.
    pub embeddings: Tensor<T>,
    pub logits: Tensor<T>,
    /// Sigmoid foreground probabilities, `N x C x H x W`.
    pub probs: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub config: BackboneConfig,
    pub num_classes: usize,
    layout: Layout,
    pub params: Vec<T>,
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> UNet<T> {
    /// Builds a network with He-normal convolution weights drawn from `seed`.
    pub fn new(config: BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if config.base_width == 0 || config.embed_dim == 0 || num_classes == 0 {
            return Err(Error::Config("backbone widths and class count must be positive".into()));
        }
        let layout = Layout::new(&config, num_classes);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &layout.entries {
            let dst = &mut params[e.offset..e.offset + e.len];
            if e.name.ends_with(".gamma") {
                dst.fill(T::one());
            } else if e.name.ends_with(".weight") {
                let fan_in = if e.name.starts_with("up") {
                    e.shape[1]
                } else {
                    e.shape[1..].iter().product()
                };
                let relu_gain = if e.name.starts_with("embed") || e.name.starts_with("head") { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0f64, (relu_gain / fan_in as f64).sqrt()).expect("positive std");
                for v in dst.iter_mut() {
                    *v = T::from_f64_lossy(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self {
            config,
            num_classes,
            layout,
            params,
        })
    }

    /// Same architecture with a different scalar type (values converted).
    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            num_classes: self.num_classes,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn param_entries(&self) -> &[ParamEntry] {
        &self.layout.entries
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn p(&self, idx: usize) -> &[T] {
        let e = &self.layout.entries[idx];
        &self.params[e.offset..e.offset + e.len]
    }

    pub fn stride(&self) -> usize {
        1 << self.config.depth
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {}", x.c)));
        }
        let s = self.stride();
        if x.h % s != 0 || x.w % s != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by 2^depth = {s}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    fn block_forward(&self, b: &Block, x: Tensor<T>) -> BlockTape<T> {
        let c1 = b.conv1.forward(&x, self.p(b.conv1.weight), self.p(b.conv1.bias));
        let (mid, cache1) = b.norm1.forward(&c1, self.p(b.norm1.gamma), self.p(b.norm1.beta));
        let c2 = b.conv2.forward(&mid, self.p(b.conv2.weight), self.p(b.conv2.bias));
        let (out, cache2) = b.norm2.forward(&c2, self.p(b.norm2.gamma), self.p(b.norm2.beta));
        BlockTape {
            input: x,
            mid,
            cache1,
            out,
            cache2,
        }
    }

    /// Runs the network on an `N x 1 x H x W` batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tape<T>> {
        self.check_input(x)?;
        let l = &self.layout;
        let mut enc = Vec::with_capacity(l.enc.len());
        let mut pool_arg = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for (i, b) in l.enc.iter().enumerate() {
            let t = self.block_forward(b, h);
            if i + 1 < l.enc.len() {
                let (p, arg) = maxpool2_forward(&t.out);
                pool_arg.push(arg);
                h = p;
            } else {
                h = t.out.clone();
            }
            enc.push(t);
        }
        let mut up_in = Vec::with_capacity(l.up.len());
        let mut dec = Vec::with_capacity(l.dec.len());
        for (j, (u, b)) in l.up.iter().zip(&l.dec).enumerate() {
            let skip = &enc[l.enc.len() - 2 - j].out;
            let upsampled = u.forward(&h, self.p(u.weight), self.p(u.bias));
            up_in.push(h);
            let t = self.block_forward(b, concat_channels(skip, &upsampled));
            h = t.out.clone();
            dec.push(t);
        }
        let embeddings = l.embed.forward(&h, self.p(l.embed.weight), self.p(l.embed.bias));
        let logits = l.head.forward(&embeddings, self.p(l.head.weight), self.p(l.head.bias));
        let probs = Tensor {
            data: logits.data.iter().map(|&v| sigmoid(v)).collect(),
            ..logits.clone()
        };
        Ok(Tape {
            enc,
            pool_arg,
            up_in,
            dec,
            embeddings,
            logits,
            probs,
        })
    }

    fn block_backward(&self, b: &Block, t: &BlockTape<T>, dout: &Tensor<T>, grads: &mut [T], need_dx: bool) -> Option<Tensor<T>> {
        let (dg, db) = two_slots(grads, &self.layout.entries, b.norm2.gamma, b.norm2.beta);
        let dc2 = b.norm2.backward(&t.out, &t.cache2, dout, self.p(b.norm2.gamma), dg, db);
        let (dw, dbias) = two_slots(grads, &self.layout.entries, b.conv2.weight, b.conv2.bias);
        let dmid = b.conv2.backward(&t.mid, &dc2, self.p(b.conv2.weight), dw, dbias, true).expect("dx requested");
        let (dg, db) = two_slots(grads, &self.layout.entries, b.norm1.gamma, b.norm1.beta);
        let dc1 = b.norm1.backward(&t.mid, &t.cache1, &dmid, self.p(b.norm1.gamma), dg, db);
        let (dw, dbias) = two_slots(grads, &self.layout.entries, b.conv1.weight, b.conv1.bias);
        b.conv1.backward(&t.input, &dc1, self.p(b.conv1.weight), dw, dbias, need_dx)
    }

    /// Back-propagates gradients w.r.t. the logits and (optionally) the raw
    /// embeddings, accumulating parameter gradients into `grads`.
    /// Returns the gradient w.r.t. the input image batch.
    pub fn backward(&self, tape: &Tape<T>, d_logits: &Tensor<T>, d_embed: Option<&Tensor<T>>, grads: &mut [T]) -> Tensor<T> {
        assert_eq!(grads.len(), self.layout.total, "gradient buffer length");
        let l = &self.layout;
        let last_dec = tape.dec.last().map_or(&tape.enc[0].out, |t| &t.out);
        let (dw, db) = two_slots(grads, &l.entries, l.head.weight, l.head.bias);
        let mut d_emb = l.head
            .backward(&tape.embeddings, d_logits, self.p(l.head.weight), dw, db, true)
            .expect("dx requested");
        if let Some(extra) = d_embed {
            assert!(extra.same_shape(&d_emb), "embedding gradient shape");
            for (a, b) in d_emb.data.iter_mut().zip(&extra.data) {
                *a += *b;
            }
        }
        let (dw, db) = two_slots(grads, &l.entries, l.embed.weight, l.embed.bias);
        let mut dh = l.embed
            .backward(last_dec, &d_emb, self.p(l.embed.weight), dw, db, true)
            .expect("dx requested");

        let depth = self.config.depth;
        // gradients flowing into encoder outputs through skip connections
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for j in (0..l.dec.len()).rev() {
            let t = &tape.dec[j];
            let dcat = self.block_backward(&l.dec[j], t, &dh, grads, true).expect("dx requested");
            let skip_c = l.dec[j].conv1.cin / 2;
            let (dskip, dup) = split_channels(&dcat, skip_c);
            skip_grads[depth - 1 - j] = Some(dskip);
            let u = &l.up[j];
            let (dw, db) = two_slots(grads, &l.entries, u.weight, u.bias);
            dh = u.backward(&tape.up_in[j], &dup, self.p(u.weight), dw, db);
        }
        for i in (0..l.enc.len()).rev() {
            let t = &tape.enc[i];
            let dout = if i + 1 < l.enc.len() {
                let mut d = maxpool2_backward(&dh, &tape.pool_arg[i], t.out.h, t.out.w);
                if let Some(s) = skip_grads[i].take() {
                    for (a, b) in d.data.iter_mut().zip(&s.data) {
                        *a += *b;
                    }
                }
                d
            } else {
                dh.clone()
            };
            dh = self.block_backward(&l.enc[i], t, &dout, grads, true).expect("dx requested");
        }
        dh
    }
}

fn two_slots<'a, T>(grads: &'a mut [T], entries: &[ParamEntry], a: usize, b: usize) -> (&'a mut [T], &'a mut [T]) {
    let (ea, eb) = (&entries[a], &entries[b]);
    assert!(ea.offset + ea.len <= eb.offset, "parameter order");
    let (lo, hi) = grads.split_at_mut(eb.offset);
    (&mut lo[ea.offset..ea.offset + ea.len], &mut hi[..eb.len])
}

/// `teacher <- mu * teacher + (1 - mu) * student`, elementwise.
pub fn ema_copy<T: Real>(student: &UNet<T>, teacher: &mut UNet<T>, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("EMA momentum {mu} outside [0, 1]")));
    }
    if student.config != teacher.config
        || student.num_classes != teacher.num_classes
        || student.params.len() != teacher.params.len()
    {
        return Err(Error::Shape("student and teacher parameter trees differ".into()));
    }
    let m = T::from_f64_lossy(mu);
    let r = T::from_f64_lossy(1.0 - mu);
    for (t, &s) in teacher.params.iter_mut().zip(&student.params) {
        *t = m * *t + r * s;
    }
    Ok(())
}
