//! Forward and backward kernels for the layers of the segmentation network.
//! Backward functions accumulate parameter gradients into caller-provided
//! slices and return input gradients.

use super::tensor::Tensor;
use crate::real::{gram_add, Real};

const NORM_EPS: f64 = 1e-5;

/// 3x3 / pad 1 patch matrix: row `ci*9 + ky*3 + kx`, column `y*w + x`.
fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Square convolution with kernel 1 or 3 (stride 1, same padding).
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>, weight: &[T], bias: &[T]) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.fan_in();
        let mut out = Tensor::zeros(x.n, self.cout, h, w);
        let mut cols = if self.k == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
        for i in 0..x.n {
            let xs = x.sample(i);
            let b: &[T] = if self.k == 3 {
                im2col3(xs, self.cin, h, w, &mut cols);
                &cols
            } else {
                xs
            };
            let o = out.sample_mut(i);
            for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                row.fill(bias[co]);
            }
            T::gemm(self.cout, kk, hw, T::one(), weight, (kk as isize, 1), b, (hw as isize, 1), T::one(), o);
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        weight: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.fan_in();
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, self.cin, h, w));
        let mut cols = if self.k == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
        // dX = flip(W)ᵀ * im2col(dY): same shape as a forward convolution
        let flipped: Vec<T> = if self.k == 3 && need_dx {
            let mut f = vec![T::zero(); self.cin * self.cout * 9];
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    for t in 0..9 {
                        f[ci * self.cout * 9 + co * 9 + t] = weight[co * kk + ci * 9 + (8 - t)];
                    }
                }
            }
            f
        } else {
            Vec::new()
        };
        let mut dcols = if self.k == 3 && need_dx { vec![T::zero(); self.cout * 9 * hw] } else { Vec::new() };
        for i in 0..x.n {
            let dys = dy.sample(i);
            for (co, row) in dys.chunks_exact(hw).enumerate() {
                dbias[co] += row.iter().copied().sum::<T>();
            }
            let xs = x.sample(i);
            let b: &[T] = if self.k == 3 {
                im2col3(xs, self.cin, h, w, &mut cols);
                &cols
            } else {
                xs
            };
            // dW += dY · colsᵀ
            gram_add(dys, self.cout, b, kk, hw, dweight);
            if let Some(dx) = dx.as_mut() {
                if self.k == 3 {
                    im2col3(dys, self.cout, h, w, &mut dcols);
                    let ck = self.cout * 9;
                    T::gemm(self.cin, ck, hw, T::one(), &flipped, (ck as isize, 1), &dcols, (hw as isize, 1), T::zero(), dx.sample_mut(i));
                } else {
                    T::gemm(kk, self.cout, hw, T::one(), weight, (1, kk as isize), dys, (hw as isize, 1), T::zero(), dx.sample_mut(i));
                }
            }
        }
        dx
    }
}

/// Group normalization with per-channel affine parameters, fused with ReLU.
#[derive(Clone, Copy, Debug)]
pub struct NormRelu {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

impl NormRelu {
    pub fn forward<T: Real>(&self, x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, NormCache<T>) {
        let hw = x.plane();
        let cpg = self.channels / self.groups;
        let glen = cpg * hw;
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); x.n * self.groups];
        let eps = T::from_f64_lossy(NORM_EPS);
        let count = T::from_usize(glen).unwrap();
        for i in 0..x.n {
            for g in 0..self.groups {
                let start = i * x.sample_len() + g * glen;
                let xs = &x.data[start..start + glen];
                let mean = xs.iter().copied().sum::<T>() / count;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
                let istd = T::one() / (var + eps).sqrt();
                inv_std[i * self.groups + g] = istd;
                for cc in 0..cpg {
                    let c = g * cpg + cc;
                    let (ga, be) = (gamma[c], beta[c]);
                    let off = start + cc * hw;
                    let src = &x.data[off..off + hw];
                    let xh_dst = &mut xhat[off..off + hw];
                    let o_dst = &mut out.data[off..off + hw];
                    for ((&v, xh), o) in src.iter().zip(xh_dst.iter_mut()).zip(o_dst.iter_mut()) {
                        let h = (v - mean) * istd;
                        *xh = h;
                        let y = ga * h + be;
                        *o = if y > T::zero() { y } else { T::zero() };
                    }
                }
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    /// `out` is the post-activation output returned by `forward`.
    pub fn backward<T: Real>(
        &self,
        out: &Tensor<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
        gamma: &[T],
        dgamma: &mut [T],
        dbeta: &mut [T],
    ) -> Tensor<T> {
        let hw = out.plane();
        let cpg = self.channels / self.groups;
        let glen = cpg * hw;
        let count = T::from_usize(glen).unwrap();
        let mut dx = Tensor::zeros(out.n, out.c, out.h, out.w);
        let mut dxhat = vec![T::zero(); glen];
        for i in 0..out.n {
            for g in 0..self.groups {
                let start = i * out.sample_len() + g * glen;
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for cc in 0..cpg {
                    let c = g * cpg + cc;
                    let off = start + cc * hw;
                    let ga = gamma[c];
                    let (mut sg, mut sb) = (T::zero(), T::zero());
                    let outs = &out.data[off..off + hw];
                    let dys = &dy.data[off..off + hw];
                    let xhs = &cache.xhat[off..off + hw];
                    let dst = &mut dxhat[cc * hw..(cc + 1) * hw];
                    for (((&o, &d), &xh), dh) in outs.iter().zip(dys).zip(xhs).zip(dst.iter_mut()) {
                        let d = if o > T::zero() { d } else { T::zero() };
                        sg += d * xh;
                        sb += d;
                        let v = d * ga;
                        *dh = v;
                        m1 += v;
                        m2 += v * xh;
                    }
                    dgamma[c] += sg;
                    dbeta[c] += sb;
                }
                m1 /= count;
                m2 /= count;
                let istd = cache.inv_std[i * self.groups + g];
                let dst = &mut dx.data[start..start + glen];
                let xhs = &cache.xhat[start..start + glen];
                for ((d, &dh), &xh) in dst.iter_mut().zip(&dxhat).zip(xhs) {
                    *d = istd * (dh - m1 - xh * m2);
                }
            }
        }
        dx
    }
}

/// 2x2 max pooling, stride 2. Returns the argmax offset (0..4) per output.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    let planes = x.n * x.c;
    for p in 0..planes {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = src[2 * y * x.w + 2 * xx];
                let mut bi = 0u8;
                for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = src[(2 * y + dy) * x.w + 2 * xx + dx];
                    if v > best {
                        best = v;
                        bi = k as u8 + 1;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                out.data[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for p in 0..dy.n * dy.c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = p * oh * ow + y * ow + xx;
                let (ddy, ddx) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[o] as usize];
                dx.data[p * h * w + (2 * y + ddy) * w + 2 * xx + ddx] += dy.data[o];
            }
        }
    }
    dx
}

/// Transposed convolution, kernel 2, stride 2. Weight rows are `co*4 + dy*2 + dx`.
#[derive(Clone, Copy, Debug)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl UpConv {
    pub fn forward<T: Real>(&self, x: &Tensor<T>, weight: &[T], bias: &[T]) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let rows = self.cout * 4;
        let mut z = vec![T::zero(); rows * hw];
        let mut out = Tensor::zeros(x.n, self.cout, 2 * h, 2 * w);
        let ow = 2 * w;
        for i in 0..x.n {
            T::gemm(rows, self.cin, hw, T::one(), weight, (self.cin as isize, 1), x.sample(i), (hw as isize, 1), T::zero(), &mut z);
            let o = out.sample_mut(i);
            for co in 0..self.cout {
                for k in 0..4 {
                    let (dy, dx) = (k / 2, k % 2);
                    let zr = &z[(co * 4 + k) * hw..(co * 4 + k + 1) * hw];
                    for y in 0..h {
                        for xx in 0..w {
                            o[co * 4 * hw + (2 * y + dy) * ow + 2 * xx + dx] = zr[y * w + xx] + bias[co];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        weight: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
    ) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let rows = self.cout * 4;
        let ow = 2 * w;
        let mut dz = vec![T::zero(); rows * hw];
        let mut dx = Tensor::zeros(x.n, self.cin, h, w);
        for i in 0..x.n {
            let d = dy.sample(i);
            for co in 0..self.cout {
                dbias[co] += d[co * 4 * hw..(co + 1) * 4 * hw].iter().copied().sum::<T>();
                for k in 0..4 {
                    let (ddy, ddx) = (k / 2, k % 2);
                    let zr = &mut dz[(co * 4 + k) * hw..(co * 4 + k + 1) * hw];
                    for y in 0..h {
                        for xx in 0..w {
                            zr[y * w + xx] = d[co * 4 * hw + (2 * y + ddy) * ow + 2 * xx + ddx];
                        }
                    }
                }
            }
            gram_add(&dz, rows, x.sample(i), self.cin, hw, dweight);
            T::gemm(self.cin, rows, hw, T::one(), weight, (1, self.cin as isize), &dz, (hw as isize, 1), T::zero(), dx.sample_mut(i));
        }
        dx
    }
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shapes");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let o = out.sample_mut(i);
        let la = a.sample_len();
        o[..la].copy_from_slice(a.sample(i));
        o[la..].copy_from_slice(b.sample(i));
    }
    out
}

pub fn split_channels<T: Real>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let cb = d.c - ca;
    let mut a = Tensor::zeros(d.n, ca, d.h, d.w);
    let mut b = Tensor::zeros(d.n, cb, d.h, d.w);
    for i in 0..d.n {
        let s = d.sample(i);
        let la = a.sample_len();
        a.sample_mut(i).copy_from_slice(&s[..la]);
        b.sample_mut(i).copy_from_slice(&s[la..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                    s += wt[co * cin * 9 + ci * 9 + ky * 3 + kx]
                                        * x[ci * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[co * h * w + y * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let conv = Conv { cin, cout, k: 3, weight: 0, bias: 0 };
        let t = Tensor::from_vec(1, cin, h, w, x.clone());
        let y = conv.forward(&t, &wt, &[0.0; 3]);
        for (a, b) in y.data.iter().zip(naive_conv3(&x, cin, h, w, &wt, cout)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0f64, 4.0, 3.0, 2.0]);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data, vec![4.0]);
        let dx = maxpool2_backward(&Tensor::from_vec(1, 1, 1, 1, vec![2.5]), &arg, 2, 2);
        assert_eq!(dx.data, vec![0.0, 2.5, 0.0, 0.0]);
    }
}
