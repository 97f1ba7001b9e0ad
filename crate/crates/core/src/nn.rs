//! Layers with hand-written forward and backward passes.
//!
//! Every pass works on one sample at a time; batching happens one level up by
//! mapping over samples (see [`crate::par`]) and summing gradients in sample
//! order.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor3;

/// `c = a · b` with optional transposes, row-major, through `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel 2-D convolution with "same"-style padding `kernel / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out × in × k × k`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// Kaiming-normal initialisation (fan-in, ReLU gain), zero bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let (c, h, w) = x.shape();
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride;
        let on = oh * ow;
        let mut cols = vec![0.0; c * k * k * on];
        for ci in 0..c {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * on..][..on];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], in_shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor3 {
        let (c, h, w) = in_shape;
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride;
        let on = oh * ow;
        let mut out = Tensor3::zeros(c, h, w);
        for ci in 0..c {
            let plane = out.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * on..][..on];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * ow..][..ow];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor3, keep_cache: bool) -> Result<(Tensor3, Option<ConvCache>)> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (oh, ow) = self.output_hw(x.height(), x.width());
        let on = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(x, oh, ow);
        let mut out = vec![0.0; self.out_channels * on];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * on..(o + 1) * on].fill(*b);
        }
        gemm(self.out_channels, kk, on, &self.weight, false, &cols, false, &mut out, true);
        let cache = keep_cache.then(|| ConvCache {
            cols,
            in_shape: x.shape(),
            out_hw: (oh, ow),
        });
        Ok((Tensor3::from_vec(self.out_channels, oh, ow, out)?, cache))
    }

    /// Accumulates parameter gradients into `gw`/`gb` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache, grad_out: &Tensor3, gw: &mut [f64], gb: &mut [f64]) -> Tensor3 {
        let (oh, ow) = cache.out_hw;
        let on = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let g = grad_out.data();
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc += g[o * on..(o + 1) * on].iter().sum::<f64>();
        }
        gemm(self.out_channels, on, kk, g, false, &cache.cols, true, gw, true);
        let mut dcols = vec![0.0; kk * on];
        gemm(kk, self.out_channels, on, &self.weight, true, g, false, &mut dcols, false);
        self.col2im(&dcols, cache.in_shape, oh, ow)
    }
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its *output*.
pub fn relu_backward(out: &Tensor3, grad: &Tensor3) -> Tensor3 {
    out.zip_map(grad, |o, g| if o > 0.0 { g } else { 0.0 })
        .expect("relu cache shape")
}

/// One axis of a bilinear resize (half-pixel centres, edge clamped).
#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let l = (s.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { s - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of every channel to `out_h × out_w`.
pub fn resize_bilinear(x: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    let (c, h, w) = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = Tensor3::zeros(c, out_h, out_w);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps an output-sized gradient back to `in_h × in_w`.
pub fn resize_bilinear_backward(grad: &Tensor3, in_h: usize, in_w: usize) -> Tensor3 {
    let (c, out_h, out_w) = grad.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return grad.clone();
    }
    let ty = AxisTaps::new(in_h, out_h);
    let tx = AxisTaps::new(in_w, out_w);
    let mut out = Tensor3::zeros(c, in_h, in_w);
    for ci in 0..c {
        let g = grad.channel(ci);
        let dst = out.channel_mut(ci);
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = g[oy * out_w + ox];
                dst[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += v * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// A building block of [`Sequential`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(ConvCache),
    Relu(Tensor3),
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone, Default)]
pub struct SeqCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Total stride of all convolutions.
    pub fn stride(&self) -> usize {
        self.convs().map(|c| c.stride).product()
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::Relu => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::Relu => None,
        })
    }

    pub fn in_channels(&self) -> Option<usize> {
        self.convs().next().map(|c| c.in_channels)
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.convs().last().map(|c| c.out_channels)
    }

    /// Number of parameter tensors (weight and bias per conv).
    pub fn num_tensors(&self) -> usize {
        2 * self.convs().count()
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        forward_layers(&self.layers, x)
    }

    pub fn forward_cached(&self, x: &Tensor3) -> Result<(Tensor3, SeqCache)> {
        forward_layers_cached(&self.layers, x)
    }

    /// Backward pass. `grads` holds this block's tensors in `[w0, b0, w1, b1, ..]` order.
    pub fn backward(&self, cache: &SeqCache, grad_out: Tensor3, grads: &mut [Vec<f64>]) -> Tensor3 {
        backward_layers(&self.layers, cache, grad_out, grads)
    }
}

/// Number of parameter tensors held by a run of layers.
pub fn count_tensors(layers: &[Layer]) -> usize {
    2 * layers.iter().filter(|l| matches!(l, Layer::Conv(_))).count()
}

pub fn forward_layers(layers: &[Layer], x: &Tensor3) -> Result<Tensor3> {
    let mut cur = x.clone();
    for layer in layers {
        cur = match layer {
            Layer::Conv(c) => c.forward(&cur, false)?.0,
            Layer::Relu => relu(&cur),
        };
    }
    Ok(cur)
}

pub fn forward_layers_cached(layers: &[Layer], x: &Tensor3) -> Result<(Tensor3, SeqCache)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        cur = match layer {
            Layer::Conv(c) => {
                let (out, cache) = c.forward(&cur, true)?;
                caches.push(LayerCache::Conv(cache.expect("cache requested")));
                out
            }
            Layer::Relu => {
                let out = relu(&cur);
                caches.push(LayerCache::Relu(out.clone()));
                out
            }
        };
    }
    Ok((cur, SeqCache { layers: caches }))
}

/// `grads` must hold exactly the tensors of `layers`, in order.
pub fn backward_layers(layers: &[Layer], cache: &SeqCache, grad_out: Tensor3, grads: &mut [Vec<f64>]) -> Tensor3 {
    debug_assert_eq!(grads.len(), count_tensors(layers));
    let mut g = grad_out;
    let mut slot = count_tensors(layers);
    for (layer, lc) in layers.iter().zip(&cache.layers).rev() {
        g = match (layer, lc) {
            (Layer::Conv(c), LayerCache::Conv(cc)) => {
                slot -= 2;
                let (gw, rest) = grads[slot..].split_at_mut(1);
                c.backward(cc, &g, &mut gw[0], &mut rest[0])
            }
            (Layer::Relu, LayerCache::Relu(out)) => relu_backward(out, &g),
            _ => unreachable!("cache does not match layer"),
        };
    }
    g
}

/// Scales each channel by a per-channel factor (used by feature dropout inside a stream).
pub fn scale_channels(x: &Tensor3, factors: &[f64]) -> Tensor3 {
    let mut out = x.clone();
    for (c, f) in factors.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v *= f;
        }
    }
    out
}

/// Draws a random tensor with entries uniform in `[lo, hi)`.
pub fn uniform_tensor(c: usize, h: usize, w: usize, lo: f64, hi: f64, rng: &mut Rng) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn naive_conv(c: &Conv2d, x: &Tensor3) -> Tensor3 {
        let (oh, ow) = c.output_hw(x.height(), x.width());
        let p = (c.kernel / 2) as isize;
        Tensor3::from_fn(c.out_channels, oh, ow, |o, oy, ox| {
            let mut acc = c.bias[o];
            for i in 0..c.in_channels {
                for ky in 0..c.kernel {
                    for kx in 0..c.kernel {
                        let iy = (oy * c.stride + ky) as isize - p;
                        let ix = (ox * c.stride + kx) as isize - p;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                            acc += c.weight[((o * c.in_channels + i) * c.kernel + ky) * c.kernel + kx]
                                * x.get(i, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = SeedTree::new(1).rng();
        for stride in [1, 2] {
            let mut c = Conv2d::new(3, 4, 3, stride, &mut rng);
            c.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = uniform_tensor(3, 7, 6, -1.0, 1.0, &mut rng);
            let (got, _) = c.forward(&x, false).unwrap();
            let want = naive_conv(&c, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = SeedTree::new(2).rng();
        let c = Conv2d::new(2, 3, 3, 2, &mut rng);
        let x = uniform_tensor(2, 5, 5, -1.0, 1.0, &mut rng);
        let (out, cache) = c.forward(&x, true).unwrap();
        let probe = uniform_tensor(3, out.height(), out.width(), -1.0, 1.0, &mut rng);
        let mut gw = vec![0.0; c.weight.len()];
        let mut gb = vec![0.0; c.bias.len()];
        let gx = c.backward(&cache.unwrap(), &probe, &mut gw, &mut gb);
        let objective = |c: &Conv2d, x: &Tensor3| -> f64 {
            let (o, _) = c.forward(x, false).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in [0, 5, 17, 30] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(&c, &xp) - objective(&c, &xm)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-7);
        }
        for i in [0, 9, 40] {
            let mut cp = c.clone();
            cp.weight[i] += eps;
            let mut cm = c.clone();
            cm.weight[i] -= eps;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-7);
        }
        let mut cp = c.clone();
        cp.bias[1] += eps;
        let mut cm = c.clone();
        cm.bias[1] -= eps;
        let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps);
        assert!((fd - gb[1]).abs() < 1e-7);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = SeedTree::new(3).rng();
        let x = uniform_tensor(2, 4, 5, -1.0, 1.0, &mut rng);
        let y = uniform_tensor(2, 16, 13, -1.0, 1.0, &mut rng);
        let ax = resize_bilinear(&x, 16, 13);
        let aty = resize_bilinear_backward(&y, 4, 5);
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut rng = SeedTree::new(4).rng();
        let x = uniform_tensor(1, 6, 6, 0.0, 1.0, &mut rng);
        assert_eq!(resize_bilinear(&x, 6, 6), x);
    }
}
