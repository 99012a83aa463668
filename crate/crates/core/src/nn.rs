//! Minimal CPU convolutional building blocks with hand-written backward passes.
//!
//! Feature maps are `(channels, rows, cols)` arrays in standard layout. Everything is
//! generic over [`Real`] and deterministic given a seed.

use ndarray::{s, Array1, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Stride-1, same-padding 2D convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Conv2d<T> {
    /// `(out, in, k, k)`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Real> ConvGrads<T> {
    pub fn zeros_like(c: &Conv2d<T>) -> Self {
        Self {
            weight: Array4::zeros(c.weight.dim()),
            bias: Array1::zeros(c.bias.len()),
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// He-uniform initialisation.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "odd kernel size required");
        let bound = (6.0 / (in_ch * k * k) as f64).sqrt();
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, k, k), || {
            T::lit(rng.gen_range(-bound..bound))
        });
        Self {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn k(&self) -> usize {
        self.weight.dim().2
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels(), "conv input channels");
        let (cout, k) = (self.out_channels(), self.k());
        let pad = (k / 2) as isize;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array3::<T>::zeros((cout, h, w));
        let os = out.as_slice_mut().expect("standard layout");
        for o in 0..cout {
            let oplane = &mut os[o * h * w..(o + 1) * h * w];
            oplane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..cin {
                let iplane = &xs[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = self.weight[[o, i, ky, kx]];
                        let (x0, x1) = col_range(w, dx);
                        for y in row_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut oplane[y * w + x0..y * w + x1];
                            let srow = &iplane[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (a, &b) in orow.iter_mut().zip(srow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, x: &Array3<T>, grad_out: &Array3<T>, grads: &mut ConvGrads<T>) -> Array3<T> {
        let (cin, h, w) = x.dim();
        let (cout, k) = (self.out_channels(), self.k());
        let pad = (k / 2) as isize;
        let x = x.as_standard_layout();
        let grad_out = grad_out.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let gs = grad_out.as_slice().expect("standard layout");
        let mut gx = Array3::<T>::zeros((cin, h, w));
        let gxs = gx.as_slice_mut().expect("standard layout");
        for o in 0..cout {
            let gplane = &gs[o * h * w..(o + 1) * h * w];
            grads.bias[o] += gplane.iter().copied().sum::<T>();
            for i in 0..cin {
                let iplane = &xs[i * h * w..(i + 1) * h * w];
                let gxplane = &mut gxs[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = self.weight[[o, i, ky, kx]];
                        let (x0, x1) = col_range(w, dx);
                        let mut gw = T::zero();
                        for y in row_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gplane[y * w + x0..y * w + x1];
                            let lo = sy * w + (x0 as isize + dx) as usize;
                            let hi = sy * w + (x1 as isize + dx) as usize;
                            for (&g, &v) in grow.iter().zip(&iplane[lo..hi]) {
                                gw += g * v;
                            }
                            for (gxv, &g) in gxplane[lo..hi].iter_mut().zip(grow) {
                                *gxv += wv * g;
                            }
                        }
                        grads.weight[[o, i, ky, kx]] += gw;
                    }
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut [T]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl<T: Real> ConvGrads<T> {
    pub fn slices(&self) -> [&[T]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn scale(&mut self, f: T) {
        self.weight.mapv_inplace(|v| v * f);
        self.bias.mapv_inplace(|v| v * f);
    }
}

fn row_range(h: usize, dy: isize) -> std::ops::Range<usize> {
    let lo = (-dy).max(0) as usize;
    let hi = (h as isize - dy.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

fn col_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

pub fn relu<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(activated: &Array3<T>, grad: &Array3<T>) -> Array3<T> {
    let mut g = grad.clone();
    g.zip_mut_with(activated, |g, &a| {
        if a <= T::zero() {
            *g = T::zero()
        }
    });
    g
}

/// 2x2 max pooling; returns the pooled map and the flat argmax index of each output.
pub fn maxpool2<T: Real>(x: &Array3<T>) -> (Array3<T>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((c, oh, ow));
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y, 2 * xx);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * y + dy, 2 * xx + dx);
                    if x[[ch, cand.0, cand.1]] > x[[ch, best.0, best.1]] {
                        best = cand;
                    }
                }
                out[[ch, y, xx]] = x[[ch, best.0, best.1]];
                idx.push((ch * h + best.0) * w + best.1);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Real>(grad: &Array3<T>, argmax: &[usize], input_dim: (usize, usize, usize)) -> Array3<T> {
    let mut gx = Array3::<T>::zeros(input_dim);
    let gxs = gx.as_slice_mut().expect("standard layout");
    for (&i, &g) in argmax.iter().zip(grad.iter()) {
        gxs[i] += g;
    }
    gx
}

pub fn upsample2<T: Real>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub fn upsample2_backward<T: Real>(grad: &Array3<T>) -> Array3<T> {
    let (c, h, w) = grad.dim();
    let mut out = Array3::<T>::zeros((c, h / 2, w / 2));
    for ((ch, y, x), &g) in grad.indexed_iter() {
        out[[ch, y / 2, x / 2]] += g;
    }
    out
}

/// Mean over `factor x factor` blocks; the exact inverse of nearest-neighbour upsampling.
pub fn avgpool<T: Real>(x: &Array3<T>, factor: usize) -> Array3<T> {
    if factor == 1 {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    let n = T::from_usize(factor * factor).expect("factor");
    Array3::from_shape_fn((c, h / factor, w / factor), |(ch, y, xx)| {
        x.slice(s![ch, y * factor..(y + 1) * factor, xx * factor..(xx + 1) * factor])
            .iter()
            .copied()
            .sum::<T>()
            / n
    })
}

pub fn concat<T: Real>(a: &Array3<T>, b: &Array3<T>) -> Array3<T> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-(z.abs())).exp().ln_1p()
}

/// Training objective for per-pixel binary outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Soft Dice over the whole mini-batch.
    Dice,
    /// Binary cross-entropy with logits.
    Bce,
    /// Sum of the two.
    DiceBce,
}

/// Loss value and gradient w.r.t. the logits for a batch of flattened logit maps.
///
/// `pos_weight` scales the cross-entropy term of positive pixels.
pub fn loss_and_grad<T: Real>(
    kind: LossKind,
    logits: &[Vec<T>],
    targets: &[Vec<bool>],
    pos_weight: T,
) -> (T, Vec<Vec<T>>) {
    let n: usize = logits.iter().map(Vec::len).sum();
    let n_t = T::from_usize(n.max(1)).expect("pixel count");
    let mut grads: Vec<Vec<T>> = logits.iter().map(|l| vec![T::zero(); l.len()]).collect();
    let mut loss = T::zero();

    if matches!(kind, LossKind::Bce | LossKind::DiceBce) {
        for ((z, y), g) in logits.iter().zip(targets).zip(grads.iter_mut()) {
            for ((&z, &y), g) in z.iter().zip(y).zip(g.iter_mut()) {
                let p = sigmoid(z);
                if y {
                    loss += pos_weight * softplus(-z) / n_t;
                    *g += pos_weight * (p - T::one()) / n_t;
                } else {
                    loss += softplus(z) / n_t;
                    *g += p / n_t;
                }
            }
        }
    }

    if matches!(kind, LossKind::Dice | LossKind::DiceBce) {
        let smooth = T::one();
        let two = T::lit(2.0);
        let (mut inter, mut psum, mut ysum) = (T::zero(), T::zero(), T::zero());
        for (z, y) in logits.iter().zip(targets) {
            for (&z, &y) in z.iter().zip(y) {
                let p = sigmoid(z);
                psum += p;
                if y {
                    inter += p;
                    ysum += T::one();
                }
            }
        }
        let denom = psum + ysum + smooth;
        let dice = (two * inter + smooth) / denom;
        loss += T::one() - dice;
        for ((z, y), g) in logits.iter().zip(targets).zip(grads.iter_mut()) {
            for ((&z, &y), g) in z.iter().zip(y).zip(g.iter_mut()) {
                let p = sigmoid(z);
                let yv = if y { T::one() } else { T::zero() };
                let dd_dp = (two * yv * denom - (two * inter + smooth)) / (denom * denom);
                *g -= dd_dp * p * (T::one() - p);
            }
        }
    }
    (loss, grads)
}

/// Adam optimiser over a fixed, ordered list of parameter slices.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Conv2d::<f64>::new(1, 1, 3, &mut rng);
        c.weight.fill(0.0);
        c.weight[[0, 0, 1, 1]] = 1.0;
        let x = rand3(&mut rng, (1, 5, 4));
        assert_eq!(c.forward(&x), x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        let x = rand3(&mut rng, (2, 4, 5));
        let y = c.forward(&x);
        for o in 0..3 {
            for r in 0..4 {
                for q in 0..5 {
                    let mut acc = c.bias[o];
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sr, sq) = (r as isize + ky as isize - 1, q as isize + kx as isize - 1);
                                if sr >= 0 && sq >= 0 && sr < 4 && sq < 5 {
                                    acc += c.weight[[o, i, ky, kx]] * x[[i, sr as usize, sq as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[o, r, q]]).abs() < 1e-12);
                }
            }
        }
    }

    /// Finite-difference check of the convolution gradients.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Conv2d::<f64>::new(2, 2, 3, &mut rng);
        c.bias[0] = 0.3;
        let x = rand3(&mut rng, (2, 4, 4));
        let proj = rand3(&mut rng, (2, 4, 4));
        let f = |c: &Conv2d<f64>, x: &Array3<f64>| (c.forward(x) * &proj).sum();
        let mut g = ConvGrads::zeros_like(&c);
        let gx = c.backward(&x, &proj, &mut g);
        let h = 1e-6;
        for idx in [[0, 1, 0, 2], [1, 0, 1, 1], [1, 1, 2, 0]] {
            let mut cp = c.clone();
            cp.weight[idx] += h;
            let mut cm = c.clone();
            cm.weight[idx] -= h;
            let fd = (f(&cp, &x) - f(&cm, &x)) / (2.0 * h);
            assert!((fd - g.weight[idx]).abs() < 1e-6, "{fd} vs {}", g.weight[idx]);
        }
        for idx in [[0, 0, 0], [1, 2, 3], [0, 3, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&c, &xp) - f(&c, &xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6);
        }
        let fd_b = {
            let mut cp = c.clone();
            cp.bias[1] += h;
            let mut cm = c.clone();
            cm.bias[1] -= h;
            (f(&cp, &x) - f(&cm, &x)) / (2.0 * h)
        };
        assert!((fd_b - g.bias[1]).abs() < 1e-6);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let targets: Vec<Vec<bool>> = (0..2).map(|_| (0..6).map(|_| rng.gen_bool(0.4)).collect()).collect();
        for kind in [LossKind::Bce, LossKind::Dice, LossKind::DiceBce] {
            let (_, g) = loss_and_grad(kind, &logits, &targets, 3.0);
            let h = 1e-6;
            for (b, i) in [(0, 0), (1, 3), (0, 5)] {
                let mut lp = logits.clone();
                lp[b][i] += h;
                let mut lm = logits.clone();
                lm[b][i] -= h;
                let fd = (loss_and_grad(kind, &lp, &targets, 3.0).0 - loss_and_grad(kind, &lm, &targets, 3.0).0) / (2.0 * h);
                assert!((fd - g[b][i]).abs() < 1e-6, "{kind:?}: {fd} vs {}", g[b][i]);
            }
        }
    }

    #[test]
    fn pooling_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand3(&mut rng, (2, 4, 6));
        let up = upsample2(&x);
        assert_eq!(avgpool(&up, 2), x);
        let (p, idx) = maxpool2(&up);
        assert_eq!(p, x);
        let g = maxpool2_backward::<f64>(&Array3::ones(p.dim()), &idx, up.dim());
        assert_eq!(g.sum(), x.len() as f64);
        assert_eq!(upsample2_backward(&Array3::<f64>::ones(up.dim())), Array3::from_elem(x.dim(), 4.0));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
