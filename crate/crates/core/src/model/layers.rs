//! Layer primitives with explicit backward passes.
//!
//! Feature maps are `(channels, rows, cols)`. Every `backward` adds parameter
//! gradients into a same-shaped gradient layer and returns the gradient with
//! respect to the layer input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Parameterized, VisitFn};

/// 2D convolution with square kernel, zero padding and stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal initialised convolution; bias starts at zero.
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array4::from_shape_simple_fn((out_c, in_c, kernel, kernel), || normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            padding,
        }
    }

    /// "Same" 3×3 convolution.
    pub fn same3<R: Rng + ?Sized>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        Self::new(in_c, out_c, 3, 1, 1, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        Self::new(in_c, out_c, 1, 1, 0, rng)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    /// Unfolds input patches into a `(in*k*k, out_h*out_w)` matrix.
    fn im2col(&self, x: &ArrayView3<'_, f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let (oh, ow) = self.output_size(h, w);
        let (st, pad) = (self.stride as isize, self.padding as isize);
        let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
        let xs = x.as_standard_layout();
        let xin = xs.as_slice().expect("standard layout");
        let out = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let plane = &xin[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = oi as isize * st + ki as isize - pad;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                        let drow = &mut dst[oi * ow..(oi + 1) * ow];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = oj as isize * st + kj as isize - pad;
                            if jj >= 0 && jj < w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds a column gradient back onto the input grid (adjoint of `im2col`).
    fn col2im(&self, cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
        let k = self.kernel();
        let (oh, ow) = self.output_size(h, w);
        let (st, pad) = (self.stride as isize, self.padding as isize);
        let mut dx = Array3::<f64>::zeros((c, h, w));
        let src = cols.as_slice().expect("standard layout");
        let out = dx.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let srow = &src[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = oi as isize * st + ki as isize - pad;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = ii as usize * w;
                        for oj in 0..ow {
                            let jj = oj as isize * st + kj as isize - pad;
                            if jj >= 0 && jj < w as isize {
                                plane[base + jj as usize] += srow[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels());
        let (oh, ow) = self.output_size(h, w);
        let mut out = Array2::<f64>::zeros((self.out_channels(), oh * ow));
        if self.is_pointwise() {
            let xs = x.as_standard_layout();
            let x2 = xs.view().into_shape_with_order((c, h * w)).expect("contiguous");
            general_mat_mul(1.0, &self.weight_matrix(), &x2, 0.0, &mut out);
        } else {
            let cols = self.im2col(&x.view());
            general_mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut out);
        }
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        out.into_shape_with_order((self.out_channels(), oh, ow))
            .expect("contiguous")
    }

    pub fn backward(&self, x: &Array3<f64>, grad_out: &Array3<f64>, grads: &mut Conv2d) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (o, oh, ow) = grad_out.dim();
        let gs = grad_out.as_standard_layout();
        let g2 = gs.view().into_shape_with_order((o, oh * ow)).expect("contiguous");
        let (wo, wi, k, _) = grads.weight.dim();
        {
            let mut gw = grads
                .weight
                .view_mut()
                .into_shape_with_order((wo, wi * k * k))
                .expect("contiguous");
            if self.is_pointwise() {
                let xs = x.as_standard_layout();
                let x2 = xs.view().into_shape_with_order((c, h * w)).expect("contiguous");
                general_mat_mul(1.0, &g2, &x2.t(), 1.0, &mut gw);
            } else {
                let cols = self.im2col(&x.view());
                general_mat_mul(1.0, &g2, &cols.t(), 1.0, &mut gw);
            }
        }
        grads.bias += &g2.sum_axis(Axis(1));
        let mut dcols = Array2::<f64>::zeros((c * k * k, oh * ow));
        general_mat_mul(1.0, &self.weight_matrix().t(), &g2, 0.0, &mut dcols);
        if self.is_pointwise() {
            dcols.into_shape_with_order((c, h, w)).expect("contiguous")
        } else {
            self.col2im(&dcols, c, h, w)
        }
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut VisitFn) {
        f(
            &format!("{prefix}.weight"),
            self.weight.shape(),
            self.weight.as_slice().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.shape(),
            self.bias.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().expect("standard layout"),
        );
    }
}

/// 2×2 transposed convolution with stride 2 (learned upsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv2x2 {
    /// `(in, out, 2, 2)`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl UpConv2x2 {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_c as f64).sqrt()).expect("valid std");
        Self {
            weight: Array4::from_shape_simple_fn((in_c, out_c, 2, 2), || normal.sample(rng)),
            bias: Array1::zeros(out_c),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let o = self.out_channels();
        let xs = x.as_standard_layout();
        let x2 = xs.view().into_shape_with_order((c, h * w)).expect("contiguous");
        let mut out = Array3::<f64>::zeros((o, 2 * h, 2 * w));
        let mut y = Array2::<f64>::zeros((o, h * w));
        for di in 0..2 {
            for dj in 0..2 {
                let wd = self.weight.slice(s![.., .., di, dj]);
                general_mat_mul(1.0, &wd.t(), &x2, 0.0, &mut y);
                let y3 = y.view().into_shape_with_order((o, h, w)).expect("contiguous");
                let mut dst = out.slice_mut(s![.., di..;2, dj..;2]);
                dst.assign(&y3);
            }
        }
        for (mut plane, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            plane += b;
        }
        out
    }

    pub fn backward(&self, x: &Array3<f64>, grad_out: &Array3<f64>, grads: &mut UpConv2x2) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let o = self.out_channels();
        let xs = x.as_standard_layout();
        let x2 = xs.view().into_shape_with_order((c, h * w)).expect("contiguous");
        let mut dx = Array2::<f64>::zeros((c, h * w));
        for di in 0..2 {
            for dj in 0..2 {
                let g = grad_out
                    .slice(s![.., di..;2, dj..;2])
                    .to_owned()
                    .into_shape_with_order((o, h * w))
                    .expect("contiguous");
                let mut gw = grads.weight.slice_mut(s![.., .., di, dj]);
                general_mat_mul(1.0, &x2, &g.t(), 1.0, &mut gw);
                let wd = self.weight.slice(s![.., .., di, dj]);
                general_mat_mul(1.0, &wd, &g, 1.0, &mut dx);
            }
        }
        grads.bias += &grad_out.sum_axis(Axis(2)).sum_axis(Axis(1));
        dx.into_shape_with_order((c, h, w)).expect("contiguous")
    }
}

impl Parameterized for UpConv2x2 {
    fn visit(&self, prefix: &str, f: &mut VisitFn) {
        f(
            &format!("{prefix}.weight"),
            self.weight.shape(),
            self.weight.as_slice().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.shape(),
            self.bias.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().expect("standard layout"),
        );
    }
}

/// 2×2 max pooling; returns the pooled map and the winning offset (0..4) per
/// output cell.
pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, Array3<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut idx = Array3::<u8>::zeros((c, oh, ow));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x[[ci, 2 * i, 2 * j]];
                let mut bi = 0u8;
                for (n, (di, dj)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = x[[ci, 2 * i + di, 2 * j + dj]];
                    if v > best {
                        best = v;
                        bi = n as u8 + 1;
                    }
                }
                out[[ci, i, j]] = best;
                idx[[ci, i, j]] = bi;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward(grad_out: &Array3<f64>, idx: &Array3<u8>, h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = grad_out.dim();
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (di, dj) = match idx[[ci, i, j]] {
                    0 => (0, 0),
                    1 => (0, 1),
                    2 => (1, 0),
                    _ => (1, 1),
                };
                dx[[ci, 2 * i + di, 2 * j + dj]] += grad_out[[ci, i, j]];
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` where the post-activation output is not positive.
pub fn relu_backward_inplace(grad: &mut Array3<f64>, output: &Array3<f64>) {
    Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Channel-wise softmax at every pixel.
pub fn softmax_channels(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let col = logits.slice(s![.., i, j]);
            let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for k in 0..c {
                let e = (col[k] - m).exp();
                out[[k, i, j]] = e;
                sum += e;
            }
            for k in 0..c {
                out[[k, i, j]] /= sum;
            }
        }
    }
    out
}

/// Pulls a probability gradient back through the channel softmax.
pub fn softmax_backward(probs: &Array3<f64>, grad_probs: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = probs.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            for k in 0..c {
                dot += probs[[k, i, j]] * grad_probs[[k, i, j]];
            }
            for k in 0..c {
                out[[k, i, j]] = probs[[k, i, j]] * (grad_probs[[k, i, j]] - dot);
            }
        }
    }
    out
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient at channel `at`.
pub fn split_channels(g: Array3<f64>, at: usize) -> (Array3<f64>, Array3<f64>) {
    let first = g.slice(s![..at, .., ..]).to_owned();
    let second = g.slice(s![at.., .., ..]).to_owned();
    (first, second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Direct sliding-window convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = conv.kernel();
        let (oh, ow) = conv.output_size(h, w);
        let mut out = Array3::zeros((conv.out_channels(), oh, ow));
        for o in 0..conv.out_channels() {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = conv.bias[o];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i * conv.stride + ki) as isize - conv.padding as isize;
                                let jj = (j * conv.stride + kj) as isize - conv.padding as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += conv.weight[[o, ci, ki, kj]] * x[[ci, ii as usize, jj as usize]];
                                }
                            }
                        }
                    }
                    out[[o, i, j]] = acc;
                }
            }
        }
        out
    }

    fn random3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            conv.bias = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let x = random3(&mut rng, (3, 7, 6));
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            assert_eq!(a.dim(), b.dim());
            assert!(a.iter().zip(b.iter()).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    // <grad_out, conv(x)> is linear in x and w, so finite differences are exact
    // up to rounding.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let conv = Conv2d::new(2, 3, k, s, p, &mut rng);
            let x = random3(&mut rng, (2, 5, 6));
            let y = conv.forward(&x);
            let g = random3(&mut rng, y.dim());
            let mut grads = conv.zeros_like();
            let dx = conv.backward(&x, &g, &mut grads);
            let obj = |conv: &Conv2d, x: &Array3<f64>| (&conv.forward(x) * &g).sum();
            let h = 1e-6;
            for idx in [(0, 0, 0), (1, 2, 3), (1, 4, 5)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (obj(&conv, &xp) - obj(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx[idx]).abs() < 1e-7, "dx {idx:?}: {fd} vs {}", dx[idx]);
            }
            for widx in [(0, 0, 0, 0), (2, 1, k - 1, k - 1)] {
                let mut cp = conv.clone();
                cp.weight[widx] += h;
                let mut cm = conv.clone();
                cm.weight[widx] -= h;
                let fd = (obj(&cp, &x) - obj(&cm, &x)) / (2.0 * h);
                assert!((fd - grads.weight[widx]).abs() < 1e-7);
            }
            let bsum: f64 = g.index_axis(Axis(0), 1).sum();
            assert!((grads.bias[1] - bsum).abs() < 1e-12);
        }
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let up = UpConv2x2::new(3, 2, &mut rng);
        let x = random3(&mut rng, (3, 3, 4));
        let y = up.forward(&x);
        assert_eq!(y.dim(), (2, 6, 8));
        let g = random3(&mut rng, y.dim());
        let mut grads = up.zeros_like();
        let dx = up.backward(&x, &g, &mut grads);
        let obj = |u: &UpConv2x2, x: &Array3<f64>| (&u.forward(x) * &g).sum();
        let h = 1e-6;
        for idx in [(0, 0, 0), (2, 2, 3)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (obj(&up, &xp) - obj(&up, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        let widx = (1, 1, 0, 1);
        let mut up_p = up.clone();
        up_p.weight[widx] += h;
        let mut up_m = up.clone();
        up_m.weight[widx] -= h;
        let fd = (obj(&up_p, &x) - obj(&up_m, &x)) / (2.0 * h);
        assert!((fd - grads.weight[widx]).abs() < 1e-7);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, idx) = max_pool2(&x);
        assert_eq!(y[[0, 0, 0]], 0.9);
        let g = Array3::from_elem((1, 1, 1), 2.0);
        let dx = max_pool2_backward(&g, &idx, 2, 2);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random3(&mut rng, (5, 3, 3)) * 30.0;
        let p = softmax_channels(&z);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = p.slice(s![.., i, j]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
