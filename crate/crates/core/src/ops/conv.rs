//! Direct grouped 2-D convolution, forward and backward.
//!
//! One kernel covers standard, grouped, depthwise and pointwise cases. The
//! inner loop is an axpy along the output row, so pointwise convolutions run
//! as a contiguous multiply-add over each plane.
//!
//! Per-output summation order is `(input channel in group, kh, kw)` and is
//! independent of the thread count: batch samples are processed in parallel
//! but each is computed by a single thread, and weight gradients are reduced
//! over samples in index order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    /// Dense k×k convolution with "same" padding.
    pub fn standard(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvParams {
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: channels,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvParams::standard(in_channels, out_channels, 1, 1)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.groups == 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Weight tensor shape `(out_c, in_c / g, k, k)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_per_group(),
            self.kernel,
            self.kernel,
        )
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    /// Multiplies per output element.
    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape(format!("conv with zero channels: {self:?}")));
        }
        if self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::shape(format!(
                "kernel, stride and groups must be positive: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::shape(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// `floor((size + 2 pad - k) / s) + 1`; errors when the result would be empty.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let padded = size + 2 * self.padding;
        if size == 0 || padded < self.kernel {
            return Err(Error::shape(format!(
                "input extent {size} too small for kernel {} with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(
            input.n,
            self.out_channels,
            self.output_size(input.h)?,
            self.output_size(input.w)?,
        ))
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    pad: usize,
}

impl Geometry {
    /// Output columns whose tap `kw` lands inside the input row.
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let lo = if self.pad > kw {
            (self.pad - kw).div_ceil(self.s)
        } else {
            0
        };
        let hi = if self.w + self.pad > kw {
            ((self.w - 1 + self.pad - kw) / self.s + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let ih = (oh * self.s + kh).checked_sub(self.pad)?;
        (ih < self.h).then_some(ih)
    }
}

fn check_inputs<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    p: &ConvParams,
) -> Result<Geometry> {
    p.validate()?;
    let xs = x.shape();
    if xs.c != p.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {xs}",
            p.in_channels
        )));
    }
    if weights.shape() != p.weight_shape() {
        return Err(Error::shape(format!(
            "conv weights {} do not match expected {}",
            weights.shape(),
            p.weight_shape()
        )));
    }
    Ok(Geometry {
        h: xs.h,
        w: xs.w,
        oh: p.output_size(xs.h)?,
        ow: p.output_size(xs.w)?,
        k: p.kernel,
        s: p.stride,
        pad: p.padding,
    })
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let g = check_inputs(x, weights, p)?;
    let out_shape = Shape::new(x.shape().n, p.out_channels, g.oh, g.ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    if out_shape.numel() > 0 {
        out.par_chunks_mut(out_shape.sample())
            .zip(x.data().par_chunks(x.shape().sample()))
            .for_each(|(o, xs)| forward_sample(xs, weights.data(), p, g, o));
    }
    Tensor::from_vec(out_shape, out)
}

/// 1×1, stride 1, unpadded: every tap maps whole planes onto whole planes.
fn is_plane_map(g: Geometry) -> bool {
    g.k == 1 && g.s == 1 && g.pad == 0
}

fn forward_sample<T: Element>(xs: &[T], w: &[T], p: &ConvParams, g: Geometry, out: &mut [T]) {
    let (icpg, ocpg, k) = (p.in_per_group(), p.out_per_group(), g.k);
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    if is_plane_map(g) {
        for (oc, oplane) in out.chunks_exact_mut(ohw).enumerate() {
            let first = oc / ocpg * icpg;
            for icg in 0..icpg {
                let wv = w[oc * icpg + icg];
                let xplane = &xs[(first + icg) * hw..(first + icg + 1) * hw];
                for (o, &xv) in oplane.iter_mut().zip(xplane) {
                    *o = *o + wv * xv;
                }
            }
        }
        return;
    }
    for oc in 0..p.out_channels {
        let group = oc / ocpg;
        let oplane = &mut out[oc * ohw..(oc + 1) * ohw];
        for icg in 0..icpg {
            let ic = group * icpg + icg;
            let xplane = &xs[ic * hw..(ic + 1) * hw];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[((oc * icpg + icg) * k + kh) * k + kw];
                    let (lo, hi) = g.col_range(kw);
                    for oh in 0..g.oh {
                        let Some(ih) = g.input_row(oh, kh) else {
                            continue;
                        };
                        let orow = &mut oplane[oh * g.ow..(oh + 1) * g.ow];
                        let xrow = &xplane[ih * g.w..(ih + 1) * g.w];
                        for ow in lo..hi {
                            orow[ow] = orow[ow] + wv * xrow[ow * g.s + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(grad_x, grad_w)` for `y = conv2d_forward(x, weights, p)`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    p: &ConvParams,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = check_inputs(x, weights, p)?;
    let expected = Shape::new(x.shape().n, p.out_channels, g.oh, g.ow);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv grad_out {} does not match output {expected}",
            grad_out.shape()
        )));
    }
    let xs = x.shape();
    let mut gx = vec![T::zero(); xs.numel()];
    if xs.numel() > 0 {
        gx.par_chunks_mut(xs.sample())
            .zip(grad_out.data().par_chunks(expected.sample()))
            .for_each(|(gxs, gos)| grad_input_sample(gos, weights.data(), p, g, gxs));
    }

    let partials: Vec<Vec<T>> = (0..xs.n)
        .into_par_iter()
        .map(|n| grad_weight_sample(x.sample_slice(n), grad_out.sample_slice(n), p, g))
        .collect();
    let mut gw = vec![T::zero(); p.weight_count()];
    for part in &partials {
        for (acc, &v) in gw.iter_mut().zip(part) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::from_vec(xs, gx)?,
        Tensor::from_vec(p.weight_shape(), gw)?,
    ))
}

fn grad_input_sample<T: Element>(gos: &[T], w: &[T], p: &ConvParams, g: Geometry, gxs: &mut [T]) {
    let (icpg, ocpg, k) = (p.in_per_group(), p.out_per_group(), g.k);
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    if is_plane_map(g) {
        for (oc, gplane) in gos.chunks_exact(ohw).enumerate() {
            let first = oc / ocpg * icpg;
            for icg in 0..icpg {
                let wv = w[oc * icpg + icg];
                let xplane = &mut gxs[(first + icg) * hw..(first + icg + 1) * hw];
                for (x, &gv) in xplane.iter_mut().zip(gplane) {
                    *x = *x + wv * gv;
                }
            }
        }
        return;
    }
    for oc in 0..p.out_channels {
        let group = oc / ocpg;
        let gplane = &gos[oc * ohw..(oc + 1) * ohw];
        for icg in 0..icpg {
            let ic = group * icpg + icg;
            let xplane = &mut gxs[ic * hw..(ic + 1) * hw];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[((oc * icpg + icg) * k + kh) * k + kw];
                    let (lo, hi) = g.col_range(kw);
                    for oh in 0..g.oh {
                        let Some(ih) = g.input_row(oh, kh) else {
                            continue;
                        };
                        let grow = &gplane[oh * g.ow..(oh + 1) * g.ow];
                        let xrow = &mut xplane[ih * g.w..(ih + 1) * g.w];
                        for ow in lo..hi {
                            let iw = ow * g.s + kw - g.pad;
                            xrow[iw] = xrow[iw] + wv * grow[ow];
                        }
                    }
                }
            }
        }
    }
}

fn grad_weight_sample<T: Element>(xs: &[T], gos: &[T], p: &ConvParams, g: Geometry) -> Vec<T> {
    let (icpg, ocpg, k) = (p.in_per_group(), p.out_per_group(), g.k);
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut gw = vec![T::zero(); p.weight_count()];
    if is_plane_map(g) {
        for (oc, gplane) in gos.chunks_exact(ohw).enumerate() {
            let first = oc / ocpg * icpg;
            for icg in 0..icpg {
                let xplane = &xs[(first + icg) * hw..(first + icg + 1) * hw];
                gw[oc * icpg + icg] = gplane
                    .iter()
                    .zip(xplane)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        }
        return gw;
    }
    for oc in 0..p.out_channels {
        let group = oc / ocpg;
        let gplane = &gos[oc * ohw..(oc + 1) * ohw];
        for icg in 0..icpg {
            let ic = group * icpg + icg;
            let xplane = &xs[ic * hw..(ic + 1) * hw];
            for kh in 0..k {
                for kw in 0..k {
                    let (lo, hi) = g.col_range(kw);
                    let mut acc = T::zero();
                    for oh in 0..g.oh {
                        let Some(ih) = g.input_row(oh, kh) else {
                            continue;
                        };
                        let grow = &gplane[oh * g.ow..(oh + 1) * g.ow];
                        let xrow = &xplane[ih * g.w..(ih + 1) * g.w];
                        for ow in lo..hi {
                            acc = acc + grow[ow] * xrow[ow * g.s + kw - g.pad];
                        }
                    }
                    gw[((oc * icpg + icg) * k + kh) * k + kw] = acc;
                }
            }
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::concat_channels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Textbook nested-loop convolution, written independently of the kernel above.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, p: &ConvParams) -> Tensor<f64> {
        let s = x.shape();
        let out = p.output_shape(s).unwrap();
        let (icpg, ocpg) = (p.in_per_group(), p.out_per_group());
        Tensor::from_fn(out, |idx| {
            let ow = idx % out.w;
            let oh = (idx / out.w) % out.h;
            let oc = (idx / (out.w * out.h)) % out.c;
            let n = idx / (out.w * out.h * out.c);
            let mut acc = 0.0;
            for icg in 0..icpg {
                let ic = (oc / ocpg) * icpg + icg;
                for kh in 0..p.kernel {
                    for kw in 0..p.kernel {
                        let ih = (oh * p.stride + kh) as isize - p.padding as isize;
                        let iw = (ow * p.stride + kw) as isize - p.padding as isize;
                        if ih < 0 || iw < 0 || ih >= s.h as isize || iw >= s.w as isize {
                            continue;
                        }
                        acc += w.at(oc, icg, kh, kw) * x.at(n, ic, ih as usize, iw as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_pointwise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 4, 3, 5), &mut rng);
        let p = ConvParams::pointwise(4, 4);
        let w = Tensor::from_fn(p.weight_shape(), |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(conv2d_forward(&x, &w, &p).unwrap(), x);
    }

    #[test]
    fn depthwise_stride_two_halves_spatial() {
        let p = ConvParams::depthwise(16, 3, 2);
        let x = Tensor::<f32>::zeros(Shape::new(1, 16, 112, 112));
        let w = Tensor::zeros(p.weight_shape());
        let y = conv2d_forward(&x, &w, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 16, 56, 56));
    }

    #[test]
    fn matches_naive_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Shape::new(1, 3, 5, 5), &mut rng);
        let p = ConvParams::standard(3, 2, 3, 1);
        let w = random(p.weight_shape(), &mut rng);
        let got = conv2d_forward(&x, &w, &p).unwrap();
        let want = naive(&x, &w, &p);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_on_mixed_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let groups = [1, 2, 3][rng.random_range(0..3)];
            let k = [1, 3, 5][rng.random_range(0..3)];
            let s = rng.random_range(1..3);
            let cin = groups * rng.random_range(1..3);
            let cout = groups * rng.random_range(1..3);
            let p = ConvParams {
                groups,
                ..ConvParams::standard(cin, cout, k, s)
            };
            let x = random(
                Shape::new(2, cin, rng.random_range(k..8), rng.random_range(k..8)),
                &mut rng,
            );
            let w = random(p.weight_shape(), &mut rng);
            let got = conv2d_forward(&x, &w, &p).unwrap();
            let want = naive(&x, &w, &p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{p:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn grouped_equals_concat_of_independent_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvParams {
            groups: 3,
            ..ConvParams::standard(6, 9, 3, 1)
        };
        let x = random(Shape::new(2, 6, 5, 4), &mut rng);
        let w = random(p.weight_shape(), &mut rng);
        let whole = conv2d_forward(&x, &w, &p).unwrap();
        let sub = ConvParams::standard(2, 3, 3, 1);
        let rows = sub.weight_count();
        let parts: Vec<Tensor<f64>> = (0..3)
            .map(|g| {
                let xg = x.slice_channels(2 * g, 2).unwrap();
                let wg = Tensor::from_vec(
                    sub.weight_shape(),
                    w.data()[g * rows..(g + 1) * rows].to_vec(),
                )
                .unwrap();
                conv2d_forward(&xg, &wg, &sub).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), whole);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ConvParams::standard(3, 4, 3, 2);
        let x = random(Shape::new(2, 3, 6, 6), &mut rng);
        let w = random(p.weight_shape(), &mut rng);
        let go = Tensor::zeros(p.output_shape(x.shape()).unwrap());
        let (gx, gw) = conv2d_backward(&x, &w, &p, &go).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_single_pixel_weight_grad_is_outer_product() {
        let p = ConvParams::pointwise(3, 2);
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::full(p.weight_shape(), 0.3);
        let go = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![4.0, -1.0]).unwrap();
        let (_, gw) = conv2d_backward(&x, &w, &p, &go).unwrap();
        assert_eq!(gw.data(), &[4.0, -8.0, 2.0, -1.0, 2.0, -0.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in [
            ConvParams::standard(3, 4, 3, 1),
            ConvParams::standard(2, 3, 5, 2),
            ConvParams::depthwise(4, 3, 2),
            ConvParams {
                groups: 2,
                ..ConvParams::standard(4, 6, 3, 1)
            },
        ] {
            let x = random(Shape::new(2, p.in_channels, 6, 5), &mut rng);
            let w = random(p.weight_shape(), &mut rng);
            let out = p.output_shape(x.shape()).unwrap();
            let proj = random(out, &mut rng);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
                let y = conv2d_forward(x, w, &p).unwrap();
                y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            };
            let (gx, gw) = conv2d_backward(&x, &w, &p, &proj).unwrap();
            let eps = 1e-5;
            for i in (0..x.numel()).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
                let an = gx.data()[i];
                assert!((fd - an).abs() / 1f64.max(fd.abs()).max(an.abs()) < 1e-6);
            }
            for i in 0..w.numel() {
                let mut wp = w.clone();
                wp.data_mut()[i] += eps;
                let mut wm = w.clone();
                wm.data_mut()[i] -= eps;
                let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
                let an = gw.data()[i];
                assert!((fd - an).abs() / 1f64.max(fd.abs()).max(an.abs()) < 1e-6);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = ConvParams::standard(3, 4, 3, 1);
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(p.weight_shape());
        assert!(conv2d_forward(&x, &w, &p).is_err());
        let bad = ConvParams { groups: 2, ..p };
        assert!(bad.validate().is_err());
        let big = ConvParams {
            padding: 0,
            ..ConvParams::standard(1, 1, 5, 1)
        };
        assert!(big.output_size(3).is_err());
    }
}
