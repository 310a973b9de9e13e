//! Dense NCHW tensors.
//!
//! A [`Tensor`] is an immutable value: every operation here returns a new
//! tensor and never aliases its inputs. Layout is row-major over
//! `(n, c, h, w)`, which is also the on-disk order used by the weight file.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Storage type tag. The numeric values are the weight-file dtype tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Scalar element of a tensor.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Per-channel vector, stored as `(1, c, 1, 1)`.
    pub const fn vector(c: usize) -> Self {
        Shape::new(1, c, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch sample.
    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &std::any::type_name::<T>())
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    /// Contiguous copy of channels `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let plane = s.plane();
        let out_shape = s.with_c(len);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub(crate) fn sample_slice(&self, n: usize) -> &[T] {
        let len = self.shape.sample();
        &self.data[n * len..(n + 1) * len]
    }
}

fn ensure_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "shape mismatch: {} vs {}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Concatenate along the channel axis; part `i` occupies the `i`-th
/// contiguous channel range of the output. Zero-channel parts are skipped.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of an empty list"))?;
    let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
    for p in parts {
        if (p.shape.n, p.shape.h, p.shape.w) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat parts disagree on n/h/w: {} vs {}",
                first.shape, p.shape
            )));
        }
    }
    if parts.len() == 1 {
        return Ok((*first).clone());
    }
    let c: usize = parts.iter().map(|p| p.shape.c).sum();
    let shape = Shape::new(n, c, h, w);
    let mut data = Vec::with_capacity(shape.numel());
    for i in 0..n {
        for p in parts.iter().filter(|p| p.shape.c > 0) {
            data.extend_from_slice(p.sample_slice(i));
        }
    }
    Ok(Tensor { shape, data })
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

pub fn scale<T: Element>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Mean over each `(n, c)` plane; output is `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.shape;
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!(
            "cannot pool empty spatial extent {s}"
        )));
    }
    let plane = s.plane();
    let denom = T::from_usize(plane).expect("plane size fits");
    let data = a
        .data
        .chunks_exact(plane)
        .map(|p| p.iter().fold(T::zero(), |acc, &v| acc + v) / denom)
        .collect();
    Ok(Tensor {
        shape: Shape::new(s.n, s.c, 1, 1),
        data,
    })
}

/// Gradient of [`global_avg_pool`]: spreads `grad` evenly over each plane.
pub fn global_avg_pool_backward<T: Element>(grad: &Tensor<T>, input: Shape) -> Result<Tensor<T>> {
    let g = grad.shape;
    if g != Shape::new(input.n, input.c, 1, 1) {
        return Err(Error::shape(format!(
            "pool gradient {g} does not match input {input}"
        )));
    }
    let plane = input.plane();
    let denom = T::from_usize(plane).expect("plane size fits");
    let mut data = Vec::with_capacity(input.numel());
    for &v in &grad.data {
        data.extend(std::iter::repeat_n(v / denom, plane));
    }
    Ok(Tensor { shape: input, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(shape: Shape, offset: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64 + offset)
    }

    #[test]
    fn concat_two_parts_puts_first_part_first() {
        let a = seq(Shape::new(1, 2, 2, 2), 0.0);
        let b = seq(Shape::new(1, 3, 2, 2), 100.0);
        let out = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(out.slice_channels(0, 2).unwrap(), a);
        assert_eq!(out.slice_channels(2, 3).unwrap(), b);
    }

    #[test]
    fn concat_single_is_identity() {
        let a = seq(Shape::new(2, 3, 2, 1), 0.5);
        let out = concat_channels(&[&a]).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn concat_reused_copies_then_generated() {
        // (t-r)c generated + 2rc reused = (t+r)c, with c=4, t=3, r=1.
        let x = seq(Shape::new(1, 4, 3, 3), 0.0);
        let gen = seq(Shape::new(1, 8, 3, 3), 50.0);
        let out = concat_channels(&[&x, &x, &gen]).unwrap();
        assert_eq!(out.shape().c, 16);
    }

    #[test]
    fn concat_skips_zero_channel_parts() {
        let a = seq(Shape::new(2, 2, 2, 2), 0.0);
        let empty = Tensor::<f64>::zeros(Shape::new(2, 0, 2, 2));
        let out = concat_channels(&[&empty, &a, &empty]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn concat_errors() {
        let a = seq(Shape::new(1, 2, 2, 2), 0.0);
        let b = seq(Shape::new(1, 2, 3, 2), 0.0);
        assert!(concat_channels(&[&a, &b]).is_err());
        assert!(concat_channels::<f64>(&[]).is_err());
    }

    #[test]
    fn add_and_scale_identities() {
        let x = seq(Shape::new(1, 2, 2, 2), -3.0);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert_eq!(scale(&x, 1.0), x);
        assert!(add(&x, &Tensor::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn pool_mean_of_four() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = global_avg_pool(&x).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn pool_constant_is_exact() {
        let x = Tensor::full(Shape::new(2, 3, 4, 4), 0.375_f64);
        let p = global_avg_pool(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 2));
        x.data_mut()[1] = f32::NAN;
        assert!(matches!(x.check_finite("x"), Err(Error::NonFinite(_))));
    }

    fn small_shape() -> impl Strategy<Value = Shape> {
        (1usize..3, 0usize..4, 1usize..4, 1usize..4).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
    }

    proptest! {
        #[test]
        fn concat_then_slice_recovers_parts(
            shapes in proptest::collection::vec(small_shape(), 1..4),
            seed in any::<u64>(),
        ) {
            let base = shapes[0];
            let parts: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let s = Shape::new(base.n, s.c, base.h, base.w);
                    Tensor::from_fn(s, |j| ((seed as f64) * 1e-9 + (i * 1000 + j) as f64).sin())
                })
                .collect();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            let out = concat_channels(&refs).unwrap();
            let mut start = 0;
            for p in &parts {
                let back = out.slice_channels(start, p.shape().c).unwrap();
                prop_assert_eq!(back.data(), p.data());
                start += p.shape().c;
            }
            prop_assert_eq!(start, out.shape().c);
        }

        #[test]
        fn add_commutes_exactly(
            vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..64),
        ) {
            let shape = Shape::new(1, vals.len(), 1, 1);
            let a = Tensor::from_vec(shape, vals.iter().map(|v| v.0).collect()).unwrap();
            let b = Tensor::from_vec(shape, vals.iter().map(|v| v.1).collect()).unwrap();
            prop_assert_eq!(add(&a, &b).unwrap(), add(&b, &a).unwrap());
        }
    }
}
