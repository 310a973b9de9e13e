//! Squeeze-and-excite gating: pool → 1×1 reduce → relu → 1×1 expand →
//! hsigmoid → channelwise scale.

use super::activation::{activation_backward, activation_forward, Activation};
use super::conv::{conv2d_backward, conv2d_forward, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::{global_avg_pool, global_avg_pool_backward, Element, Tensor};

#[derive(Clone, Debug)]
pub struct SeCache<T> {
    x: Tensor<T>,
    pooled: Tensor<T>,
    reduced: Tensor<T>,
    hidden: Tensor<T>,
    expanded: Tensor<T>,
    gate: Tensor<T>,
}

fn se_convs<T: Element>(
    channels: usize,
    reduce: &Tensor<T>,
    expand: &Tensor<T>,
) -> Result<(ConvParams, ConvParams)> {
    let inner = reduce.shape().n;
    let r = ConvParams::pointwise(channels, inner);
    let e = ConvParams::pointwise(inner, channels);
    if reduce.shape() != r.weight_shape() || expand.shape() != e.weight_shape() {
        return Err(Error::shape(format!(
            "SE weights {} / {} do not fit {channels} channels",
            reduce.shape(),
            expand.shape()
        )));
    }
    Ok((r, e))
}

/// Returns the gated output and the cache needed by [`squeeze_excite_backward`].
pub fn squeeze_excite<T: Element>(
    x: &Tensor<T>,
    reduce_weights: &Tensor<T>,
    expand_weights: &Tensor<T>,
) -> Result<(Tensor<T>, SeCache<T>)> {
    let s = x.shape();
    let (rp, ep) = se_convs(s.c, reduce_weights, expand_weights)?;
    let pooled = global_avg_pool(x)?;
    let reduced = conv2d_forward(&pooled, reduce_weights, &rp)?;
    let hidden = activation_forward(&reduced, Activation::Relu);
    let expanded = conv2d_forward(&hidden, expand_weights, &ep)?;
    let gate = activation_forward(&expanded, Activation::HSigmoid);

    let plane = s.plane();
    let mut out = x.clone();
    for (chunk, &g) in out.data_mut().chunks_exact_mut(plane).zip(gate.data()) {
        for v in chunk {
            *v = *v * g;
        }
    }
    let cache = SeCache {
        x: x.clone(),
        pooled,
        reduced,
        hidden,
        expanded,
        gate,
    };
    Ok((out, cache))
}

/// Returns `(grad_x, grad_reduce, grad_expand)`.
pub fn squeeze_excite_backward<T: Element>(
    cache: &SeCache<T>,
    reduce_weights: &Tensor<T>,
    expand_weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = cache.x.shape();
    if grad_out.shape() != s {
        return Err(Error::shape(format!(
            "SE grad {} does not match input {s}",
            grad_out.shape()
        )));
    }
    let (rp, ep) = se_convs(s.c, reduce_weights, expand_weights)?;
    let plane = s.plane();

    // Direct path through the channelwise scale, and the gate's gradient.
    let mut dx = grad_out.clone();
    let mut dgate = Tensor::zeros(cache.gate.shape());
    for (i, &g) in cache.gate.data().iter().enumerate() {
        let range = i * plane..(i + 1) * plane;
        let mut acc = T::zero();
        for j in range {
            acc = acc + grad_out.data()[j] * cache.x.data()[j];
            dx.data_mut()[j] = grad_out.data()[j] * g;
        }
        dgate.data_mut()[i] = acc;
    }

    let dexp = activation_backward(&cache.expanded, Activation::HSigmoid, &dgate)?;
    let (dhidden, g_expand) = conv2d_backward(&cache.hidden, expand_weights, &ep, &dexp)?;
    let dred = activation_backward(&cache.reduced, Activation::Relu, &dhidden)?;
    let (dpooled, g_reduce) = conv2d_backward(&cache.pooled, reduce_weights, &rp, &dred)?;
    let dpool_x = global_avg_pool_backward(&dpooled, s)?;
    let dx = crate::tensor::add(&dx, &dpool_x)?;
    Ok((dx, g_reduce, g_expand))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
    }

    #[test]
    fn zero_expand_gives_half_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal(Shape::new(2, 8, 3, 3), &mut rng);
        let red = normal(Shape::new(8, 8, 1, 1), &mut rng);
        let exp = Tensor::zeros(Shape::new(8, 8, 1, 1));
        let (y, _) = squeeze_excite(&x, &red, &exp).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn constant_channels_gate_by_hand() {
        // 2 channels, inner width 1, 1x1 spatial: gate computed by hand.
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let red = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
        let exp = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.5, -1.0]).unwrap();
        let (y, _) = squeeze_excite(&x, &red, &exp).unwrap();
        // hidden = relu(3) = 3; expanded = (1.5, -3); gate = (4.5/6, 0)
        assert_eq!(y.data(), &[0.75, 0.0]);
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2));
        let red = Tensor::zeros(Shape::new(2, 3, 1, 1));
        let exp = Tensor::zeros(Shape::new(3, 2, 1, 1));
        assert!(squeeze_excite(&x, &red, &exp).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = normal(Shape::new(2, 8, 3, 3), &mut rng);
        let red = normal(Shape::new(4, 8, 1, 1), &mut rng);
        let exp = normal(Shape::new(8, 4, 1, 1), &mut rng);
        let proj = normal(x.shape(), &mut rng);
        let loss = |x: &Tensor<f64>, r: &Tensor<f64>, e: &Tensor<f64>| {
            let (y, _) = squeeze_excite(x, r, e).unwrap();
            y.data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, cache) = squeeze_excite(&x, &red, &exp).unwrap();
        let (dx, dr, de) = squeeze_excite_backward(&cache, &red, &exp, &proj).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / 1f64.max(a.abs()).max(b.abs());
        let mut checked = 0;
        for (which, grad) in [(0, &dx), (1, &dr), (2, &de)] {
            for i in 0..grad.numel() {
                let bump = |d: f64| {
                    let (mut a, mut b, mut c) = (x.clone(), red.clone(), exp.clone());
                    [&mut a, &mut b, &mut c][which].data_mut()[i] += d;
                    loss(&a, &b, &c)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let one_sided = ((bump(eps) - loss(&x, &red, &exp)) / eps - fd).abs();
                if one_sided > 1e-3 {
                    continue; // crossed a relu/hsigmoid kink
                }
                assert!(rel(fd, grad.data()[i]) < 1e-6, "tensor {which} idx {i}");
                checked += 1;
            }
        }
        assert!(checked > 150);
    }
}
