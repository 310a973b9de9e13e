//! A convolution followed by optional batch-norm, bias and activation, with
//! parameters resolved by name from a [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ops::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    conv2d_backward, conv2d_forward, Activation, BnCache, BnConfig, BnParams, BnStats, ConvParams,
    Mode,
};
use crate::params::{Gradients, ParamRole, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

/// Train/infer switch plus the BN statistics gathered during a train-mode pass.
#[derive(Clone, Debug)]
pub struct ForwardCtx<T> {
    pub mode: Mode,
    pub bn: BnConfig,
    pub bn_updates: Vec<(String, BnStats<T>)>,
}

impl<T: Element> ForwardCtx<T> {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            bn: BnConfig::default(),
            bn_updates: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn infer() -> Self {
        Self::new(Mode::Infer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, 2 / fan_in).
    HeNormal {
        fan_in: usize,
    },
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub role: ParamRole,
    pub init: Init,
}

impl ParamDecl {
    pub fn materialize<T: Element>(&self, rng: &mut impl Rng) -> Tensor<T> {
        match self.init {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(self.shape, |_| T::of(dist.sample(rng)))
            }
            Init::Constant(v) => Tensor::full(self.shape, T::of(v)),
        }
    }
}

/// Registers every declaration in order, drawing initial values from `rng`.
pub fn init_params<T: Element>(
    decls: &[ParamDecl],
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    for d in decls {
        store.insert(d.name.clone(), d.materialize(rng), d.role)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub conv: ConvParams,
    pub bn: bool,
    pub bias: bool,
    pub act: Option<Activation>,
}

#[derive(Clone, Debug)]
pub struct ConvUnitCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    pre_act: Option<Tensor<T>>,
}

impl ConvUnit {
    /// Conv → BN → activation, the standard building unit.
    pub fn conv_bn(name: impl Into<String>, conv: ConvParams, act: Option<Activation>) -> Self {
        ConvUnit {
            name: name.into(),
            conv,
            bn: true,
            bias: false,
            act,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn bn_prefix(&self) -> String {
        format!("{}.bn", self.name)
    }

    /// Trainable element count: weights, BN affine and bias.
    pub fn trainable_count(&self) -> usize {
        let c = self.conv.out_channels;
        self.conv.weight_count() + if self.bn { 2 * c } else { 0 } + if self.bias { c } else { 0 }
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let c = self.conv.out_channels;
        let mut out = vec![ParamDecl {
            name: self.weight_name(),
            shape: self.conv.weight_shape(),
            role: ParamRole::Weight,
            init: Init::HeNormal {
                fan_in: self.conv.fan_in(),
            },
        }];
        if self.bias {
            out.push(ParamDecl {
                name: self.bias_name(),
                shape: Shape::vector(c),
                role: ParamRole::NoDecay,
                init: Init::Constant(0.0),
            });
        }
        if self.bn {
            let bn = self.bn_prefix();
            for (suffix, role, v) in [
                ("gamma", ParamRole::NoDecay, 1.0),
                ("beta", ParamRole::NoDecay, 0.0),
                ("running_mean", ParamRole::Buffer, 0.0),
                ("running_var", ParamRole::Buffer, 1.0),
            ] {
                out.push(ParamDecl {
                    name: format!("{bn}.{suffix}"),
                    shape: Shape::vector(c),
                    role,
                    init: Init::Constant(v),
                });
            }
        }
        out
    }

    pub fn forward<T: Element>(
        &self,
        x: &Tensor<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, ConvUnitCache<T>)> {
        let w = store.get_shaped(&self.weight_name(), self.conv.weight_shape())?;
        let mut y = conv2d_forward(x, w, &self.conv)?;
        if self.bias {
            let b = store.get_shaped(&self.bias_name(), Shape::vector(self.conv.out_channels))?;
            add_channel_bias(&mut y, b.data());
        }
        let bn_cache = if self.bn {
            let prefix = self.bn_prefix();
            let get = |s: &str| {
                store.get_shaped(
                    &format!("{prefix}.{s}"),
                    Shape::vector(self.conv.out_channels),
                )
            };
            let params = BnParams {
                gamma: get("gamma")?.data(),
                beta: get("beta")?.data(),
                running_mean: get("running_mean")?.data(),
                running_var: get("running_var")?.data(),
            };
            let (out, cache, stats) = batchnorm_forward(&y, params, ctx.bn, ctx.mode)?;
            if let Some(stats) = stats {
                ctx.bn_updates.push((prefix, stats));
            }
            y = out;
            Some(cache)
        } else {
            None
        };
        let (out, pre_act) = match self.act {
            Some(a) => (activation_forward(&y, a), Some(y)),
            None => (y, None),
        };
        Ok((
            out,
            ConvUnitCache {
                input: x.clone(),
                bn: bn_cache,
                pre_act,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward<T: Element>(
        &self,
        cache: &ConvUnitCache<T>,
        grad_out: &Tensor<T>,
        store: &ParamStore<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let mut g = match (self.act, &cache.pre_act) {
            (Some(a), Some(pre)) => activation_backward(pre, a, grad_out)?,
            _ => grad_out.clone(),
        };
        if let Some(bn) = &cache.bn {
            let prefix = self.bn_prefix();
            let gamma = store.get(&format!("{prefix}.gamma"))?;
            let (dx, dgamma, dbeta) = batchnorm_backward(bn, gamma.data(), &g)?;
            let c = Shape::vector(self.conv.out_channels);
            grads.accumulate(&format!("{prefix}.gamma"), Tensor::from_vec(c, dgamma)?)?;
            grads.accumulate(&format!("{prefix}.beta"), Tensor::from_vec(c, dbeta)?)?;
            g = dx;
        }
        if self.bias {
            let db = channel_sums(&g);
            grads.accumulate(
                &self.bias_name(),
                Tensor::from_vec(Shape::vector(self.conv.out_channels), db)?,
            )?;
        }
        let w = store.get(&self.weight_name())?;
        let (gx, gw) = conv2d_backward(&cache.input, w, &self.conv, &g)?;
        grads.accumulate(&self.weight_name(), gw)?;
        Ok(gx)
    }
}

fn add_channel_bias<T: Element>(y: &mut Tensor<T>, bias: &[T]) {
    let plane = y.shape().plane();
    let c = y.shape().c;
    for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<T: Element>(g: &Tensor<T>) -> Vec<T> {
    let s = g.shape();
    let mut out = vec![T::zero(); s.c];
    for (i, chunk) in g.data().chunks_exact(s.plane()).enumerate() {
        let acc = chunk.iter().fold(T::zero(), |a, &v| a + v);
        out[i % s.c] = out[i % s.c] + acc;
    }
    out
}
