//! Instantiated networks: an ordered layer list over a [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::NetworkSpec;
use crate::blocks::{Block, BlockCache};
use crate::error::{Error, Result};
use crate::layers::{init_params, ConvUnit, ConvUnitCache, ForwardCtx, ParamDecl};
use crate::ops::ConvParams;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{global_avg_pool, global_avg_pool_backward, Element, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvUnit),
    Block(Block),
    GlobalPool,
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(u) => &u.name,
            Layer::Block(b) => &b.prefix,
            Layer::GlobalPool => "pool",
        }
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        match self {
            Layer::Conv(u) => u.param_decls(),
            Layer::Block(b) => b.param_decls(),
            Layer::GlobalPool => Vec::new(),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(u) => u.conv.output_shape(input),
            Layer::Block(b) => b.layout.output_shape(input),
            Layer::GlobalPool => Ok(Shape::new(input.n, input.c, 1, 1)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv(ConvUnitCache<T>),
    Block(BlockCache<T>),
    GlobalPool(Shape),
}

/// A built network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

fn layer_name(index: usize, role: &str) -> String {
    format!("{index:02}.{role}")
}

impl Network {
    /// Builds the layer graph for `spec` without allocating parameters.
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        let resolved = spec.resolve()?;
        let mut layers = Vec::new();
        let mut idx = 0;
        let mut next = |role: &str| {
            let name = layer_name(idx, role);
            idx += 1;
            name
        };
        layers.push(Layer::Conv(ConvUnit::conv_bn(
            next("stem"),
            ConvParams::standard(
                spec.in_channels,
                resolved.stem_channels,
                spec.stem.kernel,
                spec.stem.stride,
            ),
            Some(spec.stem.nonlinearity),
        )));
        let mut c = resolved.stem_channels;
        for layout in &resolved.blocks {
            let name = next(layout.spec.kind.name());
            layers.push(Layer::Block(Block::from_layout(*layout, name)));
            c = layout.out_channels();
        }
        if let Some(width) = resolved.last_conv {
            layers.push(Layer::Conv(ConvUnit::conv_bn(
                next("conv"),
                ConvParams::pointwise(c, width),
                Some(spec.head.nonlinearity),
            )));
            c = width;
        }
        next("pool");
        layers.push(Layer::GlobalPool);
        if let Some(width) = resolved.pooled_conv {
            layers.push(Layer::Conv(ConvUnit {
                name: next("pooled"),
                conv: ConvParams::pointwise(c, width),
                bn: false,
                bias: false,
                act: Some(spec.head.nonlinearity),
            }));
            c = width;
        }
        layers.push(Layer::Conv(ConvUnit {
            name: next("classifier"),
            conv: ConvParams::pointwise(c, resolved.classes),
            bn: false,
            bias: true,
            act: None,
        }));
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        self.layers.iter().flat_map(Layer::param_decls).collect()
    }

    /// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&self.param_decls(), &mut store, &mut rng)?;
        Ok(store)
    }

    pub fn classes(&self) -> usize {
        self.spec.head.classes
    }

    pub fn input_shape(&self, batch: usize, resolution: usize) -> Shape {
        Shape::new(batch, self.spec.in_channels, resolution, resolution)
    }

    /// Output shape of every layer for a given input.
    pub fn shape_trace(&self, input: Shape) -> Result<Vec<(String, Shape)>> {
        let mut shape = input;
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(shape)?;
                Ok((l.name().to_string(), shape))
            })
            .collect()
    }

    pub fn forward<T: Element>(
        &self,
        x: &Tensor<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        if x.shape().c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (out, cache) = match layer {
                Layer::Conv(u) => {
                    let (y, c) = u.forward(&h, store, ctx)?;
                    (y, LayerCache::Conv(c))
                }
                Layer::Block(b) => {
                    let (y, c) = b.forward(&h, store, ctx)?;
                    (y, LayerCache::Block(c))
                }
                Layer::GlobalPool => (global_avg_pool(&h)?, LayerCache::GlobalPool(h.shape())),
            };
            caches.push(cache);
            h = out;
        }
        Ok((h, caches))
    }

    /// Logits only; convenience for evaluation.
    pub fn predict<T: Element>(&self, x: &Tensor<T>, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let mut ctx = ForwardCtx::infer();
        Ok(self.forward(x, store, &mut ctx)?.0)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Element>(
        &self,
        caches: &[LayerCache<T>],
        grad_out: &Tensor<T>,
        store: &ParamStore<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        if caches.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = match (layer, cache) {
                (Layer::Conv(u), LayerCache::Conv(c)) => u.backward(c, &g, store, grads)?,
                (Layer::Block(b), LayerCache::Block(c)) => b.backward(c, &g, store, grads)?,
                (Layer::GlobalPool, LayerCache::GlobalPool(shape)) => {
                    global_avg_pool_backward(&g, *shape)?
                }
                _ => {
                    return Err(Error::shape(format!(
                        "cache kind mismatch at `{}`",
                        layer.name()
                    )))
                }
            };
        }
        Ok(g)
    }
}

/// Builds the layer graph and its freshly initialized parameters.
pub fn build_network<T: Element>(
    spec: &NetworkSpec,
    seed: u64,
) -> Result<(Network, ParamStore<T>)> {
    let net = Network::from_spec(spec)?;
    let store = net.init_params(seed)?;
    Ok((net, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_spec, scale_spec};

    #[test]
    fn asymmnet_s_pre_pool_features() {
        let net = Network::from_spec(&builtin_spec("asymmnet-s").unwrap()).unwrap();
        let trace = net.shape_trace(Shape::new(1, 3, 224, 224)).unwrap();
        let pre_pool = trace
            .iter()
            .rev()
            .find(|(n, _)| n.ends_with(".conv"))
            .unwrap();
        assert_eq!(pre_pool.1, Shape::new(1, 576, 7, 7));
        assert_eq!(trace.last().unwrap().1, Shape::new(1, 1000, 1, 1));
    }

    #[test]
    fn asymmnet_l_input_column() {
        let net = Network::from_spec(&builtin_spec("asymmnet-l").unwrap()).unwrap();
        let trace = net.shape_trace(Shape::new(1, 3, 224, 224)).unwrap();
        let inputs: Vec<(usize, usize)> = std::iter::once((224, 3))
            .chain(trace.iter().map(|(_, s)| (s.h, s.c)))
            .take(18)
            .collect();
        let expected = [
            (224, 3),
            (112, 16),
            (112, 16),
            (56, 24),
            (56, 24),
            (28, 40),
            (28, 40),
            (28, 40),
            (14, 80),
            (14, 80),
            (14, 80),
            (14, 80),
            (14, 112),
            (14, 112),
            (7, 160),
            (7, 160),
            (7, 160),
            (7, 960),
        ];
        assert_eq!(inputs, expected);
    }

    #[test]
    fn stride_product_is_32() {
        for name in crate::arch::BUILTIN_NAMES {
            let net = Network::from_spec(&builtin_spec(name).unwrap()).unwrap();
            let trace = net.shape_trace(Shape::new(1, 3, 64, 64)).unwrap();
            let pool = trace.iter().position(|(n, _)| n.ends_with("pool")).unwrap();
            let before = trace[pool - 1].1;
            assert_eq!((before.h, before.w), (2, 2), "{name}");
        }
    }

    #[test]
    fn deterministic_init() {
        let spec = scale_spec(&builtin_spec("asymmnet-s").unwrap(), 0.35).unwrap();
        let (_, a) = build_network::<f32>(&spec, 42).unwrap();
        let (_, b) = build_network::<f32>(&spec, 42).unwrap();
        let (_, c) = build_network::<f32>(&spec, 43).unwrap();
        assert!(a.values_equal(&b));
        assert!(!a.values_equal(&c));
    }

    #[test]
    fn names_follow_layer_order() {
        let (_, store) = build_network::<f32>(&builtin_spec("mbv3-s").unwrap(), 0).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert!(names.windows(2).all(|w| w[0][..2] <= w[1][..2]));
        assert_eq!(names[0], "00.stem.weight");
        assert_eq!(*names.last().unwrap(), "15.classifier.bias");
    }

    #[test]
    fn forward_produces_logits() {
        let spec = scale_spec(&builtin_spec("asymmnet-s").unwrap(), 0.35)
            .unwrap()
            .with_classes(10);
        let (net, store) = build_network::<f32>(&spec, 1).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 3, 32, 32), |i| ((i % 17) as f32 - 8.0) / 8.0);
        let logits = net.predict(&x, &store).unwrap();
        assert_eq!(logits.shape(), Shape::new(2, 10, 1, 1));
        assert!(logits.all_finite());
    }
}
