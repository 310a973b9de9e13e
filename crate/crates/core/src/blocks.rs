//! Inverted residual, pruned and asymmetrical bottleneck blocks.
//!
//! All three share one skeleton: an optional first pointwise conv that
//! generates features, a channel concat of reused input copies with those
//! features, a depthwise conv, optional squeeze-excite, and a linear
//! pointwise projection, plus a residual when shapes allow it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channels::Rounding;
use crate::channels::DIVISOR;
use crate::error::{Error, Result};
use crate::layers::{ConvUnit, ConvUnitCache, ForwardCtx, Init, ParamDecl};
use crate::ops::{squeeze_excite, squeeze_excite_backward, Activation, ConvParams, SeCache};
use crate::params::{Gradients, ParamRole, ParamStore};
use crate::tensor::{add, concat_channels, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    MmBlock,
    Pruned,
    Asymm,
    /// Depthwise conv followed by a pointwise conv, no expansion.
    Separable,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::MmBlock => "mmblock",
            BlockKind::Pruned => "pruned",
            BlockKind::Asymm => "asymm",
            BlockKind::Separable => "separable",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmblock" => Ok(BlockKind::MmBlock),
            "pruned" => Ok(BlockKind::Pruned),
            "asymm" => Ok(BlockKind::Asymm),
            "separable" => Ok(BlockKind::Separable),
            other => Err(Error::Block(format!("unknown block kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub kernel: usize,
    /// Expanded width before asymmetry, `t·c_in`.
    pub expanded: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub use_se: bool,
    pub nonlinearity: Activation,
    pub rate: usize,
}

/// Channel bookkeeping of a block once its input width is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockLayout {
    pub spec: BlockSpec,
    pub in_channels: usize,
    /// Asymmetry rate after clamping to `r·c_in < p`.
    pub effective_rate: usize,
    /// Number of raw input copies placed ahead of the generated features.
    pub reused_copies: usize,
    /// Output width of the first pointwise conv (0 when it is omitted).
    pub generated: usize,
    /// Width entering the depthwise conv.
    pub dw_width: usize,
    pub se_inner: Option<usize>,
    pub residual: bool,
}

impl BlockLayout {
    pub fn new(spec: BlockSpec, in_channels: usize, se_rounding: Rounding) -> Result<Self> {
        let BlockSpec {
            kind,
            kernel,
            expanded: p,
            out_channels,
            stride,
            ..
        } = spec;
        if in_channels == 0 || p == 0 || out_channels == 0 {
            return Err(Error::Block(format!(
                "channel counts must be positive (c_in={in_channels}, p={p}, c_out={out_channels})"
            )));
        }
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Block(format!(
                "kernel must be odd and positive, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(Error::Block("stride must be positive".into()));
        }
        let (effective_rate, reused_copies, generated, dw_width) = match kind {
            BlockKind::MmBlock => {
                let generated = if p == in_channels { 0 } else { p };
                (0, 0, generated, p)
            }
            BlockKind::Pruned => {
                if p <= in_channels {
                    return Err(Error::Block(format!(
                        "pruned block needs p > c_in, got p={p}, c_in={in_channels}"
                    )));
                }
                (0, 1, p - in_channels, p)
            }
            BlockKind::Asymm => {
                let r = if spec.rate * in_channels < p {
                    spec.rate
                } else {
                    0
                };
                let generated = p - r * in_channels;
                let generated = if r == 0 && generated == in_channels {
                    0
                } else {
                    generated
                };
                (r, 2 * r, generated, p + r * in_channels)
            }
            BlockKind::Separable => {
                if p != in_channels {
                    return Err(Error::Block(format!(
                        "separable block expects p = c_in, got p={p}, c_in={in_channels}"
                    )));
                }
                (0, 0, 0, in_channels)
            }
        };
        let layout = BlockLayout {
            spec,
            in_channels,
            effective_rate,
            reused_copies,
            generated,
            dw_width,
            se_inner: spec
                .use_se
                .then(|| se_rounding.apply(dw_width as f64 / 4.0, DIVISOR)),
            residual: stride == 1 && in_channels == out_channels && kind != BlockKind::Separable,
        };
        debug_assert_eq!(
            layout.reused_copies * in_channels
                + if layout.generated == 0 && layout.reused_copies == 0 {
                    in_channels
                } else {
                    layout.generated
                },
            layout.dw_width
        );
        Ok(layout)
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }

    /// True when the depthwise conv reads the block input directly.
    pub fn expansion_omitted(&self) -> bool {
        self.generated == 0
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::shape(format!(
                "block expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        let dw = ConvParams::depthwise(self.dw_width, self.spec.kernel, self.spec.stride);
        Ok(Shape::new(
            input.n,
            self.spec.out_channels,
            dw.output_size(input.h)?,
            dw.output_size(input.w)?,
        ))
    }
}

/// A block's convs and SE weights under a name prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layout: BlockLayout,
    pub prefix: String,
    pub pw1: Option<ConvUnit>,
    pub dw: ConvUnit,
    pub se: Option<SeUnit>,
    pub pw2: ConvUnit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeUnit {
    pub prefix: String,
    pub reduce: ConvParams,
    pub expand: ConvParams,
}

impl SeUnit {
    pub fn reduce_name(&self) -> String {
        format!("{}.reduce.weight", self.prefix)
    }

    pub fn expand_name(&self) -> String {
        format!("{}.expand.weight", self.prefix)
    }

    fn decls(&self) -> Vec<ParamDecl> {
        [
            (self.reduce_name(), &self.reduce),
            (self.expand_name(), &self.expand),
        ]
        .into_iter()
        .map(|(name, conv)| ParamDecl {
            name,
            shape: conv.weight_shape(),
            role: ParamRole::Weight,
            init: Init::HeNormal {
                fan_in: conv.fan_in(),
            },
        })
        .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    pw1: Option<ConvUnitCache<T>>,
    dw: ConvUnitCache<T>,
    se: Option<SeCache<T>>,
    pw2: ConvUnitCache<T>,
}

impl Block {
    pub fn new(
        spec: BlockSpec,
        in_channels: usize,
        prefix: impl Into<String>,
        se_rounding: Rounding,
    ) -> Result<Self> {
        let layout = BlockLayout::new(spec, in_channels, se_rounding)?;
        Ok(Self::from_layout(layout, prefix))
    }

    pub fn from_layout(layout: BlockLayout, prefix: impl Into<String>) -> Self {
        let prefix = prefix.into();
        let spec = layout.spec;
        let nl = Some(spec.nonlinearity);
        let pw1 = (!layout.expansion_omitted()).then(|| {
            ConvUnit::conv_bn(
                format!("{prefix}.pw1"),
                ConvParams::pointwise(layout.in_channels, layout.generated),
                nl,
            )
        });
        let dw = ConvUnit::conv_bn(
            format!("{prefix}.dw"),
            ConvParams::depthwise(layout.dw_width, spec.kernel, spec.stride),
            nl,
        );
        let se = layout.se_inner.map(|inner| SeUnit {
            prefix: format!("{prefix}.se"),
            reduce: ConvParams::pointwise(layout.dw_width, inner),
            expand: ConvParams::pointwise(inner, layout.dw_width),
        });
        let pw2_act = match spec.kind {
            BlockKind::Separable => nl,
            _ => None,
        };
        let pw2 = ConvUnit::conv_bn(
            format!("{prefix}.pw2"),
            ConvParams::pointwise(layout.dw_width, spec.out_channels),
            pw2_act,
        );
        Block {
            layout,
            prefix,
            pw1,
            dw,
            se,
            pw2,
        }
    }

    /// Declarations in forward order.
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        if let Some(pw1) = &self.pw1 {
            out.extend(pw1.param_decls());
        }
        out.extend(self.dw.param_decls());
        if let Some(se) = &self.se {
            out.extend(se.decls());
        }
        out.extend(self.pw2.param_decls());
        out
    }

    /// Conv units in forward order (SE excluded).
    pub fn conv_units(&self) -> impl Iterator<Item = &ConvUnit> {
        self.pw1.iter().chain([&self.dw, &self.pw2])
    }

    pub fn trainable_count(&self) -> usize {
        self.conv_units()
            .map(ConvUnit::trainable_count)
            .sum::<usize>()
            + self
                .se
                .as_ref()
                .map_or(0, |se| se.reduce.weight_count() + se.expand.weight_count())
    }

    /// The tensor entering the depthwise conv: reused input copies followed
    /// by the generated features, or the input itself when nothing is generated.
    pub fn dw_input<T: Element>(
        &self,
        x: &Tensor<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, Option<ConvUnitCache<T>>)> {
        self.layout.output_shape(x.shape())?;
        let Some(unit) = &self.pw1 else {
            return Ok((x.clone(), None));
        };
        let (generated, cache) = unit.forward(x, store, ctx)?;
        let mut parts: Vec<&Tensor<T>> = vec![x; self.layout.reused_copies];
        parts.push(&generated);
        let dw_in = concat_channels(&parts)?;
        if dw_in.shape().c != self.layout.dw_width {
            return Err(Error::Block(format!(
                "depthwise input has {} channels, layout says {}",
                dw_in.shape().c,
                self.layout.dw_width
            )));
        }
        Ok((dw_in, Some(cache)))
    }

    pub fn forward<T: Element>(
        &self,
        x: &Tensor<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (dw_in, pw1_cache) = self.dw_input(x, store, ctx)?;
        let (mut y, dw_cache) = self.dw.forward(&dw_in, store, ctx)?;
        let se_cache = match &self.se {
            Some(se) => {
                let (out, cache) = squeeze_excite(
                    &y,
                    store.get_shaped(&se.reduce_name(), se.reduce.weight_shape())?,
                    store.get_shaped(&se.expand_name(), se.expand.weight_shape())?,
                )?;
                y = out;
                Some(cache)
            }
            None => None,
        };
        let (mut out, pw2_cache) = self.pw2.forward(&y, store, ctx)?;
        if self.layout.residual {
            out = add(x, &out)?;
        }
        Ok((
            out,
            BlockCache {
                pw1: pw1_cache,
                dw: dw_cache,
                se: se_cache,
                pw2: pw2_cache,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `grad_x`.
    pub fn backward<T: Element>(
        &self,
        cache: &BlockCache<T>,
        grad_out: &Tensor<T>,
        store: &ParamStore<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let mut g = self.pw2.backward(&cache.pw2, grad_out, store, grads)?;
        if let (Some(se), Some(se_cache)) = (&self.se, &cache.se) {
            let (dx, dr, de) = squeeze_excite_backward(
                se_cache,
                store.get(&se.reduce_name())?,
                store.get(&se.expand_name())?,
                &g,
            )?;
            grads.accumulate(&se.reduce_name(), dr)?;
            grads.accumulate(&se.expand_name(), de)?;
            g = dx;
        }
        let g_dw_in = self.dw.backward(&cache.dw, &g, store, grads)?;
        let c_in = self.layout.in_channels;
        let mut gx = match (&self.pw1, &cache.pw1) {
            (Some(unit), Some(pw1_cache)) => {
                let reused = self.layout.reused_copies * c_in;
                let g_gen = g_dw_in.slice_channels(reused, self.layout.generated)?;
                let mut gx = unit.backward(pw1_cache, &g_gen, store, grads)?;
                for copy in 0..self.layout.reused_copies {
                    gx = add(&gx, &g_dw_in.slice_channels(copy * c_in, c_in)?)?;
                }
                gx
            }
            _ => g_dw_in,
        };
        if self.layout.residual {
            gx = add(&gx, grad_out)?;
        }
        Ok(gx)
    }
}

fn require_kind(block: &Block, kind: BlockKind) -> Result<()> {
    if block.layout.spec.kind != kind {
        return Err(Error::Block(format!(
            "expected a {kind} block, got {}",
            block.layout.spec.kind
        )));
    }
    Ok(())
}

/// Inverted residual forward: PW expand, DW, optional SE, linear PW.
pub fn mmblock_forward<T: Element>(
    x: &Tensor<T>,
    block: &Block,
    params: &ParamStore<T>,
    ctx: &mut ForwardCtx<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    require_kind(block, BlockKind::MmBlock)?;
    block.forward(x, params, ctx)
}

/// Pruned block forward: the input is concatenated once ahead of `p − c_in` generated channels.
pub fn pruned_forward<T: Element>(
    x: &Tensor<T>,
    block: &Block,
    params: &ParamStore<T>,
    ctx: &mut ForwardCtx<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    require_kind(block, BlockKind::Pruned)?;
    block.forward(x, params, ctx)
}

/// Asymmetrical block forward: `2·r_eff` input copies ahead of `p − r_eff·c_in` generated channels.
pub fn asymm_forward<T: Element>(
    x: &Tensor<T>,
    block: &Block,
    params: &ParamStore<T>,
    ctx: &mut ForwardCtx<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    require_kind(block, BlockKind::Asymm)?;
    block.forward(x, params, ctx)
}

/// Returns `(grad_x, parameter gradients)` for any block kind.
pub fn block_backward<T: Element>(
    block: &Block,
    cache: &BlockCache<T>,
    params: &ParamStore<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Gradients<T>)> {
    let mut grads = Gradients::new();
    let gx = block.backward(cache, grad_out, params, &mut grads)?;
    Ok((gx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_params;
    use crate::ops::{
        activation_forward, batchnorm_forward, conv2d_forward, BnConfig, BnParams, Mode,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn spec(
        kind: BlockKind,
        k: usize,
        p: usize,
        c: usize,
        s: usize,
        se: bool,
        r: usize,
    ) -> BlockSpec {
        BlockSpec {
            kind,
            kernel: k,
            expanded: p,
            out_channels: c,
            stride: s,
            use_se: se,
            nonlinearity: Activation::HSwish,
            rate: r,
        }
    }

    fn built(spec: BlockSpec, c_in: usize, seed: u64) -> (Block, ParamStore<f64>) {
        let block = Block::new(spec, c_in, "b", Rounding::Nearest).unwrap();
        let mut store = ParamStore::new();
        init_params(
            &block.param_decls(),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        (block, store)
    }

    fn normal(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn channel_audit() {
        let l = BlockLayout::new(
            spec(BlockKind::Pruned, 3, 72, 24, 1, false, 0),
            24,
            Rounding::Nearest,
        )
        .unwrap();
        assert_eq!(
            (l.generated, l.reused_copies * 24, l.dw_width),
            (48, 24, 72)
        );

        let l = BlockLayout::new(
            spec(BlockKind::Asymm, 5, 120, 40, 1, true, 1),
            40,
            Rounding::Nearest,
        )
        .unwrap();
        assert_eq!(
            (l.generated, l.reused_copies * 40, l.dw_width),
            (80, 80, 160)
        );

        let l = BlockLayout::new(
            spec(BlockKind::Asymm, 3, 16, 16, 1, false, 1),
            16,
            Rounding::Nearest,
        )
        .unwrap();
        assert_eq!(l.effective_rate, 0);
        assert_eq!(l.dw_width, 16);
        assert!(l.expansion_omitted());

        assert!(BlockLayout::new(
            spec(BlockKind::Pruned, 3, 16, 16, 1, false, 0),
            16,
            Rounding::Nearest
        )
        .is_err());
    }

    #[test]
    fn stride_two_shape() {
        let (b, store) = built(spec(BlockKind::MmBlock, 3, 64, 24, 2, false, 0), 16, 0);
        let x = normal(Shape::new(1, 16, 112, 112), 1);
        let (y, _) = mmblock_forward(&x, &b, &store, &mut ForwardCtx::infer()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 24, 56, 56));
    }

    #[test]
    fn kind_guard() {
        let (b, store) = built(spec(BlockKind::Asymm, 3, 24, 8, 1, false, 1), 8, 0);
        let x = normal(Shape::new(2, 8, 4, 4), 1);
        assert!(mmblock_forward(&x, &b, &store, &mut ForwardCtx::train()).is_err());
        assert!(asymm_forward(&x, &b, &store, &mut ForwardCtx::train()).is_ok());
    }

    #[test]
    fn zero_projection_is_pure_residual() {
        let (b, mut store) = built(spec(BlockKind::MmBlock, 3, 32, 8, 1, true, 0), 8, 3);
        let name = b.pw2.weight_name();
        let zero = Tensor::zeros(store.get(&name).unwrap().shape());
        store.set(&name, zero).unwrap();
        let x = normal(Shape::new(2, 8, 5, 5), 4);
        let (y, _) = b.forward(&x, &store, &mut ForwardCtx::infer()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn reused_channels_are_input_copies() {
        for r in [1, 2] {
            let (b, store) = built(spec(BlockKind::Asymm, 3, 40, 8, 1, false, r), 8, 5);
            let x = normal(Shape::new(2, 8, 4, 4), 6);
            let (dw_in, _) = b.dw_input(&x, &store, &mut ForwardCtx::train()).unwrap();
            assert_eq!(dw_in.shape().c, 40 + r * 8);
            for copy in 0..2 * r {
                assert_eq!(dw_in.slice_channels(copy * 8, 8).unwrap().data(), x.data());
            }
        }
    }

    #[test]
    fn pruned_duplication_is_visible_by_slicing() {
        // First-PW weights are a stacked identity so generated = [x, x].
        let (b, mut store) = built(spec(BlockKind::Pruned, 3, 24, 8, 1, false, 0), 8, 7);
        let pw1 = b.pw1.as_ref().unwrap();
        let mut w = Tensor::zeros(pw1.conv.weight_shape());
        for o in 0..16 {
            w.data_mut()[o * 8 + o % 8] = 1.0;
        }
        store.set(&pw1.weight_name(), w).unwrap();
        // BN in infer mode with unit stats and hswish on positive inputs keeps values.
        let x = normal(Shape::new(1, 8, 3, 3), 8).map(|v| v.abs() + 4.0);
        let mut ctx = ForwardCtx::infer();
        let (gen, _) = pw1.forward(&x, &store, &mut ctx).unwrap();
        let scale = 1.0 / (1.0 + BnConfig::default().eps).sqrt();
        for copy in 0..2 {
            let part = gen.slice_channels(copy * 8, 8).unwrap();
            for (a, b) in part.data().iter().zip(x.data()) {
                assert!((a - b * scale).abs() < 1e-12);
            }
        }
    }

    fn composition_oracle(x: &Tensor<f64>, b: &Block, store: &ParamStore<f64>) -> Tensor<f64> {
        let cfg = BnConfig::default();
        let bn = |y: &Tensor<f64>, prefix: &str| {
            let g = |s: &str| store.get(&format!("{prefix}.bn.{s}")).unwrap().data();
            let p = BnParams {
                gamma: g("gamma"),
                beta: g("beta"),
                running_mean: g("running_mean"),
                running_var: g("running_var"),
            };
            batchnorm_forward(y, p, cfg, Mode::Train).unwrap().0
        };
        let nl = b.layout.spec.nonlinearity;
        let l = &b.layout;
        let w = |n: &str| store.get(&format!("b.{n}.weight")).unwrap();
        let pw1 = ConvParams::pointwise(l.in_channels, l.generated);
        let gen = activation_forward(
            &bn(&conv2d_forward(x, w("pw1"), &pw1).unwrap(), "b.pw1"),
            nl,
        );
        let mut parts = vec![x; l.reused_copies];
        parts.push(&gen);
        let cat = concat_channels(&parts).unwrap();
        let dwp = ConvParams::depthwise(l.dw_width, l.spec.kernel, l.spec.stride);
        let mut y = activation_forward(
            &bn(&conv2d_forward(&cat, w("dw"), &dwp).unwrap(), "b.dw"),
            nl,
        );
        if l.se_inner.is_some() {
            y = squeeze_excite(
                &y,
                store.get("b.se.reduce.weight").unwrap(),
                store.get("b.se.expand.weight").unwrap(),
            )
            .unwrap()
            .0;
        }
        let pw2 = ConvParams::pointwise(l.dw_width, l.spec.out_channels);
        let out = bn(&conv2d_forward(&y, w("pw2"), &pw2).unwrap(), "b.pw2");
        if l.residual {
            add(x, &out).unwrap()
        } else {
            out
        }
    }

    #[test]
    fn matches_straight_line_composition() {
        let cases = [
            (spec(BlockKind::MmBlock, 3, 24, 8, 1, true, 0), 8),
            (spec(BlockKind::Pruned, 5, 24, 16, 2, false, 0), 8),
            (spec(BlockKind::Asymm, 3, 40, 8, 1, true, 2), 8),
            (spec(BlockKind::Asymm, 3, 32, 12, 2, false, 1), 8),
        ];
        for (i, (sp, c_in)) in cases.into_iter().enumerate() {
            let (b, store) = built(sp, c_in, 20 + i as u64);
            let x = normal(Shape::new(2, c_in, 6, 6), 30 + i as u64);
            let (y, _) = b.forward(&x, &store, &mut ForwardCtx::train()).unwrap();
            let oracle = composition_oracle(&x, &b, &store);
            assert_eq!(y.data(), oracle.data(), "case {i}");
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let (b, store) = built(spec(BlockKind::Asymm, 3, 24, 8, 1, true, 1), 8, 9);
        let x = normal(Shape::new(2, 8, 4, 4), 10);
        let (y, cache) = b.forward(&x, &store, &mut ForwardCtx::train()).unwrap();
        let (gx, grads) = block_backward(&b, &cache, &store, &Tensor::zeros(y.shape())).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads
            .iter()
            .all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(
            grads.len(),
            store.iter().filter(|(_, p)| p.role.is_trainable()).count()
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (kind, r) in [
            (BlockKind::Asymm, 1),
            (BlockKind::Pruned, 0),
            (BlockKind::MmBlock, 0),
        ] {
            let (b, store) = built(spec(kind, 3, 24, 8, 1, false, r), 8, 11);
            let x = normal(Shape::new(2, 8, 3, 3), 12);
            let proj = normal(Shape::new(2, 8, 3, 3), 13);
            let loss = |x: &Tensor<f64>| {
                let (y, _) = b.forward(x, &store, &mut ForwardCtx::train()).unwrap();
                y.data()
                    .iter()
                    .zip(proj.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let (_, cache) = b.forward(&x, &store, &mut ForwardCtx::train()).unwrap();
            let (gx, _) = block_backward(&b, &cache, &store, &proj).unwrap();
            let eps = 1e-5;
            let base = loss(&x);
            let mut checked = 0;
            for i in 0..x.numel() {
                let bump = |d: f64| {
                    let mut p = x.clone();
                    p.data_mut()[i] += d;
                    loss(&p)
                };
                let (up, down) = (bump(eps), bump(-eps));
                let fd = (up - down) / (2.0 * eps);
                if ((up - base) / eps - (base - down) / eps).abs() > 1e-3 * fd.abs().max(1.0) {
                    continue;
                }
                let an = gx.data()[i];
                assert!(
                    (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs()) < 1e-5,
                    "{kind} idx {i}"
                );
                checked += 1;
            }
            assert!(checked > 100, "{kind}: only {checked} coordinates checked");
        }
    }
}
