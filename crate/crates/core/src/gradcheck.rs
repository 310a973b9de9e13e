//! Central-difference gradient checks against the analytic backward passes.
//!
//! The scalar loss is `sum(output ⊙ P)` for a fixed random projection `P`.
//! A coordinate whose one-sided differences disagree is treated as sitting
//! on a nonlinearity kink and is replaced by a fresh random coordinate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::arch::{builtin_spec, scale_spec};
use crate::blocks::{Block, BlockKind, BlockSpec};
use crate::channels::Rounding;
use crate::error::{Error, Result};
use crate::layers::{init_params, ConvUnit, ForwardCtx};
use crate::network::{build_network, Network};
use crate::ops::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    softmax_cross_entropy, squeeze_excite, squeeze_excite_backward, Activation, BnConfig, BnParams,
    ConvParams, Mode,
};
use crate::params::{Gradients, ParamRole, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Something with an input, named parameters and an exact backward pass.
pub trait GradTarget {
    fn forward(&self, x: &Tensor<f64>, store: &ParamStore<f64>) -> Result<Tensor<f64>>;

    /// `(grad_x, parameter gradients)` for the given output gradient.
    fn gradients(
        &self,
        x: &Tensor<f64>,
        store: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)>;
}

impl GradTarget for Network {
    fn forward(&self, x: &Tensor<f64>, store: &ParamStore<f64>) -> Result<Tensor<f64>> {
        Ok(Network::forward(self, x, store, &mut ForwardCtx::train())?.0)
    }

    fn gradients(
        &self,
        x: &Tensor<f64>,
        store: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)> {
        let (_, caches) = Network::forward(self, x, store, &mut ForwardCtx::train())?;
        let mut grads = Gradients::new();
        let gx = self.backward(&caches, grad_out, store, &mut grads)?;
        Ok((gx, grads))
    }
}

impl GradTarget for Block {
    fn forward(&self, x: &Tensor<f64>, store: &ParamStore<f64>) -> Result<Tensor<f64>> {
        Ok(Block::forward(self, x, store, &mut ForwardCtx::train())?.0)
    }

    fn gradients(
        &self,
        x: &Tensor<f64>,
        store: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)> {
        let (_, cache) = Block::forward(self, x, store, &mut ForwardCtx::train())?;
        let mut grads = Gradients::new();
        let gx = self.backward(&cache, grad_out, store, &mut grads)?;
        Ok((gx, grads))
    }
}

impl GradTarget for ConvUnit {
    fn forward(&self, x: &Tensor<f64>, store: &ParamStore<f64>) -> Result<Tensor<f64>> {
        Ok(ConvUnit::forward(self, x, store, &mut ForwardCtx::train())?.0)
    }

    fn gradients(
        &self,
        x: &Tensor<f64>,
        store: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)> {
        let (_, cache) = ConvUnit::forward(self, x, store, &mut ForwardCtx::train())?;
        let mut grads = Gradients::new();
        let gx = self.backward(&cache, grad_out, store, &mut grads)?;
        Ok((gx, grads))
    }
}

/// Elementwise nonlinearity; no parameters.
pub struct ActivationTarget(pub Activation);

impl GradTarget for ActivationTarget {
    fn forward(&self, x: &Tensor<f64>, _: &ParamStore<f64>) -> Result<Tensor<f64>> {
        Ok(activation_forward(x, self.0))
    }

    fn gradients(
        &self,
        x: &Tensor<f64>,
        _: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)> {
        Ok((activation_backward(x, self.0, grad_out)?, Gradients::new()))
    }
}

/// Train-mode batch norm with parameters `bn.gamma` and `bn.beta`.
pub struct BatchNormTarget;

impl BatchNormTarget {
    fn params<'a>(
        store: &'a ParamStore<f64>,
        running: &'a [f64],
        ones: &'a [f64],
    ) -> Result<BnParams<'a, f64>> {
        Ok(BnParams {
            gamma: store.get("bn.gamma")?.data(),
            beta: store.get("bn.beta")?.data(),
            running_mean: running,
            running_var: ones,
        })
    }
}

impl GradTarget for BatchNormTarget {
    fn forward(&self, x: &Tensor<f64>, store: &ParamStore<f64>) -> Result<Tensor<f64>> {
        let (zeros, ones) = (vec![0.0; x.shape().c], vec![1.0; x.shape().c]);
        let p = Self::params(store, &zeros, &ones)?;
        Ok(batchnorm_forward(x, p, BnConfig::default(), Mode::Train)?.0)
    }

    fn gradients(
        &self,
        x: &Tensor<f64>,
        store: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)> {
        let (zeros, ones) = (vec![0.0; x.shape().c], vec![1.0; x.shape().c]);
        let p = Self::params(store, &zeros, &ones)?;
        let (_, cache, _) = batchnorm_forward(x, p, BnConfig::default(), Mode::Train)?;
        let (dx, dg, db) = batchnorm_backward(&cache, p.gamma, grad_out)?;
        let c = Shape::vector(x.shape().c);
        let mut grads = Gradients::new();
        grads.accumulate("bn.gamma", Tensor::from_vec(c, dg)?)?;
        grads.accumulate("bn.beta", Tensor::from_vec(c, db)?)?;
        Ok((dx, grads))
    }
}

/// Squeeze-excite with parameters `se.reduce` and `se.expand`.
pub struct SeTarget;

impl GradTarget for SeTarget {
    fn forward(&self, x: &Tensor<f64>, store: &ParamStore<f64>) -> Result<Tensor<f64>> {
        Ok(squeeze_excite(x, store.get("se.reduce")?, store.get("se.expand")?)?.0)
    }

    fn gradients(
        &self,
        x: &Tensor<f64>,
        store: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)> {
        let (r, e) = (store.get("se.reduce")?, store.get("se.expand")?);
        let (_, cache) = squeeze_excite(x, r, e)?;
        let (dx, dr, de) = squeeze_excite_backward(&cache, r, e, grad_out)?;
        let mut grads = Gradients::new();
        grads.accumulate("se.reduce", dr)?;
        grads.accumulate("se.expand", de)?;
        Ok((dx, grads))
    }
}

/// Mean softmax cross-entropy as a `(1, 1, 1, 1)` output.
pub struct CrossEntropyTarget {
    pub labels: Vec<usize>,
}

impl GradTarget for CrossEntropyTarget {
    fn forward(&self, x: &Tensor<f64>, _: &ParamStore<f64>) -> Result<Tensor<f64>> {
        let (loss, _) = softmax_cross_entropy(x, &self.labels)?;
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![loss])
    }

    fn gradients(
        &self,
        x: &Tensor<f64>,
        _: &ParamStore<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Gradients<f64>)> {
        let (_, g) = softmax_cross_entropy(x, &self.labels)?;
        let s = grad_out.data()[0];
        Ok((g.map(|v| v * s), Gradients::new()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub param_coords: usize,
    pub input_coords: usize,
    /// A coordinate is a kink when its one-sided slopes differ by more than
    /// `kink_tol · max(1, |central|)`.
    pub kink_tol: f64,
    /// Maximum replacement draws per requested coordinate.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-5,
            param_coords: 100,
            input_coords: 50,
            kink_tol: 1e-4,
            max_resample: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub target: String,
    pub max_rel_err: f64,
    pub worst_coord: String,
    pub params_checked: usize,
    pub inputs_checked: usize,
    pub kinks_skipped: usize,
}

impl GradcheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Coord {
    Input(usize),
    Param(String, usize),
}

impl Coord {
    fn label(&self) -> String {
        match self {
            Coord::Input(i) => format!("input[{i}]"),
            Coord::Param(n, i) => format!("{n}[{i}]"),
        }
    }
}

/// `|a − f| / max(1, |a|, |f|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

struct Probe<'a, G: ?Sized> {
    target: &'a G,
    x: Tensor<f64>,
    store: ParamStore<f64>,
    proj: Tensor<f64>,
}

impl<G: GradTarget + ?Sized> Probe<'_, G> {
    fn loss(&self) -> Result<f64> {
        let y = self.target.forward(&self.x, &self.store)?;
        let v: f64 = y
            .data()
            .iter()
            .zip(self.proj.data())
            .map(|(a, b)| a * b)
            .sum();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck loss".into()));
        }
        Ok(v)
    }

    fn eval_at(&mut self, c: &Coord, offset: f64) -> Result<f64> {
        let original = match c {
            Coord::Input(i) => self.x.data()[*i],
            Coord::Param(n, i) => self.store.get(n)?.data()[*i],
        };
        match c {
            Coord::Input(i) => self.x.data_mut()[*i] = original + offset,
            Coord::Param(n, i) => self.store.param_mut(n)?.value.data_mut()[*i] = original + offset,
        }
        let v = self.loss();
        // Restore the exact original bits rather than subtracting.
        match c {
            Coord::Input(i) => self.x.data_mut()[*i] = original,
            Coord::Param(n, i) => self.store.param_mut(n)?.value.data_mut()[*i] = original,
        }
        v
    }
}

/// Checks `target` at input `x` with parameters `store`.
pub fn gradcheck<G: GradTarget + ?Sized>(
    name: &str,
    target: &G,
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let y = target.forward(x, store)?;
    y.check_finite("gradcheck forward output")?;
    let proj = Tensor::from_fn(y.shape(), |_| StandardNormal.sample(&mut rng));
    let (gx, grads) = target.gradients(x, store, &proj)?;

    let param_slots: Vec<(String, usize)> = store
        .iter()
        .filter(|(_, p)| p.role != ParamRole::Buffer)
        .map(|(n, p)| (n.clone(), p.value.numel()))
        .collect();
    let total_params: usize = param_slots.iter().map(|(_, n)| n).sum();
    let param_at = |flat: usize| -> Coord {
        let mut rem = flat;
        for (n, len) in &param_slots {
            if rem < *len {
                return Coord::Param(n.clone(), rem);
            }
            rem -= len;
        }
        unreachable!("flat index within parameter count")
    };

    let mut probe = Probe {
        target,
        x: x.clone(),
        store: store.clone(),
        proj,
    };
    let base = probe.loss()?;

    let mut report = GradcheckReport {
        target: name.to_string(),
        max_rel_err: 0.0,
        worst_coord: String::new(),
        params_checked: 0,
        inputs_checked: 0,
        kinks_skipped: 0,
    };

    for (is_input, pool, wanted) in [
        (true, x.numel(), cfg.input_coords),
        (false, total_params, cfg.param_coords),
    ] {
        let wanted = wanted.min(pool);
        if wanted == 0 {
            continue;
        }
        // Draw a shuffled order of the whole pool lazily: the first `wanted`
        // are the sample, the rest serve as replacements for kinks.
        let budget = (wanted * (1 + cfg.max_resample)).min(pool);
        let order = sample(&mut rng, pool, budget);
        let mut accepted = 0;
        for flat in order.into_iter() {
            if accepted == wanted {
                break;
            }
            let coord = if is_input {
                Coord::Input(flat)
            } else {
                param_at(flat)
            };
            let analytic = match &coord {
                Coord::Input(i) => gx.data()[*i],
                Coord::Param(n, i) => grads.get(n).map_or(0.0, |g| g.data()[*i]),
            };
            let up = probe.eval_at(&coord, cfg.eps)?;
            let down = probe.eval_at(&coord, -cfg.eps)?;
            let central = (up - down) / (2.0 * cfg.eps);
            let gap = ((up - base) - (base - down)).abs() / cfg.eps;
            if gap > cfg.kink_tol * central.abs().max(1.0) {
                report.kinks_skipped += 1;
                continue;
            }
            let err = relative_error(analytic, central);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient at {}", coord.label())));
            }
            if err > report.max_rel_err || report.worst_coord.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_coord = coord.label();
            }
            accepted += 1;
        }
        if is_input {
            report.inputs_checked = accepted;
        } else {
            report.params_checked = accepted;
        }
    }
    Ok(report)
}

/// A target with its input and parameters.
pub type Case = (Box<dyn GradTarget>, Tensor<f64>, ParamStore<f64>);

/// Named targets with their pass thresholds, in the order `all` runs them.
pub const NAMED_TARGETS: &[(&str, f64)] = &[
    ("conv", 1e-8),
    ("conv3x3", 1e-5),
    ("depthwise", 1e-5),
    ("batchnorm", 1e-5),
    ("relu", 1e-5),
    ("hswish", 1e-5),
    ("hsigmoid", 1e-5),
    ("se", 1e-5),
    ("softmax-ce", 1e-5),
    ("mmblock-block", 1e-5),
    ("pruned-block", 1e-5),
    ("asymm-block", 1e-5),
    ("network", 1e-4),
];

pub fn threshold_of(name: &str) -> Option<f64> {
    NAMED_TARGETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, t)| t)
}

fn conv_case(
    conv: ConvParams,
    bn: bool,
    act: Option<Activation>,
    x: Shape,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let unit = ConvUnit {
        name: "conv".into(),
        conv,
        bn,
        bias: !bn,
        act,
    };
    let mut store = ParamStore::new();
    init_params(&unit.param_decls(), &mut store, rng)?;
    let x = random_tensor(x, rng);
    Ok((Box::new(unit), x, store))
}

fn block_case(
    kind: BlockKind,
    expanded: usize,
    c_in: usize,
    rate: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let spec = BlockSpec {
        kind,
        kernel: 3,
        expanded,
        out_channels: c_in,
        stride: 1,
        use_se: true,
        nonlinearity: Activation::HSwish,
        rate,
    };
    let block = Block::new(spec, c_in, "block", Rounding::Nearest)?;
    let mut store = ParamStore::new();
    init_params(&block.param_decls(), &mut store, rng)?;
    let x = random_tensor(Shape::new(2, c_in, 6, 6), rng);
    Ok((Box::new(block), x, store))
}

/// Builds the named target with its input and parameters, all drawn from `seed`.
pub fn named_case(name: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let elementwise = |act: Activation, rng: &mut ChaCha8Rng| -> Case {
        let x = random_tensor(Shape::new(2, 4, 5, 5), rng).map(|v| 4.0 * v);
        (Box::new(ActivationTarget(act)), x, ParamStore::new())
    };
    match name {
        "conv" => conv_case(
            ConvParams::pointwise(8, 6),
            false,
            None,
            Shape::new(2, 8, 5, 5),
            rng,
        ),
        "conv3x3" => conv_case(
            ConvParams::standard(3, 8, 3, 2),
            true,
            Some(Activation::HSwish),
            Shape::new(2, 3, 9, 9),
            rng,
        ),
        "depthwise" => conv_case(
            ConvParams::depthwise(6, 5, 1),
            true,
            None,
            Shape::new(2, 6, 7, 7),
            rng,
        ),
        "batchnorm" => {
            let c = 5;
            let mut store = ParamStore::new();
            store.insert(
                "bn.gamma",
                random_tensor(Shape::vector(c), rng).map(|v| 1.0 + 0.5 * v),
                ParamRole::NoDecay,
            )?;
            store.insert(
                "bn.beta",
                random_tensor(Shape::vector(c), rng),
                ParamRole::NoDecay,
            )?;
            let x = random_tensor(Shape::new(3, c, 4, 4), rng);
            Ok((Box::new(BatchNormTarget), x, store))
        }
        "relu" => Ok(elementwise(Activation::Relu, rng)),
        "hswish" => Ok(elementwise(Activation::HSwish, rng)),
        "hsigmoid" => Ok(elementwise(Activation::HSigmoid, rng)),
        "se" => {
            let (c, inner) = (12, 4);
            let mut store = ParamStore::new();
            store.insert(
                "se.reduce",
                random_tensor(Shape::new(inner, c, 1, 1), rng),
                ParamRole::Weight,
            )?;
            store.insert(
                "se.expand",
                random_tensor(Shape::new(c, inner, 1, 1), rng),
                ParamRole::Weight,
            )?;
            let x = random_tensor(Shape::new(2, c, 4, 4), rng);
            Ok((Box::new(SeTarget), x, store))
        }
        "softmax-ce" => {
            let classes = 7;
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..classes)).collect();
            let x = random_tensor(Shape::new(4, classes, 1, 1), rng).map(|v| 3.0 * v);
            Ok((
                Box::new(CrossEntropyTarget { labels }),
                x,
                ParamStore::new(),
            ))
        }
        "mmblock-block" => block_case(BlockKind::MmBlock, 24, 8, 0, rng),
        "pruned-block" => block_case(BlockKind::Pruned, 24, 8, 0, rng),
        "asymm-block" => block_case(BlockKind::Asymm, 24, 8, 1, rng),
        "network" => {
            let spec = scale_spec(&builtin_spec("asymmnet-s")?, 0.35)?
                .with_resolution(32)
                .with_classes(10);
            let (net, store) = build_network::<f64>(&spec, seed)?;
            let x = random_tensor(net.input_shape(4, 32), rng);
            Ok((Box::new(net), x, store))
        }
        other => Err(Error::Spec(format!(
            "unknown gradcheck target `{other}` (expected one of: {}, all)",
            NAMED_TARGETS
                .iter()
                .map(|(n, _)| *n)
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Runs [`gradcheck`] on a named target with the default sampling budget.
pub fn check_named(name: &str, seed: u64) -> Result<GradcheckReport> {
    let (target, x, store) = named_case(name, seed)?;
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    gradcheck(name, target.as_ref(), &x, &store, &cfg)
}

/// Standard-normal tensor drawn from `rng`.
pub fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_is_nearly_exact() {
        let unit = ConvUnit {
            name: "pw".into(),
            conv: ConvParams::pointwise(4, 3),
            bn: false,
            bias: false,
            act: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_params(&unit.param_decls(), &mut store, &mut rng).unwrap();
        let x = random_tensor(Shape::new(2, 4, 3, 3), &mut rng);
        let r = gradcheck("pw", &unit, &x, &store, &GradcheckConfig::default()).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.params_checked, 12);
        assert_eq!(r.inputs_checked, 50);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl GradTarget for Wrong {
            fn forward(&self, x: &Tensor<f64>, _: &ParamStore<f64>) -> Result<Tensor<f64>> {
                Ok(x.map(|v| v * v))
            }
            fn gradients(
                &self,
                x: &Tensor<f64>,
                _: &ParamStore<f64>,
                g: &Tensor<f64>,
            ) -> Result<(Tensor<f64>, Gradients<f64>)> {
                Ok((x.zip_map(g, |v, g| v * g)?, Gradients::new()))
            }
        }
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |i| 1.0 + i as f64);
        let r = gradcheck(
            "wrong",
            &Wrong,
            &x,
            &ParamStore::new(),
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn kinks_are_resampled() {
        // Half the inputs sit exactly on the relu kink.
        let x = Tensor::from_fn(Shape::new(1, 1, 10, 10), |i| {
            if i % 2 == 0 {
                0.0
            } else {
                0.5 + i as f64
            }
        });
        let cfg = GradcheckConfig {
            input_coords: 20,
            ..Default::default()
        };
        let r = gradcheck(
            "relu",
            &ActivationTarget(Activation::Relu),
            &x,
            &ParamStore::new(),
            &cfg,
        )
        .unwrap();
        assert!(r.kinks_skipped > 0);
        assert_eq!(r.inputs_checked, 20);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn named_small_targets_pass() {
        for &(name, threshold) in NAMED_TARGETS.iter().filter(|(n, _)| *n != "network") {
            let r = check_named(name, 7).unwrap();
            assert!(r.passes(threshold), "{r:?}");
            assert!(r.inputs_checked >= 50 || name == "softmax-ce", "{r:?}");
        }
        assert!(check_named("nope", 0).is_err());
    }
}
