//! Static multiply-accumulate and parameter accounting.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::NetworkSpec;
use crate::blocks::{Block, BlockKind};
use crate::error::{Error, Result};
use crate::layers::ConvUnit;
use crate::network::{Layer, Network};
use crate::ops::ConvParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OpClass {
    #[serde(rename = "dw")]
    Depthwise,
    #[serde(rename = "pw")]
    Pointwise,
    Vanilla,
    Other,
}

impl OpClass {
    pub fn label(self) -> &'static str {
        match self {
            OpClass::Depthwise => "DW",
            OpClass::Pointwise => "PW",
            OpClass::Vanilla => "vanilla",
            OpClass::Other => "other",
        }
    }
}

pub fn classify(conv: &ConvParams) -> OpClass {
    if conv.is_depthwise() {
        OpClass::Depthwise
    } else if conv.kernel == 1 && conv.groups == 1 {
        OpClass::Pointwise
    } else {
        OpClass::Vanilla
    }
}

/// `out_h·out_w·out_c·k²·in_c/g`.
pub fn conv_madds(conv: &ConvParams, out_h: usize, out_w: usize) -> u64 {
    (out_h * out_w) as u64 * conv.weight_count() as u64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEntry {
    pub layer: String,
    pub class: OpClass,
    pub madds: u64,
    pub params: u64,
}

/// MAdds of one block split by stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockCost {
    pub layer: String,
    pub kind: BlockKind,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub pw1: u64,
    pub dw: u64,
    pub se: u64,
    pub pw2: u64,
}

impl BlockCost {
    pub fn total(&self) -> u64 {
        self.pw1 + self.dw + self.se + self.pw2
    }

    /// `C_pw1 + C_dw + C_pw2`, the quantity the closed-form ratio describes.
    pub fn without_se(&self) -> u64 {
        self.pw1 + self.dw + self.pw2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassShares {
    pub dw: f64,
    pub pw: f64,
    pub vanilla: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub multiplier: f64,
    pub resolution: usize,
    pub layers: Vec<CostEntry>,
    pub blocks: Vec<BlockCost>,
    pub total_madds: u64,
    pub total_params: u64,
    pub shares: ClassShares,
}

struct Walker {
    entries: Vec<CostEntry>,
    blocks: Vec<BlockCost>,
    h: usize,
    w: usize,
}

impl Walker {
    fn conv(
        &mut self,
        name: &str,
        conv: &ConvParams,
        params: u64,
        h: usize,
        w: usize,
    ) -> Result<u64> {
        let (oh, ow) = (conv.output_size(h)?, conv.output_size(w)?);
        let madds = conv_madds(conv, oh, ow);
        self.entries.push(CostEntry {
            layer: name.to_string(),
            class: classify(conv),
            madds,
            params,
        });
        Ok(madds)
    }

    fn unit(&mut self, unit: &ConvUnit, h: usize, w: usize) -> Result<u64> {
        self.conv(&unit.name, &unit.conv, unit.trainable_count() as u64, h, w)
    }

    fn block(&mut self, b: &Block) -> Result<()> {
        let (h, w) = (self.h, self.w);
        let pw1 = match &b.pw1 {
            Some(u) => self.unit(u, h, w)?,
            None => 0,
        };
        let dw = self.unit(&b.dw, h, w)?;
        let (oh, ow) = (b.dw.conv.output_size(h)?, b.dw.conv.output_size(w)?);
        let se = match &b.se {
            Some(se) => {
                self.conv(
                    &format!("{}.reduce", se.prefix),
                    &se.reduce,
                    se.reduce.weight_count() as u64,
                    1,
                    1,
                )? + self.conv(
                    &format!("{}.expand", se.prefix),
                    &se.expand,
                    se.expand.weight_count() as u64,
                    1,
                    1,
                )?
            }
            None => 0,
        };
        let pw2 = self.unit(&b.pw2, oh, ow)?;
        let l = &b.layout;
        self.blocks.push(BlockCost {
            layer: b.prefix.clone(),
            kind: l.spec.kind,
            stride: l.spec.stride,
            in_channels: l.in_channels,
            out_channels: l.spec.out_channels,
            pw1,
            dw,
            se,
            pw2,
        });
        self.h = oh;
        self.w = ow;
        Ok(())
    }
}

/// Cost of a built network at the given square input resolution.
pub fn network_cost_of(net: &Network, resolution: usize) -> Result<CostReport> {
    let mut walk = Walker {
        entries: Vec::new(),
        blocks: Vec::new(),
        h: resolution,
        w: resolution,
    };
    for layer in &net.layers {
        match layer {
            Layer::Conv(u) => {
                let (h, w) = (walk.h, walk.w);
                walk.unit(u, h, w)?;
                walk.h = u.conv.output_size(h)?;
                walk.w = u.conv.output_size(w)?;
            }
            Layer::Block(b) => walk.block(b)?,
            Layer::GlobalPool => {
                walk.entries.push(CostEntry {
                    layer: layer.name().to_string(),
                    class: OpClass::Other,
                    madds: 0,
                    params: 0,
                });
                walk.h = 1;
                walk.w = 1;
            }
        }
    }
    let total_madds = walk.entries.iter().map(|e| e.madds).sum();
    let total_params = walk.entries.iter().map(|e| e.params).sum();
    let shares = shares_of(&walk.entries);
    Ok(CostReport {
        name: net.spec.name.clone(),
        multiplier: net.spec.width_multiplier,
        resolution,
        layers: walk.entries,
        blocks: walk.blocks,
        total_madds,
        total_params,
        shares,
    })
}

pub fn network_cost(spec: &NetworkSpec) -> Result<CostReport> {
    network_cost_of(&Network::from_spec(spec)?, spec.resolution)
}

fn shares_of(entries: &[CostEntry]) -> ClassShares {
    let sum = |c: OpClass| -> u64 {
        entries
            .iter()
            .filter(|e| e.class == c)
            .map(|e| e.madds)
            .sum()
    };
    let (dw, pw, va) = (
        sum(OpClass::Depthwise),
        sum(OpClass::Pointwise),
        sum(OpClass::Vanilla),
    );
    let total = (dw + pw + va).max(1) as f64;
    ClassShares {
        dw: 100.0 * dw as f64 / total,
        pw: 100.0 * pw as f64 / total,
        vanilla: 100.0 * va as f64 / total,
    }
}

/// DW/PW/vanilla percentages of conv MAdds.
pub fn class_breakdown(spec: &NetworkSpec) -> Result<ClassShares> {
    Ok(network_cost(spec)?.shares)
}

/// Closed-form MAdds ratio of an asymmetrical block to its inverted residual twin.
pub fn complexity_ratio(t: f64, r: f64, c: f64, k: f64) -> Result<f64> {
    if !(t > r && r >= 0.0 && c >= 1.0 && k >= 1.0) {
        return Err(Error::Domain(format!(
            "complexity ratio needs t > r >= 0, c >= 1, k >= 1 (t={t}, r={r}, c={c}, k={k})"
        )));
    }
    Ok(1.0 + r * k * k / (2.0 * t * c + k * k * t))
}

/// One block's exact MAdds ratio against the same spec with asymmetrical
/// rows turned into inverted residual rows. SE is excluded from both sides.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockRatio {
    pub layer: String,
    pub row: usize,
    pub t: f64,
    pub r: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub exact: f64,
    /// `None` when the closed form's preconditions (`t > r`) fail.
    pub analytic: Option<f64>,
}

pub fn block_ratios(spec: &NetworkSpec) -> Result<Vec<BlockRatio>> {
    let asymm = Network::from_spec(spec)?;
    let twin = Network::from_spec(&spec.with_kind(BlockKind::Asymm, BlockKind::MmBlock))?;
    let a = network_cost_of(&asymm, spec.resolution)?;
    let b = network_cost_of(&twin, spec.resolution)?;
    let layouts = asymm.layers.iter().filter_map(|l| match l {
        Layer::Block(b) => Some(b.layout),
        _ => None,
    });
    a.blocks
        .iter()
        .zip(&b.blocks)
        .zip(layouts)
        .enumerate()
        .filter(|(_, (_, l))| l.spec.kind == BlockKind::Asymm)
        .map(|(i, ((ca, cb), l))| {
            let t = l.spec.expanded as f64 / l.in_channels as f64;
            let r = l.effective_rate;
            Ok(BlockRatio {
                layer: ca.layer.clone(),
                row: i,
                t,
                r,
                c: l.in_channels,
                k: l.spec.kernel,
                stride: l.spec.stride,
                out_channels: l.spec.out_channels,
                exact: ca.without_se() as f64 / cb.without_se() as f64,
                analytic: complexity_ratio(t, r as f64, l.in_channels as f64, l.spec.kernel as f64)
                    .ok(),
            })
        })
        .collect()
}

/// Millions with one decimal, ties rounded away from zero.
pub fn format_millions(v: u64) -> String {
    let tenths = (v + 50_000) / 100_000;
    format!("{}.{}", tenths / 10, tenths % 10)
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .layers
            .iter()
            .map(|e| e.layer.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(
            out,
            "{} (multiplier {}, input {}x{})",
            self.name, self.multiplier, self.resolution, self.resolution
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:<7}  {:>14}  {:>10}",
            "layer", "class", "madds", "params"
        );
        for e in &self.layers {
            let _ = writeln!(
                out,
                "{:<width$}  {:<7}  {:>14}  {:>10}",
                e.layer,
                e.class.label(),
                e.madds,
                e.params
            );
        }
        let _ = writeln!(
            out,
            "total: {}M MAdds, {}M params",
            format_millions(self.total_madds),
            format_millions(self.total_params)
        );
        let _ = writeln!(
            out,
            "shares: DW {:.1}%  PW {:.1}%  vanilla {:.1}%",
            self.shares.dw, self.shares.pw, self.shares.vanilla
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_spec, scale_spec, BUILTIN_NAMES};
    use crate::network::build_network;

    #[test]
    fn stem_example() {
        let c = ConvParams::standard(3, 16, 3, 2);
        assert_eq!(conv_madds(&c, 112, 112), 5_419_008);
        assert_eq!(
            conv_madds(&ConvParams::pointwise(24, 24), 7, 5),
            7 * 5 * 24 * 24
        );
        assert_eq!(
            conv_madds(&ConvParams::depthwise(40, 3, 1), 6, 6),
            9 * 36 * 40
        );
    }

    #[test]
    fn classes() {
        assert_eq!(
            classify(&ConvParams::depthwise(8, 3, 1)),
            OpClass::Depthwise
        );
        assert_eq!(classify(&ConvParams::pointwise(8, 16)), OpClass::Pointwise);
        assert_eq!(
            classify(&ConvParams::standard(3, 16, 3, 2)),
            OpClass::Vanilla
        );
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(complexity_ratio(3.0, 0.0, 24.0, 3.0).unwrap(), 1.0);
        let v = complexity_ratio(6.0, 1.0, 64.0, 3.0).unwrap();
        assert!((v - (1.0 + 9.0 / 822.0)).abs() < 1e-15);
        assert!(complexity_ratio(1.0, 1.0, 16.0, 3.0).is_err());
        assert!(complexity_ratio(2.0, 1.0, 0.0, 3.0).is_err());
    }

    #[test]
    fn millions_formatting() {
        assert_eq!(format_millions(216_949_999), "216.9");
        assert_eq!(format_millions(216_950_000), "217.0");
        assert_eq!(format_millions(49_999), "0.0");
    }

    #[test]
    fn params_equal_store_count() {
        for name in BUILTIN_NAMES {
            for alpha in [0.35, 1.0, 1.25] {
                let spec = scale_spec(&builtin_spec(name).unwrap(), alpha).unwrap();
                let report = network_cost(&spec).unwrap();
                let (_, store) = build_network::<f32>(&spec, 0).unwrap();
                assert_eq!(
                    report.total_params,
                    store.trainable_count() as u64,
                    "{name} {alpha}"
                );
            }
        }
    }

    #[test]
    fn totals_and_shares_are_consistent() {
        let r = network_cost(&builtin_spec("asymmnet-l").unwrap()).unwrap();
        assert_eq!(r.total_madds, r.layers.iter().map(|e| e.madds).sum::<u64>());
        let s = r.shares;
        assert!((s.dw + s.pw + s.vanilla - 100.0).abs() < 1e-9);
    }

    #[test]
    fn madds_grow_with_multiplier() {
        for name in BUILTIN_NAMES {
            let base = builtin_spec(name).unwrap();
            let costs: Vec<u64> = [0.35, 0.5, 0.75, 1.0, 1.25]
                .iter()
                .map(|&a| {
                    network_cost(&scale_spec(&base, a).unwrap())
                        .unwrap()
                        .total_madds
                })
                .collect();
            assert!(costs.windows(2).all(|w| w[0] < w[1]), "{name}: {costs:?}");
        }
    }

    #[test]
    fn kind_swap_delta_is_hw_r_c_k2() {
        let spec = builtin_spec("asymmnet-l").unwrap().without_se();
        let a = network_cost(&spec).unwrap();
        let m = network_cost(&spec.with_kind(BlockKind::Asymm, BlockKind::MmBlock)).unwrap();
        let net = Network::from_spec(&spec).unwrap();
        let trace = net.shape_trace(net.input_shape(1, 224)).unwrap();
        let mut checked = 0;
        for (i, (ba, bm)) in a.blocks.iter().zip(&m.blocks).enumerate() {
            let Layer::Block(b) = &net.layers[i + 1] else {
                panic!()
            };
            let l = b.layout;
            if l.spec.stride != 1 || l.in_channels != l.spec.out_channels {
                continue;
            }
            let hw = (trace[i + 1].1.h * trace[i + 1].1.w) as u64;
            let (r, c, k) = (
                l.effective_rate as u64,
                l.in_channels as u64,
                l.spec.kernel as u64,
            );
            assert_eq!(ba.total() - bm.total(), hw * r * c * k * k, "{}", ba.layer);
            checked += 1;
        }
        assert!(checked >= 8);
    }

    #[test]
    fn separable_pair_ratio() {
        // DW k×k + PW vs one standard k×k conv: 1/c_out + 1/k².
        let (c_in, c_out, k, hw) = (32, 64, 3, 14);
        let dw = conv_madds(&ConvParams::depthwise(c_in, k, 1), hw, hw);
        let pw = conv_madds(&ConvParams::pointwise(c_in, c_out), hw, hw);
        let full = conv_madds(&ConvParams::standard(c_in, c_out, k, 1), hw, hw);
        let ratio = (dw + pw) as f64 / full as f64;
        let expected = 1.0 / c_out as f64 + 1.0 / (k * k) as f64;
        assert!((ratio - expected).abs() < 1e-12);
    }
}
