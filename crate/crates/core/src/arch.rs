//! Network specifications: built-in row tables and width-multiplier scaling.

use serde::Serialize;

use crate::blocks::{BlockKind, BlockLayout, BlockSpec};
use crate::channels::{Expansion, ScalingRule};
use crate::error::{Error, Result};
use crate::ops::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub nonlinearity: Activation,
}

/// Everything after the last block: an optional conv+BN at full
/// resolution, global pooling, an optional post-pool conv (no BN, no bias),
/// and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HeadSpec {
    pub last_conv: Option<usize>,
    pub pooled_conv: Option<usize>,
    pub classes: usize,
    pub nonlinearity: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub stem: StemSpec,
    /// Unscaled rows; widths are resolved against `width_multiplier`.
    pub rows: Vec<BlockSpec>,
    pub head: HeadSpec,
    pub width_multiplier: f64,
    pub resolution: usize,
    pub scaling: ScalingRule,
}

/// Names accepted by [`builtin_spec`].
pub const BUILTIN_NAMES: [&str; 8] = [
    "asymmnet-l",
    "asymmnet-s",
    "mbv3-l",
    "mbv3-s",
    "pruned-l",
    "pruned-s",
    "mbv1",
    "mbv2",
];

/// `(k, p, c, se, nl, s)`
type Row = (usize, usize, usize, bool, Activation, usize);

const RE: Activation = Activation::Relu;
const HS: Activation = Activation::HSwish;

const LARGE_ROWS: [Row; 15] = [
    (3, 16, 16, false, RE, 1),
    (3, 64, 24, false, RE, 2),
    (3, 72, 24, false, RE, 1),
    (5, 72, 40, true, RE, 2),
    (5, 120, 40, true, RE, 1),
    (5, 120, 40, true, RE, 1),
    (3, 240, 80, false, HS, 2),
    (3, 200, 80, false, HS, 1),
    (3, 184, 80, false, HS, 1),
    (3, 184, 80, false, HS, 1),
    (3, 480, 112, true, HS, 1),
    (3, 672, 112, true, HS, 1),
    (5, 672, 160, true, HS, 2),
    (5, 960, 160, true, HS, 1),
    (5, 960, 160, true, HS, 1),
];

const SMALL_ROWS: [Row; 11] = [
    (3, 16, 16, true, RE, 2),
    (3, 72, 24, false, RE, 2),
    (3, 88, 24, false, RE, 1),
    (5, 96, 40, true, HS, 2),
    (5, 240, 40, true, HS, 1),
    (5, 240, 40, true, HS, 1),
    (5, 120, 48, true, HS, 1),
    (5, 144, 48, true, HS, 1),
    (5, 288, 96, true, HS, 2),
    (5, 576, 96, true, HS, 1),
    (5, 576, 96, true, HS, 1),
];

/// MobileNetV1 separable stages `(c_out, s)`.
const MBV1_ROWS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

/// MobileNetV2 stages `(t, c, n, s)`.
const MBV2_STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

fn rows_of(table: &[Row], kind: BlockKind) -> Vec<BlockSpec> {
    let rate = if kind == BlockKind::Asymm { 1 } else { 0 };
    table
        .iter()
        .map(
            |&(kernel, expanded, out_channels, use_se, nonlinearity, stride)| BlockSpec {
                kind,
                kernel,
                expanded,
                out_channels,
                stride,
                use_se,
                nonlinearity,
                rate,
            },
        )
        .collect()
}

fn mobilenet_v3_family(
    name: &str,
    large: bool,
    kind: BlockKind,
    scaling: ScalingRule,
    pooled: usize,
) -> NetworkSpec {
    let (table, last): (&[Row], usize) = if large {
        (&LARGE_ROWS, 960)
    } else {
        (&SMALL_ROWS, 576)
    };
    NetworkSpec {
        name: name.to_string(),
        in_channels: 3,
        stem: StemSpec {
            out_channels: 16,
            kernel: 3,
            stride: 2,
            nonlinearity: HS,
        },
        rows: rows_of(table, kind),
        head: HeadSpec {
            last_conv: Some(last),
            pooled_conv: Some(pooled),
            classes: 1000,
            nonlinearity: HS,
        },
        width_multiplier: 1.0,
        resolution: 224,
        scaling,
    }
}

fn mobilenet_v1() -> NetworkSpec {
    let mut c_in = 32;
    let rows = MBV1_ROWS
        .iter()
        .map(|&(c, s)| {
            let row = BlockSpec {
                kind: BlockKind::Separable,
                kernel: 3,
                expanded: c_in,
                out_channels: c,
                stride: s,
                use_se: false,
                nonlinearity: RE,
                rate: 0,
            };
            c_in = c;
            row
        })
        .collect();
    NetworkSpec {
        name: "mbv1".into(),
        in_channels: 3,
        stem: StemSpec {
            out_channels: 32,
            kernel: 3,
            stride: 2,
            nonlinearity: RE,
        },
        rows,
        head: HeadSpec {
            last_conv: None,
            pooled_conv: None,
            classes: 1000,
            nonlinearity: RE,
        },
        width_multiplier: 1.0,
        resolution: 224,
        scaling: ScalingRule::NEAREST_ABSOLUTE,
    }
}

fn mobilenet_v2() -> NetworkSpec {
    let mut c_in = 32;
    let mut rows = Vec::new();
    for &(t, c, n, s) in &MBV2_STAGES {
        for i in 0..n {
            rows.push(BlockSpec {
                kind: BlockKind::MmBlock,
                kernel: 3,
                expanded: t * c_in,
                out_channels: c,
                stride: if i == 0 { s } else { 1 },
                use_se: false,
                nonlinearity: RE,
                rate: 0,
            });
            c_in = c;
        }
    }
    NetworkSpec {
        name: "mbv2".into(),
        in_channels: 3,
        stem: StemSpec {
            out_channels: 32,
            kernel: 3,
            stride: 2,
            nonlinearity: RE,
        },
        rows,
        head: HeadSpec {
            last_conv: Some(1280),
            pooled_conv: None,
            classes: 1000,
            nonlinearity: RE,
        },
        width_multiplier: 1.0,
        resolution: 224,
        scaling: ScalingRule::NEAREST_RATIO,
    }
}

pub fn builtin_spec(name: &str) -> Result<NetworkSpec> {
    use BlockKind::*;
    let ceil = ScalingRule::CEIL_ABSOLUTE;
    let tf = ScalingRule::NEAREST_RATIO;
    Ok(match name {
        "asymmnet-l" => mobilenet_v3_family(name, true, Asymm, ceil, 1280),
        "asymmnet-s" => mobilenet_v3_family(name, false, Asymm, ceil, 1280),
        "pruned-l" => mobilenet_v3_family(name, true, Pruned, ceil, 1280),
        "pruned-s" => mobilenet_v3_family(name, false, Pruned, ceil, 1280),
        "mbv3-l" => mobilenet_v3_family(name, true, MmBlock, tf, 1280),
        "mbv3-s" => mobilenet_v3_family(name, false, MmBlock, tf, 1024),
        "mbv1" => mobilenet_v1(),
        "mbv2" => mobilenet_v2(),
        other => return Err(Error::UnknownArch(other.to_string())),
    })
}

/// Multiplies the spec's width multiplier by `alpha`.
pub fn scale_spec(spec: &NetworkSpec, alpha: f64) -> Result<NetworkSpec> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!(
            "width multiplier must be positive, got {alpha}"
        )));
    }
    let mut out = spec.clone();
    out.width_multiplier *= alpha;
    Ok(out)
}

/// Channel widths of a spec after applying its multiplier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedSpec {
    pub stem_channels: usize,
    pub blocks: Vec<BlockLayout>,
    pub last_conv: Option<usize>,
    pub pooled_conv: Option<usize>,
    pub classes: usize,
}

impl ResolvedSpec {
    /// Width of the features entering global pooling.
    pub fn pre_pool_channels(&self) -> usize {
        self.last_conv
            .or_else(|| self.blocks.last().map(|b| b.out_channels()))
            .unwrap_or(self.stem_channels)
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Spec(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.in_channels == 0 || self.stem.out_channels == 0 || self.head.classes == 0 {
            return Err(Error::Spec(
                "channel and class counts must be positive".into(),
            ));
        }
        if self.stem.kernel.is_multiple_of(2) || self.stem.stride == 0 {
            return Err(Error::Spec(
                "stem needs an odd kernel and positive stride".into(),
            ));
        }
        if self.resolution == 0 {
            return Err(Error::Spec("input resolution must be positive".into()));
        }
        Ok(())
    }

    /// Applies the multiplier and rounding rule, checking that rows chain.
    pub fn resolve(&self) -> Result<ResolvedSpec> {
        self.validate()?;
        let a = self.width_multiplier;
        let rule = self.scaling;
        let scale = |raw: usize| rule.round(raw as f64 * a);
        let ratio = |c_in: usize, raw: usize, raw_in: usize| {
            rule.round(c_in as f64 * (raw as f64 / raw_in as f64))
        };

        let stem_channels = scale(self.stem.out_channels);
        let (mut c_in, mut raw_in) = (stem_channels, self.stem.out_channels);
        let mut blocks = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let mut spec = *row;
            spec.out_channels = scale(row.out_channels);
            spec.expanded = if row.kind == BlockKind::Separable {
                if row.expanded != raw_in {
                    return Err(Error::Spec(format!(
                        "row {}: separable row has p={} but its input has {raw_in} channels",
                        i + 1,
                        row.expanded
                    )));
                }
                c_in
            } else {
                match rule.expansion {
                    Expansion::Absolute => scale(row.expanded),
                    Expansion::InputRatio => ratio(c_in, row.expanded, raw_in),
                }
            };
            if spec.kind == BlockKind::Pruned && spec.expanded <= c_in {
                spec.kind = BlockKind::MmBlock;
            }
            let layout = BlockLayout::new(spec, c_in, rule.rounding)
                .map_err(|e| Error::Spec(format!("row {}: {e}", i + 1)))?;
            blocks.push(layout);
            c_in = spec.out_channels;
            raw_in = row.out_channels;
        }
        let last_conv = self.head.last_conv.map(|raw| match rule.expansion {
            Expansion::Absolute => scale(raw),
            Expansion::InputRatio => ratio(c_in, raw, raw_in),
        });
        Ok(ResolvedSpec {
            stem_channels,
            blocks,
            last_conv,
            pooled_conv: self.head.pooled_conv,
            classes: self.head.classes,
        })
    }

    /// Same spec with every asymmetrical row set to rate `r`.
    pub fn with_rate(&self, r: usize) -> NetworkSpec {
        let mut out = self.clone();
        for row in out
            .rows
            .iter_mut()
            .filter(|row| row.kind == BlockKind::Asymm)
        {
            row.rate = r;
        }
        out
    }

    /// Same spec with every `from` row switched to `to`.
    pub fn with_kind(&self, from: BlockKind, to: BlockKind) -> NetworkSpec {
        let mut out = self.clone();
        for row in out.rows.iter_mut().filter(|row| row.kind == from) {
            row.kind = to;
        }
        out
    }

    pub fn without_se(&self) -> NetworkSpec {
        let mut out = self.clone();
        out.rows.iter_mut().for_each(|row| row.use_se = false);
        out
    }

    pub fn with_classes(&self, classes: usize) -> NetworkSpec {
        let mut out = self.clone();
        out.head.classes = classes;
        out
    }

    pub fn with_resolution(&self, resolution: usize) -> NetworkSpec {
        let mut out = self.clone();
        out.resolution = resolution;
        out
    }
}
