//! Line-oriented text format for [`NetworkSpec`].
//!
//! ```text
//! # comment
//! name asymmnet-l
//! input 3 224              # channels, resolution
//! multiplier 1
//! scaling ceil absolute     # rounding {nearest,ceil}, expansion {absolute,input-ratio}
//! stem 16 3 2 hswish        # c k s nl
//! head 960 1280 1000 hswish # last-conv pooled-conv classes nl ("-" = absent)
//! # kind k p c s se nl r
//! asymm 3 16 16 1 0 relu 1
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::arch::{HeadSpec, NetworkSpec, StemSpec};
use crate::blocks::{BlockKind, BlockSpec};
use crate::channels::ScalingRule;
use crate::error::{Error, Result};
use crate::ops::Activation;

pub fn dump_spec(spec: &NetworkSpec) -> String {
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut out = String::new();
    let _ = writeln!(out, "# asymmkit network spec");
    let _ = writeln!(out, "name {}", spec.name);
    let _ = writeln!(out, "input {} {}", spec.in_channels, spec.resolution);
    let _ = writeln!(out, "multiplier {}", spec.width_multiplier);
    let _ = writeln!(out, "scaling {}", spec.scaling);
    let s = &spec.stem;
    let _ = writeln!(
        out,
        "stem {} {} {} {}",
        s.out_channels, s.kernel, s.stride, s.nonlinearity
    );
    let h = &spec.head;
    let _ = writeln!(
        out,
        "head {} {} {} {}",
        opt(h.last_conv),
        opt(h.pooled_conv),
        h.classes,
        h.nonlinearity
    );
    let _ = writeln!(out, "# kind k p c s se nl r");
    for r in &spec.rows {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            r.kind,
            r.kernel,
            r.expanded,
            r.out_channels,
            r.stride,
            u8::from(r.use_se),
            r.nonlinearity,
            r.rate
        );
    }
    out
}

struct Line<'a> {
    number: usize,
    tokens: Vec<&'a str>,
}

impl Line<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.number,
            msg: msg.into(),
        }
    }

    fn expect_len(&self, n: usize) -> Result<()> {
        if self.tokens.len() != n {
            return Err(self.err(format!(
                "`{}` takes {} fields, found {}",
                self.tokens[0],
                n - 1,
                self.tokens.len() - 1
            )));
        }
        Ok(())
    }

    fn parse<T: FromStr>(&self, i: usize, what: &str) -> Result<T> {
        self.tokens[i]
            .parse()
            .map_err(|_| self.err(format!("invalid {what} `{}`", self.tokens[i])))
    }

    fn optional(&self, i: usize, what: &str) -> Result<Option<usize>> {
        match self.tokens[i] {
            "-" => Ok(None),
            _ => self.parse(i, what).map(Some),
        }
    }

    fn activation(&self, i: usize) -> Result<Activation> {
        self.tokens[i]
            .parse()
            .map_err(|e: Error| self.err(e.to_string()))
    }
}

pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let mut name = None;
    let mut input = (3, 224);
    let mut multiplier = 1.0;
    let mut scaling = ScalingRule::NEAREST_ABSOLUTE;
    let mut stem = None;
    let mut head = None;
    let mut rows = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let line = Line {
            number: i + 1,
            tokens,
        };
        match line.tokens[0] {
            "name" => {
                line.expect_len(2)?;
                name = Some(line.tokens[1].to_string());
            }
            "input" => {
                line.expect_len(3)?;
                input = (
                    line.parse(1, "channel count")?,
                    line.parse(2, "resolution")?,
                );
            }
            "multiplier" => {
                line.expect_len(2)?;
                multiplier = line.parse(1, "multiplier")?;
            }
            "scaling" => {
                line.expect_len(3)?;
                scaling = line.tokens[1..]
                    .join(" ")
                    .parse()
                    .map_err(|e: Error| line.err(e.to_string()))?;
            }
            "stem" => {
                line.expect_len(5)?;
                stem = Some(StemSpec {
                    out_channels: line.parse(1, "channel count")?,
                    kernel: line.parse(2, "kernel")?,
                    stride: line.parse(3, "stride")?,
                    nonlinearity: line.activation(4)?,
                });
            }
            "head" => {
                line.expect_len(5)?;
                head = Some(HeadSpec {
                    last_conv: line.optional(1, "channel count")?,
                    pooled_conv: line.optional(2, "channel count")?,
                    classes: line.parse(3, "class count")?,
                    nonlinearity: line.activation(4)?,
                });
            }
            kind => {
                let kind: BlockKind = kind
                    .parse()
                    .map_err(|_| line.err(format!("unknown directive or block kind `{kind}`")))?;
                line.expect_len(8)?;
                let use_se = match line.tokens[5] {
                    "0" => false,
                    "1" => true,
                    other => return Err(line.err(format!("se flag must be 0 or 1, got `{other}`"))),
                };
                rows.push(BlockSpec {
                    kind,
                    kernel: line.parse(1, "kernel")?,
                    expanded: line.parse(2, "expanded width")?,
                    out_channels: line.parse(3, "channel count")?,
                    stride: line.parse(4, "stride")?,
                    use_se,
                    nonlinearity: line.activation(6)?,
                    rate: line.parse(7, "rate")?,
                });
            }
        }
    }

    let missing = |what: &str| Error::Parse {
        line: text.lines().count(),
        msg: format!("missing `{what}` line"),
    };
    let spec = NetworkSpec {
        name: name.ok_or_else(|| missing("name"))?,
        in_channels: input.0,
        stem: stem.ok_or_else(|| missing("stem"))?,
        rows,
        head: head.ok_or_else(|| missing("head"))?,
        width_multiplier: multiplier,
        resolution: input.1,
        scaling,
    };
    spec.resolve()?;
    Ok(spec)
}
