use serde::{Deserialize, Serialize};

use crate::error::{EscError, Result};
use crate::tensor::same_padding;

pub const SPEC_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub units: usize,
    pub width: usize,
    pub block_stride: usize,
    pub middle_filters: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub classes: usize,
}

/// Declarative description of a residual network: a stem convolution,
/// blocks of bottleneck-shaped residual units, and a pooled dense head.
///
/// Field order is the canonical JSON order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub schema_version: u32,
    pub name: String,
    pub input_size: usize,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub head: HeadSpec,
}

/// One residual unit flattened out of a block: `1x1 (stride) -> kxk -> 1x1`
/// plus an identity or 1x1 projection shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitSpec {
    pub in_channels: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub projection: bool,
}

impl UnitSpec {
    /// Main-path convolutions as `(kernel, stride)`, in order.
    pub fn convs(&self) -> [(usize, usize); 3] {
        [(1, self.stride), (self.kernel, 1), (1, 1)]
    }
}

/// Follow-up stacks placed on top of frozen base features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowupKind {
    /// Four units, 3x3 middles, strides (2, 2, 1, 1).
    Aggregating,
    /// Four units of 1x1 convolutions only, no downsampling.
    OneByOne,
}

impl FollowupKind {
    pub fn units(self, channels: usize) -> Vec<UnitSpec> {
        let (kernel, strides) = match self {
            FollowupKind::Aggregating => (3, [2, 2, 1, 1]),
            FollowupKind::OneByOne => (1, [1, 1, 1, 1]),
        };
        strides
            .into_iter()
            .map(|stride| UnitSpec {
                in_channels: channels,
                width: channels,
                kernel,
                stride,
                projection: stride != 1,
            })
            .collect()
    }
}

/// Middle filter sizes per block for each full-size ERF.
const FULL_FILTERS: [(usize, [&[usize]; 4]); 5] = [
    (11, [&[3, 3], &[1, 1, 1], &[1, 1, 1], &[1, 1]]),
    (23, [&[3, 5], &[3, 1, 1], &[1, 1, 1], &[1, 1]]),
    (47, [&[3, 5], &[3, 3, 5], &[1, 1, 1], &[1, 1]]),
    (95, [&[3, 5], &[3, 3, 5], &[3, 3, 3], &[1, 1]]),
    (227, [&[5, 5], &[5, 5, 5], &[5, 5, 5], &[5, 5]]),
];

/// Desk-scale filter tables (same block structure, 64x64 input).
const DESK_FILTERS: [(usize, [&[usize]; 4]); 4] = [
    (7, [&[3, 1], &[1, 1, 1], &[1, 1, 1], &[1, 1]]),
    (15, [&[3, 5], &[1, 1, 1], &[1, 1, 1], &[1, 1]]),
    (31, [&[3, 5], &[3, 3, 1], &[1, 1, 1], &[1, 1]]),
    (63, [&[3, 5], &[3, 3, 5], &[3, 1, 1], &[1, 1]]),
];

pub const FULL_ERFS: [usize; 5] = [11, 23, 47, 95, 227];
pub const DESK_ERFS: [usize; 4] = [7, 15, 31, 63];

fn lookup<'a>(table: &'a [(usize, [&'a [usize]; 4])], erf: usize) -> Result<&'a [&'a [usize]; 4]> {
    table
        .iter()
        .find(|(e, _)| *e == erf)
        .map(|(_, f)| f)
        .ok_or_else(|| EscError::Config(format!("no architecture with ERF {erf}")))
}

fn blocks_from(filters: &[&[usize]; 4], widths: [usize; 4]) -> Vec<BlockSpec> {
    const UNITS: [usize; 4] = [2, 3, 3, 2];
    const STRIDES: [usize; 4] = [2, 2, 2, 1];
    (0..4)
        .map(|b| BlockSpec {
            units: UNITS[b],
            width: widths[b],
            block_stride: STRIDES[b],
            middle_filters: filters[b].to_vec(),
        })
        .collect()
}

impl ArchitectureSpec {
    /// Full-size network: 224x224 RGB input, blocks
    /// of (2, 3, 3, 2) units with widths (128, 256, 512, 1024).
    pub fn full(erf: usize, classes: usize) -> Result<Self> {
        let filters = lookup(&FULL_FILTERS, erf)?;
        Ok(Self {
            schema_version: SPEC_SCHEMA_VERSION,
            name: format!("ERF{erf}"),
            input_size: 224,
            in_channels: 3,
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                out_channels: 64,
            },
            blocks: blocks_from(filters, [128, 256, 512, 1024]),
            head: HeadSpec { classes },
        })
    }

    /// Desk-scale network: 64x64 input, widths (16, 32, 64, 128).
    pub fn desk(erf: usize, classes: usize, in_channels: usize) -> Result<Self> {
        let filters = lookup(&DESK_FILTERS, erf)?;
        Ok(Self {
            schema_version: SPEC_SCHEMA_VERSION,
            name: format!("desk-ERF{erf}"),
            input_size: 64,
            in_channels,
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                out_channels: 16,
            },
            blocks: blocks_from(filters, [16, 32, 64, 128]),
            head: HeadSpec { classes },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EscError::Config(format!("{}: {msg}", self.name)));
        if self.input_size == 0 || self.in_channels == 0 || self.head.classes < 2 {
            return bad("input size, channels and class count must be positive".into());
        }
        if self.stem.kernel % 2 == 0 || self.stem.stride == 0 || self.stem.out_channels == 0 {
            return bad(format!("invalid stem {:?}", self.stem));
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.units == 0 || b.width == 0 {
                return bad(format!("block {i} has no units or zero width"));
            }
            if b.middle_filters.len() != b.units {
                return bad(format!(
                    "block {i} lists {} filters for {} units",
                    b.middle_filters.len(),
                    b.units
                ));
            }
            if let Some(k) = b.middle_filters.iter().find(|k| **k % 2 == 0) {
                return bad(format!("block {i} has even filter size {k}"));
            }
            if !matches!(b.block_stride, 1 | 2) {
                return bad(format!("block {i} stride {} not in {{1, 2}}", b.block_stride));
            }
        }
        Ok(())
    }

    /// Residual units in forward order. The block stride sits on the first
    /// 1x1 convolution of the block's first unit, which also carries the
    /// projection shortcut.
    pub fn units(&self) -> Vec<UnitSpec> {
        let mut channels = self.stem.out_channels;
        let mut out = Vec::new();
        for block in &self.blocks {
            for (i, &kernel) in block.middle_filters.iter().enumerate() {
                let first = i == 0;
                out.push(UnitSpec {
                    in_channels: channels,
                    width: block.width,
                    kernel,
                    stride: if first { block.block_stride } else { 1 },
                    projection: first,
                });
                channels = block.width;
            }
        }
        out
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.out_channels, |b| b.width)
    }

    /// Spatial side of the last convolutional feature map.
    pub fn output_size(&self) -> usize {
        let mut s = same_padding(self.input_size, self.stem.kernel, self.stem.stride).0;
        for u in self.units() {
            s = same_padding(s, 1, u.stride).0;
        }
        s
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        if spec.schema_version != SPEC_SCHEMA_VERSION {
            return Err(EscError::Config(format!(
                "unsupported spec schema version {}",
                spec.schema_version
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Scales the stem and every block width by `multiplier`, rounding to the
    /// nearest positive integer. Filters and strides are untouched.
    pub fn widened(&self, multiplier: f64) -> Self {
        let scale = |w: usize| ((w as f64 * multiplier).round() as usize).max(1);
        let mut out = self.clone();
        out.stem.out_channels = scale(self.stem.out_channels);
        for b in &mut out.blocks {
            b.width = scale(b.width);
        }
        if multiplier != 1.0 {
            out.name = format!("{}-x{multiplier:.4}", self.name);
        }
        out
    }
}
