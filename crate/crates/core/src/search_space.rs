//! Block-coded architecture genome.
//!
//! An architecture is an ordered list of blocks; each block is described by
//! five primitives `(conv, kernel, skip, width, depth)`. The canonical text
//! form of an [`ArchCode`] is a compact JSON object with keys in a fixed
//! order, e.g.
//!
//! ```text
//! {"blocks":[{"conv":"mbconv6","kernel":5,"skip":true,"width":1.5,"depth":3}]}
//! ```
//!
//! The same text is used as the evaluation cache key, inside checkpoints and
//! on the evaluator wire protocol.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of whole-genome draws in [`random_arch`].
pub const RANDOM_ARCH_RETRIES: usize = 10_000;

/// Convolution operator of every layer in a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConvOp {
    #[serde(rename = "sepconv")]
    SepConv,
    #[serde(rename = "mbconv3")]
    MBConv3,
    #[serde(rename = "mbconv6")]
    MBConv6,
}

impl ConvOp {
    pub const ALL: [ConvOp; 3] = [ConvOp::SepConv, ConvOp::MBConv3, ConvOp::MBConv6];

    /// Pointwise expansion ratio of the inverted bottleneck (1 for SepConv).
    pub fn expansion(self) -> u64 {
        match self {
            ConvOp::SepConv => 1,
            ConvOp::MBConv3 => 3,
            ConvOp::MBConv6 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvOp::SepConv => "sepconv",
            ConvOp::MBConv3 => "mbconv3",
            ConvOp::MBConv6 => "mbconv6",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }
}

impl fmt::Display for ConvOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial kernel side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    K3,
    K5,
    K7,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::K3, Kernel::K5, Kernel::K7];

    pub fn size(self) -> u64 {
        match self {
            Kernel::K3 => 3,
            Kernel::K5 => 5,
            Kernel::K7 => 7,
        }
    }

    pub fn from_size(size: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.size() == size)
    }
}

impl Serialize for Kernel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.size())
    }
}

impl<'de> Deserialize<'de> for Kernel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let size = u64::deserialize(d)?;
        Kernel::from_size(size)
            .ok_or_else(|| serde::de::Error::custom(format!("kernel {size} not in {{3,5,7}}")))
    }
}

/// Output/input channel ratio of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WidthFactor {
    Half,
    One,
    OneAndHalf,
    Two,
}

impl WidthFactor {
    pub const ALL: [WidthFactor; 4] = [
        WidthFactor::Half,
        WidthFactor::One,
        WidthFactor::OneAndHalf,
        WidthFactor::Two,
    ];

    pub fn value(self) -> f64 {
        self.halves() as f64 / 2.0
    }

    /// The factor expressed in halves (0.5 -> 1, 2.0 -> 4).
    pub fn halves(self) -> u64 {
        match self {
            WidthFactor::Half => 1,
            WidthFactor::One => 2,
            WidthFactor::OneAndHalf => 3,
            WidthFactor::Two => 4,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.value() == v)
    }
}

impl Serialize for WidthFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

/// Number of layers in a block, 1 through 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Depth(u8);

impl Depth {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 4;

    pub fn new(layers: u8) -> Option<Self> {
        (Self::MIN..=Self::MAX).contains(&layers).then_some(Depth(layers))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl Serialize for Depth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.0)
    }
}

/// One of the five per-block genome fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Conv,
    Kernel,
    Skip,
    Width,
    Depth,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Conv,
        Primitive::Kernel,
        Primitive::Skip,
        Primitive::Width,
        Primitive::Depth,
    ];

    /// Size of the primitive's legal value set.
    pub fn cardinality(self) -> usize {
        match self {
            Primitive::Conv => ConvOp::ALL.len(),
            Primitive::Kernel => Kernel::ALL.len(),
            Primitive::Skip => 2,
            Primitive::Width => WidthFactor::ALL.len(),
            Primitive::Depth => (Depth::MAX - Depth::MIN + 1) as usize,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The five-primitive code of a single block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawBlock")]
pub struct BlockCode {
    pub conv: ConvOp,
    pub kernel: Kernel,
    pub skip: bool,
    pub width: WidthFactor,
    pub depth: Depth,
}

impl BlockCode {
    /// Index of the current value of `prim` within its legal value set.
    pub fn value_index(&self, prim: Primitive) -> usize {
        match prim {
            Primitive::Conv => self.conv as usize,
            Primitive::Kernel => self.kernel as usize,
            Primitive::Skip => self.skip as usize,
            Primitive::Width => self.width as usize,
            Primitive::Depth => (self.depth.0 - Depth::MIN) as usize,
        }
    }

    /// Copy of this block with `prim` set to the `index`-th legal value.
    ///
    /// Panics if `index >= prim.cardinality()`.
    pub fn with_value(mut self, prim: Primitive, index: usize) -> Self {
        assert!(index < prim.cardinality(), "{prim:?} value index {index} out of range");
        match prim {
            Primitive::Conv => self.conv = ConvOp::ALL[index],
            Primitive::Kernel => self.kernel = Kernel::ALL[index],
            Primitive::Skip => self.skip = index == 1,
            Primitive::Width => self.width = WidthFactor::ALL[index],
            Primitive::Depth => self.depth = Depth(Depth::MIN + index as u8),
        }
        self
    }

    /// Draws every primitive uniformly from its legal set.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut block = BlockCode::default();
        for prim in Primitive::ALL {
            block = block.with_value(prim, rng.random_range(0..prim.cardinality()));
        }
        block
    }

    /// Number of primitives whose values differ between `self` and `other`.
    pub fn hamming(&self, other: &BlockCode) -> usize {
        Primitive::ALL
            .iter()
            .filter(|&&p| self.value_index(p) != other.value_index(p))
            .count()
    }
}

impl Default for BlockCode {
    fn default() -> Self {
        BlockCode {
            conv: ConvOp::SepConv,
            kernel: Kernel::K3,
            skip: false,
            width: WidthFactor::One,
            depth: Depth(1),
        }
    }
}

impl fmt::Display for BlockCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_k{}{}_w{:.1}_d{}",
            self.conv,
            self.kernel.size(),
            if self.skip { "_skip" } else { "" },
            self.width.value(),
            self.depth.0
        )
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlock {
    conv: String,
    kernel: i64,
    skip: bool,
    width: f64,
    depth: i64,
}

impl TryFrom<RawBlock> for BlockCode {
    type Error = String;

    fn try_from(raw: RawBlock) -> std::result::Result<Self, String> {
        let conv = ConvOp::from_name(&raw.conv)
            .ok_or_else(|| format!("conv {:?} not in {{sepconv,mbconv3,mbconv6}}", raw.conv))?;
        let kernel = u64::try_from(raw.kernel)
            .ok()
            .and_then(Kernel::from_size)
            .ok_or_else(|| format!("kernel {} not in {{3,5,7}}", raw.kernel))?;
        let width = WidthFactor::from_value(raw.width)
            .ok_or_else(|| format!("width {} not in {{0.5,1.0,1.5,2.0}}", raw.width))?;
        let depth = u8::try_from(raw.depth)
            .ok()
            .and_then(Depth::new)
            .ok_or_else(|| format!("depth {} not in [1,4]", raw.depth))?;
        Ok(BlockCode {
            conv,
            kernel,
            skip: raw.skip,
            width,
            depth,
        })
    }
}

/// A whole architecture: one [`BlockCode`] per block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchCode {
    pub blocks: Vec<BlockCode>,
}

impl ArchCode {
    pub fn new(blocks: Vec<BlockCode>) -> Self {
        ArchCode { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Product of all width factors.
    pub fn total_expansion_ratio(&self) -> f64 {
        self.blocks.iter().map(|b| b.width.value()).product()
    }

    /// Sum of all block depths.
    pub fn total_layers(&self) -> u32 {
        self.blocks.iter().map(|b| b.depth.get() as u32).sum()
    }

    /// Total number of differing primitives, block by block.
    ///
    /// Panics if the block counts differ.
    pub fn hamming(&self, other: &ArchCode) -> usize {
        assert_eq!(self.len(), other.len(), "block count mismatch");
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.hamming(b))
            .sum()
    }

    /// Canonical text form.
    pub fn encode(&self) -> String {
        encode(self)
    }
}

impl fmt::Display for ArchCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(" | ")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

pub fn total_expansion_ratio(arch: &ArchCode) -> f64 {
    arch.total_expansion_ratio()
}

pub fn total_layers(arch: &ArchCode) -> u32 {
    arch.total_layers()
}

/// Canonical, deterministic text encoding of an architecture.
pub fn encode(arch: &ArchCode) -> String {
    serde_json::to_string(arch).expect("architecture encoding is infallible")
}

/// Parses the canonical text form. Unknown keys and out-of-range primitive
/// values are rejected.
pub fn decode(text: &str) -> Result<ArchCode> {
    serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))
}

/// Macro skeleton and scale constraints of a search task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpaceConfig {
    pub n_blocks: usize,
    pub stem_channels: u64,
    /// Whether the 3x3 stem convolution has stride 2.
    pub stem_downsample: bool,
    /// 1-based indices of blocks whose first layer has stride 2.
    pub downsample_blocks: Vec<usize>,
    /// Inclusive bounds on the product of width factors.
    pub expansion_ratio_range: [f64; 2],
    /// Inclusive bounds on the sum of depths.
    pub layer_count_range: Option<[u32; 2]>,
    pub input_resolution: u64,
    pub num_classes: u64,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self::small_task()
    }
}

impl SearchSpaceConfig {
    /// 32x32 inputs, 10 classes, downsampling in blocks 3 and 5.
    pub fn small_task() -> Self {
        SearchSpaceConfig {
            n_blocks: 7,
            stem_channels: 32,
            stem_downsample: false,
            downsample_blocks: vec![3, 5],
            expansion_ratio_range: [4.0, 10.0],
            layer_count_range: None,
            input_resolution: 32,
            num_classes: 10,
        }
    }

    /// 224x224 inputs, 1000 classes, downsampling in the stem and blocks
    /// 2, 3, 4 and 6.
    pub fn large_task() -> Self {
        SearchSpaceConfig {
            n_blocks: 7,
            stem_channels: 32,
            stem_downsample: true,
            downsample_blocks: vec![2, 3, 4, 6],
            expansion_ratio_range: [8.0, 16.0],
            layer_count_range: Some([16, 18]),
            input_resolution: 224,
            num_classes: 1000,
        }
    }

    /// Checks the configuration's own invariants.
    pub fn check(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        if self.stem_channels == 0 || self.num_classes == 0 || self.input_resolution == 0 {
            return Err(Error::Config(
                "stem_channels, num_classes and input_resolution must be positive".into(),
            ));
        }
        if let Some(&bad) = self
            .downsample_blocks
            .iter()
            .find(|&&b| b == 0 || b > self.n_blocks)
        {
            return Err(Error::Config(format!(
                "downsample block {bad} outside 1..={}",
                self.n_blocks
            )));
        }
        let [lo, hi] = self.expansion_ratio_range;
        if !(lo <= hi) {
            return Err(Error::Config(format!("expansion ratio range [{lo}, {hi}] is empty")));
        }
        if let Some([lo, hi]) = self.layer_count_range {
            if lo > hi {
                return Err(Error::Config(format!("layer count range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    /// Whether block `index` (0-based) starts with a stride-2 layer.
    pub fn downsamples_block(&self, index: usize) -> bool {
        self.downsample_blocks.contains(&(index + 1))
    }
}

/// A single reason an architecture falls outside a search space.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BlockCount { expected: usize, found: usize },
    ExpansionRatioLow { ratio: f64, lo: f64 },
    ExpansionRatioHigh { ratio: f64, hi: f64 },
    LayerCountLow { layers: u32, lo: u32 },
    LayerCountHigh { layers: u32, hi: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BlockCount { expected, found } => {
                write!(f, "block count {found} != {expected}")
            }
            Violation::ExpansionRatioLow { ratio, lo } => {
                write!(f, "expansion ratio {ratio:?} < {lo}")
            }
            Violation::ExpansionRatioHigh { ratio, hi } => {
                write!(f, "expansion ratio {ratio:?} > {hi}")
            }
            Violation::LayerCountLow { layers, lo } => write!(f, "layer count {layers} < {lo}"),
            Violation::LayerCountHigh { layers, hi } => write!(f, "layer count {layers} > {hi}"),
        }
    }
}

/// Checks `arch` against the block count and scale constraints of `space`.
///
/// Bounds are inclusive. Primitive values are valid by construction.
pub fn validate(arch: &ArchCode, space: &SearchSpaceConfig) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if arch.len() != space.n_blocks {
        violations.push(Violation::BlockCount {
            expected: space.n_blocks,
            found: arch.len(),
        });
    }
    let ratio = arch.total_expansion_ratio();
    let [lo, hi] = space.expansion_ratio_range;
    if ratio < lo {
        violations.push(Violation::ExpansionRatioLow { ratio, lo });
    } else if ratio > hi {
        violations.push(Violation::ExpansionRatioHigh { ratio, hi });
    }
    if let Some([lo, hi]) = space.layer_count_range {
        let layers = arch.total_layers();
        if layers < lo {
            violations.push(Violation::LayerCountLow { layers, lo });
        } else if layers > hi {
            violations.push(Violation::LayerCountHigh { layers, hi });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

pub fn is_valid(arch: &ArchCode, space: &SearchSpaceConfig) -> bool {
    validate(arch, space).is_ok()
}

/// Rejection-samples a valid architecture, drawing every primitive uniformly.
pub fn random_arch<R: Rng + ?Sized>(space: &SearchSpaceConfig, rng: &mut R) -> Result<ArchCode> {
    random_arch_with_retries(space, rng, RANDOM_ARCH_RETRIES)
}

pub fn random_arch_with_retries<R: Rng + ?Sized>(
    space: &SearchSpaceConfig,
    rng: &mut R,
    retries: usize,
) -> Result<ArchCode> {
    space.check()?;
    for _ in 0..retries {
        let arch = random_unconstrained(space.n_blocks, rng);
        if is_valid(&arch, space) {
            return Ok(arch);
        }
    }
    Err(Error::ConstraintUnsatisfiable { attempts: retries })
}

/// Draws `n_blocks` uniformly random blocks without checking constraints.
pub fn random_unconstrained<R: Rng + ?Sized>(n_blocks: usize, rng: &mut R) -> ArchCode {
    ArchCode::new((0..n_blocks).map(|_| BlockCode::random(rng)).collect())
}
