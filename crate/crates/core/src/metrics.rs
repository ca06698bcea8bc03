//! Analytic model size: parameter and multiply-add counts.
//!
//! The network is a 3x3 stem convolution (3 -> `stem_channels`), the coded
//! blocks, global average pooling and a linear classifier. The first layer of
//! each block carries the width change and, for blocks listed in
//! `downsample_blocks`, a stride of 2. A stride-2 layer maps resolution `r`
//! to `ceil(r / 2)`.
//!
//! Cost model per layer, with `t` the MBConv expansion ratio:
//!
//! | op      | tensors                                                   |
//! |---------|-----------------------------------------------------------|
//! | SepConv | depthwise `k*k*c_in`, pointwise `c_in*c_out`              |
//! | MBConv  | expand `c_in*t*c_in`, depthwise `k*k*t*c_in`, project `t*c_in*c_out` |
//!
//! Multiply-adds of a convolution are its weight count times the number of
//! output positions. The expansion runs at the layer's input resolution; the
//! depthwise stage carries the stride.

use serde::{Deserialize, Serialize};

use crate::search_space::{ArchCode, BlockCode, ConvOp, Kernel, SearchSpaceConfig};

const STEM_KERNEL: u64 = 3;
const INPUT_CHANNELS: u64 = 3;

/// Which parameters count towards the size objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Count 2 batch-norm parameters per normalized channel and the
    /// classifier bias.
    pub include_batch_norm: bool,
}

impl CostModel {
    pub const WEIGHTS_ONLY: CostModel = CostModel {
        include_batch_norm: false,
    };
    pub const WITH_BATCH_NORM: CostModel = CostModel {
        include_batch_norm: true,
    };
}

/// Channel rounding for fractional width factors: round half up, minimum 1.
pub fn round_channels(channels: u64, width: crate::search_space::WidthFactor) -> u64 {
    ((channels * width.halves() + 1) / 2).max(1)
}

fn downsample(resolution: u64) -> u64 {
    resolution.div_ceil(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerPlan {
    pub in_channels: u64,
    pub out_channels: u64,
    pub stride: u64,
    pub in_resolution: u64,
    pub out_resolution: u64,
    /// Residual add applied: the block's skip flag is set and the layer keeps
    /// both channel count and resolution.
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockPlan {
    pub code: BlockCode,
    pub in_channels: u64,
    pub out_channels: u64,
    pub layers: Vec<LayerPlan>,
}

/// Resolved channel and resolution layout of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelPlan {
    pub stem: LayerPlan,
    pub blocks: Vec<BlockPlan>,
    pub num_classes: u64,
}

impl ChannelPlan {
    pub fn final_channels(&self) -> u64 {
        self.blocks.last().map_or(self.stem.out_channels, |b| b.out_channels)
    }

    pub fn final_resolution(&self) -> u64 {
        self.blocks
            .last()
            .and_then(|b| b.layers.last())
            .map_or(self.stem.out_resolution, |l| l.out_resolution)
    }

    /// Iterates `(block_index, layer_index, block, layer)` over all block layers.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize, &BlockPlan, &LayerPlan)> {
        self.blocks.iter().enumerate().flat_map(|(bi, block)| {
            block
                .layers
                .iter()
                .enumerate()
                .map(move |(li, layer)| (bi, li, block, layer))
        })
    }
}

/// Lays out channels and resolutions for `arch` under `space`.
///
/// The architecture is assumed to validate against `space`.
pub fn resolve_channel_plan(arch: &ArchCode, space: &SearchSpaceConfig) -> ChannelPlan {
    let stem_stride = if space.stem_downsample { 2 } else { 1 };
    let stem_res = if space.stem_downsample {
        downsample(space.input_resolution)
    } else {
        space.input_resolution
    };
    let stem = LayerPlan {
        in_channels: INPUT_CHANNELS,
        out_channels: space.stem_channels,
        stride: stem_stride,
        in_resolution: space.input_resolution,
        out_resolution: stem_res,
        residual: false,
    };

    let mut channels = space.stem_channels;
    let mut resolution = stem_res;
    let mut blocks = Vec::with_capacity(arch.len());
    for (index, code) in arch.blocks.iter().enumerate() {
        let in_channels = channels;
        let out_channels = round_channels(in_channels, code.width);
        let layers = (0..code.depth.get())
            .map(|li| {
                let first = li == 0;
                let stride = if first && space.downsamples_block(index) { 2 } else { 1 };
                let in_resolution = resolution;
                if stride == 2 {
                    resolution = downsample(resolution);
                }
                let layer_in = if first { in_channels } else { out_channels };
                LayerPlan {
                    in_channels: layer_in,
                    out_channels,
                    stride,
                    in_resolution,
                    out_resolution: resolution,
                    residual: code.skip && stride == 1 && layer_in == out_channels,
                }
            })
            .collect();
        blocks.push(BlockPlan {
            code: *code,
            in_channels,
            out_channels,
            layers,
        });
        channels = out_channels;
    }
    ChannelPlan {
        stem,
        blocks,
        num_classes: space.num_classes,
    }
}

/// Weight counts of the convolution stages of one layer, in execution order,
/// paired with whether the stage runs at the layer's output resolution.
fn layer_stages(op: ConvOp, kernel: Kernel, c_in: u64, c_out: u64) -> Vec<(u64, bool)> {
    let k2 = kernel.size() * kernel.size();
    match op {
        ConvOp::SepConv => vec![(k2 * c_in, true), (c_in * c_out, true)],
        ConvOp::MBConv3 | ConvOp::MBConv6 => {
            let hidden = op.expansion() * c_in;
            vec![(c_in * hidden, false), (k2 * hidden, true), (hidden * c_out, true)]
        }
    }
}

fn layer_norm_params(op: ConvOp, c_in: u64, c_out: u64) -> u64 {
    match op {
        ConvOp::SepConv => 2 * (c_in + c_out),
        ConvOp::MBConv3 | ConvOp::MBConv6 => 2 * (2 * op.expansion() * c_in + c_out),
    }
}

/// Parameter count of a single layer.
pub fn layer_params(op: ConvOp, kernel: Kernel, c_in: u64, c_out: u64, cost: CostModel) -> u64 {
    let weights: u64 = layer_stages(op, kernel, c_in, c_out).iter().map(|s| s.0).sum();
    if cost.include_batch_norm {
        weights + layer_norm_params(op, c_in, c_out)
    } else {
        weights
    }
}

/// Multiply-adds of a single layer given its plan entry.
pub fn layer_multadds(op: ConvOp, kernel: Kernel, layer: &LayerPlan) -> u64 {
    let in_pos = layer.in_resolution * layer.in_resolution;
    let out_pos = layer.out_resolution * layer.out_resolution;
    layer_stages(op, kernel, layer.in_channels, layer.out_channels)
        .iter()
        .map(|&(w, at_output)| w * if at_output { out_pos } else { in_pos })
        .sum()
}

/// Cost of one entry in [`layer_costs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub kind: LayerKind,
    pub params: u64,
    pub multadds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Stem,
    Block { block: usize, layer: usize },
    Classifier,
}

/// Per-layer breakdown: stem, every block layer in order, classifier.
pub fn layer_costs(arch: &ArchCode, space: &SearchSpaceConfig, cost: CostModel) -> Vec<LayerCost> {
    let plan = resolve_channel_plan(arch, space);
    let mut out = Vec::with_capacity(2 + arch.total_layers() as usize);

    let stem_weights = STEM_KERNEL * STEM_KERNEL * INPUT_CHANNELS * plan.stem.out_channels;
    let stem_norm = if cost.include_batch_norm {
        2 * plan.stem.out_channels
    } else {
        0
    };
    out.push(LayerCost {
        kind: LayerKind::Stem,
        params: stem_weights + stem_norm,
        multadds: stem_weights * plan.stem.out_resolution * plan.stem.out_resolution,
    });

    for (bi, li, block, layer) in plan.layers() {
        let code = block.code;
        out.push(LayerCost {
            kind: LayerKind::Block { block: bi, layer: li },
            params: layer_params(code.conv, code.kernel, layer.in_channels, layer.out_channels, cost),
            multadds: layer_multadds(code.conv, code.kernel, layer),
        });
    }

    let classifier_weights = plan.final_channels() * plan.num_classes;
    let bias = if cost.include_batch_norm { plan.num_classes } else { 0 };
    out.push(LayerCost {
        kind: LayerKind::Classifier,
        params: classifier_weights + bias,
        multadds: classifier_weights,
    });
    out
}

/// Total parameter count.
pub fn arch_params(arch: &ArchCode, space: &SearchSpaceConfig, cost: CostModel) -> u64 {
    layer_costs(arch, space, cost).iter().map(|c| c.params).sum()
}

/// Total multiply-add count. Batch-norm is assumed folded into the
/// preceding convolution and contributes nothing.
pub fn arch_multadds(arch: &ArchCode, space: &SearchSpaceConfig) -> u64 {
    layer_costs(arch, space, CostModel::default())
        .iter()
        .map(|c| c.multadds)
        .sum()
}

/// Both size metrics of one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub params: u64,
    pub multadds: u64,
}

pub fn model_size(arch: &ArchCode, space: &SearchSpaceConfig, cost: CostModel) -> ModelSize {
    let costs = layer_costs(arch, space, cost);
    ModelSize {
        params: costs.iter().map(|c| c.params).sum(),
        multadds: costs.iter().map(|c| c.multadds).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{Depth, WidthFactor};

    fn uniform_arch(n: usize, conv: ConvOp, width: WidthFactor, depth: u8) -> ArchCode {
        ArchCode::new(vec![
            BlockCode {
                conv,
                kernel: Kernel::K3,
                skip: true,
                width,
                depth: Depth::new(depth).unwrap(),
            };
            n
        ])
    }

    #[test]
    fn unit_widths_keep_channels() {
        let arch = uniform_arch(7, ConvOp::SepConv, WidthFactor::One, 2);
        let plan = resolve_channel_plan(&arch, &SearchSpaceConfig::small_task());
        for b in &plan.blocks {
            assert_eq!((b.in_channels, b.out_channels), (32, 32));
        }
    }

    #[test]
    fn channels_chain_through_blocks() {
        let mut arch = uniform_arch(7, ConvOp::SepConv, WidthFactor::One, 1);
        arch.blocks[0].width = WidthFactor::Two;
        let plan = resolve_channel_plan(&arch, &SearchSpaceConfig::small_task());
        assert_eq!((plan.blocks[0].in_channels, plan.blocks[0].out_channels), (32, 64));
        assert_eq!((plan.blocks[1].in_channels, plan.blocks[1].out_channels), (64, 64));
    }

    #[test]
    fn large_task_final_resolution() {
        let arch = uniform_arch(7, ConvOp::MBConv3, WidthFactor::One, 2);
        let plan = resolve_channel_plan(&arch, &SearchSpaceConfig::large_task());
        // 224 halved at the stem and blocks 2, 3, 4, 6
        let mut strides = 0;
        let mut res = plan.stem.out_resolution;
        for (_, _, _, layer) in plan.layers() {
            assert_eq!(layer.in_resolution, res);
            if layer.stride == 2 {
                strides += 1;
                assert_eq!(layer.out_resolution * 2, layer.in_resolution);
            } else {
                assert_eq!(layer.out_resolution, layer.in_resolution);
            }
            res = layer.out_resolution;
        }
        assert_eq!(strides, 4);
        assert_eq!(plan.final_resolution(), 7);
    }

    #[test]
    fn fractional_widths_round_half_up() {
        assert_eq!(round_channels(33, WidthFactor::OneAndHalf), 50);
        assert_eq!(round_channels(33, WidthFactor::Half), 17);
        assert_eq!(round_channels(1, WidthFactor::Half), 1);
        assert_eq!(round_channels(32, WidthFactor::Half), 16);
    }

    #[test]
    fn residual_only_on_shape_preserving_layers() {
        let mut arch = uniform_arch(3, ConvOp::SepConv, WidthFactor::One, 3);
        arch.blocks[2].width = WidthFactor::Two;
        let space = SearchSpaceConfig {
            n_blocks: 3,
            downsample_blocks: vec![2],
            expansion_ratio_range: [1.0, 2.0],
            ..SearchSpaceConfig::small_task()
        };
        let plan = resolve_channel_plan(&arch, &space);
        let first: Vec<bool> = plan.blocks.iter().map(|b| b.layers[0].residual).collect();
        // block 2 strides, block 3 widens
        assert_eq!(first, [true, false, false]);
        assert!(plan.blocks.iter().all(|b| b.layers[1..].iter().all(|l| l.residual)));

        arch.blocks[0].skip = false;
        let plan = resolve_channel_plan(&arch, &space);
        assert!(plan.blocks[0].layers.iter().all(|l| !l.residual));
    }

    #[test]
    fn layer_param_spot_values() {
        let w = CostModel::WEIGHTS_ONLY;
        assert_eq!(layer_params(ConvOp::SepConv, Kernel::K3, 32, 64, w), 288 + 2048);
        assert_eq!(layer_params(ConvOp::MBConv6, Kernel::K3, 32, 32, w), 6144 + 1728 + 6144);
        assert!(Kernel::from_size(1).is_none());
        let bn = CostModel::WITH_BATCH_NORM;
        assert_eq!(layer_params(ConvOp::SepConv, Kernel::K3, 32, 64, bn), 2336 + 2 * 96);
        assert_eq!(
            layer_params(ConvOp::MBConv6, Kernel::K3, 32, 32, bn),
            14016 + 2 * (192 + 192 + 32)
        );
    }

    #[test]
    fn classifier_is_linear_in_classes() {
        let arch = uniform_arch(7, ConvOp::MBConv6, WidthFactor::One, 1);
        let mut space = SearchSpaceConfig::small_task();
        let base = arch_params(&arch, &space, CostModel::WEIGHTS_ONLY);
        space.num_classes *= 2;
        let doubled = arch_params(&arch, &space, CostModel::WEIGHTS_ONLY);
        assert_eq!(doubled - base, 32 * 10);
    }

    #[test]
    fn halving_resolution_quarters_layer_multadds() {
        let mut arch = uniform_arch(7, ConvOp::MBConv3, WidthFactor::One, 2);
        arch.blocks[2].width = WidthFactor::Two;
        let space = SearchSpaceConfig::small_task();
        let half = SearchSpaceConfig {
            input_resolution: 16,
            ..space.clone()
        };
        let full = layer_costs(&arch, &space, CostModel::WEIGHTS_ONLY);
        let halved = layer_costs(&arch, &half, CostModel::WEIGHTS_ONLY);
        for (f, h) in full.iter().zip(&halved) {
            if f.kind != LayerKind::Classifier {
                assert_eq!(f.multadds, 4 * h.multadds, "{:?}", f.kind);
            }
        }
    }

    #[test]
    fn model_size_matches_totals() {
        let arch = uniform_arch(7, ConvOp::MBConv6, WidthFactor::OneAndHalf, 2);
        let space = SearchSpaceConfig::large_task();
        let s = model_size(&arch, &space, CostModel::WITH_BATCH_NORM);
        assert_eq!(s.params, arch_params(&arch, &space, CostModel::WITH_BATCH_NORM));
        assert_eq!(s.multadds, arch_multadds(&arch, &space));
    }
}
