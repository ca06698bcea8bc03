#![allow(dead_code)]

use eatnas::evaluators::{Landscape, SyntheticEvaluator, Task, INTERACTION_WEIGHT};
use eatnas::metrics::{arch_params, CostModel};
use eatnas::scoring::{ScoreParams, SizeMetric};
use eatnas::search_space::{
    is_valid, ArchCode, BlockCode, ConvOp, Primitive, SearchSpaceConfig, WidthFactor,
};

/// Four-block space small enough to enumerate.
pub fn space4() -> SearchSpaceConfig {
    SearchSpaceConfig {
        n_blocks: 4,
        stem_channels: 16,
        downsample_blocks: vec![2, 4],
        expansion_ratio_range: [1.0, 8.0],
        ..SearchSpaceConfig::small_task()
    }
}

/// Median parameter count of random `space4` archs is about 70k.
pub fn score4() -> ScoreParams {
    ScoreParams {
        metric: SizeMetric::Params,
        target_size: 70_000.0,
        omega: -0.07,
    }
}

pub fn small5() -> SearchSpaceConfig {
    SearchSpaceConfig {
        n_blocks: 5,
        stem_channels: 16,
        downsample_blocks: vec![2, 4],
        expansion_ratio_range: [1.0, 8.0],
        ..SearchSpaceConfig::small_task()
    }
}

pub fn large5() -> SearchSpaceConfig {
    SearchSpaceConfig {
        n_blocks: 5,
        downsample_blocks: vec![2, 3, 4],
        expansion_ratio_range: [2.0, 16.0],
        layer_count_range: None,
        ..SearchSpaceConfig::large_task()
    }
}

/// Targets near the median random-arch size of `small5` and `large5`.
pub fn score_small5() -> ScoreParams {
    ScoreParams {
        target_size: 1.0e5,
        ..ScoreParams::small_task()
    }
}

pub fn score_large5() -> ScoreParams {
    ScoreParams {
        target_size: 2.4e6,
        ..ScoreParams::large_task()
    }
}

struct Tensor {
    shape: [u64; 4],
    positions: u64,
    normalized_channels: u64,
}

fn half_up(channels: u64, width: WidthFactor) -> u64 {
    ((channels as f64 * width.value() + 0.5).floor() as u64).max(1)
}

fn stride2(r: u64) -> u64 {
    (r + 1) / 2
}

/// Enumerates every weight tensor of the network with its output position
/// count and the number of channels normalized after it.
fn tensor_walk(arch: &ArchCode, space: &SearchSpaceConfig) -> (Vec<Tensor>, u64, u64) {
    let mut tensors = Vec::new();
    let mut res = space.input_resolution;
    if space.stem_downsample {
        res = stride2(res);
    }
    let mut c = space.stem_channels;
    tensors.push(Tensor {
        shape: [3, 3, 3, c],
        positions: res * res,
        normalized_channels: c,
    });
    for (b, block) in arch.blocks.iter().enumerate() {
        let out = half_up(c, block.width);
        let k = block.kernel.size();
        for layer in 0..block.depth.get() {
            let cin = if layer == 0 { c } else { out };
            let in_res = res;
            if layer == 0 && space.downsample_blocks.contains(&(b + 1)) {
                res = stride2(res);
            }
            match block.conv {
                ConvOp::SepConv => {
                    tensors.push(Tensor {
                        shape: [k, k, 1, cin],
                        positions: res * res,
                        normalized_channels: cin,
                    });
                    tensors.push(Tensor {
                        shape: [1, 1, cin, out],
                        positions: res * res,
                        normalized_channels: out,
                    });
                }
                ConvOp::MBConv3 | ConvOp::MBConv6 => {
                    let t = if block.conv == ConvOp::MBConv3 { 3 } else { 6 };
                    let hidden = t * cin;
                    tensors.push(Tensor {
                        shape: [1, 1, cin, hidden],
                        positions: in_res * in_res,
                        normalized_channels: hidden,
                    });
                    tensors.push(Tensor {
                        shape: [k, k, 1, hidden],
                        positions: res * res,
                        normalized_channels: hidden,
                    });
                    tensors.push(Tensor {
                        shape: [1, 1, hidden, out],
                        positions: res * res,
                        normalized_channels: out,
                    });
                }
            }
        }
        c = out;
    }
    (tensors, c, space.num_classes)
}

/// Independent parameter and multiply-add counts.
pub fn metrics_oracle(arch: &ArchCode, space: &SearchSpaceConfig, batch_norm: bool) -> (u64, u64) {
    let (tensors, features, classes) = tensor_walk(arch, space);
    let mut params = 0;
    let mut multadds = 0;
    for t in &tensors {
        let n: u64 = t.shape.iter().product();
        params += n;
        multadds += n * t.positions;
        if batch_norm {
            params += 2 * t.normalized_channels;
        }
    }
    params += features * classes;
    multadds += features * classes;
    if batch_norm {
        params += classes;
    }
    (params, multadds)
}

fn block_with(mut block: BlockCode, conv: usize, kernel: usize, depth: usize) -> BlockCode {
    block = block.with_value(Primitive::Conv, conv);
    block = block.with_value(Primitive::Kernel, kernel);
    block.with_value(Primitive::Depth, depth)
}

/// Best score over every genome of a four-block space, by exhaustive
/// enumeration.
///
/// Width vectors are enumerated outright and filtered by validity. For each
/// one, the per-block choice of (conv, kernel, depth) is enumerated jointly
/// across all four blocks. Skip carries no size cost and no pairwise term, so
/// each block takes its better skip value directly.
pub fn enumerate_optimum(
    ev: &SyntheticEvaluator,
    space: &SearchSpaceConfig,
    score: &ScoreParams,
) -> (f64, ArchCode) {
    const CHOICES: usize = 36;
    let land: &Landscape = ev.landscape();
    let task = ev.task();
    let n = space.n_blocks;
    assert_eq!(n, 4, "enumeration is written for four blocks");
    assert_eq!(score.metric, SizeMetric::Params);
    let norm = land.normalizer();
    let unary = |i: usize, p: Primitive, v: usize| land.unary_utility(task, i, p, v);
    let pair = |i: usize, a: usize, b: usize| {
        INTERACTION_WEIGHT * land.pair_utility(task, i, ConvOp::ALL[a], ConvOp::ALL[b])
    };
    let decode = |j: usize| (j / 12, (j / 4) % 3, j % 4);

    let mut best = (f64::NEG_INFINITY, ArchCode::new(Vec::new()));
    for wi in 0..4usize.pow(n as u32) {
        let mut base = ArchCode::new(vec![BlockCode::default(); n]);
        for (i, block) in base.blocks.iter_mut().enumerate() {
            block.width = WidthFactor::ALL[(wi >> (2 * i)) & 3];
        }
        if !is_valid(&base, space) {
            continue;
        }
        let skip: Vec<usize> = (0..n)
            .map(|i| {
                if unary(i, Primitive::Skip, 1) > unary(i, Primitive::Skip, 0) {
                    1
                } else {
                    0
                }
            })
            .collect();
        let base_params = arch_params(&base, space, CostModel::default()) as f64;
        let mut extra = vec![[0.0f64; CHOICES]; n];
        let mut util = vec![[0.0f64; CHOICES]; n];
        for i in 0..n {
            for j in 0..CHOICES {
                let (c, k, d) = decode(j);
                let mut a = base.clone();
                a.blocks[i] = block_with(a.blocks[i], c, k, d);
                extra[i][j] = arch_params(&a, space, CostModel::default()) as f64 - base_params;
                util[i][j] = unary(i, Primitive::Conv, c)
                    + unary(i, Primitive::Kernel, k)
                    + unary(i, Primitive::Depth, d)
                    + unary(i, Primitive::Width, base.blocks[i].value_index(Primitive::Width))
                    + unary(i, Primitive::Skip, skip[i]);
            }
        }
        for j0 in 0..CHOICES {
            for j1 in 0..CHOICES {
                let u01 = util[0][j0] + util[1][j1] + pair(0, j0 / 12, j1 / 12);
                let p01 = extra[0][j0] + extra[1][j1];
                for j2 in 0..CHOICES {
                    let u012 = u01 + util[2][j2] + pair(1, j1 / 12, j2 / 12);
                    let p012 = p01 + extra[2][j2];
                    for j3 in 0..CHOICES {
                        let u = u012 + util[3][j3] + pair(2, j2 / 12, j3 / 12);
                        let params = base_params + p012 + extra[3][j3];
                        let acc = Landscape::accuracy_from_logit(u / norm, 1);
                        let s = acc * (params / score.target_size).powf(score.omega);
                        if s > best.0 {
                            let mut a = base.clone();
                            for (i, j) in [j0, j1, j2, j3].into_iter().enumerate() {
                                let (c, k, d) = decode(j);
                                a.blocks[i] = block_with(a.blocks[i], c, k, d);
                                a.blocks[i].skip = skip[i] == 1;
                            }
                            best = (s, a);
                        }
                    }
                }
            }
        }
    }
    best
}

pub fn small_evaluator(seed: u64, shift: f64, space: &SearchSpaceConfig) -> SyntheticEvaluator {
    let cfg = eatnas::LandscapeConfig {
        seed,
        shift,
        ..Default::default()
    };
    SyntheticEvaluator::new(cfg, space.clone(), Task::Small)
}

pub fn large_evaluator(seed: u64, shift: f64, space: &SearchSpaceConfig) -> SyntheticEvaluator {
    let cfg = eatnas::LandscapeConfig {
        seed,
        shift,
        ..Default::default()
    };
    SyntheticEvaluator::new(cfg, space.clone(), Task::Large)
}
