//! Every differentiable tape op, wrapped for finite-difference checking.

use micropatch::tensor::gradcheck::{check_gradients, GradReport};
use micropatch::tensor::{multi_head_attention, AttentionParams, BatchNormMode, ConvGeometry, Tape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = fn(&mut Tape<f64>, &[Var]) -> micropatch::tensor::Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: Build,
    pub training: bool,
}

pub const OP_TOL: f64 = 1e-4;
pub const ATTENTION_TOL: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const STEP: f64 = 1e-6;
const PROBES: usize = 24;

fn case(name: &'static str, shapes: &'static [&'static [usize]], build: Build) -> Case {
    Case {
        name,
        shapes,
        build,
        training: false,
    }
}

pub fn op_cases() -> Vec<Case> {
    vec![
        case("relu", &[&[2, 7]], |t, v| t.relu(v[0])),
        case("tanh", &[&[2, 7]], |t, v| t.tanh(v[0])),
        case("gelu", &[&[2, 7]], |t, v| t.gelu(v[0])),
        case("silu", &[&[2, 7]], |t, v| t.silu(v[0])),
        case("sigmoid", &[&[2, 7]], |t, v| t.sigmoid(v[0])),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("add_broadcast", &[&[2, 3, 4], &[3, 4]], |t, v| t.add_broadcast(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| t.scale(v[0], -1.7)),
        case("channel_gate", &[&[2, 3, 2, 2], &[2, 3]], |t, v| t.channel_gate(v[0], v[1])),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("flatten", &[&[2, 3, 2]], |t, v| t.flatten(v[0])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("concat", &[&[2, 3, 2], &[2, 1, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("slice", &[&[4, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
        case("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(1, 1))
        }),
        case("conv2d_stride2_1x1", &[&[2, 3, 6, 6], &[2, 3, 1, 1]], |t, v| {
            t.conv2d(v[0], v[1], None, ConvGeometry::new(2, 0))
        }),
        case("conv2d_stride2_odd", &[&[1, 2, 5, 5], &[3, 2, 3, 3]], |t, v| {
            t.conv2d(v[0], v[1], None, ConvGeometry::new(2, 1))
        }),
        case("conv2d_depthwise", &[&[2, 3, 6, 6], &[3, 1, 5, 5], &[3]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::depthwise(1, 2, 3))
        }),
        case("conv2d_depthwise_stride2", &[&[1, 4, 6, 6], &[4, 1, 3, 3]], |t, v| {
            t.conv2d(v[0], v[1], None, ConvGeometry::depthwise(2, 1, 4))
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.bmm(v[0], v[1], false)),
        case("bmm_trans_b", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.bmm(v[0], v[1], true)),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        case("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
        case("cross_entropy", &[&[4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
        Case {
            training: true,
            ..case("dropout", &[&[4, 6]], |t, v| t.dropout(v[0], 0.3))
        },
        Case {
            training: true,
            ..case("drop_path", &[&[6, 2, 3]], |t, v| t.drop_path(v[0], 0.4))
        },
        case("batch_norm_train", &[&[4, 3, 2, 2], &[3], &[3]], |t, v| {
            let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
            let mode = BatchNormMode::Train {
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: 0.1,
            };
            t.batch_norm(v[0], v[1], v[2], mode, 1e-5)
        }),
        case("batch_norm_eval", &[&[3, 2, 2, 2], &[2], &[2]], |t, v| {
            let (rm, rv) = ([0.1, -0.2], [0.5, 2.0]);
            let mode = BatchNormMode::Eval {
                running_mean: &rm,
                running_var: &rv,
            };
            t.batch_norm(v[0], v[1], v[2], mode, 1e-5)
        }),
        case("layer_norm", &[&[2, 3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        case("max_pool2d", &[&[2, 2, 6, 6]], |t, v| t.max_pool2d(v[0], 2, 2)),
        case("max_pool2d_overlap", &[&[1, 2, 5, 5]], |t, v| t.max_pool2d(v[0], 3, 2)),
        case("avg_pool2d", &[&[2, 2, 6, 6]], |t, v| t.avg_pool2d(v[0], 2, 2)),
        case("global_avg_pool", &[&[2, 3, 3, 3]], |t, v| t.global_avg_pool(v[0])),
    ]
}

pub fn attention_case() -> Case {
    case("multi_head_attention", &[&[2, 4, 6], &[6, 18], &[18], &[6, 6], &[6]], |t, v| {
        let p = AttentionParams {
            qkv_w: v[1],
            qkv_b: v[2],
            proj_w: v[3],
            proj_b: v[4],
        };
        Ok(multi_head_attention(t, v[0], 2, &p)?.out)
    })
}

/// Uniform inputs in [-1, 1]. ReLU kinks and max-pool ties are hit with
/// probability zero.
pub fn inputs(c: &Case, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    c.shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect()
}

pub fn run(c: &Case, seed: u64) -> GradReport {
    check_gradients(&inputs(c, seed), c.build, seed, c.training, STEP, PROBES)
        .unwrap_or_else(|e| panic!("{}: {e}", c.name))
}
