//! Finite-difference verification of every differentiable op, every network
//! block and a tiny end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, grad_check_params, weighted_sum, GradCheckReport, Graph, Var, DEFAULT_EPS};
use crate::error::Result;
use crate::model::{ExtractorKind, Localizer, ModelConfig, Recurrence};
use crate::nn::{sinusoidal_pe_1d, sinusoidal_pe_2d, AttentionBlock, FeedForward, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::train::{step_loss, LossWeights};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Op,
    Block,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub kind: CheckKind,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

type OpFn = fn(&mut Graph, Var, &mut ChaCha8Rng) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, [usize; 2], OpFn)> {
    vec![
        ("matmul", [3, 4], |g, x, r| {
            let w = g.input(random(r, &[4, 5]));
            let left = g.matmul(x, w)?;
            let a = g.input(random(r, &[2, 3]));
            let right = g.matmul(a, left)?;
            g.add(right, right)
        }),
        ("linear", [3, 4], |g, x, r| {
            let w = g.input(random(r, &[5, 4]));
            let b = g.input(random(r, &[5]));
            g.linear(x, w, Some(b))
        }),
        ("transpose", [3, 4], |g, x, _| g.transpose(x)),
        ("add_sub_mul", [3, 4], |g, x, r| {
            let c = g.input(random(r, &[3, 4]));
            let s = g.add(x, c)?;
            let d = g.sub(s, x)?;
            let m = g.mul(x, s)?;
            let m = g.mul(m, d)?;
            Ok(g.scale(m, -1.7))
        }),
        ("add_row", [4, 3], |g, x, r| {
            let b = g.input(random(r, &[3]));
            let y = g.add_row(x, b)?;
            g.mul(y, x)
        }),
        ("relu", [4, 5], |g, x, _| Ok(g.relu(x))),
        ("sigmoid", [4, 5], |g, x, _| {
            let y = g.scale(x, 3.0);
            Ok(g.sigmoid(y))
        }),
        ("softmax_rows", [3, 5], |g, x, _| g.softmax(x, 1)),
        ("softmax_cols", [3, 5], |g, x, _| g.softmax(x, 0)),
        ("log_softmax", [1, 7], |g, x, _| {
            let flat = g.reshape(x, &[7])?;
            Ok(g.log_softmax(flat))
        }),
        ("concat_slice", [3, 4], |g, x, r| {
            let c = g.input(random(r, &[2, 4]));
            let cat = g.concat(&[x, c, x], 0)?;
            let s = g.slice(cat, 1, 1, 2)?;
            let t = g.slice(cat, 0, 2, 4)?;
            let m = g.mean_axis(t, 0)?;
            let st = g.sum(s);
            let mm = g.mean(m);
            g.add(st, mm)
        }),
        ("pick", [1, 6], |g, x, _| {
            let flat = g.reshape(x, &[6])?;
            let a = g.pick(flat, 4)?;
            let b = g.pick(flat, 1)?;
            g.mul(a, b)
        }),
        ("layer_norm", [4, 6], |g, x, r| {
            let gamma = g.input(random(r, &[6]));
            let beta = g.input(random(r, &[6]));
            g.layer_norm(x, gamma, beta, 1e-5)
        }),
        ("attention", [5, 4], |g, x, r| {
            let k_in = g.input(random(r, &[6, 4]));
            let mix = g.input(random(r, &[6, 5]));
            let from_x = g.matmul(mix, x)?;
            let k = g.add(k_in, from_x)?;
            let v = g.mul(k_in, from_x)?;
            g.attention(x, k, v, 2, 0.7)
        }),
        ("im2col", [6, 6], |g, x, _| {
            let img = g.reshape(x, &[3, 4, 3])?;
            g.im2col(img, 2, 2, 1)
        }),
    ]
}

fn check_ops(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (i, (name, shape, build)) in op_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for trial in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 8 | trial));
            let x = random(&mut rng, &shape);
            let inner = rng.random::<u64>();
            let report = grad_check(
                |g, xv| {
                    let mut r = ChaCha8Rng::seed_from_u64(inner);
                    let y = build(g, xv, &mut r)?;
                    weighted_sum(g, y, inner)
                },
                &x,
                DEFAULT_EPS,
            )?;
            worst = worst.max(report.max_relative_error);
        }
        out.push(CheckOutcome {
            name: name.into(),
            kind: CheckKind::Op,
            max_relative_error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

/// Moves every parameter away from its initialization so that zero-initialized
/// branches take part in the check.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in store.value_mut(id).data_mut() {
            *x += rng.random_range(-amount..amount);
        }
    }
}

/// Checks parameter and input gradients of a block. The inputs are stored as
/// extra parameters so one finite-difference sweep covers both.
fn check_block<F>(name: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng, inputs: &[[usize; 2]], f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut ids = Vec::new();
    for (i, shape) in inputs.iter().enumerate() {
        ids.push(store.add(format!("__input{i}"), random(rng, shape), ParamGroup::Other)?);
    }
    perturb(store, rng, 0.2);
    let seed = rng.random::<u64>();
    let report: GradCheckReport = grad_check_params(
        store,
        |g| {
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = f(g, &xs)?;
            weighted_sum(g, y, seed)
        },
        DEFAULT_EPS,
    )?;
    Ok(CheckOutcome {
        name: name.into(),
        kind: CheckKind::Block,
        max_relative_error: report.max_relative_error,
        tolerance: OP_TOLERANCE,
    })
}

fn check_blocks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (dim, heads, hidden) = (8, 2, 12);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &mut rng, "lin", 5, dim, ParamGroup::Other)?;
    out.push(check_block("linear_layer", &mut s, &mut rng, &[[4, 5]], |g, x| lin.forward(g, x[0]))?);

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", dim)?;
    out.push(check_block("layer_norm_layer", &mut s, &mut rng, &[[4, dim]], |g, x| ln.forward(g, x[0]))?);

    let mut s = ParamStore::new();
    let ffn = FeedForward::new(&mut s, &mut rng, "ffn", dim, hidden)?;
    out.push(check_block("feed_forward", &mut s, &mut rng, &[[4, dim]], |g, x| ffn.forward(g, x[0]))?);

    let mut s = ParamStore::new();
    let mlp = Mlp::new(&mut s, &mut rng, "mlp", &[dim, dim, dim / 2, 2])?;
    out.push(check_block("mlp", &mut s, &mut rng, &[[4, dim]], |g, x| mlp.forward(g, x[0]))?);

    let pe_tokens = sinusoidal_pe_1d(3, dim)?;
    let pe_grid = sinusoidal_pe_2d(2, dim)?;

    let mut s = ParamStore::new();
    let sab = AttentionBlock::new_self(&mut s, &mut rng, "sab", dim, heads, hidden)?;
    out.push(check_block("self_attention_block", &mut s, &mut rng, &[[3, dim]], |g, x| {
        let pe = g.input(pe_tokens.clone());
        sab.forward_self(g, x[0], Some(pe))
    })?);

    let mut s = ParamStore::new();
    let cab = AttentionBlock::new_cross(&mut s, &mut rng, "cab", dim, heads, hidden)?;
    out.push(check_block("cross_attention_block", &mut s, &mut rng, &[[4, dim], [3, dim]], |g, x| {
        let px = g.input(pe_grid.clone());
        let py = g.input(pe_tokens.clone());
        cab.forward_cross(g, x[0], x[1], Some(px), Some(py))
    })?);

    // the temporal block: both streams carry the grid encoding
    let mut s = ParamStore::new();
    let tam = AttentionBlock::new_cross(&mut s, &mut rng, "tam", dim, heads, hidden)?;
    tam.zero_residual_branches(&mut s);
    out.push(check_block("temporal_block", &mut s, &mut rng, &[[4, dim], [4, dim]], |g, x| {
        let p = g.input(pe_grid.clone());
        tam.forward_cross(g, x[0], x[1], Some(p), Some(p))
    })?);

    // convolutional extractor on a small image
    let config = ModelConfig {
        dim,
        channels: 8,
        grid: 2,
        fusion_rounds: 0,
        heads,
        ffn_hidden: hidden,
        seq_len: 2,
        sat_px: 16,
        ground_px: [16, 8],
        ground_downsample: 8,
        extractor: ExtractorKind::Conv,
        fusion_pe: true,
    };
    let mut model = Localizer::new(config, seed)?;
    perturb(&mut model.params, &mut rng, 0.2);
    let image = random(&mut rng, &[16, 8, 3]);
    let wseed = rng.random::<u64>();
    let report = grad_check_params(
        &model.params,
        |g| {
            let tokens = model.encode_ground(g, &image)?;
            weighted_sum(g, tokens, wseed)
        },
        DEFAULT_EPS,
    )?;
    out.push(CheckOutcome {
        name: "conv_extractor".into(),
        kind: CheckKind::Block,
        max_relative_error: report.max_relative_error,
        tolerance: OP_TOLERANCE,
    });
    Ok(out)
}

/// The tiny end-to-end configuration: N=4, D=8, M=1, two heads, T=3.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        channels: 4,
        grid: 4,
        fusion_rounds: 1,
        heads: 2,
        ffn_hidden: 16,
        seq_len: 3,
        sat_px: 8,
        ground_px: [8, 8],
        ground_downsample: 8,
        extractor: ExtractorKind::Identity,
        fusion_pe: true,
    }
}

/// Sequence-loss gradient of the tiny model with respect to all parameters.
pub fn check_end_to_end(seed: u64) -> Result<CheckOutcome> {
    let config = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Localizer::new(config.clone(), seed)?;
    perturb(&mut model.params, &mut rng, 0.3);
    let sat = random(&mut rng, &[config.grid, config.grid, config.channels]);
    let frames: Vec<Tensor> = (0..config.seq_len).map(|_| random(&mut rng, &[1, 2, config.channels])).collect();
    let extent = config.sat_px as f64;
    let gts: Vec<(f64, f64)> = (0..config.seq_len)
        .map(|_| (rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
        .collect();
    let weights = LossWeights::default();
    let report = grad_check_params(
        &model.params,
        |g| {
            let outs = model.run_sequence(g, &sat, &frames, Recurrence::Temporal)?;
            let mut losses = Vec::new();
            for (o, &gt) in outs.iter().zip(&gts) {
                losses.push(step_loss(g, &o.heads, gt, &model.config, &weights)?.total);
            }
            let stacked = g.concat(&losses, 0)?;
            Ok(g.mean(stacked))
        },
        DEFAULT_EPS,
    )?;
    Ok(CheckOutcome {
        name: "end_to_end_tiny".into(),
        kind: CheckKind::Model,
        max_relative_error: report.max_relative_error,
        tolerance: MODEL_TOLERANCE,
    })
}

/// Runs every check. Tolerances are the defaults; callers may re-judge the
/// reported errors against their own thresholds.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = check_ops(seed)?;
    out.extend(check_blocks(seed)?);
    out.push(check_end_to_end(seed)?);
    Ok(out)
}
