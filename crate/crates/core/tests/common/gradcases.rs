//! Gradient-check cases shared by the gradient tests and the acceptance
//! harness. Tapes run in `f32`; the difference stencil runs the same graph
//! code in `f64` so its rounding noise stays far below the tolerance.

use leafcam_core::attention::{cbam_graph, se_block_graph, CbamParams, SeParams};
use leafcam_core::autodiff::{Graph, NodeId};
use leafcam_core::error::Result;
use leafcam_core::gradcheck::{finite_diff_check_wide, GradCheckReport, GraphFn, DEFAULT_STEP};
use leafcam_core::model::{build_model, forward_graph, ParamIds};
use leafcam_core::ops::{self, Padding, Pool};
use leafcam_core::tensor::{Element, Tensor};
use leafcam_core::{AttentionKind, Backbone, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
pub const TOL: f32 = 1e-2;

/// A seeded [`GraphFn`] from a body that sees `g`, `ids` and the seed `s`.
macro_rules! graph_fn {
    (|$g:ident, $ids:ident, $s:ident| $body:block) => {{
        struct F(u64);
        impl GraphFn for F {
            #[allow(unused_variables)]
            fn build<T: Element>(&self, $g: &mut Graph<T>, $ids: &[NodeId]) -> Result<NodeId> {
                let $s = self.0;
                $body
            }
        }
        F
    }};
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, r)
}

/// Uniform in [-1, 1] but at least `gap` away from zero, so a ReLU kink is
/// never inside the difference stencil.
fn off_zero(shape: &[usize], gap: f32, r: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, r).map(|v| v.signum() * (gap + (1.0 - gap) * v.abs()))
}

/// A random permutation of evenly spaced values, so max-type reductions never
/// see near-ties.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / (n.max(2) - 1) as f32).collect();
    vals.shuffle(r);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// `sum(w * y)` with a fixed random projection `w`, so every output element
/// contributes with a distinct weight.
fn project<T: Element>(g: &mut Graph<T>, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::<f32>::uniform(shape, 0.5, 1.5, &mut rng(seed ^ 0xabcd));
    let w = g.constant(w.cast());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn run<F: GraphFn>(seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: impl Fn(u64) -> F) -> GradCheckReport {
    let inputs = make(&mut rng(seed));
    finite_diff_check_wide(&f(seed), &inputs, DEFAULT_STEP).unwrap()
}

pub fn conv2d_same(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[1, 2, 5, 5], r), uniform(&[3, 2, 3, 3], r), uniform(&[3], r)],
        graph_fn!(|g, ids, s| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, Padding::Same)?;
            project(g, y, s)
        }),
    )
}

pub fn conv2d_valid_strided(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[2, 2, 6, 6], r), uniform(&[2, 2, 3, 3], r), uniform(&[2], r)],
        graph_fn!(|g, ids, s| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, Padding::Valid)?;
            project(g, y, s)
        }),
    )
}

pub fn dense(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[3, 4], r), uniform(&[4, 5], r), uniform(&[5], r)],
        graph_fn!(|g, ids, s| {
            let y = g.dense(ids[0], ids[1], ids[2])?;
            project(g, y, s)
        }),
    )
}

pub fn relu(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![off_zero(&[2, 3, 4], 0.01, r)],
        graph_fn!(|g, ids, s| {
            let y = g.relu(ids[0]);
            project(g, y, s)
        }),
    )
}

pub fn sigmoid(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[2, 8], r)],
        graph_fn!(|g, ids, s| {
            let y = g.sigmoid(ids[0]);
            project(g, y, s)
        }),
    )
}

pub fn softmax(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[3, 7], r)],
        graph_fn!(|g, ids, s| {
            let y = g.softmax(ids[0])?;
            project(g, y, s)
        }),
    )
}

pub fn softmax_cross_entropy(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[4, 7], r)],
        graph_fn!(|g, ids, s| {
            let p = g.softmax(ids[0])?;
            g.sparse_cross_entropy(p, &[0, 3, 6, 2])
        }),
    )
}

pub fn pools(seed: u64) -> GradCheckReport {
    // all three pools in one function, each feeding its own projection
    run(
        seed,
        |r| vec![distinct(&[2, 3, 4, 4], r)],
        graph_fn!(|g, ids, s| {
            let mut total = None;
            for (k, kind) in [Pool::Max2x2, Pool::GlobalAvg, Pool::GlobalMax].into_iter().enumerate() {
                let y = g.pool(ids[0], kind)?;
                let p = project(g, y, s + 100 * k as u64)?;
                total = Some(match total {
                    Some(t) => g.add(t, p)?,
                    None => p,
                });
            }
            Ok(total.expect("three pools"))
        }),
    )
}

pub fn cross_channel_pools_and_concat(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![distinct(&[2, 4, 3, 3], r)],
        graph_fn!(|g, ids, s| {
            let m = g.channel_mean(ids[0])?;
            let x = g.channel_max(ids[0])?;
            let c = g.concat_channels(m, x)?;
            project(g, c, s)
        }),
    )
}

pub fn broadcast_mul_add(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[2, 3, 2, 2], r), uniform(&[2, 3, 1, 1], r), uniform(&[2, 1, 2, 2], r)],
        graph_fn!(|g, ids, s| {
            let a = g.mul(ids[0], ids[1])?;
            let b = g.add(a, ids[2])?;
            let c = g.mul(b, ids[2])?;
            project(g, c, s)
        }),
    )
}

pub fn dropout_training_mask(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| vec![uniform(&[4, 6], r)],
        graph_fn!(|g, ids, s| {
            // the mask comes from a fresh seeded stream, so every evaluation
            // of the function draws the same mask
            let y = g.dropout(ids[0], 0.5, true, &mut rng(s + 1000))?;
            project(g, y, s)
        }),
    )
}

pub fn se_block(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| {
            let p = SeParams::init(8, 4, r);
            vec![distinct(&[2, 8, 3, 3], r), p.reduce_w, uniform(&[2], r), p.expand_w, uniform(&[8], r)]
        },
        graph_fn!(|g, ids, s| {
            let p = SeParams {
                reduce_w: ids[1],
                reduce_b: ids[2],
                expand_w: ids[3],
                expand_b: ids[4],
            };
            let y = se_block_graph(g, ids[0], &p)?;
            project(g, y, s)
        }),
    )
}

pub fn cbam_block(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| {
            let p = CbamParams::init(8, 4, r);
            vec![
                distinct(&[1, 8, 4, 4], r),
                p.fc1_w,
                uniform(&[2], r),
                p.fc2_w,
                uniform(&[8], r),
                p.spatial_w,
                uniform(&[1], r),
            ]
        },
        graph_fn!(|g, ids, s| {
            let p = CbamParams {
                fc1_w: ids[1],
                fc1_b: ids[2],
                fc2_w: ids[3],
                fc2_b: ids[4],
                spatial_w: ids[5],
                spatial_b: ids[6],
            };
            let y = cbam_graph(g, ids[0], &p)?;
            project(g, y, s)
        }),
    )
}

pub fn small_network_end_to_end(seed: u64) -> GradCheckReport {
    run(
        seed,
        |r| loop {
            let x = uniform(&[1, 2, 6, 6], r);
            let w = uniform(&[4, 2, 3, 3], r);
            let b = uniform(&[4], r);
            // Moving one input by h shifts a pre-activation by at most h, so
            // redraw when a ReLU kink sits inside the difference stencil.
            let pre = ops::conv2d(&x, &w, &b, 1, Padding::Same).unwrap();
            if pre.data().iter().all(|v| v.abs() > 2.0 * DEFAULT_STEP) {
                break vec![x, w, b, uniform(&[4, 3], r), uniform(&[3], r)];
            }
        },
        graph_fn!(|g, ids, s| {
            let c = g.conv2d(ids[0], ids[1], ids[2], 1, Padding::Same)?;
            let a = g.relu(c);
            let p = g.pool(a, Pool::GlobalAvg)?;
            let v = g.reshape(p, &[1, 4])?;
            let z = g.dense(v, ids[3], ids[4])?;
            let s = g.softmax(z)?;
            g.sparse_cross_entropy(s, &[1])
        }),
    )
}

/// Every operator case with its display name.
pub type Case = fn(u64) -> GradCheckReport;

pub const OPERATORS: &[(&str, Case)] = &[
    ("conv2d same", conv2d_same),
    ("conv2d valid s2", conv2d_valid_strided),
    ("dense", dense),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("softmax+ce", softmax_cross_entropy),
    ("max2x2 + gap + gmp", pools),
    ("channel mean/max + concat", cross_channel_pools_and_concat),
    ("broadcast mul/add", broadcast_mul_add),
    ("dropout", dropout_training_mask),
    ("se block", se_block),
    ("cbam", cbam_block),
    ("conv-relu-gap-dense-softmax-ce", small_network_end_to_end),
];

/// Difference step for the whole-model check. A model has hundreds of ReLU
/// and max-pool kinks, so a 1e-3 stencil almost always straddles one; the
/// stencil runs in f64, so the smaller step costs no precision.
pub const MODEL_STEP: f32 = 1e-5;

/// Every parameter of a whole model, plus the input image, on one sample.
/// Dropout is active with a mask drawn from a fixed seed, so each stencil
/// evaluation sees the same mask.
pub fn full_model(attention: AttentionKind, seed: u64) -> GradCheckReport {
    let mut spec = ModelSpec::new(Backbone::TinyA, attention, 3);
    spec.input = [3, 8, 8];
    spec.hidden = 6;
    spec.reduction = 4;
    let params = build_model(&spec, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    // nonzero biases so no unit starts exactly at a ReLU kink
    let mut inputs: Vec<Tensor> = params
        .iter()
        .map(|(name, p)| if name.ends_with("bias") { uniform(p.value.shape(), &mut r).map(|v| 0.1 * v) } else { p.value.clone() })
        .collect();
    inputs.push(Tensor::uniform(vec![1, 3, 8, 8], 0.0, 1.0, &mut r));
    let names: Vec<String> = params.names().map(str::to_string).collect();

    struct Model {
        spec: ModelSpec,
        names: Vec<String>,
        seed: u64,
    }
    impl GraphFn for Model {
        fn build<T: Element>(&self, g: &mut Graph<T>, ids: &[NodeId]) -> Result<NodeId> {
            let pids: ParamIds = self.names.iter().cloned().zip(ids.iter().copied()).collect();
            let x = ids[self.names.len()];
            let nodes = forward_graph(g, &self.spec, &pids, x, true, &mut rng(self.seed), None)?;
            g.sparse_cross_entropy(nodes.probabilities, &[1])
        }
    }
    let f = Model { spec, names, seed };
    finite_diff_check_wide(&f, &inputs, MODEL_STEP).unwrap()
}
