mod common;

use common::Named;
use leafcam_core::attention::{self, CbamParams, SeParams};
use leafcam_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::<f32>::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// Every entry of every parameter drawn from `[-1, 1]`, biases included.
fn random_se(c: usize, seed: u64) -> SeParams {
    let base = SeParams::zeros(c, 2);
    let mut i = 0;
    base.map(|_, t| {
        i += 1;
        uniform(t.shape(), seed * 31 + i)
    })
}

fn random_cbam(c: usize, seed: u64) -> CbamParams {
    let base = CbamParams::zeros(c, 2);
    let mut i = 0;
    base.map(|_, t| {
        i += 1;
        uniform(t.shape(), seed * 37 + i)
    })
}

fn se_lookup(p: &SeParams) -> impl Fn(&str) -> Tensor + '_ {
    move |s| p.named().iter().find(|(n, _)| *n == s).unwrap().1.clone()
}

fn cbam_lookup(p: &CbamParams) -> impl Fn(&str) -> Tensor + '_ {
    move |s| p.named().iter().find(|(n, _)| *n == s).unwrap().1.clone()
}

#[test]
fn zero_parameters_halve_and_quarter() {
    let x = uniform(&[2, 8, 4, 4], 1);
    let se = attention::se_block(&x, &SeParams::zeros(8, 8)).unwrap();
    assert!(se.bit_eq(&x.map(|v| 0.5 * v)));
    let cbam = attention::cbam(&x, &CbamParams::zeros(8, 8)).unwrap();
    assert!(cbam.bit_eq(&x.map(|v| 0.25 * v)));
}

#[test]
fn saturated_gate_passes_input_through() {
    let x = uniform(&[1, 8, 4, 4], 2);
    let mut p = SeParams::zeros(8, 8);
    p.expand_b = Tensor::full(vec![8], 100.0);
    assert!(attention::se_block(&x, &p).unwrap().bit_eq(&x));
    let mut p = CbamParams::zeros(8, 8);
    p.fc2_b = Tensor::full(vec![8], 50.0);
    p.spatial_b = Tensor::full(vec![1], 100.0);
    assert!(attention::cbam(&x, &p).unwrap().bit_eq(&x));
}

#[test]
fn se_matches_composition_oracle() {
    for seed in 0..20 {
        let x = uniform(&[2, 6, 5, 3], seed);
        let p = random_se(6, seed);
        let got = attention::se_block(&x, &p).unwrap();
        assert!(got.bit_eq(&common::se_block(&x, &Named(&se_lookup(&p)))), "seed {seed}");
    }
}

#[test]
fn cbam_stages_match_composition_oracles() {
    for seed in 0..20 {
        let x = uniform(&[2, 6, 5, 4], seed);
        let p = random_cbam(6, seed);
        let named = Named(&cbam_lookup(&p));
        let cw = attention::cbam_channel(&x, &p).unwrap();
        assert!(cw.bit_eq(&common::cbam_channel_weights(&x, &named)), "channel, seed {seed}");
        let sw = attention::cbam_spatial(&x, &p).unwrap();
        assert!(sw.bit_eq(&common::cbam_spatial_weights(&x, &named)), "spatial, seed {seed}");
        let out = attention::cbam(&x, &p).unwrap();
        assert!(out.bit_eq(&common::cbam(&x, &named)), "full, seed {seed}");
    }
}

#[test]
fn channel_mismatch_is_rejected() {
    let x = uniform(&[1, 4, 2, 2], 0);
    assert!(attention::se_block(&x, &SeParams::zeros(8, 8)).is_err());
    assert!(attention::cbam(&x, &CbamParams::zeros(8, 8)).is_err());
}

/// Input channel `c` of the permuted problem is channel `perm[c]` of the original.
fn permute_x(x: &Tensor, perm: &[usize]) -> Tensor {
    let [n, c, h, w] = common::dims4(x);
    let hw = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for ni in 0..n {
        for &pc in perm {
            out.extend_from_slice(&x.data()[(ni * c + pc) * hw..][..hw]);
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

fn permute_rows(w: &Tensor, perm: &[usize]) -> Tensor {
    let cols = w.shape()[1];
    let data = perm.iter().flat_map(|&r| w.data()[r * cols..][..cols].to_vec()).collect();
    Tensor::new(w.shape().to_vec(), data).unwrap()
}

fn permute_cols(w: &Tensor, perm: &[usize]) -> Tensor {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let data = (0..rows).flat_map(|r| perm.iter().map(move |&c| w.data()[r * cols + c])).collect();
    Tensor::new(w.shape().to_vec(), data).unwrap()
}

fn permute_vec(b: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::new(b.shape().to_vec(), perm.iter().map(|&i| b.data()[i]).collect()).unwrap()
}

/// Values on a 1/8 grid in [-1, 1]: products and short sums stay exact, so
/// reordering a channel sum cannot change a single bit.
fn dyadic(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-8i32..=8).prop_map(|v| v as f32 / 8.0), len)
}

const C: usize = 4;

fn perm_strategy() -> impl Strategy<Value = Vec<usize>> {
    Just((0..C).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn blocks_preserve_shape_and_shrink(x in prop::collection::vec(-3.0f32..3.0, 2 * C * 9), seed in 0u64..1000) {
        let x = Tensor::new(vec![2, C, 3, 3], x).unwrap();
        let se = attention::se_block(&x, &random_se(C, seed)).unwrap();
        let p = random_cbam(C, seed);
        let cbam = attention::cbam(&x, &p).unwrap();
        for out in [&se, &cbam] {
            prop_assert_eq!(out.shape(), x.shape());
            for (o, v) in out.data().iter().zip(x.data()) {
                prop_assert!(o.abs() <= v.abs());
            }
        }
        let cw = attention::cbam_channel(&x, &p).unwrap();
        let sw = attention::cbam_spatial(&x, &p).unwrap();
        prop_assert_eq!(cw.shape(), &[2, C][..]);
        prop_assert_eq!(sw.shape(), &[2, 1, 3, 3][..]);
        for g in cw.data().iter().chain(sw.data()) {
            prop_assert!((0.0..=1.0).contains(g));
        }
    }

    #[test]
    fn se_is_channel_permutation_equivariant(
        x in dyadic(C * 4), w1 in dyadic(C * 2), b1 in dyadic(2), w2 in dyadic(2 * C), b2 in dyadic(C),
        perm in perm_strategy(),
    ) {
        let x = Tensor::new(vec![1, C, 2, 2], x).unwrap();
        let p = SeParams {
            reduce_w: Tensor::new(vec![C, 2], w1).unwrap(),
            reduce_b: Tensor::new(vec![2], b1).unwrap(),
            expand_w: Tensor::new(vec![2, C], w2).unwrap(),
            expand_b: Tensor::new(vec![C], b2).unwrap(),
        };
        let q = SeParams {
            reduce_w: permute_rows(&p.reduce_w, &perm),
            reduce_b: p.reduce_b.clone(),
            expand_w: permute_cols(&p.expand_w, &perm),
            expand_b: permute_vec(&p.expand_b, &perm),
        };
        let a = attention::se_block(&x, &p).unwrap();
        let b = attention::se_block(&permute_x(&x, &perm), &q).unwrap();
        prop_assert!(b.bit_eq(&permute_x(&a, &perm)));
    }

    #[test]
    fn cbam_is_channel_permutation_equivariant(
        x in dyadic(C * 4), w1 in dyadic(C * 2), b1 in dyadic(2), w2 in dyadic(2 * C), b2 in dyadic(C),
        sw in dyadic(98), sb in dyadic(1), perm in perm_strategy(),
    ) {
        let x = Tensor::new(vec![1, C, 2, 2], x).unwrap();
        let p = CbamParams {
            fc1_w: Tensor::new(vec![C, 2], w1).unwrap(),
            fc1_b: Tensor::new(vec![2], b1).unwrap(),
            fc2_w: Tensor::new(vec![2, C], w2).unwrap(),
            fc2_b: Tensor::new(vec![C], b2).unwrap(),
            spatial_w: Tensor::new(vec![1, 2, 7, 7], sw).unwrap(),
            spatial_b: Tensor::new(vec![1], sb).unwrap(),
        };
        let q = CbamParams {
            fc1_w: permute_rows(&p.fc1_w, &perm),
            fc2_w: permute_cols(&p.fc2_w, &perm),
            fc2_b: permute_vec(&p.fc2_b, &perm),
            ..p.clone()
        };
        let a = attention::cbam(&x, &p).unwrap();
        let b = attention::cbam(&permute_x(&x, &perm), &q).unwrap();
        // the cross-channel mean sums gated (non-dyadic) values in a new order
        prop_assert!(b.max_abs_diff(&permute_x(&a, &perm)) <= 1e-6);
        let cw = attention::cbam_channel(&x, &p).unwrap();
        let cw_perm = attention::cbam_channel(&permute_x(&x, &perm), &q).unwrap();
        prop_assert!(cw_perm.bit_eq(&permute_vec(&cw, &perm).reshape(vec![1, C]).unwrap()));
    }
}
