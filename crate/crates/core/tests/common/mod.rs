//! Shared fixtures: random instances and conversions to the oracle layout.
#![allow(dead_code)]

use disa_core::hrm::WindowBlock;
use disa_core::nn::{Linear, Mlp, ParamStore};
use disa_core::sdm::CrossAttentionStack;
use disa_core::tensor::Tensor;
use disa_core::types::{CorrelationVolume, Stage, TiePolicy, TokenPartition};
use disa_oracles::{BlockWeights, CrossAttentionWeights, CrossLayerWeights, Matrix, Mlp2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal(rng, n, std)).unwrap()
}

/// Overwrite every stored tensor with Gaussian noise, so zero-initialized
/// layers take part too.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.set(&name, random_tensor(rng, &shape, std)).unwrap();
    }
}

pub fn matrix(t: &Tensor) -> Matrix {
    let s = t.shape();
    let cols = s[s.len() - 1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn linear_of(store: &ParamStore, l: &Linear) -> (Matrix, Vec<f64>) {
    let w = matrix(store.get(&l.weight_key()).unwrap());
    let b = if l.bias { store.get(&l.bias_key()).unwrap().data().to_vec() } else { vec![0.0; l.d_out] };
    (w, b)
}

pub fn mlp_of(store: &ParamStore, m: &Mlp) -> Mlp2 {
    let (w1, b1) = linear_of(store, &m.first);
    let (w2, b2) = linear_of(store, &m.second);
    Mlp2 { w1, b1, w2, b2 }
}

pub fn block_of(store: &ParamStore, b: &WindowBlock) -> BlockWeights {
    let (wq, bq) = linear_of(store, &b.q);
    let (wk, bk) = linear_of(store, &b.k);
    let (wv, bv) = linear_of(store, &b.v);
    let (wo, bo) = linear_of(store, &b.o);
    BlockWeights { wq, bq, wk, bk, wv, bv, wo, bo }
}

pub fn xattn_of(store: &ParamStore, s: &CrossAttentionStack) -> CrossAttentionWeights {
    let (text_in, text_in_b) = linear_of(store, &s.text_in);
    let (image_in, image_in_b) = linear_of(store, &s.image_in);
    let layers = s
        .layers
        .iter()
        .map(|[q, k, v, o]| CrossLayerWeights { wq: linear_of(store, q).0, wk: linear_of(store, k).0, wv: linear_of(store, v).0, wo: linear_of(store, o).0 })
        .collect();
    CrossAttentionWeights { text_in, text_in_b, image_in, image_in_b, layers, heads: s.n_heads }
}

/// Tokens of class `n` from a `[H, W, N_C, D]` volume, as `[token][channel]`.
pub fn class_tokens(v: &Tensor, n: usize) -> Matrix {
    let s = v.shape();
    let (hw, nc, d) = (s[0] * s[1], s[2], s[3]);
    (0..hw).map(|t| v.data()[(t * nc + n) * d..(t * nc + n + 1) * d].to_vec()).collect()
}

pub fn random_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, nc: usize, d: usize, stage: Stage) -> CorrelationVolume {
    CorrelationVolume::new(random_tensor(rng, &[h, w, nc, d], 1.0), stage).unwrap()
}

/// Random top-k style partition: each class gets `k` distinct tokens.
pub fn random_partition(rng: &mut ChaCha8Rng, hw: usize, nc: usize, k: usize) -> TokenPartition {
    let cols: Vec<Vec<usize>> = (0..nc)
        .map(|_| {
            let mut idx = rand::seq::index::sample(rng, hw, k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    TokenPartition::from_columns(&cols, hw, k, TiePolicy::LowestIndex).unwrap()
}

/// Zero every value that the given branch does not own.
pub fn restrict(v: &CorrelationVolume, part: &TokenPartition, fg: bool, stage: Stage) -> CorrelationVolume {
    let (h, w, nc, d) = v.dims();
    let mut t = v.values().clone();
    for tok in 0..h * w {
        for n in 0..nc {
            if part.is_fg(tok, n) != fg {
                t.data_mut()[(tok * nc + n) * d..(tok * nc + n + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    CorrelationVolume::new(t, stage).unwrap()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=4))
}
pub mod checks;
pub mod laws;
