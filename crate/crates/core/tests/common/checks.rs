//! One randomized comparison per call; each returns the worst deviation
//! between the library and its loop oracle.

use disa_core::aggregate::{aggregate, AggregationKind, GatedAggregator};
use disa_core::config::{GateGranularity, PipelineConfig};
use disa_core::hrm::{category_prototype, fuse, pixel_refine, semantic_prototype, BranchRefiner, HrmToggles};
use disa_core::sdm::{cross_attend, CrossAttentionStack};
use disa_core::train::evaluate_masks;
use disa_core::nn::ParamStore;
use disa_core::types::{Branch, EmbeddingPair, PrototypeSet, Stage};
use disa_oracles as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn branch_of(rng: &mut ChaCha8Rng) -> Branch {
    if rng.random_bool(0.5) {
        Branch::Foreground
    } else {
        Branch::Background
    }
}

fn refiner(rng: &mut ChaCha8Rng, d: usize, window: usize) -> (BranchRefiner, ParamStore) {
    let r = BranchRefiner::new("hrm.fg", d, window);
    let mut store = ParamStore::new();
    r.init(&mut store, rng, HrmToggles::ALL);
    randomize(&mut store, rng, 0.6);
    (r, store)
}

pub fn cross_attend_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let nc = rng.random_range(1..=3);
    let d_enc = rng.random_range(2..=5);
    let heads = rng.random_range(1..=2);
    let cfg = PipelineConfig {
        grid_h: h,
        grid_w: w,
        n_classes: nc,
        d_enc,
        n_attn_heads: heads,
        d_attn: heads * rng.random_range(1..=3),
        n_attn_layers: rng.random_range(1..=3),
        ..Default::default()
    };
    let stack = CrossAttentionStack::new(&cfg);
    let mut store = ParamStore::new();
    stack.init(&mut store, &mut rng);
    randomize(&mut store, &mut rng, 0.7);
    let image = random_tensor(&mut rng, &[h, w, d_enc], 1.0);
    let text = random_tensor(&mut rng, &[nc, d_enc], 1.0);
    let names = (0..nc).map(|n| format!("c{n}")).collect();
    let pair = EmbeddingPair::new(image.clone(), text.clone(), names).unwrap();
    let got = cross_attend(&store, &stack, &pair).unwrap();
    let want = oracle::naive_cross_attention(&matrix(&image.reshape(&[h * w, d_enc]).unwrap()), &matrix(&text), &xattn_of(&store, &stack));
    max_abs(got.values().data(), &want.concat())
}

pub fn pixel_refine_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, nc, d) = dims(&mut rng);
    let window = rng.random_range(1..=3);
    let (r, store) = refiner(&mut rng, d, window);
    let vol = random_volume(&mut rng, h, w, nc, d, Stage::Raw);
    let k = rng.random_range(1..=h * w);
    let part = random_partition(&mut rng, h * w, nc, k);
    let branch = branch_of(&mut rng);
    let got = pixel_refine(&store, &r, &vol, &part, branch).unwrap();
    let vis = part.visibility(branch);
    let (b0, b1) = (block_of(&store, &r.blocks[0]), block_of(&store, &r.blocks[1]));
    let mut worst: f64 = 0.0;
    for n in 0..nc {
        let v = &vis[n * h * w..(n + 1) * h * w];
        let y = oracle::naive_window_block(&class_tokens(vol.values(), n), h, w, window, false, v, &b0);
        let y = oracle::naive_window_block(&y, h, w, window, true, v, &b1);
        worst = worst.max(max_abs(&class_tokens(got.values(), n).concat(), &y.concat()));
    }
    worst
}

pub fn pooling_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, nc, d) = dims(&mut rng);
    let (r, store) = refiner(&mut rng, d, 1);
    let vol = random_volume(&mut rng, h, w, nc, d, Stage::Pixel);
    // every class needs a visible token in the chosen branch
    let (branch, k) = if h * w == 1 || rng.random_bool(0.5) {
        (Branch::Foreground, rng.random_range(1..=h * w))
    } else {
        (Branch::Background, rng.random_range(1..h * w))
    };
    let part = random_partition(&mut rng, h * w, nc, k);
    let got = category_prototype(&store, &r, &vol, &part, branch).unwrap();
    let vis = part.visibility(branch);
    let (ma, mm) = (mlp_of(&store, &r.cat_avg), mlp_of(&store, &r.cat_max));
    let want: Vec<f64> = (0..nc)
        .flat_map(|n| oracle::naive_category_prototype(&class_tokens(vol.values(), n), &vis[n * h * w..(n + 1) * h * w], &ma, &mm).unwrap())
        .collect();
    let cat_err = max_abs(got.data(), &want);

    let sem = semantic_prototype(&store, &r, &got).unwrap();
    let want_sem = oracle::naive_semantic_prototype(&matrix(&got.clone().reshape(&[nc, d]).unwrap()), &mlp_of(&store, &r.sem_avg), &mlp_of(&store, &r.sem_max));
    cat_err.max(max_abs(sem.data(), &want_sem))
}

pub fn fusion_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, nc, d) = dims(&mut rng);
    let (r, store) = refiner(&mut rng, d, 1);
    let vol = random_volume(&mut rng, h, w, nc, d, Stage::Pixel);
    let cat = random_tensor(&mut rng, &[1, nc, d], 1.0);
    let sem = random_tensor(&mut rng, &[1, 1, d], 1.0);
    let protos = PrototypeSet::new(cat.clone(), sem.clone(), branch_of(&mut rng)).unwrap();
    let got = fuse(&store, &r, &vol, &protos).unwrap();
    let per_class: Vec<Matrix> = (0..nc).map(|n| class_tokens(vol.values(), n)).collect();
    let want = oracle::naive_fuse(&per_class, &matrix(&cat.reshape(&[nc, d]).unwrap()), sem.data(), &mlp_of(&store, &r.gate));
    (0..nc).map(|n| max_abs(&class_tokens(got.values(), n).concat(), &want[n].concat())).fold(0.0, f64::max)
}

pub fn aggregation_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, nc, d) = dims(&mut rng);
    let kind = [AggregationKind::Weighted, AggregationKind::Hard, AggregationKind::Attention][rng.random_range(0..3)];
    let granularity = if rng.random_bool(0.5) { GateGranularity::PerChannel } else { GateGranularity::PerClass };
    let window = rng.random_range(1..=3);
    let cfg = PipelineConfig { grid_h: h, grid_w: w, n_classes: nc, d_corr: d, window_size: window, agg_gate: granularity, ..Default::default() };
    let agg = GatedAggregator::new(&cfg, kind);
    let mut store = ParamStore::new();
    agg.init(&mut store, &mut rng);
    randomize(&mut store, &mut rng, 0.6);
    let k = rng.random_range(1..=h * w);
    let part = random_partition(&mut rng, h * w, nc, k);
    let fg = restrict(&random_volume(&mut rng, h, w, nc, d, Stage::Fused), &part, true, Stage::Fused);
    let bg = restrict(&random_volume(&mut rng, h, w, nc, d, Stage::Fused), &part, false, Stage::Fused);
    let got = aggregate(&store, &agg, &fg, &bg, &part).unwrap();

    let (f, b) = (fg.values().data(), bg.values().data());
    let merged: Vec<f64> = match kind {
        AggregationKind::Hard => {
            let owned: Vec<bool> = (0..f.len()).map(|i| part.is_fg(i / (nc * d), (i / d) % nc)).collect();
            oracle::naive_hard_reassemble(f, b, &owned)
        }
        AggregationKind::Weighted => {
            let g = store.get(GatedAggregator::GATE_KEY).unwrap();
            let gd = g.shape()[1];
            let gate: Vec<f64> = (0..f.len())
                .map(|i| {
                    let (n, c) = ((i / d) % nc, i % d);
                    oracle::naive_sigmoid(g.data()[n * gd + if gd == 1 { 0 } else { c }])
                })
                .collect();
            oracle::naive_reassemble(f, b, &gate)
        }
        AggregationKind::Attention => {
            let (wk, _) = linear_of(&store, &agg.attn_key);
            let q = store.get(GatedAggregator::QUERY_KEY).unwrap().data().to_vec();
            let zero = vec![0.0; d];
            let score = |row: &[f64]| -> f64 { oracle::naive_linear(row, &wk, &zero).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt() };
            let mut out = vec![0.0; f.len()];
            for cell in 0..h * w * nc {
                let r = cell * d..(cell + 1) * d;
                let (wf, wb) = oracle::naive_softmax2(score(&f[r.clone()]), score(&b[r.clone()]));
                for i in r {
                    out[i] = wf * f[i] + wb * b[i];
                }
            }
            out
        }
    };
    let merged = disa_core::tensor::Tensor::new(&[h, w, nc, d], merged).unwrap();
    let all = vec![true; h * w];
    let (s0, s1) = (block_of(&store, &agg.smooth[0]), block_of(&store, &agg.smooth[1]));
    (0..nc)
        .map(|n| {
            let y = oracle::naive_window_block(&class_tokens(&merged, n), h, w, window, false, &all, &s0);
            let y = oracle::naive_window_block(&y, h, w, window, true, &all, &s1);
            max_abs(&class_tokens(got.values(), n).concat(), &y.concat())
        })
        .fold(0.0, f64::max)
}

pub fn iou_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = rng.random_range(1..=5);
    let len = rng.random_range(1..=64);
    let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..nc)).collect();
    let gt: Vec<usize> = (0..len).map(|_| rng.random_range(0..nc)).collect();
    let got = evaluate_masks(&pred, &gt, nc).unwrap();
    let (per, miou) = oracle::naive_iou(&pred, &gt, nc);
    let mut worst = (got.miou - miou).abs();
    for (a, b) in got.per_class.iter().zip(&per) {
        worst = worst.max(match (a, b) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        });
    }
    worst
}
