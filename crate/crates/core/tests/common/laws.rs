//! Randomized law checks shared by the property tests and the acceptance run.

use disa_core::config::PipelineConfig;
use disa_core::hrm::{fuse, pixel_refine, BranchRefiner, HrmToggles};
use disa_core::nn::ParamStore;
use disa_core::sdm::{matching_score_objective, objective_gradient, objective_value, per_class_itm_objective, select_tokens, ItmHead, ItmLabel};
use disa_core::tensor::Tensor;
use disa_core::types::{AttentionMap, Branch, CorrelationVolume, PrototypeSet, SaliencyStack, Stage};
use disa_oracles as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Column-normalized random attention `[HW, N_C]`.
pub fn random_attention(rng: &mut ChaCha8Rng, hw: usize, nc: usize) -> AttentionMap {
    let raw: Vec<f64> = (0..hw * nc).map(|_| rng.random_range(0.05..1.0)).collect();
    let mut sums = vec![0.0; nc];
    for (i, v) in raw.iter().enumerate() {
        sums[i % nc] += v;
    }
    let vals = raw.iter().enumerate().map(|(i, v)| v / sums[i % nc]).collect();
    AttentionMap::new(Tensor::new(&[hw, nc], vals).unwrap()).unwrap()
}

/// Relative error `‖g − fd‖ / max(‖g‖, ‖fd‖)` between the taped gradient of the
/// saliency objective and central differences, on at most 8 tokens.
pub fn saliency_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=2), rng.random_range(1..=4));
    let nc = rng.random_range(2..=3);
    let cfg = PipelineConfig { grid_h: h, grid_w: w, n_classes: nc, d_attn: 6, ..Default::default() };
    let head = ItmHead::new(&cfg);
    let mut store = ParamStore::new();
    head.init(&mut store, &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let attn = random_attention(&mut rng, h * w, nc);
    let labels: Vec<ItmLabel> = (0..nc).map(|n| ItmLabel::new(n, rng.random_bool(0.5))).collect();
    let training = seed % 2 == 0;
    let (g, f): (Tensor, Box<dyn Fn(&[f64]) -> f64>) = if training {
        let g = objective_gradient(&attn, &store, |ctx, a| per_class_itm_objective(ctx, &head, a, &labels)).unwrap();
        let (store, head, labels) = (store.clone(), head.clone(), labels.clone());
        (g, Box::new(move |x: &[f64]| objective_value(&Tensor::new(&[h * w, nc], x.to_vec()).unwrap(), &store, |ctx, a| per_class_itm_objective(ctx, &head, a, &labels))))
    } else {
        let g = objective_gradient(&attn, &store, |ctx, a| matching_score_objective(ctx, &head, a)).unwrap();
        let (store, head) = (store.clone(), head.clone());
        (g, Box::new(move |x: &[f64]| objective_value(&Tensor::new(&[h * w, nc], x.to_vec()).unwrap(), &store, |ctx, a| matching_score_objective(ctx, &head, a))))
    };
    let fd = oracle::finite_difference(f, attn.values().data(), 1e-6);
    let diff: f64 = g.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(g.data()).max(norm(&fd));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Top-k partitions over every k on one random saliency stack with many ties.
/// Returns a description of the first violated law.
pub fn partition_laws(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let nc = rng.random_range(1..=3);
    let hw = h * w;
    let levels = rng.random_range(1..=4);
    let maps: Vec<f64> = (0..hw * nc).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect();
    let sal = SaliencyStack::new(Tensor::new(&[h, w, nc], maps).unwrap(), random_attention(&mut rng, hw, nc)).unwrap();
    for k in 1..=hw {
        let part = select_tokens(&sal, k).map_err(|e| e.to_string())?;
        let (fgv, bgv) = (part.visibility(Branch::Foreground), part.visibility(Branch::Background));
        for i in 0..hw * nc {
            if fgv[i] == bgv[i] {
                return Err(format!("k={k}: slot {i} is in both or neither branch"));
            }
        }
        for n in 0..nc {
            let fg = part.fg_tokens(n);
            if fg.len() != k {
                return Err(format!("k={k}: class {n} has {} foreground tokens", fg.len()));
            }
            let mut got = fg.clone();
            got.sort_unstable();
            if got != oracle::naive_topk(&sal.column(n), k) {
                return Err(format!("k={k}: class {n} disagrees with the sort oracle"));
            }
        }
    }
    Ok(())
}

/// Largest change in foreground outputs at foreground positions after
/// perturbing every background position of the input.
pub fn leakage(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, nc, d) = dims(&mut rng);
    let (h, w) = (h + 1, w + 1);
    let window = rng.random_range(1..=3);
    let r = BranchRefiner::new("hrm.fg", d, window);
    let mut store = ParamStore::new();
    r.init(&mut store, &mut rng, HrmToggles::ALL);
    randomize(&mut store, &mut rng, 0.6);
    let k = rng.random_range(1..h * w);
    let part = random_partition(&mut rng, h * w, nc, k);
    let vol = random_volume(&mut rng, h, w, nc, d, Stage::Raw);
    let mut poked = vol.values().clone();
    for t in 0..h * w {
        for n in 0..nc {
            if !part.is_fg(t, n) {
                for c in 0..d {
                    poked.data_mut()[(t * nc + n) * d + c] += rng.random_range(-5.0..5.0);
                }
            }
        }
    }
    let poked = CorrelationVolume::new(poked, Stage::Raw).unwrap();
    let a = pixel_refine(&store, &r, &vol, &part, Branch::Foreground).unwrap();
    let b = pixel_refine(&store, &r, &poked, &part, Branch::Foreground).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..h * w {
        for n in 0..nc {
            if part.is_fg(t, n) {
                let r = (t * nc + n) * d..(t * nc + n + 1) * d;
                worst = worst.max(max_abs(&a.values().data()[r.clone()], &b.values().data()[r]));
            }
        }
    }
    worst
}

/// Gate laws: a zero gate MLP halves the volume exactly; a random gate lies
/// strictly inside (0, 1) and never grows a value.
pub fn gate_laws(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, nc, d) = dims(&mut rng);
    let r = BranchRefiner::new("hrm.bg", d, 1);
    let mut store = ParamStore::new();
    r.init(&mut store, &mut rng, HrmToggles::ALL);
    let vol = random_volume(&mut rng, h, w, nc, d, Stage::Pixel);
    let protos = PrototypeSet::new(random_tensor(&mut rng, &[1, nc, d], 1.0), random_tensor(&mut rng, &[1, 1, d], 1.0), Branch::Background).unwrap();

    let mut zero = store.clone();
    for l in [&r.gate.first, &r.gate.second] {
        zero.set(&l.weight_key(), Tensor::zeros(&[l.d_in, l.d_out])).unwrap();
        zero.set(&l.bias_key(), Tensor::zeros(&[l.d_out])).unwrap();
    }
    let half = fuse(&zero, &r, &vol, &protos).unwrap();
    for (o, i) in half.values().data().iter().zip(vol.values().data()) {
        if *o != 0.5 * i {
            return Err(format!("zero gate gave {o} for input {i}"));
        }
    }

    randomize(&mut store, &mut rng, 0.6);
    let ones = CorrelationVolume::new(Tensor::full(&[h, w, nc, d], 1.0), Stage::Pixel).unwrap();
    let gate = fuse(&store, &r, &ones, &protos).unwrap();
    if let Some(g) = gate.values().data().iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(format!("gate value {g} outside (0, 1)"));
    }
    let out = fuse(&store, &r, &vol, &protos).unwrap();
    for (o, i) in out.values().data().iter().zip(vol.values().data()) {
        if o.abs() > i.abs() {
            return Err(format!("gated |{o}| exceeds input |{i}|"));
        }
    }
    Ok(())
}
