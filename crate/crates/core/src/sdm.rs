//! Saliency-aware disentanglement: text-to-image cross-attention, the
//! image-text matching head, gradient saliency on the attention map, the raw
//! correlation volume, and top-k foreground selection.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::PipelineConfig;
use crate::error::{shape_err, DisaError, Result};
use crate::nn::{Ctx, Init, Linear, Mlp, ParamStore};
use crate::tensor::Tensor;
use crate::types::{AttentionMap, CorrelationVolume, EmbeddingPair, SaliencyStack, Stage, TiePolicy, TokenPartition};

/// Stacked cross-attention layers with text queries and image keys/values.
#[derive(Debug, Clone)]
pub struct CrossAttentionStack {
    pub text_in: Linear,
    pub image_in: Linear,
    /// Per layer: query, key, value and output projections.
    pub layers: Vec<[Linear; 4]>,
    pub n_heads: usize,
    pub d_attn: usize,
}

impl CrossAttentionStack {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let d = cfg.d_attn;
        let layers = (0..cfg.n_attn_layers)
            .map(|l| ["q", "k", "v", "o"].map(|p| Linear::new(format!("sdm.xattn.{l}.{p}"), d, d, false)))
            .collect();
        CrossAttentionStack {
            text_in: Linear::new("sdm.xattn.text_in", cfg.d_enc, d, true),
            image_in: Linear::new("sdm.xattn.image_in", cfg.d_enc, d, true),
            layers,
            n_heads: cfg.n_attn_heads,
            d_attn: d,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.text_in.init(store, rng, Init::Xavier(1.0));
        self.image_in.init(store, rng, Init::Xavier(1.0));
        for layer in &self.layers {
            for p in layer {
                p.init(store, rng, Init::Xavier(1.0));
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.text_in.param_count() + self.image_in.param_count() + self.layers.iter().flatten().map(Linear::param_count).sum::<usize>()
    }

    /// `image: [HW, D_enc]`, `text: [N_C, D_enc]` → head-averaged final-layer
    /// attention `[HW, N_C]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: Var<'t>, text: Var<'t>) -> Var<'t> {
        ctx.record("cross_attend");
        let (hw, nc) = (image.shape()[0], text.shape()[0]);
        let (h, dh) = (self.n_heads, self.d_attn / self.n_heads);
        let mut state = self.text_in.forward(ctx, text);
        let memory = self.image_in.forward(ctx, image);
        let mut probs = None;
        for [wq, wk, wv, wo] in &self.layers {
            let q = wq.forward(ctx, state).reshape(&[nc, h, dh]).permute(&[1, 0, 2]);
            let k_t = wk.forward(ctx, memory).reshape(&[hw, h, dh]).permute(&[1, 2, 0]);
            let v = wv.forward(ctx, memory).reshape(&[hw, h, dh]).permute(&[1, 0, 2]);
            let p = q.matmul(k_t).scale(1.0 / (dh as f64).sqrt()).softmax_last();
            let out = p.matmul(v).permute(&[1, 0, 2]).reshape(&[nc, self.d_attn]);
            state = state.add(wo.forward(ctx, out));
            probs = Some(p);
        }
        // [heads, N_C, HW] -> [N_C, HW] -> [HW, N_C]
        probs.expect("at least one layer").mean_axis(0).permute(&[1, 0])
    }
}

/// Two-way matched / not-matched classifier over one class's attention column.
///
/// The column is scaled by `HW` so a uniform map feeds ones into the MLP.
/// Output index 1 is "matched".
#[derive(Debug, Clone)]
pub struct ItmHead {
    pub mlp: Mlp,
    pub tokens: usize,
}

impl ItmHead {
    pub fn new(cfg: &PipelineConfig) -> Self {
        ItmHead { mlp: Mlp::new("sdm.itm", cfg.tokens(), cfg.d_attn, 2), tokens: cfg.tokens() }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.mlp.init(store, rng);
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    /// `attn: [HW, N_C]` → logits `[N_C, 2]`.
    pub fn logits<'t>(&self, ctx: &Ctx<'t>, attn: Var<'t>) -> Var<'t> {
        ctx.record("itm_head");
        self.mlp.forward(ctx, attn.permute(&[1, 0]).scale(self.tokens as f64))
    }
}

/// One (image, class) pair with its one-hot target `[not matched, matched]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItmLabel {
    pub class: usize,
    pub target: [f64; 2],
}

impl ItmLabel {
    pub fn new(class: usize, matched: bool) -> Self {
        ItmLabel { class, target: if matched { [0.0, 1.0] } else { [1.0, 0.0] } }
    }
}

fn check_labels(labels: &[ItmLabel], n_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(DisaError::Label("no image-text pairs to score".into()));
    }
    for l in labels {
        if l.class >= n_classes {
            return Err(DisaError::Label(format!("class {} out of range for {n_classes} classes", l.class)));
        }
        let one_hot = (l.target == [0.0, 1.0]) || (l.target == [1.0, 0.0]);
        if !one_hot {
            return Err(DisaError::Label(format!("target {:?} for class {} is not one-hot", l.target, l.class)));
        }
    }
    Ok(())
}

/// Mean cross-entropy over the listed pairs.
pub fn itm_loss<'t>(ctx: &Ctx<'t>, head: &ItmHead, attn: Var<'t>, labels: &[ItmLabel]) -> Result<Var<'t>> {
    let nc = attn.shape()[1];
    check_labels(labels, nc)?;
    ctx.record("itm_loss");
    let logp = head.logits(ctx, attn).log_softmax_last();
    let mut w = Tensor::zeros(&[nc, 2]);
    for l in labels {
        for j in 0..2 {
            w.data_mut()[l.class * 2 + j] -= l.target[j] / labels.len() as f64;
        }
    }
    Ok(logp.mul(ctx.tape.constant(w)).sum())
}

/// Positives are the present classes; negatives are as many absent classes,
/// drawn uniformly without replacement (fewer if not enough are absent).
pub fn sample_itm_pairs(present: &[bool], rng: &mut ChaCha8Rng) -> Vec<ItmLabel> {
    let pos: Vec<usize> = (0..present.len()).filter(|&n| present[n]).collect();
    let neg: Vec<usize> = (0..present.len()).filter(|&n| !present[n]).collect();
    let mut out: Vec<ItmLabel> = pos.iter().map(|&n| ItmLabel::new(n, true)).collect();
    let take = pos.len().min(neg.len());
    let mut picked: Vec<usize> = sample(rng, neg.len(), take).into_iter().map(|i| neg[i]).collect();
    picked.sort_unstable();
    out.extend(picked.into_iter().map(|n| ItmLabel::new(n, false)));
    out
}

/// `∂objective/∂A` as `[HW, N_C]`, before any rectification.
///
/// The attention values enter a fresh tape as the only tracked leaf; `store`
/// parameters are read as constants, so the gradient stops at the map. An
/// objective that never reads the map has zero gradient.
pub fn objective_gradient<F>(attn: &AttentionMap, store: &ParamStore, objective: F) -> Result<Tensor>
where
    F: for<'t> FnOnce(&Ctx<'t>, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let a = tape.var(attn.values().clone());
    let out = objective(&ctx, a);
    let value = out.value();
    if value.len() != 1 {
        return Err(DisaError::Gradient(format!("objective must be scalar, got shape {:?}", value.shape())));
    }
    if !value.is_finite() {
        return Err(DisaError::Gradient(format!("objective value {} is not finite", value.data()[0])));
    }
    let grads = tape.backward(out);
    let g = grads.get(a).cloned().unwrap_or_else(|| Tensor::zeros(attn.values().shape()));
    if !g.is_finite() {
        return Err(DisaError::Gradient("non-finite gradient at the attention map".into()));
    }
    Ok(g)
}

/// Value of `objective` at a fixed attention map.
pub fn objective_value<F>(attn: &Tensor, store: &ParamStore, objective: F) -> f64
where
    F: for<'t> FnOnce(&Ctx<'t>, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let out = objective(&ctx, tape.constant(attn.clone()));
    out.value().data()[0]
}

/// `S = relu(∂objective/∂A) ⊙ A`, reshaped to `[H, W, N_C]`. A constant
/// objective gives an all-zero stack.
pub fn saliency<F>(attn: &AttentionMap, grid: (usize, usize), store: &ParamStore, objective: F) -> Result<SaliencyStack>
where
    F: for<'t> FnOnce(&Ctx<'t>, Var<'t>) -> Var<'t>,
{
    let (h, w) = grid;
    if h * w != attn.tokens() {
        return Err(shape_err(format!("grid {h}x{w} does not match {} attention tokens", attn.tokens())));
    }
    let g = objective_gradient(attn, store, objective)?;
    let maps: Vec<f64> = g.data().iter().zip(attn.values().data()).map(|(&gv, &av)| gv.max(0.0) * av).collect();
    SaliencyStack::new(Tensor::new(&[h, w, attn.n_classes()], maps)?, attn.clone())
}

/// Training objective: sum of per-class cross-entropies against `labels`.
/// Because the head scores each column on its own, the gradient at column
/// `n` is the gradient of that class's own pair loss.
pub fn per_class_itm_objective<'t>(ctx: &Ctx<'t>, head: &ItmHead, attn: Var<'t>, labels: &[ItmLabel]) -> Var<'t> {
    let logp = head.logits(ctx, attn).log_softmax_last();
    let nc = attn.shape()[1];
    let mut w = Tensor::zeros(&[nc, 2]);
    for l in labels {
        for j in 0..2 {
            w.data_mut()[l.class * 2 + j] -= l.target[j];
        }
    }
    logp.mul(attn.tape().constant(w)).sum()
}

/// Inference objective: summed matched probability over all classes.
pub fn matching_score_objective<'t>(ctx: &Ctx<'t>, head: &ItmHead, attn: Var<'t>) -> Var<'t> {
    let p = head.logits(ctx, attn).softmax_last();
    let nc = attn.shape()[1];
    let pick = Tensor::from_fn(&[nc, 2], |i| (i % 2) as f64);
    p.mul(attn.tape().constant(pick)).sum()
}

/// Cosine similarity `[HW, N_C]` between every image token and text row.
pub fn cosine_matrix(pair: &EmbeddingPair) -> Result<Tensor> {
    let d = pair.d_enc();
    let nc = pair.n_classes();
    let text_norms: Vec<f64> = pair.text().data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let hw = pair.image().len() / d;
    let mut out = Vec::with_capacity(hw * nc);
    for (t, row) in pair.image().data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let (_, w) = pair.grid();
            return Err(DisaError::ZeroNorm(format!("image embedding at ({}, {})", t / w, t % w)));
        }
        for (n, txt) in pair.text().data().chunks(d).enumerate() {
            let dot: f64 = row.iter().zip(txt).map(|(a, b)| a * b).sum();
            out.push(dot / (norm * text_norms[n]));
        }
    }
    Tensor::new(&[hw, nc], out)
}

/// Lifts the per-(token, class) cosine to `D` channels with one affine map
/// shared by all classes.
#[derive(Debug, Clone)]
pub struct CorrelationLift {
    pub lift: Linear,
}

impl CorrelationLift {
    pub fn new(cfg: &PipelineConfig) -> Self {
        CorrelationLift { lift: Linear::new("sdm.lift", 1, cfg.d_corr, true) }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.lift.init(store, rng, Init::Xavier(1.0));
    }

    pub fn param_count(&self) -> usize {
        self.lift.param_count()
    }

    /// `cosine: [HW, N_C]` → class-major volume `[N_C, HW, D]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, cosine: &Tensor) -> Var<'t> {
        ctx.record("correlation");
        let (hw, nc) = (cosine.shape()[0], cosine.shape()[1]);
        let c = ctx.tape.constant(cosine.permute(&[1, 0]).reshape(&[nc, hw, 1]).expect("same size"));
        self.lift.forward(ctx, c)
    }
}

/// Raw correlation volume `[H, W, N_C, D]` under the stored lift weights.
pub fn correlation(store: &ParamStore, lift: &CorrelationLift, pair: &EmbeddingPair) -> Result<CorrelationVolume> {
    let cos = cosine_matrix(pair)?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let v = lift.forward(&ctx, &cos).value();
    let (h, w) = pair.grid();
    CorrelationVolume::from_class_major(&v, h, w, Stage::Raw)
}

/// Indices of the `k` largest scores; equal scores rank by ascending index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps ascending index among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Top-`k` tokens per class by raw saliency.
pub fn select_tokens(sal: &SaliencyStack, k: usize) -> Result<TokenPartition> {
    let (h, w) = sal.grid();
    let hw = h * w;
    if k == 0 || k > hw {
        return Err(DisaError::Config(format!("k = {k} must lie in 1..={hw}")));
    }
    let columns: Vec<Vec<usize>> = (0..sal.n_classes()).map(|n| topk_indices(&sal.column(n), k)).collect();
    TokenPartition::from_columns(&columns, hw, k, TiePolicy::LowestIndex)
}

/// Zero-filled foreground and background copies; they sum to `corr` exactly.
pub fn split_volume(corr: &CorrelationVolume, part: &TokenPartition) -> Result<(CorrelationVolume, CorrelationVolume)> {
    corr.expect_stage(Stage::Raw, "split_volume")?;
    let (h, w, nc, d) = corr.dims();
    if part.tokens() != h * w || part.n_classes() != nc {
        return Err(shape_err(format!(
            "partition over {} tokens x {} classes does not fit a {h}x{w}x{nc} volume",
            part.tokens(),
            part.n_classes()
        )));
    }
    let mut fg = corr.values().clone();
    let mut bg = corr.values().clone();
    for t in 0..h * w {
        for n in 0..nc {
            let range = (t * nc + n) * d..(t * nc + n + 1) * d;
            if part.is_fg(t, n) {
                bg.data_mut()[range].fill(0.0);
            } else {
                fg.data_mut()[range].fill(0.0);
            }
        }
    }
    Ok((CorrelationVolume::new(fg, Stage::Raw)?, CorrelationVolume::new(bg, Stage::Raw)?))
}

/// Cross-attention map for a pair under the stored weights.
pub fn cross_attend(store: &ParamStore, stack: &CrossAttentionStack, pair: &EmbeddingPair) -> Result<AttentionMap> {
    let (h, w) = pair.grid();
    let d = pair.d_enc();
    if stack.text_in.d_in != d {
        return Err(shape_err(format!("embedding width {d}, attention stack expects {}", stack.text_in.d_in)));
    }
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let image = tape.constant(pair.image().clone().reshape(&[h * w, d])?);
    let text = tape.constant(pair.text().clone());
    AttentionMap::new((*stack.forward(&ctx, image, text).value()).clone())
}
