//! Recombining the refined foreground and background volumes into one, then
//! smoothing across the seam with two unmasked window blocks.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{GateGranularity, PipelineConfig};
use crate::error::{DisaError, Result};
use crate::hrm::WindowBlock;
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::types::{CorrelationVolume, Stage, TokenPartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationKind {
    /// Learned sigmoid gate `g·C_f + (1 - g)·C_b`.
    Weighted,
    /// Plain reassembly `C_f + C_b`.
    Hard,
    /// Per-token two-way softmax over branch scores.
    Attention,
}

impl FromStr for AggregationKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "weighted" => Ok(AggregationKind::Weighted),
            "hard" => Ok(AggregationKind::Hard),
            "attn" => Ok(AggregationKind::Attention),
            _ => Err("expected `weighted`, `hard` or `attn`".into()),
        }
    }
}

impl fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationKind::Weighted => "weighted",
            AggregationKind::Hard => "hard",
            AggregationKind::Attention => "attn",
        })
    }
}

#[derive(Debug, Clone)]
pub struct GatedAggregator {
    pub kind: AggregationKind,
    pub granularity: GateGranularity,
    pub n_classes: usize,
    pub d: usize,
    /// Attention scoring: key projection and query vector.
    pub attn_key: Linear,
    pub smooth: [WindowBlock; 2],
}

impl GatedAggregator {
    pub const GATE_KEY: &'static str = "agg.gate";
    pub const QUERY_KEY: &'static str = "agg.attn.q";

    pub fn new(cfg: &PipelineConfig, kind: AggregationKind) -> Self {
        let d = cfg.d_corr;
        GatedAggregator {
            kind,
            granularity: cfg.agg_gate,
            n_classes: cfg.n_classes,
            d,
            attn_key: Linear::new("agg.attn.k", d, d, false),
            smooth: [WindowBlock::new("agg.smooth.0", d, cfg.window_size, false), WindowBlock::new("agg.smooth.1", d, cfg.window_size, true)],
        }
    }

    fn gate_shape(&self) -> [usize; 2] {
        match self.granularity {
            GateGranularity::PerChannel => [self.n_classes, self.d],
            GateGranularity::PerClass => [self.n_classes, 1],
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self.kind {
            AggregationKind::Weighted => store.insert(Self::GATE_KEY, Tensor::zeros(&self.gate_shape())),
            AggregationKind::Hard => {}
            AggregationKind::Attention => {
                self.attn_key.init(store, rng, Init::Xavier(1.0));
                store.insert(Self::QUERY_KEY, Tensor::zeros(&[self.d, 1]));
            }
        }
        self.smooth.iter().for_each(|b| b.init(store, rng));
    }

    pub fn param_count(&self) -> usize {
        let mix = match self.kind {
            AggregationKind::Weighted => self.gate_shape().iter().product(),
            AggregationKind::Hard => 0,
            AggregationKind::Attention => self.attn_key.param_count() + self.d,
        };
        mix + self.smooth.iter().map(WindowBlock::param_count).sum::<usize>()
    }

    /// Merge two class-major branch volumes `[N_C, HW, D]` (no smoothing).
    pub fn merge<'t>(&self, ctx: &Ctx<'t>, fg: Var<'t>, bg: Var<'t>) -> Var<'t> {
        ctx.record("aggregate");
        let nc = fg.shape()[0];
        match self.kind {
            AggregationKind::Hard => fg.add(bg),
            AggregationKind::Weighted => {
                let [_, gd] = self.gate_shape();
                let g = ctx.param(Self::GATE_KEY).sigmoid().reshape(&[nc, 1, gd]);
                let one_minus = g.scale(-1.0).add_scalar(1.0);
                fg.mul(g).add(bg.mul(one_minus))
            }
            AggregationKind::Attention => {
                let q = ctx.param(Self::QUERY_KEY);
                let scale = 1.0 / (self.d as f64).sqrt();
                let sf = self.attn_key.forward(ctx, fg).matmul(q).scale(scale);
                let sb = self.attn_key.forward(ctx, bg).matmul(q).scale(scale);
                let w = sf.concat_last(sb).softmax_last();
                let shape = w.shape();
                let cols = |j: usize| -> Vec<usize> { (0..shape[0] * shape[1]).map(|r| r * 2 + j).collect() };
                let (nc_, hw) = (shape[0], shape[1]);
                let wf = w.gather_flat(std::rc::Rc::new(cols(0)), &[nc_, hw, 1]);
                let wb = w.gather_flat(std::rc::Rc::new(cols(1)), &[nc_, hw, 1]);
                fg.mul(wf).add(bg.mul(wb))
            }
        }
    }

    pub fn smooth<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, grid: (usize, usize)) -> Var<'t> {
        ctx.record("smooth");
        let shape = x.shape();
        let all = vec![true; shape[0] * shape[1]];
        let y = self.smooth[0].forward(ctx, x, grid, &all);
        self.smooth[1].forward(ctx, y, grid, &all)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, fg: Var<'t>, bg: Var<'t>, grid: (usize, usize)) -> Var<'t> {
        let m = self.merge(ctx, fg, bg);
        self.smooth(ctx, m, grid)
    }
}

/// Fails unless `fg` is zero off the foreground and `bg` zero on it.
pub fn check_branch_support(fg: &CorrelationVolume, bg: &CorrelationVolume, part: &TokenPartition) -> Result<()> {
    let (h, w, nc, d) = fg.dims();
    if bg.dims() != fg.dims() || part.tokens() != h * w || part.n_classes() != nc {
        return Err(DisaError::PartitionMismatch(format!(
            "branch volumes {:?} / {:?} against a partition of {} tokens x {} classes",
            fg.dims(),
            bg.dims(),
            part.tokens(),
            part.n_classes()
        )));
    }
    for t in 0..h * w {
        for n in 0..nc {
            let range = (t * nc + n) * d..(t * nc + n + 1) * d;
            let (owner, other) = if part.is_fg(t, n) { ("background", bg) } else { ("foreground", fg) };
            if other.values().data()[range].iter().any(|&v| v != 0.0) {
                return Err(DisaError::PartitionMismatch(format!("{owner} volume is nonzero at token {t}, class {n}, owned by the other branch")));
            }
        }
    }
    Ok(())
}

fn run(store: &ParamStore, agg: &GatedAggregator, fg: &CorrelationVolume, bg: &CorrelationVolume, part: &TokenPartition, smooth: bool) -> Result<CorrelationVolume> {
    fg.expect_stage(Stage::Fused, "aggregate")?;
    bg.expect_stage(Stage::Fused, "aggregate")?;
    check_branch_support(fg, bg, part)?;
    let (h, w, _, _) = fg.dims();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let m = agg.merge(&ctx, tape.constant(fg.class_major()), tape.constant(bg.class_major()));
    let out = if smooth { agg.smooth(&ctx, m, (h, w)) } else { m };
    CorrelationVolume::from_class_major(&out.value(), h, w, Stage::Aggregated)
}

/// Merge and smooth two fused branch volumes.
pub fn aggregate(store: &ParamStore, agg: &GatedAggregator, fg: &CorrelationVolume, bg: &CorrelationVolume, part: &TokenPartition) -> Result<CorrelationVolume> {
    run(store, agg, fg, bg, part, true)
}

/// The merge alone, before smoothing; used to inspect the mixing law.
pub fn merge_only(store: &ParamStore, agg: &GatedAggregator, fg: &CorrelationVolume, bg: &CorrelationVolume, part: &TokenPartition) -> Result<CorrelationVolume> {
    run(store, agg, fg, bg, part, false)
}

/// Gate-free reassembly, then smoothing.
pub fn hard_aggregate(store: &ParamStore, agg: &GatedAggregator, fg: &CorrelationVolume, bg: &CorrelationVolume, part: &TokenPartition) -> Result<CorrelationVolume> {
    let hard = GatedAggregator { kind: AggregationKind::Hard, ..agg.clone() };
    run(store, &hard, fg, bg, part, true)
}

/// Attention-weighted reassembly, then smoothing. `agg` must hold attention weights.
pub fn attn_aggregate(store: &ParamStore, agg: &GatedAggregator, fg: &CorrelationVolume, bg: &CorrelationVolume, part: &TokenPartition) -> Result<CorrelationVolume> {
    let att = GatedAggregator { kind: AggregationKind::Attention, ..agg.clone() };
    run(store, &att, fg, bg, part, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TiePolicy;
    use rand::SeedableRng;

    fn setup(kind: AggregationKind) -> (GatedAggregator, ParamStore) {
        let cfg = PipelineConfig { grid_h: 2, grid_w: 2, n_classes: 2, d_corr: 3, window_size: 1, k_fg: 2, ..Default::default() };
        let agg = GatedAggregator::new(&cfg, kind);
        let mut store = ParamStore::new();
        agg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        // zero output projections make smoothing the identity
        for b in &agg.smooth {
            store.set(&b.o.weight_key(), Tensor::zeros(&[3, 3])).unwrap();
            store.set(&b.o.bias_key(), Tensor::zeros(&[3])).unwrap();
        }
        (agg, store)
    }

    fn branches() -> (CorrelationVolume, CorrelationVolume, TokenPartition, Tensor) {
        let part = TokenPartition::from_columns(&[vec![0, 3], vec![1, 2]], 4, 2, TiePolicy::LowestIndex).unwrap();
        let full = Tensor::from_fn(&[2, 2, 2, 3], |i| (i as f64 * 0.61).sin());
        let mut fg = full.clone();
        let mut bg = full.clone();
        for t in 0..4 {
            for n in 0..2 {
                let r = (t * 2 + n) * 3..(t * 2 + n + 1) * 3;
                if part.is_fg(t, n) { bg.data_mut()[r].fill(0.0) } else { fg.data_mut()[r].fill(0.0) }
            }
        }
        (CorrelationVolume::new(fg, Stage::Fused).unwrap(), CorrelationVolume::new(bg, Stage::Fused).unwrap(), part, full)
    }

    #[test]
    fn initial_gate_halves_the_reassembly() {
        let (agg, store) = setup(AggregationKind::Weighted);
        let (fg, bg, part, full) = branches();
        let out = aggregate(&store, &agg, &fg, &bg, &part).unwrap();
        for (a, b) in out.values().data().iter().zip(full.data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_keeps_only_foreground() {
        let (agg, mut store) = setup(AggregationKind::Weighted);
        store.set(GatedAggregator::GATE_KEY, Tensor::full(&[2, 3], 800.0)).unwrap();
        let (fg, bg, part, _) = branches();
        let out = aggregate(&store, &agg, &fg, &bg, &part).unwrap();
        assert!(out.values().max_abs_diff(fg.values()) < 1e-12);
    }

    #[test]
    fn hard_reassembly_restores_the_volume() {
        let (agg, store) = setup(AggregationKind::Weighted);
        let (fg, bg, part, full) = branches();
        let out = hard_aggregate(&store, &agg, &fg, &bg, &part).unwrap();
        assert!(out.values().max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn off_branch_values_are_a_partition_mismatch() {
        let (agg, store) = setup(AggregationKind::Hard);
        let (fg, _, part, full) = branches();
        let bad = CorrelationVolume::new(full, Stage::Fused).unwrap();
        assert!(matches!(aggregate(&store, &agg, &fg, &bad, &part), Err(DisaError::PartitionMismatch(_))));
    }

    #[test]
    fn attention_mix_of_equal_values_is_that_value() {
        let (agg, store) = setup(AggregationKind::Attention);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let x = Tensor::from_fn(&[2, 4, 3], |i| i as f64 * 0.1 - 1.0);
        let m = agg.merge(&ctx, tape.constant(x.clone()), tape.constant(x.clone()));
        assert!(m.value().max_abs_diff(&x) < 1e-12);
    }
}
