//! Parameter counts, multiply-accumulate estimates and forward timing.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::autograd::Tape;
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::hrm::window_groups;
use crate::model::{Disentangle, DisaModel, SceneInput};
use crate::nn::{Ctx, ParamStore};

/// Ops whose time counts toward the saliency path.
pub const SALIENCY_OPS: [&str; 4] = ["cross_attend", "itm_head", "itm_loss", "saliency"];

/// Forward multiply-accumulates per component, from layer shapes alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MacEstimate {
    pub components: BTreeMap<String, u64>,
}

impl MacEstimate {
    pub fn total(&self) -> u64 {
        self.components.values().sum()
    }

    pub fn get(&self, name: &str) -> u64 {
        self.components.get(name).copied().unwrap_or(0)
    }

    /// `D×D` projection and MLP terms of the refinement and smoothing blocks.
    pub fn mlp(&self) -> u64 {
        self.get("hrm_mlp") + self.get("smooth_mlp")
    }
}

fn linear(rows: usize, d_in: usize, d_out: usize) -> u64 {
    (rows * d_in * d_out) as u64
}

/// Score and mixing MACs of one window block over `n_classes` maps.
fn window_attention(cfg: &PipelineConfig, shifted: bool, d: usize) -> u64 {
    let visible = vec![true; cfg.tokens()];
    let groups = window_groups(cfg.grid_h, cfg.grid_w, 1, cfg.window_size, shifted, &visible);
    let per_map: usize = groups.iter().map(|g| 2 * g.len() * g.len() * d).sum();
    (per_map * cfg.n_classes) as u64
}

pub fn estimate_macs(model: &DisaModel) -> MacEstimate {
    let cfg = &model.cfg;
    let (hw, nc, d) = (cfg.tokens(), cfg.n_classes, cfg.d_corr);
    let rows = hw * nc;
    let mut m = BTreeMap::new();
    m.insert("correlation".to_string(), (hw * nc * cfg.d_enc) as u64 + linear(rows, 1, d));

    match model.variant.disentangle {
        Disentangle::Saliency => {
            let da = cfg.d_attn;
            let mut x = linear(nc, cfg.d_enc, da) + linear(hw, cfg.d_enc, da);
            // per layer: q and o on the text state, k and v on image memory, scores and mixing
            x += cfg.n_attn_layers as u64 * (2 * linear(nc, da, da) + 2 * linear(hw, da, da) + 2 * (nc * hw * da) as u64);
            m.insert("cross_attention".to_string(), x);
            let itm = linear(nc, hw, da) + linear(nc, da, 2);
            // the saliency map costs one head pass forward and one backward
            m.insert("itm_saliency".to_string(), 3 * itm);
        }
        Disentangle::TokenLevel => {
            m.insert("token_head".to_string(), linear(rows, d, 1));
        }
        _ => {}
    }

    let branches = if matches!(model.variant.disentangle, Disentangle::None) { 1 } else { 2 };
    let t = model.variant.hrm;
    let (mut hrm_mlp, mut hrm_attn) = (0u64, 0u64);
    if t.pixel {
        hrm_mlp += 2 * 4 * linear(rows, d, d);
        hrm_attn += window_attention(cfg, false, d) + window_attention(cfg, true, d);
    }
    if t.category || t.semantic {
        // pooled prototypes always run; the semantic MLPs only when enabled
        hrm_mlp += 2 * 2 * linear(nc, d, d);
        if t.semantic {
            hrm_mlp += 2 * 2 * linear(1, d, d);
        }
        hrm_mlp += linear(rows, 2 * d, d) + linear(rows, d, d);
    }
    m.insert("hrm_mlp".to_string(), branches * hrm_mlp);
    m.insert("hrm_attention".to_string(), branches * hrm_attn);

    m.insert("smooth_mlp".to_string(), 2 * 4 * linear(rows, d, d));
    m.insert("smooth_attention".to_string(), window_attention(cfg, false, d) + window_attention(cfg, true, d));
    if branches == 2 {
        let mix = match model.agg.kind {
            crate::aggregate::AggregationKind::Attention => 2 * linear(rows, d, d) + 2 * linear(rows, d, 1),
            _ => rows as u64 * d as u64,
        };
        m.insert("aggregate".to_string(), mix);
    }

    let dec = &model.dec;
    let (g, d1, d2) = (dec.d_guide, dec.d1, dec.d2);
    let mut dm = 3 * linear(hw, cfg.d_enc, g);
    dm += linear(rows, d + g, 4 * d1);
    dm += linear(4 * rows, d1 + g, 4 * d2);
    dm += linear(16 * rows, d2, 1);
    m.insert("decoder".to_string(), dm);
    MacEstimate { components: m }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub variant: String,
    pub param_count: usize,
    /// Scalars actually held by an initialized store.
    pub store_param_count: usize,
    pub macs: MacEstimate,
    pub runs: usize,
    pub forward_median_ms: f64,
    pub saliency_median_ms: f64,
    /// Summed saliency-path time over summed forward time.
    pub saliency_fraction: f64,
}

impl EfficiencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain report serializes")
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "variant {}\nparameters {} (store {})\nMACs {}\nforward median {:.3} ms over {} runs\nsaliency path median {:.3} ms ({:.1}% of forward)\n",
            self.variant,
            self.param_count,
            self.store_param_count,
            self.macs.total(),
            self.forward_median_ms,
            self.runs,
            self.saliency_median_ms,
            100.0 * self.saliency_fraction
        );
        for (k, v) in &self.macs.components {
            s.push_str(&format!("  {k}: {v}\n"));
        }
        s
    }
}

/// Time of one label-free forward pass split by op; the last op runs to the end of the pass.
pub fn timed_forward(model: &DisaModel, store: &ParamStore, input: &SceneInput) -> Result<(Duration, BTreeMap<&'static str, Duration>)> {
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let start = Instant::now();
    model.forward(&ctx, input, None)?;
    let end = Instant::now();
    let marks = ctx.take_timed_trace();
    let mut per_op: BTreeMap<&'static str, Duration> = BTreeMap::new();
    for (i, (op, t)) in marks.iter().enumerate() {
        let next = marks.get(i + 1).map_or(end, |m| m.1);
        *per_op.entry(op).or_default() += next - *t;
    }
    Ok((end - start, per_op))
}

/// Measure `runs` forward passes (at least 20) over `inputs`, cycling through them.
pub fn efficiency_report(model: &DisaModel, store: &ParamStore, inputs: &[SceneInput], runs: usize) -> Result<EfficiencyReport> {
    let runs = runs.max(20);
    let (mut totals, mut sals) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
    if !inputs.is_empty() {
        // one untimed pass warms caches and the allocator
        timed_forward(model, store, &inputs[0])?;
        for r in 0..runs {
            let (total, ops) = timed_forward(model, store, &inputs[r % inputs.len()])?;
            let sal: Duration = SALIENCY_OPS.iter().filter_map(|op| ops.get(op)).sum();
            totals.push(total.as_secs_f64() * 1e3);
            sals.push(sal.as_secs_f64() * 1e3);
        }
    }
    let sum_total: f64 = totals.iter().sum();
    let sum_sal: f64 = sals.iter().sum();
    Ok(EfficiencyReport {
        variant: model.variant.label(),
        param_count: model.param_count(),
        store_param_count: model.init_params().numel(),
        macs: estimate_macs(model),
        runs: totals.len(),
        forward_median_ms: median(&mut totals),
        saliency_median_ms: median(&mut sals),
        saliency_fraction: if sum_total > 0.0 { sum_sal / sum_total } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVariant;

    #[test]
    fn doubling_width_quadruples_mlp_terms() {
        let base = PipelineConfig::default();
        let wide = PipelineConfig { d_corr: 2 * base.d_corr, ..base.clone() };
        let a = estimate_macs(&DisaModel::new(base, ModelVariant::default()).unwrap());
        let b = estimate_macs(&DisaModel::new(wide, ModelVariant::default()).unwrap());
        assert_eq!(b.mlp(), 4 * a.mlp());
        assert_eq!(b.get("hrm_attention"), 2 * a.get("hrm_attention"));
    }

    #[test]
    fn median_of_even_and_odd_runs() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn label_free_variants_have_no_saliency_component() {
        let m = DisaModel::new(PipelineConfig::default(), "none/p1c1s1/weighted".parse().unwrap()).unwrap();
        let e = estimate_macs(&m);
        assert_eq!(e.get("cross_attention"), 0);
        assert!(e.get("hrm_mlp") > 0);
    }
}
