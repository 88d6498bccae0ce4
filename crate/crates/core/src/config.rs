//! Pipeline configuration and its validation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{DisaError, Result};
use crate::kv::{render, KvMap};

/// How the saliency gradient is formed from the matching objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyMode {
    /// Each class column is differentiated through its own pair objective.
    PerClass,
    /// One objective over the sampled batch of pairs; unsampled classes get
    /// zero gradient.
    Batch,
}

/// Granularity of the learnable foreground/background mixing weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateGranularity {
    PerChannel,
    PerClass,
}

impl FromStr for SaliencyMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_class" => Ok(SaliencyMode::PerClass),
            "batch" => Ok(SaliencyMode::Batch),
            _ => Err("expected `per_class` or `batch`".into()),
        }
    }
}

impl fmt::Display for SaliencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaliencyMode::PerClass => "per_class",
            SaliencyMode::Batch => "batch",
        })
    }
}

impl FromStr for GateGranularity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "channel" => Ok(GateGranularity::PerChannel),
            "class" => Ok(GateGranularity::PerClass),
            _ => Err("expected `channel` or `class`".into()),
        }
    }
}

impl fmt::Display for GateGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateGranularity::PerChannel => "channel",
            GateGranularity::PerClass => "class",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_classes: usize,
    /// Channels of the correlation volume.
    pub d_corr: usize,
    /// Width of the incoming image/text embeddings.
    pub d_enc: usize,
    /// Width of the saliency cross-attention.
    pub d_attn: usize,
    pub n_attn_heads: usize,
    pub n_attn_layers: usize,
    /// Foreground tokens selected per class.
    pub k_fg: usize,
    pub window_size: usize,
    pub seed: u64,
    /// Channels of each projected guidance map in the decoder.
    pub d_guide: usize,
    pub saliency_mode: SaliencyMode,
    pub agg_gate: GateGranularity,
}

impl Default for PipelineConfig {
    /// Desk-scale defaults: a 12×12 grid keeps the 17% foreground ratio with k = 24.
    fn default() -> Self {
        PipelineConfig {
            grid_h: 12,
            grid_w: 12,
            n_classes: 3,
            d_corr: 16,
            d_enc: 32,
            d_attn: 32,
            n_attn_heads: 4,
            n_attn_layers: 3,
            k_fg: 24,
            window_size: 4,
            seed: 0,
            d_guide: 8,
            saliency_mode: SaliencyMode::PerClass,
            agg_gate: GateGranularity::PerChannel,
        }
    }
}

impl PipelineConfig {
    /// Paper-scale dimensions (24×24 tokens, D = 128, 8 heads of width 512).
    pub fn paper_scale(n_classes: usize, d_enc: usize) -> Self {
        PipelineConfig {
            grid_h: 24,
            grid_w: 24,
            n_classes,
            d_corr: 128,
            d_enc,
            d_attn: 512,
            n_attn_heads: 8,
            n_attn_layers: 3,
            k_fg: 96,
            window_size: 4,
            d_guide: 32,
            ..PipelineConfig::default()
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Foreground count for a fraction of the token grid, rounded to nearest.
    pub fn k_for_ratio(&self, ratio: f64) -> usize {
        ((self.tokens() as f64 * ratio).round() as usize).clamp(1, self.tokens())
    }

    pub fn validate(self) -> Result<Self> {
        validate_config(self)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut m = KvMap::parse(text)?;
        let mut c = PipelineConfig::default();
        m.take_into("grid_h", &mut c.grid_h)?;
        m.take_into("grid_w", &mut c.grid_w)?;
        m.take_into("n_classes", &mut c.n_classes)?;
        m.take_into("d_corr", &mut c.d_corr)?;
        m.take_into("d_enc", &mut c.d_enc)?;
        m.take_into("d_attn", &mut c.d_attn)?;
        m.take_into("n_attn_heads", &mut c.n_attn_heads)?;
        m.take_into("n_attn_layers", &mut c.n_attn_layers)?;
        m.take_into("k_fg", &mut c.k_fg)?;
        m.take_into("window_size", &mut c.window_size)?;
        m.take_into("seed", &mut c.seed)?;
        m.take_into("d_guide", &mut c.d_guide)?;
        m.take_into("saliency_mode", &mut c.saliency_mode)?;
        m.take_into("agg_gate", &mut c.agg_gate)?;
        m.finish()?;
        validate_config(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DisaError::io(path, e))?;
        PipelineConfig::from_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        render(&[
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("d_corr", self.d_corr.to_string()),
            ("d_enc", self.d_enc.to_string()),
            ("d_attn", self.d_attn.to_string()),
            ("n_attn_heads", self.n_attn_heads.to_string()),
            ("n_attn_layers", self.n_attn_layers.to_string()),
            ("k_fg", self.k_fg.to_string()),
            ("window_size", self.window_size.to_string()),
            ("seed", self.seed.to_string()),
            ("d_guide", self.d_guide.to_string()),
            ("saliency_mode", self.saliency_mode.to_string()),
            ("agg_gate", self.agg_gate.to_string()),
        ])
    }
}

/// Returns the config unchanged when every constraint holds.
pub fn validate_config(cfg: PipelineConfig) -> Result<PipelineConfig> {
    let bad = |msg: String| Err(DisaError::Config(msg));
    for (name, v) in [
        ("grid_h", cfg.grid_h),
        ("grid_w", cfg.grid_w),
        ("d_corr", cfg.d_corr),
        ("d_enc", cfg.d_enc),
        ("d_attn", cfg.d_attn),
        ("n_attn_heads", cfg.n_attn_heads),
        ("n_attn_layers", cfg.n_attn_layers),
        ("window_size", cfg.window_size),
        ("d_guide", cfg.d_guide),
    ] {
        if v == 0 {
            return bad(format!("{name} must be positive"));
        }
    }
    if cfg.n_classes < 2 {
        return bad(format!("n_classes must be at least 2, got {}", cfg.n_classes));
    }
    if cfg.k_fg == 0 {
        return bad("k_fg must be at least 1".into());
    }
    if cfg.k_fg > cfg.tokens() {
        return bad(format!("k_fg = {} exceeds the {} tokens of a {}x{} grid", cfg.k_fg, cfg.tokens(), cfg.grid_h, cfg.grid_w));
    }
    if cfg.d_attn % cfg.n_attn_heads != 0 {
        return bad(format!("d_attn = {} is not divisible by n_attn_heads = {}", cfg.d_attn, cfg.n_attn_heads));
    }
    if cfg.window_size > cfg.grid_h.max(cfg.grid_w) {
        return bad(format!("window_size = {} exceeds the grid", cfg.window_size));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_k_on_paper_grid_is_accepted() {
        let cfg = PipelineConfig { grid_h: 24, grid_w: 24, k_fg: 96, ..Default::default() };
        assert_eq!(validate_config(cfg.clone()).unwrap(), cfg);
        validate_config(PipelineConfig::paper_scale(171, 512)).unwrap();
    }

    #[test]
    fn zero_k_is_rejected() {
        let err = validate_config(PipelineConfig { k_fg: 0, ..Default::default() }).unwrap_err();
        assert!(matches!(err, DisaError::Config(ref m) if m.contains("k_fg")));
    }

    #[test]
    fn k_above_token_count_is_rejected() {
        let err = validate_config(PipelineConfig { k_fg: 145, ..Default::default() }).unwrap_err();
        assert!(matches!(err, DisaError::Config(ref m) if m.contains("145") && m.contains("144")));
    }

    #[test]
    fn desk_default_keeps_foreground_ratio() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.k_fg, cfg.k_for_ratio(0.17));
        assert_eq!(cfg.k_fg, 24);
    }

    #[test]
    fn kv_round_trip_and_unknown_keys() {
        let cfg = PipelineConfig { n_classes: 5, d_corr: 12, saliency_mode: SaliencyMode::Batch, ..Default::default() };
        assert_eq!(PipelineConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(PipelineConfig::from_kv("grid_h = 12\nbogus = 1\n").is_err());
        assert!(PipelineConfig::from_kv("k_fg = 0\n").is_err());
    }
}
