//! Shape-carrying domain values passed between pipeline stages.
//!
//! Every constructor validates shape and finiteness, so a value that exists is
//! well formed. Layouts follow the documented axis order; for example a
//! correlation volume is `[H, W, N_C, D]`. Internally the refinement code
//! works class-major (`[N_C, H·W, D]`) and converts at these boundaries.

use crate::error::{shape_err, DisaError, Result};
use crate::tensor::Tensor;

/// Image embeddings `[H, W, D_enc]` with text embeddings `[N_C, D_enc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    image: Tensor,
    text: Tensor,
    class_names: Vec<String>,
}

impl EmbeddingPair {
    pub fn new(image: Tensor, text: Tensor, class_names: Vec<String>) -> Result<Self> {
        if image.shape().len() != 3 {
            return Err(shape_err(format!("image embeddings must be [H, W, D], got {:?}", image.shape())));
        }
        if text.shape().len() != 2 {
            return Err(shape_err(format!("text embeddings must be [N_C, D], got {:?}", text.shape())));
        }
        if image.shape()[2] != text.shape()[1] {
            return Err(shape_err(format!("embedding widths differ: image {} vs text {}", image.shape()[2], text.shape()[1])));
        }
        if class_names.len() != text.shape()[0] {
            return Err(shape_err(format!("{} class names for {} text rows", class_names.len(), text.shape()[0])));
        }
        image.ensure_finite("image embeddings")?;
        text.ensure_finite("text embeddings")?;
        let d = text.shape()[1];
        for (n, row) in text.data().chunks(d).enumerate() {
            if row.iter().map(|v| v * v).sum::<f64>() <= 0.0 {
                return Err(DisaError::ZeroNorm(format!("text row {n} ({})", class_names[n])));
            }
        }
        Ok(EmbeddingPair { image, text, class_names })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    pub fn n_classes(&self) -> usize {
        self.text.shape()[0]
    }

    pub fn d_enc(&self) -> usize {
        self.text.shape()[1]
    }

    /// Prompt the text embedding stands for.
    pub fn prompt(&self, class: usize) -> String {
        format!("A photo of a {}", self.class_names[class])
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

/// Cross-attention `[HW, N_C]`, softmax-normalized over tokens per class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Tensor,
}

impl AttentionMap {
    pub const COLUMN_TOLERANCE: f64 = 1e-5;

    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(shape_err(format!("attention must be [HW, N_C], got {:?}", values.shape())));
        }
        values.ensure_finite("attention map")?;
        let (hw, nc) = (values.shape()[0], values.shape()[1]);
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DisaError::Validation(format!("attention entry {v} outside [0, 1]")));
        }
        for n in 0..nc {
            let s: f64 = (0..hw).map(|t| values.data()[t * nc + n]).sum();
            if (s - 1.0).abs() > Self::COLUMN_TOLERANCE {
                return Err(DisaError::Validation(format!("attention column {n} sums to {s}")));
            }
        }
        Ok(AttentionMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.values.shape()[1]
    }

    /// Attention of class `n` over all tokens.
    pub fn column(&self, n: usize) -> Vec<f64> {
        let nc = self.n_classes();
        (0..self.tokens()).map(|t| self.values.data()[t * nc + n]).collect()
    }
}

/// Per-class saliency `[H, W, N_C]`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyStack {
    maps: Tensor,
    source: AttentionMap,
}

impl SaliencyStack {
    pub fn new(maps: Tensor, source: AttentionMap) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(shape_err(format!("saliency must be [H, W, N_C], got {:?}", maps.shape())));
        }
        maps.ensure_finite("saliency")?;
        if maps.shape()[0] * maps.shape()[1] != source.tokens() || maps.shape()[2] != source.n_classes() {
            return Err(shape_err(format!("saliency {:?} does not match attention {:?}", maps.shape(), source.values().shape())));
        }
        if let Some(v) = maps.data().iter().find(|v| **v < 0.0) {
            return Err(DisaError::Validation(format!("negative saliency {v}")));
        }
        Ok(SaliencyStack { maps, source })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn source(&self) -> &AttentionMap {
        &self.source
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.maps.shape()[0], self.maps.shape()[1])
    }

    pub fn n_classes(&self) -> usize {
        self.maps.shape()[2]
    }

    /// Saliency of class `n` over flattened tokens.
    pub fn column(&self, n: usize) -> Vec<f64> {
        let nc = self.n_classes();
        self.maps.data().iter().skip(n).step_by(nc).copied().collect()
    }
}

/// Refinement stage of a correlation volume, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Raw,
    Pixel,
    Fused,
    Aggregated,
}

/// Correlation volume `[H, W, N_C, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    values: Tensor,
    stage: Stage,
}

impl CorrelationVolume {
    pub fn new(values: Tensor, stage: Stage) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(shape_err(format!("correlation volume must be [H, W, N_C, D], got {:?}", values.shape())));
        }
        values.ensure_finite("correlation volume")?;
        Ok(CorrelationVolume { values, stage })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub(crate) fn expect_stage(&self, stage: Stage, op: &str) -> Result<()> {
        if self.stage != stage {
            return Err(DisaError::Validation(format!("{op} expects a {stage:?} volume, got {:?}", self.stage)));
        }
        Ok(())
    }

    /// `[N_C, H·W, D]` copy of the values.
    pub fn class_major(&self) -> Tensor {
        let (h, w, nc, d) = self.dims();
        self.values.permute(&[2, 0, 1, 3]).reshape(&[nc, h * w, d]).expect("same size")
    }

    pub fn from_class_major(t: &Tensor, h: usize, w: usize, stage: Stage) -> Result<Self> {
        let (nc, d) = (t.shape()[0], t.shape()[2]);
        let v = t.clone().reshape(&[nc, h, w, d])?.permute(&[1, 2, 0, 3]);
        CorrelationVolume::new(v, stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiePolicy {
    /// Equal scores are ranked by ascending flattened token index.
    LowestIndex,
}

/// Per-class foreground mask over the token grid, stored `[HW, N_C]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPartition {
    fg_mask: Vec<bool>,
    tokens: usize,
    n_classes: usize,
    k: usize,
    tie_policy: TiePolicy,
}

impl TokenPartition {
    /// Build from class-major foreground index lists; checks the cardinality law.
    pub fn from_columns(columns: &[Vec<usize>], tokens: usize, k: usize, tie_policy: TiePolicy) -> Result<Self> {
        let n_classes = columns.len();
        let mut fg_mask = vec![false; tokens * n_classes];
        for (n, col) in columns.iter().enumerate() {
            if col.len() != k.min(tokens) {
                return Err(DisaError::Validation(format!("class {n} has {} foreground tokens, expected {}", col.len(), k.min(tokens))));
            }
            for &t in col {
                if t >= tokens {
                    return Err(DisaError::Index { index: t, len: tokens });
                }
                fg_mask[t * n_classes + n] = true;
            }
        }
        Ok(TokenPartition { fg_mask, tokens, n_classes, k, tie_policy })
    }

    /// Partition from a flat `[HW, N_C]` mask with per-class counts left free.
    /// `k` records the nominal foreground budget.
    pub(crate) fn from_mask(fg_mask: Vec<bool>, tokens: usize, k: usize) -> Self {
        let n_classes = fg_mask.len() / tokens.max(1);
        TokenPartition { fg_mask, tokens, n_classes, k, tie_policy: TiePolicy::LowestIndex }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tie_policy(&self) -> TiePolicy {
        self.tie_policy
    }

    pub fn is_fg(&self, token: usize, class: usize) -> bool {
        self.fg_mask[token * self.n_classes + class]
    }

    /// Flat `[HW, N_C]` mask.
    pub fn fg_mask(&self) -> &[bool] {
        &self.fg_mask
    }

    pub fn fg_tokens(&self, class: usize) -> Vec<usize> {
        (0..self.tokens).filter(|&t| self.is_fg(t, class)).collect()
    }

    /// Visibility of `branch`, class-major `[N_C, HW]`.
    pub fn visibility(&self, branch: Branch) -> Vec<bool> {
        let want = branch == Branch::Foreground;
        let mut out = Vec::with_capacity(self.fg_mask.len());
        for n in 0..self.n_classes {
            for t in 0..self.tokens {
                out.push(self.is_fg(t, n) == want);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Foreground,
    Background,
}

impl Branch {
    pub fn key(self) -> &'static str {
        match self {
            Branch::Foreground => "fg",
            Branch::Background => "bg",
        }
    }
}

/// Category prototypes `[1, N_C, D]` and the branch semantic prototype `[1, 1, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub category: Tensor,
    pub semantic: Tensor,
    pub branch: Branch,
}

impl PrototypeSet {
    pub fn new(category: Tensor, semantic: Tensor, branch: Branch) -> Result<Self> {
        let s = category.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(shape_err(format!("category prototypes must be [1, N_C, D], got {s:?}")));
        }
        semantic.expect_shape(&[1, 1, s[2]], "semantic prototype")?;
        category.ensure_finite("category prototypes")?;
        semantic.ensure_finite("semantic prototype")?;
        Ok(PrototypeSet { category, semantic, branch })
    }
}

/// Decoder logits `[H_out, W_out, N_C]` and their argmax mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    logits: Tensor,
    mask: Vec<usize>,
}

impl SegmentationOutput {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 3 {
            return Err(shape_err(format!("logits must be [H, W, N_C], got {:?}", logits.shape())));
        }
        logits.ensure_finite("logits")?;
        let mask = argmax_last(&logits);
        Ok(SegmentationOutput { logits, mask })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Row-major `[H_out, W_out]` class ids.
    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    pub fn size(&self) -> (usize, usize) {
        (self.logits.shape()[0], self.logits.shape()[1])
    }
}

/// Argmax over the last axis; ties go to the lowest index.
pub fn argmax_last(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap();
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
