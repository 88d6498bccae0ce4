//! The assembled segmentation model and its ablation variants.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{AggregationKind, GatedAggregator};
use crate::autograd::{Tape, Var};
use crate::config::{PipelineConfig, SaliencyMode};
use crate::decoder::UpsampleDecoder;
use crate::encoders::{Guidance, SceneSample};
use crate::error::{DisaError, Result};
use crate::hrm::{BranchRefiner, HrmToggles};
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::sdm::{
    cosine_matrix, matching_score_objective, per_class_itm_objective, sample_itm_pairs, saliency, select_tokens, CorrelationLift, CrossAttentionStack, ItmHead,
    ItmLabel,
};
use crate::tensor::Tensor;
use crate::types::{AttentionMap, Branch, EmbeddingPair, SaliencyStack, SegmentationOutput, TokenPartition};

/// Ground truth the training path may consult. The inference path is handed
/// one too, so tests can prove it never asks.
pub trait LabelProvider {
    /// Which classes appear in the scene.
    fn class_presence(&self) -> Result<Vec<bool>>;
    /// Majority class per grid token, row-major.
    fn token_classes(&self) -> Result<Vec<usize>>;
}

/// Labels read from a generated scene.
pub struct SceneLabels<'a>(pub &'a SceneSample);

impl LabelProvider for SceneLabels<'_> {
    fn class_presence(&self) -> Result<Vec<bool>> {
        Ok(self.0.present_classes())
    }

    fn token_classes(&self) -> Result<Vec<usize>> {
        Ok(self.0.gt_grid.clone())
    }
}

/// A provider with nothing to give.
pub struct NoLabels;

impl LabelProvider for NoLabels {
    fn class_presence(&self) -> Result<Vec<bool>> {
        Err(DisaError::Label("no labels are available on this path".into()))
    }

    fn token_classes(&self) -> Result<Vec<usize>> {
        Err(DisaError::Label("no labels are available on this path".into()))
    }
}

/// How tokens are split between the two branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disentangle {
    /// One branch sees every token.
    None,
    /// A learned per-token foreground score, supervised by ground truth.
    TokenLevel,
    /// A fixed class-to-branch assignment.
    ClassLevel(Vec<bool>),
    /// Top-k tokens by gradient saliency.
    Saliency,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelVariant {
    pub disentangle: Disentangle,
    pub hrm: HrmToggles,
    pub aggregation: AggregationKind,
}

impl Default for ModelVariant {
    fn default() -> Self {
        ModelVariant { disentangle: Disentangle::Saliency, hrm: HrmToggles::ALL, aggregation: AggregationKind::Weighted }
    }
}

impl ModelVariant {
    /// Short stable name, also used in checkpoint manifests.
    pub fn label(&self) -> String {
        let d = match &self.disentangle {
            Disentangle::None => "none".to_string(),
            Disentangle::TokenLevel => "token".to_string(),
            Disentangle::ClassLevel(fg) => format!("class:{}", fg.iter().map(|&b| if b { 'f' } else { 'b' }).collect::<String>()),
            Disentangle::Saliency => "saliency".to_string(),
        };
        let h = self.hrm;
        format!("{d}/p{}c{}s{}/{}", h.pixel as u8, h.category as u8, h.semantic as u8, self.aggregation)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ModelVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('/').collect();
        let [d, h, a] = parts[..] else { return Err(format!("malformed variant `{s}`")) };
        let disentangle = match d {
            "none" => Disentangle::None,
            "token" => Disentangle::TokenLevel,
            "saliency" => Disentangle::Saliency,
            _ => match d.strip_prefix("class:") {
                Some(bits) if !bits.is_empty() && bits.chars().all(|c| c == 'f' || c == 'b') => Disentangle::ClassLevel(bits.chars().map(|c| c == 'f').collect()),
                _ => return Err(format!("unknown disentanglement `{d}`")),
            },
        };
        let b = h.as_bytes();
        if b.len() != 6 || b[0] != b'p' || b[2] != b'c' || b[4] != b's' {
            return Err(format!("malformed refinement toggles `{h}`"));
        }
        let bit = |c: u8| match c {
            b'0' => Ok(false),
            b'1' => Ok(true),
            _ => Err(format!("malformed refinement toggles `{h}`")),
        };
        let hrm = HrmToggles { pixel: bit(b[1])?, category: bit(b[3])?, semantic: bit(b[5])? };
        Ok(ModelVariant { disentangle, hrm, aggregation: a.parse()? })
    }
}

/// Per-scene inputs with the cosine matrix cached.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub pair: EmbeddingPair,
    pub guidance: Guidance,
    pub cosine: Tensor,
}

impl SceneInput {
    pub fn new(pair: EmbeddingPair, guidance: Guidance) -> Result<Self> {
        let cosine = cosine_matrix(&pair)?;
        Ok(SceneInput { pair, guidance, cosine })
    }

    pub fn from_sample(s: &SceneSample) -> Result<Self> {
        SceneInput::new(s.pair.clone(), s.guidance.clone())
    }
}

/// What one forward pass produced besides the logits.
pub struct ForwardOut<'t> {
    /// `[4H, 4W, N_C]`.
    pub logits: Var<'t>,
    /// Matching loss (saliency variant) or token foreground loss (token variant).
    pub aux_loss: Option<Var<'t>>,
    pub attention: Option<AttentionMap>,
    pub saliency: Option<SaliencyStack>,
    pub partition: Option<TokenPartition>,
    /// Class-major `[N_C, HW, D]` volume after aggregation.
    pub aggregated: Var<'t>,
    /// Class-major raw correlation `[N_C, HW, D]`.
    pub raw: Var<'t>,
}

/// Training-only inputs.
pub struct TrainInputs<'a> {
    pub labels: &'a dyn LabelProvider,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct DisaModel {
    pub cfg: PipelineConfig,
    pub variant: ModelVariant,
    pub xattn: CrossAttentionStack,
    pub itm: ItmHead,
    pub lift: CorrelationLift,
    pub fg: BranchRefiner,
    pub bg: BranchRefiner,
    pub single: BranchRefiner,
    pub token_head: Linear,
    pub agg: GatedAggregator,
    pub dec: UpsampleDecoder,
}

impl DisaModel {
    pub fn new(cfg: PipelineConfig, variant: ModelVariant) -> Result<Self> {
        let cfg = cfg.validate()?;
        if let Disentangle::ClassLevel(fg) = &variant.disentangle {
            if fg.len() != cfg.n_classes {
                return Err(DisaError::Taxonomy(format!("taxonomy assigns {} classes, the model has {}", fg.len(), cfg.n_classes)));
            }
        }
        let d = cfg.d_corr;
        Ok(DisaModel {
            xattn: CrossAttentionStack::new(&cfg),
            itm: ItmHead::new(&cfg),
            lift: CorrelationLift::new(&cfg),
            fg: BranchRefiner::new("hrm.fg", d, cfg.window_size),
            bg: BranchRefiner::new("hrm.bg", d, cfg.window_size),
            single: BranchRefiner::new("hrm.all", d, cfg.window_size),
            token_head: Linear::new("token_head", d, 1, true),
            agg: GatedAggregator::new(&cfg, variant.aggregation),
            dec: UpsampleDecoder::new(&cfg),
            cfg,
            variant,
        })
    }

    fn two_branch(&self) -> bool {
        self.variant.disentangle != Disentangle::None
    }

    /// Fresh parameters drawn from `cfg.seed`.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut store = ParamStore::new();
        self.lift.init(&mut store, &mut rng);
        match self.variant.disentangle {
            Disentangle::Saliency => {
                self.xattn.init(&mut store, &mut rng);
                self.itm.init(&mut store, &mut rng);
            }
            Disentangle::TokenLevel => self.token_head.init(&mut store, &mut rng, Init::Xavier(1.0)),
            _ => {}
        }
        if self.two_branch() {
            self.fg.init(&mut store, &mut rng, self.variant.hrm);
            self.bg.init(&mut store, &mut rng, self.variant.hrm);
            self.agg.init(&mut store, &mut rng);
        } else {
            self.single.init(&mut store, &mut rng, self.variant.hrm);
            self.agg.smooth.iter().for_each(|b| b.init(&mut store, &mut rng));
        }
        self.dec.init(&mut store, &mut rng);
        store
    }

    /// Parameter count from layer shapes alone.
    pub fn param_count(&self) -> usize {
        let mut n = self.lift.param_count() + self.dec.param_count();
        n += match self.variant.disentangle {
            Disentangle::Saliency => self.xattn.param_count() + self.itm.param_count(),
            Disentangle::TokenLevel => self.token_head.param_count(),
            _ => 0,
        };
        if self.two_branch() {
            n += self.fg.param_count(self.variant.hrm) + self.bg.param_count(self.variant.hrm) + self.agg.param_count();
        } else {
            n += self.single.param_count(self.variant.hrm) + self.agg.smooth.iter().map(|b| b.param_count()).sum::<usize>();
        }
        n
    }

    /// Cross-attention map of the scene (saliency variant only).
    fn attention<'t>(&self, ctx: &Ctx<'t>, input: &SceneInput) -> Var<'t> {
        let (h, w) = input.pair.grid();
        let d = input.pair.d_enc();
        let image = ctx.tape.constant(input.pair.image().clone().reshape(&[h * w, d]).expect("grid shape"));
        let text = ctx.tape.constant(input.pair.text().clone());
        self.xattn.forward(ctx, image, text)
    }

    /// Saliency of an attention map. Training differentiates the matching
    /// loss; inference differentiates the predicted matching score and never
    /// consults `labels`.
    fn saliency_stack(&self, store: &ParamStore, attn: &AttentionMap, train_labels: Option<(&[bool], &[ItmLabel])>) -> Result<SaliencyStack> {
        let grid = (self.cfg.grid_h, self.cfg.grid_w);
        let head = &self.itm;
        match train_labels {
            None => saliency(attn, grid, store, |ctx, a| matching_score_objective(ctx, head, a)),
            Some((present, sampled)) => {
                let labels: Vec<ItmLabel> = match self.cfg.saliency_mode {
                    SaliencyMode::PerClass => (0..present.len()).map(|n| ItmLabel::new(n, present[n])).collect(),
                    SaliencyMode::Batch => {
                        let m = sampled.len() as f64;
                        sampled.iter().map(|l| ItmLabel { class: l.class, target: [l.target[0] / m, l.target[1] / m] }).collect()
                    }
                };
                saliency(attn, grid, store, |ctx, a| per_class_itm_objective(ctx, head, a, &labels))
            }
        }
    }

    /// One scene through the network. `train` carries labels and the pair
    /// sampler; without it the pass is label-free and `_labels` is untouched.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, input: &SceneInput, train: Option<TrainInputs<'_>>) -> Result<ForwardOut<'t>> {
        let (h, w) = (self.cfg.grid_h, self.cfg.grid_w);
        let hw = h * w;
        let nc = input.pair.n_classes();
        if input.pair.grid() != (h, w) || nc != self.cfg.n_classes || input.pair.d_enc() != self.cfg.d_enc {
            return Err(crate::error::shape_err(format!(
                "scene grid {:?} with {nc} classes of width {} does not fit the model ({h}x{w}, {} classes, width {})",
                input.pair.grid(),
                input.pair.d_enc(),
                self.cfg.n_classes,
                self.cfg.d_enc
            )));
        }
        let raw = self.lift.forward(ctx, &input.cosine);
        let mut aux_loss = None;
        let mut attention = None;
        let mut sal = None;

        let partition = match &self.variant.disentangle {
            Disentangle::None => None,
            Disentangle::ClassLevel(fg) => Some(TokenPartition::from_mask((0..hw).flat_map(|_| fg.iter().copied()).collect(), hw, hw)),
            Disentangle::TokenLevel => {
                ctx.record("token_fg_head");
                let z = self.token_head.forward(ctx, raw).reshape(&[nc * hw, 1]);
                if let Some(t) = &train {
                    let classes = t.labels.token_classes()?;
                    // target: token belongs to the class it is scored for
                    let mut wts = Tensor::zeros(&[nc * hw, 2]);
                    for n in 0..nc {
                        for (tok, &c) in classes.iter().enumerate() {
                            let j = usize::from(c == n);
                            wts.data_mut()[(n * hw + tok) * 2 + j] = -1.0 / (nc * hw) as f64;
                        }
                    }
                    let zeros = ctx.tape.constant(Tensor::zeros(&[nc * hw, 1]));
                    let logp = zeros.concat_last(z).log_softmax_last();
                    aux_loss = Some(logp.mul(ctx.tape.constant(wts)).sum());
                }
                let zv = z.value();
                let mut mask = vec![false; hw * nc];
                for n in 0..nc {
                    for t in 0..hw {
                        mask[t * nc + n] = zv.data()[n * hw + t] > 0.0;
                    }
                }
                Some(TokenPartition::from_mask(mask, hw, self.cfg.k_fg))
            }
            Disentangle::Saliency => {
                let a = self.attention(ctx, input);
                let amap = AttentionMap::new((*a.value()).clone())?;
                let s = match train {
                    Some(t) => {
                        let present = t.labels.class_presence()?;
                        let sampled = sample_itm_pairs(&present, t.rng);
                        aux_loss = Some(crate::sdm::itm_loss(ctx, &self.itm, a, &sampled)?);
                        self.saliency_stack(ctx.store(), &amap, Some((&present, &sampled)))?
                    }
                    None => self.saliency_stack(ctx.store(), &amap, None)?,
                };
                ctx.record("saliency");
                let part = select_tokens(&s, self.cfg.k_fg)?;
                attention = Some(amap);
                sal = Some(s);
                Some(part)
            }
        };

        let grid = (h, w);
        let aggregated = match &partition {
            None => {
                let all = Rc::new(vec![true; nc * hw]);
                let y = self.single.forward(ctx, raw, grid, &all, self.variant.hrm);
                self.agg.smooth(ctx, y, grid)
            }
            Some(part) => {
                let vis_f = Rc::new(part.visibility(Branch::Foreground));
                let vis_b = Rc::new(part.visibility(Branch::Background));
                let mask = |v: &[bool]| ctx.tape.constant(Tensor::from_fn(&[nc, hw, 1], |i| if v[i] { 1.0 } else { 0.0 }));
                let xf = raw.mul(mask(&vis_f));
                let xb = raw.mul(mask(&vis_b));
                let yf = self.fg.forward(ctx, xf, grid, &vis_f, self.variant.hrm);
                let yb = self.bg.forward(ctx, xb, grid, &vis_b, self.variant.hrm);
                self.agg.forward(ctx, yf, yb, grid)
            }
        };

        let flat = |t: &Tensor| ctx.tape.constant(t.clone().reshape(&[hw, self.cfg.d_enc]).expect("grid shape"));
        let logits = self.dec.forward(
            ctx,
            aggregated,
            flat(input.pair.image()),
            (flat(&input.guidance.shallow), flat(&input.guidance.deep)),
            grid,
        );
        Ok(ForwardOut { logits, aux_loss, attention, saliency: sal, partition, aggregated, raw })
    }

    /// Label-free prediction. `labels` exists only so callers can audit that
    /// the inference path never reads it.
    pub fn infer(&self, store: &ParamStore, input: &SceneInput, _labels: &dyn LabelProvider) -> Result<Prediction> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, store);
        let out = self.forward(&ctx, input, None)?;
        Ok(Prediction {
            output: SegmentationOutput::new((*out.logits.value()).clone())?,
            attention: out.attention,
            saliency: out.saliency,
            partition: out.partition,
            trace: ctx.take_trace(),
        })
    }

    pub fn predict(&self, store: &ParamStore, input: &SceneInput) -> Result<Prediction> {
        self.infer(store, input, &NoLabels)
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub output: SegmentationOutput,
    pub attention: Option<AttentionMap>,
    pub saliency: Option<SaliencyStack>,
    pub partition: Option<TokenPartition>,
    /// Names of the stages that ran, in order.
    pub trace: Vec<&'static str>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{generate_scene, DatasetSpec};

    fn scene() -> SceneSample {
        generate_scene(&DatasetSpec { n_scenes: 1, ..Default::default() }, 0).unwrap()
    }

    #[test]
    fn variant_labels_round_trip() {
        let variants = [
            ModelVariant::default(),
            ModelVariant { disentangle: Disentangle::None, hrm: HrmToggles::NONE, aggregation: AggregationKind::Hard },
            ModelVariant { disentangle: Disentangle::ClassLevel(vec![true, false, true]), hrm: HrmToggles { pixel: true, category: false, semantic: false }, aggregation: AggregationKind::Attention },
            ModelVariant { disentangle: Disentangle::TokenLevel, ..Default::default() },
        ];
        for v in variants {
            assert_eq!(v.label().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("saliency/p1c1/weighted".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn analytic_count_matches_store_for_every_variant() {
        for disentangle in [Disentangle::None, Disentangle::TokenLevel, Disentangle::ClassLevel(vec![true, false, false]), Disentangle::Saliency] {
            for hrm in [HrmToggles::ALL, HrmToggles::NONE, HrmToggles { pixel: true, category: true, semantic: false }] {
                for aggregation in [AggregationKind::Weighted, AggregationKind::Hard, AggregationKind::Attention] {
                    let m = DisaModel::new(PipelineConfig::default(), ModelVariant { disentangle: disentangle.clone(), hrm, aggregation }).unwrap();
                    assert_eq!(m.param_count(), m.init_params().numel(), "{}", m.variant);
                }
            }
        }
    }

    #[test]
    fn every_variant_runs_forward() {
        let s = scene();
        let input = SceneInput::from_sample(&s).unwrap();
        for disentangle in [Disentangle::None, Disentangle::TokenLevel, Disentangle::ClassLevel(vec![true, false, false]), Disentangle::Saliency] {
            let m = DisaModel::new(PipelineConfig::default(), ModelVariant { disentangle, ..Default::default() }).unwrap();
            let store = m.init_params();
            let p = m.predict(&store, &input).unwrap();
            assert_eq!(p.output.size(), (48, 48));
            let tape = Tape::new();
            let ctx = Ctx::training(&tape, &store);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward(&ctx, &input, Some(TrainInputs { labels: &SceneLabels(&s), rng: &mut rng })).unwrap();
            assert_eq!(out.logits.shape(), vec![48, 48, 3]);
        }
    }

    #[test]
    fn hrm_off_trace_has_no_refinement() {
        let s = scene();
        let input = SceneInput::from_sample(&s).unwrap();
        let m = DisaModel::new(PipelineConfig::default(), ModelVariant { hrm: HrmToggles::NONE, ..Default::default() }).unwrap();
        let p = m.predict(&m.init_params(), &input).unwrap();
        for op in ["pixel_refine", "category_prototype", "semantic_prototype", "fuse"] {
            assert!(!p.trace.contains(&op), "{op} ran");
        }
        let full = DisaModel::new(PipelineConfig::default(), ModelVariant::default()).unwrap();
        let p = full.predict(&full.init_params(), &input).unwrap();
        for op in ["pixel_refine", "category_prototype", "semantic_prototype", "fuse"] {
            assert!(p.trace.contains(&op), "{op} missing");
        }
    }

    #[test]
    fn taxonomy_length_is_checked() {
        let v = ModelVariant { disentangle: Disentangle::ClassLevel(vec![true]), ..Default::default() };
        assert!(matches!(DisaModel::new(PipelineConfig::default(), v), Err(DisaError::Taxonomy(_))));
    }
}
