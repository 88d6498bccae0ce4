//! Training loop, mIoU evaluation, checkpoints and the metric log.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::array_file::NamedArrays;
use crate::autograd::{Tape, Var};
use crate::config::PipelineConfig;
use crate::encoders::SceneSample;
use crate::error::{DisaError, Result};
use crate::kv::{render, KvMap};
use crate::model::{DisaModel, ModelVariant, SceneInput, SceneLabels, TrainInputs};
use crate::nn::{AdamW, Ctx, ParamStore, WarmupCosine};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    /// Kept for parity with setups that tune the encoders; the synthetic
    /// encoders here are frozen, so it is never applied.
    pub lr_encoder: f64,
    pub weight_decay: f64,
    /// Fraction of `total_iters` spent in linear warmup.
    pub warmup_frac: f64,
    pub ce_weight: f64,
    pub itm_weight: f64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// 0 evaluates only after the last iteration.
    pub eval_every: usize,
    /// Seeds batch sampling and matching-pair sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 600,
            batch_size: 2,
            lr_main: 2e-3,
            lr_encoder: 2e-6,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            ce_weight: 1.0,
            itm_weight: 0.2,
            checkpoint_every: 0,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(self) -> Result<Self> {
        let bad = |m: String| Err(DisaError::Config(m));
        if self.total_iters == 0 || self.batch_size == 0 {
            return bad("total_iters and batch_size must be positive".into());
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_encoder", self.lr_encoder)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("ce_weight", self.ce_weight), ("itm_weight", self.itm_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1]", self.warmup_frac));
        }
        Ok(self)
    }

    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine { base_lr: self.lr_main, warmup: (self.warmup_frac * self.total_iters as f64).round() as usize, total: self.total_iters }
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut m = KvMap::parse(text)?;
        let mut c = TrainConfig::default();
        m.take_into("total_iters", &mut c.total_iters)?;
        m.take_into("batch_size", &mut c.batch_size)?;
        m.take_into("lr_main", &mut c.lr_main)?;
        m.take_into("lr_encoder", &mut c.lr_encoder)?;
        m.take_into("weight_decay", &mut c.weight_decay)?;
        m.take_into("warmup_frac", &mut c.warmup_frac)?;
        m.take_into("ce_weight", &mut c.ce_weight)?;
        m.take_into("itm_weight", &mut c.itm_weight)?;
        m.take_into("checkpoint_every", &mut c.checkpoint_every)?;
        m.take_into("eval_every", &mut c.eval_every)?;
        m.take_into("seed", &mut c.seed)?;
        m.finish()?;
        c.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DisaError::io(path, e))?;
        TrainConfig::from_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        render(&[
            ("total_iters", self.total_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_main", self.lr_main.to_string()),
            ("lr_encoder", self.lr_encoder.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("ce_weight", self.ce_weight.to_string()),
            ("itm_weight", self.itm_weight.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_itm: f64,
    /// Present only on evaluation steps.
    pub miou: Option<f64>,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

/// Mean per-pixel cross-entropy of `logits: [H, W, N_C]` against `gt`.
pub fn cross_entropy<'t>(logits: Var<'t>, gt: &[usize]) -> Var<'t> {
    let shape = logits.shape();
    let nc = shape[2];
    let px = shape[0] * shape[1];
    let mut w = Tensor::zeros(&[px, nc]);
    for (p, &c) in gt.iter().enumerate() {
        w.data_mut()[p * nc + c] = -1.0 / px as f64;
    }
    logits.reshape(&[px, nc]).log_softmax_last().mul(logits.tape().constant(w)).sum()
}

/// Summed confusion counts; IoU per class is `TP / (TP + FP + FN)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Confusion { tp: vec![0; n_classes], fp: vec![0; n_classes], fn_: vec![0; n_classes] }
    }

    pub fn add_masks(&mut self, pred: &[usize], gt: &[usize]) {
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
    }

    pub fn merge(mut self, other: &Confusion) -> Self {
        for c in 0..self.tp.len() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self
    }

    /// Per-class IoU; `None` for classes absent from prediction and ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.tp.len())
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        EvalReport { per_class: confusion.per_class(), miou: confusion.miou(), confusion }
    }
}

/// IoU of a single predicted mask against ground truth.
pub fn evaluate_masks(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(crate::error::shape_err(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    if let Some(&c) = pred.iter().chain(gt).find(|&&c| c >= n_classes) {
        return Err(DisaError::Validation(format!("label {c} outside 0..{n_classes}")));
    }
    let mut conf = Confusion::new(n_classes);
    conf.add_masks(pred, gt);
    Ok(EvalReport::from_confusion(conf))
}

/// Predict every scene (in parallel) and pool the confusion counts.
pub fn evaluate(model: &DisaModel, store: &ParamStore, data: &[SceneSample]) -> Result<EvalReport> {
    let nc = model.cfg.n_classes;
    let parts: Vec<Confusion> = data
        .par_iter()
        .map(|s| -> Result<Confusion> {
            let input = SceneInput::from_sample(s)?;
            let p = model.predict(store, &input)?;
            let mut c = Confusion::new(nc);
            c.add_masks(p.output.mask(), &s.gt_out);
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let total = parts.iter().fold(Confusion::new(nc), |acc, c| acc.merge(c));
    Ok(EvalReport::from_confusion(total))
}

/// Everything needed to restore a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub params: ParamStore,
    pub model_cfg: PipelineConfig,
    pub train_cfg: TrainConfig,
    pub variant: ModelVariant,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub const PARAMS_FILE: &'static str = "params.nac";
    pub const MANIFEST_FILE: &'static str = "manifest.txt";

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.rng_seed);
        r.set_stream(self.rng_stream);
        r.set_word_pos(self.rng_word_pos);
        r
    }

    pub fn model(&self) -> Result<DisaModel> {
        DisaModel::new(self.model_cfg.clone(), self.variant.clone())
    }

    fn manifest(&self) -> String {
        let mut out = render(&[
            ("iteration", self.iteration.to_string()),
            ("variant", self.variant.label()),
            ("rng_seed", self.rng_seed.iter().map(|b| format!("{b:02x}")).collect()),
            ("rng_stream", self.rng_stream.to_string()),
            ("rng_word_pos", self.rng_word_pos.to_string()),
        ]);
        for line in self.model_cfg.to_kv().lines() {
            out.push_str(&format!("model.{line}\n"));
        }
        for line in self.train_cfg.to_kv().lines() {
            out.push_str(&format!("train.{line}\n"));
        }
        out
    }

    /// Write into `dir`, refusing to replace an existing checkpoint unless `overwrite`.
    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<()> {
        let params_path = dir.join(Self::PARAMS_FILE);
        if params_path.exists() && !overwrite {
            return Err(DisaError::Validation(format!("checkpoint already exists at {}; pass the force flag to replace it", dir.display())));
        }
        fs::create_dir_all(dir).map_err(|e| DisaError::io(dir, e))?;
        let mut arrays = NamedArrays::new();
        for (name, t) in self.params.iter() {
            arrays.insert_f64(name.clone(), t.clone());
        }
        arrays.write(&params_path)?;
        let mpath = dir.join(Self::MANIFEST_FILE);
        fs::write(&mpath, self.manifest()).map_err(|e| DisaError::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(Self::MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| DisaError::io(&mpath, e))?;
        let (mut model_kv, mut train_kv, mut top) = (String::new(), String::new(), String::new());
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("model.") {
                model_kv.push_str(rest);
                model_kv.push('\n');
            } else if let Some(rest) = line.strip_prefix("train.") {
                train_kv.push_str(rest);
                train_kv.push('\n');
            } else {
                top.push_str(line);
                top.push('\n');
            }
        }
        let mut m = KvMap::parse(&top)?;
        let missing = |k: &str| DisaError::Format(format!("manifest lacks `{k}`"));
        let iteration: usize = m.take("iteration")?.ok_or_else(|| missing("iteration"))?;
        let variant: ModelVariant = m.take_str("variant").ok_or_else(|| missing("variant"))?.parse().map_err(DisaError::Format)?;
        let seed_hex = m.take_str("rng_seed").ok_or_else(|| missing("rng_seed"))?;
        let rng_stream: u64 = m.take("rng_stream")?.ok_or_else(|| missing("rng_stream"))?;
        let rng_word_pos: u128 = m.take("rng_word_pos")?.ok_or_else(|| missing("rng_word_pos"))?;
        m.finish()?;
        let mut rng_seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(DisaError::Format("rng_seed must be 64 hex digits".into()));
        }
        for (i, b) in rng_seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| DisaError::Format("rng_seed is not hex".into()))?;
        }
        let model_cfg = PipelineConfig::from_kv(&model_kv)?;
        let train_cfg = TrainConfig::from_kv(&train_kv)?;
        let arrays = NamedArrays::read(&dir.join(Self::PARAMS_FILE))?;
        let mut params = ParamStore::new();
        for (name, _) in arrays.iter() {
            params.insert(name.clone(), arrays.tensor(name)?.clone());
        }
        let ck = Checkpoint { iteration, params, model_cfg, train_cfg, variant, rng_seed, rng_stream, rng_word_pos };
        let model = ck.model()?;
        let expected = model.init_params();
        let names_match = expected.names().eq(ck.params.names());
        if !names_match || expected.iter().zip(ck.params.iter()).any(|((_, a), (_, b))| a.shape() != b.shape()) {
            return Err(DisaError::Format(format!("checkpoint tensors do not match variant {}", ck.variant)));
        }
        Ok(ck)
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricRecord>,
    pub final_eval: EvalReport,
}

/// Optional on-disk outputs of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub overwrite: bool,
}

struct StepLoss {
    total: f64,
    ce: f64,
    aux: f64,
    grads: BTreeMap<String, Tensor>,
}

fn batch_step(model: &DisaModel, store: &ParamStore, data: &[SceneSample], inputs: &[SceneInput], batch: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepLoss> {
    let tape = Tape::new();
    let ctx = Ctx::training(&tape, store);
    let inv = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    let (mut ce_sum, mut aux_sum) = (0.0, 0.0);
    for &i in batch {
        let labels = SceneLabels(&data[i]);
        let out = model.forward(&ctx, &inputs[i], Some(TrainInputs { labels: &labels, rng }))?;
        let ce = cross_entropy(out.logits, &data[i].gt_out);
        ce_sum += ce.value().data()[0] * inv;
        let mut loss = ce.scale(cfg.ce_weight);
        if let Some(aux) = out.aux_loss {
            aux_sum += aux.value().data()[0] * inv;
            loss = loss.add(aux.scale(cfg.itm_weight));
        }
        let loss = loss.scale(inv);
        total = Some(match total {
            None => loss,
            Some(t) => t.add(loss),
        });
    }
    let total = total.expect("non-empty batch");
    let value = total.value().data()[0];
    let grads = if value.is_finite() { ctx.param_grads(&tape.backward(total)) } else { BTreeMap::new() };
    Ok(StepLoss { total: value, ce: ce_sum, aux: aux_sum, grads })
}

/// Train from fresh parameters. Evaluation runs on `eval_data`.
pub fn train(model: &DisaModel, data: &[SceneSample], eval_data: &[SceneSample], cfg: &TrainConfig, out: &RunOutput) -> Result<TrainResult> {
    let cfg = cfg.clone().validate()?;
    if data.is_empty() {
        return Err(DisaError::Config("training set is empty".into()));
    }
    let inputs: Vec<SceneInput> = data.iter().map(SceneInput::from_sample).collect::<Result<_>>()?;
    let mut store = model.init_params();
    let mut opt = AdamW::new(cfg.weight_decay);
    let sched = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.total_iters);
    let mut log_file = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| DisaError::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            if p.exists() && !out.overwrite {
                return Err(DisaError::Validation(format!("{} exists; pass the force flag to replace it", p.display())));
            }
            Some((fs::File::create(&p).map_err(|e| DisaError::io(&p, e))?, p))
        }
        None => None,
    };
    let snapshot = |store: &ParamStore, iteration: usize, rng: &ChaCha8Rng| Checkpoint {
        iteration,
        params: store.clone(),
        model_cfg: model.cfg.clone(),
        train_cfg: cfg.clone(),
        variant: model.variant.clone(),
        rng_seed: rng.get_seed(),
        rng_stream: rng.get_stream(),
        rng_word_pos: rng.get_word_pos(),
    };
    let mut last_eval = None;
    for it in 0..cfg.total_iters {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let step = batch_step(model, &store, data, &inputs, &batch, &cfg, &mut rng)?;
        if !step.total.is_finite() {
            let checkpoint = match &out.dir {
                Some(dir) => {
                    let d = dir.join("diverged");
                    snapshot(&store, it, &rng).save(&d, true)?;
                    Some(d)
                }
                None => None,
            };
            return Err(DisaError::Divergence { iteration: it, checkpoint });
        }
        opt.step(&mut store, &step.grads, sched.lr(it));
        let iteration = it + 1;
        let eval_now = iteration == cfg.total_iters || (cfg.eval_every > 0 && iteration % cfg.eval_every == 0);
        let miou = if eval_now && !eval_data.is_empty() {
            let r = evaluate(model, &store, eval_data)?;
            let m = r.miou;
            last_eval = Some(r);
            Some(m)
        } else {
            None
        };
        let rec = MetricRecord { iteration, loss_total: step.total, loss_ce: step.ce, loss_itm: step.aux, miou };
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{}", rec.to_json()).map_err(|e| DisaError::io(p.as_path(), e))?;
        }
        log.push(rec);
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 && iteration != cfg.total_iters {
                snapshot(&store, iteration, &rng).save(&dir.join(format!("checkpoint-{iteration:06}")), out.overwrite)?;
            }
        }
    }
    let checkpoint = snapshot(&store, cfg.total_iters, &rng);
    if let Some(dir) = &out.dir {
        checkpoint.save(&dir.join("checkpoint"), out.overwrite)?;
    }
    let final_eval = match last_eval {
        Some(r) => r,
        None => EvalReport::from_confusion(Confusion::new(model.cfg.n_classes)),
    };
    Ok(TrainResult { checkpoint, log, final_eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{generate_dataset, DatasetSpec};

    #[test]
    fn identical_masks_score_one_and_swapped_labels_zero() {
        let gt = vec![0, 0, 1, 1, 0, 1];
        assert_eq!(evaluate_masks(&gt, &gt, 2).unwrap().miou, 1.0);
        let swapped: Vec<usize> = gt.iter().map(|&c| 1 - c).collect();
        let r = evaluate_masks(&swapped, &gt, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let r = evaluate_masks(&[0, 0, 1], &[0, 0, 1], 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn config_kv_round_trip() {
        let c = TrainConfig { total_iters: 77, lr_main: 3e-4, itm_weight: 0.5, ..Default::default() };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(TrainConfig::from_kv("lr_main = 0\n").is_err());
        assert!(TrainConfig::from_kv("itm_weight = -1\n").is_err());
    }

    #[test]
    fn short_run_logs_decomposed_losses() {
        let spec = DatasetSpec { n_scenes: 3, ..Default::default() };
        let data = generate_dataset(&spec).unwrap();
        let model = DisaModel::new(PipelineConfig::default(), ModelVariant::default()).unwrap();
        let cfg = TrainConfig { total_iters: 3, ..Default::default() };
        let r = train(&model, &data, &data, &cfg, &RunOutput::default()).unwrap();
        assert_eq!(r.log.len(), 3);
        for rec in &r.log {
            assert!((rec.loss_total - (rec.loss_ce + 0.2 * rec.loss_itm)).abs() < 1e-9);
        }
        assert!(r.log[2].miou.is_some() && r.log[0].miou.is_none());
    }
}
