use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use disa_core::ablation::{load_taxonomy, run_ablation, AblationBase, AblationSuite};
use disa_core::config::PipelineConfig;
use disa_core::efficiency::efficiency_report;
use disa_core::encoders::{generate_dataset, read_dataset_dir, write_dataset_dir, DatasetSpec, SceneSample};
use disa_core::error::{DisaError, Result};
use disa_core::export::{upscale, write_gray_png, write_label_png};
use disa_core::model::{DisaModel, ModelVariant, SceneInput};
use disa_core::nn::ParamStore;
use disa_core::sdm::{matching_score_objective, saliency};
use disa_core::tensor::Tensor;
use disa_core::train::{evaluate, evaluate_masks, train, Checkpoint, EvalReport, RunOutput, TrainConfig};

/// Saliency-driven foreground/background disentangled segmentation on
/// synthetic embeddings.
#[derive(Parser, Debug)]
#[command(name = "disa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, env = "DISA_OUT", default_value = "disa-out")]
    out: PathBuf,
    /// Override every seed taken from config files.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing checkpoints, datasets and tables.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Dataset spec (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write metrics.jsonl plus a checkpoint.
    Train {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Model config (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training config (key = value lines).
        #[arg(long = "train")]
        train_config: Option<PathBuf>,
        /// Variant label such as `saliency/p1c1s1/weighted`.
        #[arg(long, default_value = "saliency/p1c1s1/weighted")]
        variant: String,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset, or a predicted mask against a ground-truth mask.
    Eval {
        /// Checkpoint directory written by train.
        #[arg(long, required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory written by gen-data.
        #[arg(long, required_unless_present = "pred")]
        data: Option<PathBuf>,
        /// Predicted label mask (whitespace-separated class indices).
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Ground-truth label mask in the same format.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Number of classes for mask mode (default: largest label + 1).
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation suite and write a CSV table.
    Ablate {
        /// disentanglement, k_sweep or aggregation.
        #[arg(long, value_parser = parse_suite)]
        suite: AblationSuite,
        /// Dataset directory; its spec seeds the train and held-out splits.
        #[arg(long)]
        data: PathBuf,
        /// Model config (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training config (key = value lines).
        #[arg(long = "train")]
        train_config: Option<PathBuf>,
        /// `class = foreground|background` lines for the class-level variant.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Scenes in the held-out split.
        #[arg(long, default_value_t = 16)]
        test_scenes: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Report parameter count, MAC estimate and forward timing.
    ReportEfficiency {
        /// Model config (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Variant label such as `none/p1c1s1/weighted`.
        #[arg(long, default_value = "saliency/p1c1s1/weighted")]
        variant: String,
        /// Use this checkpoint's config, variant and weights instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Timed forward passes (at least 20).
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write PNG figures for one scene and class.
    Visualize {
        /// Without a checkpoint a freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Scene index within the dataset.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Class name as listed in classes.txt.
        #[arg(long = "class")]
        class_name: String,
        /// Figure to draw.
        #[arg(long, value_enum)]
        kind: Kind,
        /// Objective whose gradient drives the saliency map.
        #[arg(long, value_enum, default_value = "matching")]
        objective: Objective,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Saliency,
    Correlation,
    Partition,
    Prediction,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Matching,
    Constant,
}

fn parse_suite(s: &str) -> std::result::Result<AblationSuite, String> {
    s.parse().map_err(|e: DisaError| e.to_string())
}

/// An error tagged with the stage that raised it.
struct Failure {
    stage: &'static str,
    err: DisaError,
}

trait Stage<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|err| Failure { stage, err })
    }
}

type Outcome = std::result::Result<(), Failure>;

fn exit_code(err: &DisaError) -> u8 {
    match err {
        DisaError::Config(_) | DisaError::Taxonomy(_) => 2,
        _ => 3,
    }
}

fn prepare_out(common: &Common) -> Outcome {
    fs::create_dir_all(&common.out).map_err(|e| DisaError::io(&common.out, e)).at("output")
}

fn write_file(path: &Path, text: &str, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(DisaError::Validation(format!("{} exists; pass --force to replace it", path.display()))).at("output");
    }
    fs::write(path, text).map_err(|e| DisaError::io(path, e)).at("output")
}

fn load_model_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_variant(label: &str) -> Result<ModelVariant> {
    label.parse().map_err(DisaError::Config)
}

fn load_data(dir: &Path, cfg: &PipelineConfig) -> Result<(DatasetSpec, Vec<SceneSample>)> {
    let (spec, data) = read_dataset_dir(dir)?;
    spec.check_against(cfg)?;
    Ok((spec, data))
}

fn report_text(r: &EvalReport, names: &[String]) -> (String, String) {
    let mut csv = String::from("class,iou\n");
    let mut human = String::new();
    for (n, iou) in r.per_class.iter().enumerate() {
        let name = names.get(n).cloned().unwrap_or_else(|| format!("class_{n}"));
        match iou {
            Some(v) => {
                csv.push_str(&format!("{name},{v:.6}\n"));
                human.push_str(&format!("  {name:<12} {v:.4}\n"));
            }
            None => {
                csv.push_str(&format!("{name},\n"));
                human.push_str(&format!("  {name:<12} absent\n"));
            }
        }
    }
    csv.push_str(&format!("mIoU,{:.6}\n", r.miou));
    human.push_str(&format!("mIoU {:.4}\n", r.miou));
    (csv, human)
}

fn gen_data(config: Option<PathBuf>, common: Common) -> Outcome {
    let mut spec = match &config {
        Some(p) => DatasetSpec::load(p).at("config")?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let spec = spec.validate().at("config")?;
    prepare_out(&common)?;
    let data = generate_dataset(&spec).at("gen-data")?;
    write_dataset_dir(&spec, &data, &common.out, common.force).at("gen-data")?;
    for (i, s) in data.iter().take(4).enumerate() {
        write_label_png(&common.out.join(format!("scenes/scene_{i:04}_gt.png")), &s.gt_out, s.out_size, s.out_size).at("gen-data")?;
    }
    println!("wrote {} scenes ({} classes, {}x{} grid) to {}", data.len(), spec.n_classes, spec.grid_size, spec.grid_size, common.out.display());
    Ok(())
}

fn run_train(data: PathBuf, config: Option<PathBuf>, train_config: Option<PathBuf>, variant: String, common: Common) -> Outcome {
    let cfg = load_model_config(config.as_deref(), common.seed).at("config")?;
    let tc = load_train_config(train_config.as_deref(), common.seed).at("config")?;
    let variant = parse_variant(&variant).at("config")?;
    let (_, scenes) = load_data(&data, &cfg).at("data")?;
    let model = DisaModel::new(cfg, variant).at("config")?;
    prepare_out(&common)?;
    let r = train(&model, &scenes, &scenes, &tc, &RunOutput { dir: Some(common.out.clone()), overwrite: common.force }).at("train")?;
    let last = r.log.last().expect("at least one iteration");
    let summary = format!(
        "variant {}\niterations {}\nfinal loss {:.6} (ce {:.6}, aux {:.6})\ntrain mIoU {:.4}\ncheckpoint {}\n",
        model.variant,
        last.iteration,
        last.loss_total,
        last.loss_ce,
        last.loss_itm,
        r.final_eval.miou,
        common.out.join("checkpoint").display()
    );
    write_file(&common.out.join("train_summary.txt"), &summary, common.force)?;
    print!("{summary}");
    Ok(())
}

fn read_mask(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| DisaError::io(path, e))?;
    text.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| DisaError::Format(format!("{}: `{t}` is not a class index", path.display()))))
        .collect()
}

fn run_eval(checkpoint: Option<PathBuf>, data: Option<PathBuf>, pred: Option<PathBuf>, gt: Option<PathBuf>, classes: Option<usize>, common: Common) -> Outcome {
    let (report, names) = match (pred, gt) {
        (Some(p), Some(g)) => {
            let (p, g) = (read_mask(&p).at("eval")?, read_mask(&g).at("eval")?);
            let nc = classes.unwrap_or_else(|| p.iter().chain(&g).max().map_or(1, |m| m + 1));
            (evaluate_masks(&p, &g, nc).at("eval")?, Vec::new())
        }
        _ => {
            let ck = Checkpoint::load(checkpoint.as_deref().expect("clap requires it")).at("checkpoint")?;
            let model = ck.model().at("checkpoint")?;
            let (spec, scenes) = load_data(data.as_deref().expect("clap requires it"), &model.cfg).at("data")?;
            (evaluate(&model, &ck.params, &scenes).at("eval")?, spec.class_names())
        }
    };
    prepare_out(&common)?;
    let (csv, human) = report_text(&report, &names);
    write_file(&common.out.join("eval.csv"), &csv, common.force)?;
    print!("{human}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_ablate(suite: AblationSuite, data: PathBuf, config: Option<PathBuf>, train_config: Option<PathBuf>, taxonomy: Option<PathBuf>, seeds: Vec<u64>, test_scenes: usize, common: Common) -> Outcome {
    let model = load_model_config(config.as_deref(), common.seed).at("config")?;
    let train = load_train_config(train_config.as_deref(), common.seed).at("config")?;
    let spec = DatasetSpec::load(&data.join(disa_core::encoders::DATASET_FILE)).at("data")?;
    spec.check_against(&model).at("data")?;
    let taxonomy = match &taxonomy {
        Some(p) => Some(load_taxonomy(p, &spec.class_names()).at("config")?),
        None => None,
    };
    let out = common.out.join(format!("ablation_{suite}.csv"));
    if out.exists() && !common.force {
        return Err(DisaError::Validation(format!("{} exists; pass --force to replace it", out.display()))).at("output");
    }
    let base = AblationBase { model, train, data: spec, taxonomy, seeds, test_scenes };
    let table = run_ablation(suite, &base).at("ablate")?;
    prepare_out(&common)?;
    write_file(&out, &table.to_csv(), true)?;
    print!("{}", table.summary());
    println!("table written to {}", out.display());
    Ok(())
}

fn run_efficiency(config: Option<PathBuf>, variant: String, checkpoint: Option<PathBuf>, runs: usize, common: Common) -> Outcome {
    let (model, store) = match &checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).at("checkpoint")?;
            (ck.model().at("checkpoint")?, ck.params)
        }
        None => {
            let cfg = load_model_config(config.as_deref(), common.seed).at("config")?;
            let m = DisaModel::new(cfg, parse_variant(&variant).at("config")?).at("config")?;
            let s = m.init_params();
            (m, s)
        }
    };
    let cfg = &model.cfg;
    let spec = DatasetSpec {
        n_scenes: 8,
        n_classes: cfg.n_classes,
        grid_size: cfg.grid_h,
        image_size: 4 * cfg.grid_h,
        d_enc: cfg.d_enc,
        seed: cfg.seed,
        ..Default::default()
    };
    if cfg.grid_h != cfg.grid_w {
        return Err(DisaError::Config("timing scenes need a square grid".into())).at("config");
    }
    let inputs: Vec<SceneInput> = generate_dataset(&spec).at("data")?.iter().map(SceneInput::from_sample).collect::<Result<_>>().at("data")?;
    let rep = efficiency_report(&model, &store, &inputs, runs).at("efficiency")?;
    prepare_out(&common)?;
    write_file(&common.out.join("efficiency.json"), &rep.to_json(), common.force)?;
    print!("{}", rep.summary());
    Ok(())
}

fn model_and_store(checkpoint: Option<&Path>, seed: Option<u64>) -> Result<(DisaModel, ParamStore)> {
    match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Ok((ck.model()?, ck.params))
        }
        None => {
            let m = DisaModel::new(load_model_config(None, seed)?, ModelVariant::default())?;
            let s = m.init_params();
            Ok((m, s))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_visualize(checkpoint: Option<PathBuf>, data: PathBuf, scene: usize, class_name: String, kind: Kind, objective: Objective, common: Common) -> Outcome {
    let (model, store) = model_and_store(checkpoint.as_deref(), common.seed).at("checkpoint")?;
    let (_, scenes) = load_data(&data, &model.cfg).at("data")?;
    let sample = scenes.get(scene).ok_or(DisaError::Index { index: scene, len: scenes.len() }).at("data")?;
    let class = sample
        .pair
        .class_index(&class_name)
        .ok_or_else(|| DisaError::Config(format!("unknown class `{class_name}`; known: {}", sample.pair.class_names().join(", "))))
        .at("config")?;
    let input = SceneInput::from_sample(sample).at("data")?;
    let (h, w) = sample.pair.grid();
    let nc = sample.pair.n_classes();
    let factor = sample.out_size / h;
    prepare_out(&common)?;
    let stem = format!("scene{scene:04}_{class_name}");
    let path = |suffix: &str| common.out.join(format!("{stem}_{suffix}.png"));
    let column = |t: &Tensor| -> Vec<f64> { t.data().iter().skip(class).step_by(nc).copied().collect() };
    let pred = model.predict(&store, &input).at("predict")?;
    match kind {
        Kind::Saliency => {
            let attn = pred.attention.ok_or_else(|| DisaError::Config(format!("variant {} has no saliency path", model.variant))).at("config")?;
            let head = &model.itm;
            let sal = match objective {
                Objective::Matching => saliency(&attn, (h, w), &store, |ctx, a| matching_score_objective(ctx, head, a)),
                Objective::Constant => saliency(&attn, (h, w), &store, |ctx, _| ctx.tape.constant(Tensor::scalar(1.0))),
            }
            .at("saliency")?;
            let map = column(sal.maps());
            let p = path("saliency");
            write_gray_png(&p, &upscale(&map, h, w, factor), h * factor, w * factor).at("visualize")?;
            let peak = map.iter().copied().fold(0.0, f64::max);
            println!("saliency map for {class_name}: peak {peak:.3e}, {}", p.display());
        }
        Kind::Correlation => {
            let map = column(&input.cosine);
            let p = path("correlation");
            write_gray_png(&p, &upscale(&map, h, w, factor), h * factor, w * factor).at("visualize")?;
            println!("cosine correlation for {class_name}: {}", p.display());
        }
        Kind::Partition => {
            let part = pred.partition.ok_or_else(|| DisaError::Config(format!("variant {} has no partition", model.variant))).at("config")?;
            let cells: Vec<f64> = (0..h * w).map(|t| if part.is_fg(t, class) { 1.0 } else { 0.0 }).collect();
            let marked = cells.iter().filter(|&&c| c > 0.0).count();
            let p = path("partition");
            write_gray_png(&p, &upscale(&cells, h, w, factor), h * factor, w * factor).at("visualize")?;
            println!("foreground cells for {class_name}: {marked} (k_fg = {}), {}", model.cfg.k_fg, p.display());
        }
        Kind::Prediction => {
            let mask = pred.output.mask();
            let (oh, ow) = pred.output.size();
            let p = path("prediction");
            write_label_png(&p, mask, oh, ow).at("visualize")?;
            write_label_png(&path("gt"), &sample.gt_out, oh, ow).at("visualize")?;
            let correct = mask.iter().zip(&sample.gt_out).filter(|(a, b)| a == b).count();
            println!("pixel accuracy {:.4}, {}", correct as f64 / mask.len() as f64, p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, common } => gen_data(config, common),
        Command::Train { data, config, train_config, variant, common } => run_train(data, config, train_config, variant, common),
        Command::Eval { checkpoint, data, pred, gt, classes, common } => run_eval(checkpoint, data, pred, gt, classes, common),
        Command::Ablate { suite, data, config, train_config, taxonomy, seeds, test_scenes, common } => run_ablate(suite, data, config, train_config, taxonomy, seeds, test_scenes, common),
        Command::ReportEfficiency { config, variant, checkpoint, runs, common } => run_efficiency(config, variant, checkpoint, runs, common),
        Command::Visualize { checkpoint, data, scene, class_name, kind, objective, common } => run_visualize(checkpoint, data, scene, class_name, kind, objective, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { stage, err }) => {
            eprintln!("error [{stage}]: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
