//! Ablation suites: disentanglement strategy, foreground size and aggregation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::aggregate::AggregationKind;
use crate::config::PipelineConfig;
use crate::encoders::{generate_dataset, DatasetSpec};
use crate::error::{DisaError, Result};
use crate::hrm::HrmToggles;
use crate::model::{Disentangle, DisaModel, ModelVariant};
use crate::train::{evaluate, train, RunOutput, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    Disentanglement,
    KSweep,
    Aggregation,
}

impl FromStr for AblationSuite {
    type Err = DisaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disentanglement" => Ok(AblationSuite::Disentanglement),
            "k_sweep" | "k-sweep" => Ok(AblationSuite::KSweep),
            "aggregation" => Ok(AblationSuite::Aggregation),
            _ => Err(DisaError::Config(format!("unknown ablation suite `{s}` (disentanglement, k_sweep, aggregation)"))),
        }
    }
}

impl fmt::Display for AblationSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationSuite::Disentanglement => "disentanglement",
            AblationSuite::KSweep => "k_sweep",
            AblationSuite::Aggregation => "aggregation",
        })
    }
}

/// Foreground fractions of the token grid probed by the k sweep.
pub const K_RATIOS: [f64; 3] = [0.03, 0.08, 0.17];

/// Parse `class = foreground|background` lines into a per-class foreground flag.
/// Every class must be assigned exactly once.
pub fn parse_taxonomy(text: &str, class_names: &[String]) -> Result<Vec<bool>> {
    let mut fg: Vec<Option<bool>> = vec![None; class_names.len()];
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, side) = line.split_once('=').ok_or_else(|| DisaError::Taxonomy(format!("line {}: expected `class = foreground|background`", no + 1)))?;
        let (name, side) = (name.trim(), side.trim());
        let idx = class_names.iter().position(|c| c == name).ok_or_else(|| DisaError::Taxonomy(format!("line {}: unknown class `{name}`", no + 1)))?;
        let is_fg = match side {
            "foreground" | "fg" => true,
            "background" | "bg" => false,
            _ => return Err(DisaError::Taxonomy(format!("line {}: `{side}` is neither foreground nor background", no + 1))),
        };
        if fg[idx].replace(is_fg).is_some() {
            return Err(DisaError::Taxonomy(format!("class `{name}` assigned twice")));
        }
    }
    let missing: Vec<&str> = class_names.iter().zip(&fg).filter(|(_, f)| f.is_none()).map(|(c, _)| c.as_str()).collect();
    if !missing.is_empty() {
        return Err(DisaError::Taxonomy(format!("no branch for {}", missing.join(", "))));
    }
    Ok(fg.into_iter().map(|f| f.expect("checked")).collect())
}

pub fn load_taxonomy(path: &Path, class_names: &[String]) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| DisaError::io(path, e))?;
    parse_taxonomy(&text, class_names)
}

/// One entry of a suite before training.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub id: String,
    pub variant: ModelVariant,
    pub k_fg: usize,
}

/// Shared inputs of every run in a suite.
#[derive(Debug, Clone)]
pub struct AblationBase {
    pub model: PipelineConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    /// Foreground flags for variant III; the variant is skipped without it.
    pub taxonomy: Option<Vec<bool>>,
    /// Each seed offsets the model, training and dataset seeds.
    pub seeds: Vec<u64>,
    /// Scenes in the held-out split.
    pub test_scenes: usize,
}

fn toggles(pixel: bool, category: bool, semantic: bool) -> HrmToggles {
    HrmToggles { pixel, category, semantic }
}

pub fn suite_variants(suite: AblationSuite, base: &AblationBase) -> Vec<AblationVariant> {
    let k = base.model.k_fg;
    let sal = |id: &str, hrm: HrmToggles| AblationVariant {
        id: id.into(),
        variant: ModelVariant { disentangle: Disentangle::Saliency, hrm, aggregation: AggregationKind::Weighted },
        k_fg: k,
    };
    match suite {
        AblationSuite::Disentanglement => {
            let mut v = vec![
                AblationVariant { id: "I".into(), variant: ModelVariant { disentangle: Disentangle::None, ..ModelVariant::default() }, k_fg: k },
                AblationVariant { id: "II".into(), variant: ModelVariant { disentangle: Disentangle::TokenLevel, ..ModelVariant::default() }, k_fg: k },
            ];
            if let Some(tax) = &base.taxonomy {
                v.push(AblationVariant { id: "III".into(), variant: ModelVariant { disentangle: Disentangle::ClassLevel(tax.clone()), ..ModelVariant::default() }, k_fg: k });
            }
            v.push(sal("IV", HrmToggles::NONE));
            v.push(sal("V", toggles(true, false, false)));
            v.push(sal("VI", toggles(false, true, false)));
            v.push(sal("VII", toggles(true, true, false)));
            v.push(sal("VIII", HrmToggles::ALL));
            v
        }
        AblationSuite::KSweep => K_RATIOS
            .iter()
            .map(|&r| {
                let k = base.model.k_for_ratio(r);
                AblationVariant { id: format!("k{k}"), variant: ModelVariant::default(), k_fg: k }
            })
            .collect(),
        AblationSuite::Aggregation => [AggregationKind::Attention, AggregationKind::Hard, AggregationKind::Weighted]
            .into_iter()
            .map(|a| AblationVariant { id: a.to_string(), variant: ModelVariant { aggregation: a, ..ModelVariant::default() }, k_fg: k })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub suite: AblationSuite,
    pub id: String,
    pub variant: String,
    pub k_fg: usize,
    pub seed: u64,
    pub train_miou: f64,
    pub test_miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const HEADER: &'static str = "suite,id,variant,k_fg,seed,train_miou,test_miou";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{:.6},{:.6}\n", r.suite, r.id, r.variant, r.k_fg, r.seed, r.train_miou, r.test_miou));
        }
        s
    }

    /// `(id, mean train mIoU, mean test mIoU)` in first-seen order.
    pub fn means(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|e| e.0 == r.id) {
                Some(e) => {
                    e.1 += r.train_miou;
                    e.2 += r.test_miou;
                    e.3 += 1;
                }
                None => out.push((r.id.clone(), r.train_miou, r.test_miou, 1)),
            }
        }
        out.into_iter().map(|(id, a, b, n)| (id, a / n as f64, b / n as f64)).collect()
    }

    pub fn mean_of(&self, id: &str) -> Option<(f64, f64)> {
        self.means().into_iter().find(|e| e.0 == id).map(|e| (e.1, e.2))
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("id        train_miou  test_miou\n");
        for (id, a, b) in self.means() {
            s.push_str(&format!("{id:<9} {a:>10.4} {b:>10.4}\n"));
        }
        s
    }
}

/// Train and score one suite entry under one seed.
pub fn run_variant(suite: AblationSuite, v: &AblationVariant, base: &AblationBase, seed: u64) -> Result<AblationRow> {
    let cfg = PipelineConfig { k_fg: v.k_fg, seed: base.model.seed.wrapping_add(seed), ..base.model.clone() };
    let spec = DatasetSpec { seed: base.data.seed.wrapping_add(seed), ..base.data.clone() }.validate()?;
    spec.check_against(&cfg)?;
    let test_spec = DatasetSpec { seed: spec.seed.wrapping_add(10_000), n_scenes: base.test_scenes.max(1), ..spec.clone() };
    let data = generate_dataset(&spec)?;
    let test = generate_dataset(&test_spec)?;
    let model = DisaModel::new(cfg, v.variant.clone())?;
    let tc = TrainConfig { seed: base.train.seed.wrapping_add(seed), eval_every: 0, ..base.train.clone() };
    let result = train(&model, &data, &data, &tc, &RunOutput::default())?;
    let test_eval = evaluate(&model, &result.checkpoint.params, &test)?;
    Ok(AblationRow {
        suite,
        id: v.id.clone(),
        variant: v.variant.label(),
        k_fg: v.k_fg,
        seed,
        train_miou: result.final_eval.miou,
        test_miou: test_eval.miou,
    })
}

pub fn run_ablation(suite: AblationSuite, base: &AblationBase) -> Result<AblationTable> {
    if base.seeds.is_empty() {
        return Err(DisaError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for v in suite_variants(suite, base) {
        for &seed in &base.seeds {
            rows.push(run_variant(suite, &v, base, seed)?);
        }
    }
    Ok(AblationTable { rows })
}
