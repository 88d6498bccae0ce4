//! Embedding sources: a deterministic synthetic scene generator and an adapter
//! for externally computed embeddings.
//!
//! Synthetic scenes plant one unit vector per class. Class vectors share a
//! common component so that every pair has cosine exactly `fg_confusability`:
//! `v_n = sqrt(1 - c)·e_n + sqrt(c)·e_shared` over an orthonormal basis.
//! Layouts are drawn in grid-cell units and rasterized, so each patch holds a
//! single class.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::array_file::NamedArrays;
use crate::config::PipelineConfig;
use crate::error::{shape_err, DisaError, Result};
use crate::kv::{render, KvMap};
use crate::tensor::Tensor;
use crate::types::EmbeddingPair;

const CLASS_NAMES: [&str; 16] = [
    "sky", "grass", "cow", "road", "tree", "water", "building", "person", "car", "snow", "sand", "boat", "horse", "sheep", "wall", "mountain",
];

pub fn class_name(n: usize) -> String {
    CLASS_NAMES.get(n).map_or_else(|| format!("class_{n}"), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub n_classes: usize,
    /// Edge of the square rasterized layout, in pixels.
    pub image_size: usize,
    /// Edge of the square token grid.
    pub grid_size: usize,
    pub d_enc: usize,
    pub fg_confusability: f64,
    /// Expected norm of the noise added to each patch embedding.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { n_scenes: 32, n_classes: 3, image_size: 48, grid_size: 12, d_enc: 32, fg_confusability: 0.0, noise_sigma: 0.1, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(self) -> Result<Self> {
        let bad = |m: String| Err(DisaError::Config(m));
        if self.n_scenes == 0 || self.grid_size == 0 || self.image_size == 0 {
            return bad("n_scenes, grid_size and image_size must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.image_size % self.grid_size != 0 {
            return bad(format!("image_size {} is not a multiple of grid_size {}", self.image_size, self.grid_size));
        }
        if self.d_enc < self.n_classes + 1 {
            return bad(format!("d_enc {} must exceed n_classes {} to plant distinct directions", self.d_enc, self.n_classes));
        }
        if !(0.0..=1.0).contains(&self.fg_confusability) {
            return bad(format!("fg_confusability {} outside [0, 1]", self.fg_confusability));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        Ok(self)
    }

    /// Check that scenes from this spec fit a pipeline config.
    pub fn check_against(&self, cfg: &PipelineConfig) -> Result<()> {
        if cfg.grid_h != self.grid_size || cfg.grid_w != self.grid_size {
            return Err(DisaError::Config(format!("dataset grid {0}x{0} vs model grid {1}x{2}", self.grid_size, cfg.grid_h, cfg.grid_w)));
        }
        if cfg.n_classes != self.n_classes || cfg.d_enc != self.d_enc {
            return Err(DisaError::Config(format!(
                "dataset has {} classes of width {}, model expects {} of width {}",
                self.n_classes, self.d_enc, cfg.n_classes, cfg.d_enc
            )));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut m = KvMap::parse(text)?;
        let mut s = DatasetSpec::default();
        m.take_into("n_scenes", &mut s.n_scenes)?;
        m.take_into("n_classes", &mut s.n_classes)?;
        m.take_into("image_size", &mut s.image_size)?;
        m.take_into("grid_size", &mut s.grid_size)?;
        m.take_into("d_enc", &mut s.d_enc)?;
        m.take_into("fg_confusability", &mut s.fg_confusability)?;
        m.take_into("noise_sigma", &mut s.noise_sigma)?;
        m.take_into("seed", &mut s.seed)?;
        m.finish()?;
        s.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DisaError::io(path, e))?;
        DatasetSpec::from_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        render(&[
            ("n_scenes", self.n_scenes.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("image_size", self.image_size.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("d_enc", self.d_enc.to_string()),
            ("fg_confusability", self.fg_confusability.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(class_name).collect()
    }

    /// Output (decoder) resolution for this grid.
    pub fn output_size(&self) -> usize {
        4 * self.grid_size
    }
}

/// Ground-truth layout plus the generator parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Row-major `[image_size, image_size]` class ids.
    pub layout: Vec<usize>,
    pub image_size: usize,
    /// `[N_C, D_enc]`, unit rows.
    pub class_vectors: Tensor,
    pub fg_confusability: f64,
    pub noise_sigma: f64,
}

/// The two intermediate-feature stand-ins handed to the decoder, `[H, W, D_enc]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub shallow: Tensor,
    pub deep: Tensor,
}

/// Everything one scene provides.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene: SyntheticScene,
    pub pair: EmbeddingPair,
    pub guidance: Guidance,
    /// `[grid, grid]` majority labels.
    pub gt_grid: Vec<usize>,
    /// `[4·grid, 4·grid]` labels at decoder resolution.
    pub gt_out: Vec<usize>,
    pub out_size: usize,
}

impl SceneSample {
    /// Which classes appear anywhere in the scene.
    pub fn present_classes(&self) -> Vec<bool> {
        let mut p = vec![false; self.pair.n_classes()];
        for &c in &self.gt_out {
            p[c] = true;
        }
        p
    }
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Planted class directions with pairwise cosine `spec.fg_confusability`.
pub fn class_vectors(spec: &DatasetSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = orthonormal_basis(&mut rng, spec.n_classes + 1, spec.d_enc);
    let c = spec.fg_confusability;
    let (own, shared) = ((1.0 - c).sqrt(), c.sqrt());
    let mut data = Vec::with_capacity(spec.n_classes * spec.d_enc);
    for n in 0..spec.n_classes {
        for d in 0..spec.d_enc {
            data.push(own * basis[n][d] + shared * basis[spec.n_classes][d]);
        }
    }
    Tensor::new(&[spec.n_classes, spec.d_enc], data).unwrap()
}

fn draw_grid_layout(rng: &mut ChaCha8Rng, g: usize, n_classes: usize) -> Vec<usize> {
    let background = rng.random_range(0..n_classes);
    let mut cells = vec![background; g * g];
    let n_objects = rng.random_range(1..=(n_classes - 1).clamp(1, 3));
    for _ in 0..n_objects {
        let mut cls = rng.random_range(0..n_classes - 1);
        if cls >= background {
            cls += 1;
        }
        let max_extent = (g / 2).max(2);
        let hh = rng.random_range(2..=max_extent).min(g);
        let ww = rng.random_range(2..=max_extent).min(g);
        let r0 = rng.random_range(0..=g - hh);
        let c0 = rng.random_range(0..=g - ww);
        let ellipse = rng.random_bool(0.5);
        for r in r0..r0 + hh {
            for c in c0..c0 + ww {
                let inside = if ellipse {
                    let dy = (r as f64 + 0.5 - r0 as f64 - hh as f64 / 2.0) / (hh as f64 / 2.0);
                    let dx = (c as f64 + 0.5 - c0 as f64 - ww as f64 / 2.0) / (ww as f64 / 2.0);
                    dx * dx + dy * dy <= 1.0
                } else {
                    true
                };
                if inside {
                    cells[r * g + c] = cls;
                }
            }
        }
    }
    cells
}

/// Majority class of each `factor`×`factor` block; ties go to the lower id.
pub fn majority_pool(labels: &[usize], size: usize, factor: usize, n_classes: usize) -> Vec<usize> {
    let out = size / factor;
    let mut pooled = Vec::with_capacity(out * out);
    for r in 0..out {
        for c in 0..out {
            let mut counts = vec![0usize; n_classes];
            for y in r * factor..(r + 1) * factor {
                for x in c * factor..(c + 1) * factor {
                    counts[labels[y * size + x]] += 1;
                }
            }
            let mut best = 0;
            for (i, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = i;
                }
            }
            pooled.push(best);
        }
    }
    pooled
}

/// Nearest-neighbour resampling of a square label map.
pub fn resample_nearest(labels: &[usize], size: usize, new_size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(new_size * new_size);
    for r in 0..new_size {
        for c in 0..new_size {
            out.push(labels[(r * size / new_size) * size + c * size / new_size]);
        }
    }
    out
}

fn noisy_copy(rng: &mut ChaCha8Rng, base: &Tensor, per_coord_std: f64) -> Tensor {
    if per_coord_std == 0.0 {
        return base.clone();
    }
    let normal = Normal::new(0.0, per_coord_std).unwrap();
    Tensor::new(base.shape(), base.data().iter().map(|v| v + normal.sample(rng)).collect()).unwrap()
}

/// Deterministic scene `index` of the dataset.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<SceneSample> {
    if index >= spec.n_scenes {
        return Err(DisaError::Index { index, len: spec.n_scenes });
    }
    let spec = spec.clone().validate()?;
    let vectors = class_vectors(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let g = spec.grid_size;
    let cells = draw_grid_layout(&mut rng, g, spec.n_classes);
    let patch = spec.image_size / g;
    let mut layout = vec![0usize; spec.image_size * spec.image_size];
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            layout[y * spec.image_size + x] = cells[(y / patch) * g + x / patch];
        }
    }
    let gt_grid = majority_pool(&layout, spec.image_size, patch, spec.n_classes);
    let out_size = spec.output_size();
    let gt_out = resample_nearest(&layout, spec.image_size, out_size);

    let d = spec.d_enc;
    let mut clean = Vec::with_capacity(g * g * d);
    for &cls in &gt_grid {
        clean.extend_from_slice(&vectors.data()[cls * d..(cls + 1) * d]);
    }
    let clean = Tensor::new(&[g, g, d], clean).unwrap();
    let std = spec.noise_sigma / (d as f64).sqrt();
    let image = noisy_copy(&mut rng, &clean, std);
    let shallow = noisy_copy(&mut rng, &image, std);
    let deep = noisy_copy(&mut rng, &image, std);

    let pair = EmbeddingPair::new(image, vectors.clone(), spec.class_names())?;
    Ok(SceneSample {
        scene: SyntheticScene { layout, image_size: spec.image_size, class_vectors: vectors, fg_confusability: spec.fg_confusability, noise_sigma: spec.noise_sigma },
        pair,
        guidance: Guidance { shallow, deep },
        gt_grid,
        gt_out,
        out_size,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SceneSample>> {
    (0..spec.n_scenes).map(|i| generate_scene(spec, i)).collect()
}

/// Wrap externally computed features after checking them against the config.
pub fn embed_external(cfg: &PipelineConfig, image_features: Tensor, text_features: Tensor, class_names: Vec<String>) -> Result<EmbeddingPair> {
    let want_img = [cfg.grid_h, cfg.grid_w, cfg.d_enc];
    if image_features.shape() != want_img {
        return Err(shape_err(format!("image features {:?}, expected {want_img:?}", image_features.shape())));
    }
    let want_txt = [cfg.n_classes, cfg.d_enc];
    if text_features.shape() != want_txt {
        return Err(shape_err(format!("text features {:?}, expected {want_txt:?}", text_features.shape())));
    }
    EmbeddingPair::new(image_features, text_features, class_names)
}

/// Read `embeddings.nac` (arrays `image`, `text`, optional `guidance.shallow`
/// and `guidance.deep`) and `classes.txt` (one name per line) from `dir`.
/// Missing guidance falls back to the image features.
pub fn load_external_dir(cfg: &PipelineConfig, dir: &Path) -> Result<(EmbeddingPair, Guidance)> {
    let arrays = NamedArrays::read(&dir.join("embeddings.nac"))?;
    let names_path = dir.join("classes.txt");
    let names: Vec<String> = std::fs::read_to_string(&names_path)
        .map_err(|e| DisaError::io(&names_path, e))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let pair = embed_external(cfg, arrays.tensor("image")?.clone(), arrays.tensor("text")?.clone(), names)?;
    let guide = |name: &str| -> Result<Tensor> {
        match arrays.get(name) {
            None => Ok(pair.image().clone()),
            Some(_) => {
                let t = arrays.tensor(name)?.clone();
                t.expect_shape(pair.image().shape(), name)?;
                t.ensure_finite(name)?;
                Ok(t)
            }
        }
    };
    let guidance = Guidance { shallow: guide("guidance.shallow")?, deep: guide("guidance.deep")? };
    Ok((pair, guidance))
}

/// Container form of one scene, as written by `gen-data`.
pub fn scene_arrays(sample: &SceneSample) -> NamedArrays {
    use crate::array_file::Array;
    let mut a = NamedArrays::new();
    a.insert_f64("image", sample.pair.image().clone());
    a.insert_f64("text", sample.pair.text().clone());
    a.insert_f64("guidance.shallow", sample.guidance.shallow.clone());
    a.insert_f64("guidance.deep", sample.guidance.deep.clone());
    let (h, w) = sample.pair.grid();
    a.insert("gt.grid", Array::labels(&[h, w], &sample.gt_grid));
    a.insert("gt.out", Array::labels(&[sample.out_size, sample.out_size], &sample.gt_out));
    a.insert("layout", Array::labels(&[sample.scene.image_size, sample.scene.image_size], &sample.scene.layout));
    a
}

/// Spec file inside a dataset directory; scenes are regenerated from it.
pub const DATASET_FILE: &str = "dataset.txt";

/// Write a generated dataset: the spec, class names, and one container per
/// scene under `scenes/`. Refuses to replace an existing dataset unless `overwrite`.
pub fn write_dataset_dir(spec: &DatasetSpec, data: &[SceneSample], dir: &Path, overwrite: bool) -> Result<()> {
    let spec_path = dir.join(DATASET_FILE);
    if spec_path.exists() && !overwrite {
        return Err(DisaError::Validation(format!("{} already holds a dataset; pass the force flag to replace it", dir.display())));
    }
    let scenes = dir.join("scenes");
    std::fs::create_dir_all(&scenes).map_err(|e| DisaError::io(&scenes, e))?;
    std::fs::write(&spec_path, spec.to_kv()).map_err(|e| DisaError::io(&spec_path, e))?;
    let names_path = dir.join("classes.txt");
    std::fs::write(&names_path, spec.class_names().join("\n") + "\n").map_err(|e| DisaError::io(&names_path, e))?;
    for (i, s) in data.iter().enumerate() {
        scene_arrays(s).write(&scenes.join(format!("scene_{i:04}.nac")))?;
    }
    Ok(())
}

/// Read the spec of a dataset directory and regenerate its scenes.
pub fn read_dataset_dir(dir: &Path) -> Result<(DatasetSpec, Vec<SceneSample>)> {
    let spec = DatasetSpec::load(&dir.join(DATASET_FILE))?;
    let data = generate_dataset(&spec)?;
    Ok((spec, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { n_scenes: 2, ..Default::default() };
        let data = generate_dataset(&spec).unwrap();
        write_dataset_dir(&spec, &data, dir.path(), false).unwrap();
        assert!(write_dataset_dir(&spec, &data, dir.path(), false).is_err());
        let (back, scenes) = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(scenes[1].gt_out, data[1].gt_out);
        let a = NamedArrays::read(&dir.path().join("scenes/scene_0001.nac")).unwrap();
        assert_eq!(a.tensor("image").unwrap(), data[1].pair.image());
    }

    #[test]
    fn clean_orthogonal_scene_has_indicator_cosines() {
        let spec = DatasetSpec { noise_sigma: 0.0, fg_confusability: 0.0, n_scenes: 3, ..Default::default() };
        let s = generate_scene(&spec, 1).unwrap();
        let d = spec.d_enc;
        let text = s.pair.text().data();
        for (t, &cls) in s.gt_grid.iter().enumerate() {
            let cell = &s.pair.image().data()[t * d..(t + 1) * d];
            for n in 0..spec.n_classes {
                let c = cosine(cell, &text[n * d..(n + 1) * d]);
                let want = if n == cls { 1.0 } else { 0.0 };
                assert!((c - want).abs() < 1e-12, "cell {t} class {n}: {c}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec { n_scenes: 4, noise_sigma: 0.3, ..Default::default() };
        assert_eq!(generate_scene(&spec, 2).unwrap(), generate_scene(&spec, 2).unwrap());
        assert_ne!(generate_scene(&spec, 2).unwrap().pair, generate_scene(&spec, 3).unwrap().pair);
    }

    #[test]
    fn confusability_sets_pairwise_cosine() {
        let spec = DatasetSpec { n_classes: 5, fg_confusability: 0.9, ..Default::default() };
        let v = class_vectors(&spec);
        let d = spec.d_enc;
        for i in 0..5 {
            let vi = &v.data()[i * d..(i + 1) * d];
            // direct dot-product oracle
            let norm: f64 = vi.iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
            for j in 0..i {
                let vj = &v.data()[j * d..(j + 1) * d];
                let dot: f64 = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
                assert!((dot - 0.9).abs() < 1e-6, "pair ({i},{j}) cosine {dot}");
            }
        }
    }

    #[test]
    fn grid_labels_are_majority_of_output_labels() {
        let spec = DatasetSpec { n_scenes: 6, image_size: 96, ..Default::default() };
        for i in 0..spec.n_scenes {
            let s = generate_scene(&spec, i).unwrap();
            // direct recount over each 4x4 output block
            let out = s.out_size;
            for r in 0..spec.grid_size {
                for c in 0..spec.grid_size {
                    let mut counts = vec![0; spec.n_classes];
                    for y in 0..4 {
                        for x in 0..4 {
                            counts[s.gt_out[(4 * r + y) * out + 4 * c + x]] += 1;
                        }
                    }
                    let top = *counts.iter().max().unwrap();
                    let winner = counts.iter().position(|&n| n == top).unwrap();
                    assert_eq!(s.gt_grid[r * spec.grid_size + c], winner);
                }
            }
        }
    }

    #[test]
    fn out_of_range_index_fails() {
        let spec = DatasetSpec { n_scenes: 2, ..Default::default() };
        assert!(matches!(generate_scene(&spec, 2), Err(DisaError::Index { index: 2, len: 2 })));
    }

    #[test]
    fn external_adapter_checks_shapes_and_values() {
        let cfg = PipelineConfig { grid_h: 2, grid_w: 2, d_enc: 4, n_classes: 2, window_size: 2, k_fg: 1, ..Default::default() };
        let names = vec!["a".to_string(), "b".to_string()];
        let img = Tensor::full(&[2, 2, 4], 0.5);
        let txt = Tensor::full(&[2, 4], 1.0);
        let pair = embed_external(&cfg, img.clone(), txt.clone(), names.clone()).unwrap();
        assert_eq!(pair.image(), &img);
        assert!(matches!(embed_external(&cfg, img.clone(), Tensor::full(&[2, 3], 1.0), names.clone()), Err(DisaError::Shape(_))));
        let mut nan = img;
        nan.data_mut()[3] = f64::NAN;
        assert!(matches!(embed_external(&cfg, nan, txt, names), Err(DisaError::Validation(_))));
    }

    #[test]
    fn spec_kv_round_trip() {
        let spec = DatasetSpec { fg_confusability: 0.7, noise_sigma: 0.3, n_classes: 4, ..Default::default() };
        assert_eq!(DatasetSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        assert!(DatasetSpec::from_kv("image_size = 50\n").is_err());
    }
}
