//! Two-stage ×2 upsampling decoder guided by image features.
//!
//! Each stage concatenates guidance channels to every class's volume, then
//! applies a stride-2, kernel-2 transposed convolution. With kernel equal to
//! stride the kernel positions never overlap, so the layer is a linear map to
//! `4·D_out` channels followed by a pixel shuffle.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::PipelineConfig;
use crate::encoders::Guidance;
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::types::{CorrelationVolume, EmbeddingPair, SegmentationOutput, Stage};

/// Gather index that moves `[N, H·W, 4·d]` sub-pixel channel blocks to
/// `[N, 2H·2W, d]`. Block `dy·2 + dx` lands at `(2i + dy, 2j + dx)`.
pub fn pixel_shuffle_index(n: usize, h: usize, w: usize, d: usize) -> Vec<usize> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(n * oh * ow * d);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let (i, j, sub) = (y / 2, x / 2, (y % 2) * 2 + x % 2);
                let base = (b * h * w + i * w + j) * 4 * d + sub * d;
                idx.extend(base..base + d);
            }
        }
    }
    idx
}

/// Nearest ×2 upsampling index for `[H·W, d]` → `[2H·2W, d]`.
pub fn upsample2_index(h: usize, w: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(4 * h * w * d);
    for y in 0..2 * h {
        for x in 0..2 * w {
            let base = ((y / 2) * w + x / 2) * d;
            idx.extend(base..base + d);
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct UpsampleDecoder {
    pub proj_deep: Linear,
    pub proj_image: Linear,
    pub proj_shallow: Linear,
    pub up1: Linear,
    pub up2: Linear,
    pub head: Linear,
    pub d_in: usize,
    pub d1: usize,
    pub d2: usize,
    pub d_guide: usize,
}

impl UpsampleDecoder {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let d_in = cfg.d_corr;
        let d1 = (d_in / 2).max(4);
        let d2 = (d_in / 4).max(4);
        let g = cfg.d_guide;
        UpsampleDecoder {
            proj_deep: Linear::new("dec.guide_deep", cfg.d_enc, g, true),
            proj_image: Linear::new("dec.guide_image", cfg.d_enc, g, false),
            proj_shallow: Linear::new("dec.guide_shallow", cfg.d_enc, g, true),
            up1: Linear::new("dec.up1", d_in + g, 4 * d1, true),
            up2: Linear::new("dec.up2", d1 + g, 4 * d2, true),
            head: Linear::new("dec.head", d2, 1, true),
            d_in,
            d1,
            d2,
            d_guide: g,
        }
    }

    fn layers(&self) -> [&Linear; 6] {
        [&self.proj_deep, &self.proj_image, &self.proj_shallow, &self.up1, &self.up2, &self.head]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in self.layers() {
            l.init(store, rng, Init::Xavier(1.0));
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// `x: [N_C, HW, D]`, image and guidance `[HW, D_enc]` → logits `[4H, 4W, N_C]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, image: Var<'t>, guidance: (Var<'t>, Var<'t>), grid: (usize, usize)) -> Var<'t> {
        ctx.record("decode");
        let (h, w) = grid;
        let nc = x.shape()[0];
        let (shallow, deep) = guidance;
        let zeros = |s: &[usize]| ctx.tape.constant(Tensor::zeros(s));

        let g1 = self.proj_deep.forward(ctx, deep).add(self.proj_image.forward(ctx, image));
        let s1 = x.concat_last(zeros(&[nc, h * w, self.d_guide]).add(g1));
        let y1 = self.up1.forward(ctx, s1).gather_flat(Rc::new(pixel_shuffle_index(nc, h, w, self.d1)), &[nc, 4 * h * w, self.d1]).relu();

        let g2 = self.proj_shallow.forward(ctx, shallow).gather_flat(Rc::new(upsample2_index(h, w, self.d_guide)), &[4 * h * w, self.d_guide]);
        let s2 = y1.concat_last(zeros(&[nc, 4 * h * w, self.d_guide]).add(g2));
        let y2 = self.up2.forward(ctx, s2).gather_flat(Rc::new(pixel_shuffle_index(nc, 2 * h, 2 * w, self.d2)), &[nc, 16 * h * w, self.d2]).relu();

        self.head.forward(ctx, y2).reshape(&[nc, 16 * h * w]).permute(&[1, 0]).reshape(&[4 * h, 4 * w, nc])
    }
}

/// Decode an aggregated volume under the stored weights.
pub fn decode(store: &ParamStore, dec: &UpsampleDecoder, c_tilde: &CorrelationVolume, pair: &EmbeddingPair, guidance: &Guidance) -> Result<SegmentationOutput> {
    c_tilde.expect_stage(Stage::Aggregated, "decode")?;
    let (h, w, _, d) = c_tilde.dims();
    if pair.grid() != (h, w) || d != dec.d_in || pair.d_enc() != dec.proj_deep.d_in {
        return Err(shape_err(format!(
            "volume {:?} with image grid {:?} (width {}) does not fit decoder ({} channels, {} guide width)",
            c_tilde.dims(),
            pair.grid(),
            pair.d_enc(),
            dec.d_in,
            dec.proj_deep.d_in
        )));
    }
    guidance.shallow.expect_shape(pair.image().shape(), "shallow guidance")?;
    guidance.deep.expect_shape(pair.image().shape(), "deep guidance")?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let flat = |t: &Tensor| tape.constant(t.clone().reshape(&[h * w, pair.d_enc()]).expect("checked shape"));
    let logits = dec.forward(&ctx, tape.constant(c_tilde.class_major()), flat(pair.image()), (flat(&guidance.shallow), flat(&guidance.deep)), (h, w));
    SegmentationOutput::new((*logits.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fixture(grid: usize) -> (UpsampleDecoder, ParamStore, CorrelationVolume, EmbeddingPair, Guidance) {
        let cfg = PipelineConfig { grid_h: grid, grid_w: grid, n_classes: 3, d_corr: 8, d_enc: 5, d_guide: 4, k_fg: 1, window_size: 2, ..Default::default() };
        let dec = UpsampleDecoder::new(&cfg);
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let c = CorrelationVolume::new(Tensor::from_fn(&[grid, grid, 3, 8], |i| (i as f64).cos()), Stage::Aggregated).unwrap();
        let img = Tensor::from_fn(&[grid, grid, 5], |i| (i as f64 * 0.3).sin());
        let pair = EmbeddingPair::new(img.clone(), Tensor::full(&[3, 5], 1.0), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        (dec, store, c, pair, Guidance { shallow: img.clone(), deep: img })
    }

    #[test]
    fn output_is_four_times_the_grid() {
        for g in [2, 3, 12] {
            let (dec, store, c, pair, guid) = fixture(g);
            let out = decode(&store, &dec, &c, &pair, &guid).unwrap();
            assert_eq!(out.size(), (4 * g, 4 * g));
            assert_eq!(out.logits().shape()[2], 3);
        }
    }

    #[test]
    fn zero_head_ties_to_class_zero() {
        let (dec, mut store, c, pair, guid) = fixture(3);
        store.set(&dec.head.weight_key(), Tensor::zeros(&[dec.d2, 1])).unwrap();
        store.set(&dec.head.bias_key(), Tensor::zeros(&[1])).unwrap();
        let out = decode(&store, &dec, &c, &pair, &guid).unwrap();
        assert!(out.logits().data().iter().all(|&v| v == 0.0));
        assert!(out.mask().iter().all(|&m| m == 0));
    }

    #[test]
    fn shuffle_places_sub_pixel_blocks() {
        // one 1x1 cell with four 1-channel blocks
        let idx = pixel_shuffle_index(1, 1, 1, 1);
        assert_eq!(idx, vec![0, 1, 2, 3]);
        let idx = pixel_shuffle_index(1, 1, 2, 1);
        // row 0: (0,0)b0 (0,0)b1 (0,1)b0 (0,1)b1
        assert_eq!(idx, vec![0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn rejects_wrong_stage() {
        let (dec, store, c, pair, guid) = fixture(2);
        let raw = CorrelationVolume::new(c.values().clone(), Stage::Raw).unwrap();
        assert!(decode(&store, &dec, &raw, &pair, &guid).is_err());
    }
}
