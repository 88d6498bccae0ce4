//! Hierarchical refinement of one branch: masked window attention over the
//! token grid, dual-pooled category prototypes, a class-agnostic semantic
//! prototype, and the sigmoid channel gate built from both.
//!
//! Volumes are handled class-major (`[N_C, HW, D]`); the class axis behaves
//! like a batch axis, so refinement never mixes classes.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, DisaError, Result};
use crate::nn::{Ctx, Init, Linear, Mlp, ParamStore};
use crate::tensor::Tensor;
use crate::types::{Branch, CorrelationVolume, PrototypeSet, Stage, TokenPartition};

/// Token groups of one window pass: for every class, the visible tokens of
/// each window, as flat indices into `[N_C·HW]`.
///
/// Shifted windows start half a window before the grid edge, so border
/// windows are partial. Positions outside the grid count as invisible.
pub fn window_groups(h: usize, w: usize, n_classes: usize, window: usize, shifted: bool, visible: &[bool]) -> Vec<Vec<usize>> {
    let offset = if shifted { window / 2 } else { 0 };
    let hw = h * w;
    let spans = |len: usize| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0usize;
        let mut end = if offset > 0 { offset } else { window };
        while start < len {
            out.push((start, end.min(len)));
            start = end;
            end += window;
        }
        out
    };
    let (rows, cols) = (spans(h), spans(w));
    let mut groups = Vec::new();
    for n in 0..n_classes {
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let members: Vec<usize> =
                    (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * w + c)).filter(|&t| visible[n * hw + t]).map(|t| n * hw + t).collect();
                if !members.is_empty() {
                    groups.push(members);
                }
            }
        }
    }
    groups
}

/// Single-head window attention with a visibility mask.
///
/// Visible tokens get a residual update `x + Wo·attn + bo`; invisible tokens
/// pass through untouched. The output projection starts at zero, so a fresh
/// block is the identity.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub window: usize,
    pub shifted: bool,
}

impl WindowBlock {
    pub fn new(name: &str, d: usize, window: usize, shifted: bool) -> Self {
        WindowBlock {
            q: Linear::new(format!("{name}.q"), d, d, true),
            k: Linear::new(format!("{name}.k"), d, d, true),
            v: Linear::new(format!("{name}.v"), d, d, true),
            o: Linear::new(format!("{name}.o"), d, d, true),
            window,
            shifted,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.q.init(store, rng, Init::Xavier(1.0));
        self.k.init(store, rng, Init::Xavier(1.0));
        self.v.init(store, rng, Init::Xavier(1.0));
        self.o.init(store, rng, Init::Zeros);
    }

    pub fn param_count(&self) -> usize {
        4 * self.q.param_count()
    }

    /// `x: [N_C, HW, D]`, `visible: [N_C·HW]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, grid: (usize, usize), visible: &[bool]) -> Var<'t> {
        let shape = x.shape();
        let (nc, hw, d) = (shape[0], shape[1], shape[2]);
        let flat = x.reshape(&[nc * hw, d]);
        let groups = Rc::new(window_groups(grid.0, grid.1, nc, self.window, self.shifted, visible));
        let att = self.q.forward(ctx, flat).grouped_attention(self.k.forward(ctx, flat), self.v.forward(ctx, flat), groups);
        let out = flat.add(self.o.forward(ctx, att));
        let keep = Tensor::from_fn(&[nc * hw, 1], |i| if visible[i] { 1.0 } else { 0.0 });
        let pass = Tensor::from_fn(&[nc * hw, 1], |i| if visible[i] { 0.0 } else { 1.0 });
        out.mul(ctx.tape.constant(keep)).add(flat.mul(ctx.tape.constant(pass))).reshape(&[nc, hw, d])
    }
}

/// Which refinement stages are active in a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HrmToggles {
    pub pixel: bool,
    pub category: bool,
    pub semantic: bool,
}

impl HrmToggles {
    pub const ALL: HrmToggles = HrmToggles { pixel: true, category: true, semantic: true };
    pub const NONE: HrmToggles = HrmToggles { pixel: false, category: false, semantic: false };

    fn gated(&self) -> bool {
        self.category || self.semantic
    }
}

/// Refinement weights of one branch.
#[derive(Debug, Clone)]
pub struct BranchRefiner {
    pub branch_key: String,
    pub blocks: [WindowBlock; 2],
    pub cat_avg: Mlp,
    pub cat_max: Mlp,
    pub sem_avg: Mlp,
    pub sem_max: Mlp,
    pub gate: Mlp,
    pub d: usize,
}

impl BranchRefiner {
    /// `key` prefixes every parameter, e.g. `hrm.fg`.
    pub fn new(key: &str, d: usize, window: usize) -> Self {
        BranchRefiner {
            branch_key: key.to_string(),
            blocks: [WindowBlock::new(&format!("{key}.pixel.0"), d, window, false), WindowBlock::new(&format!("{key}.pixel.1"), d, window, true)],
            cat_avg: Mlp::new(&format!("{key}.cat_avg"), d, d, d),
            cat_max: Mlp::new(&format!("{key}.cat_max"), d, d, d),
            sem_avg: Mlp::new(&format!("{key}.sem_avg"), d, d, d),
            sem_max: Mlp::new(&format!("{key}.sem_max"), d, d, d),
            gate: Mlp::new(&format!("{key}.gate"), 2 * d, d, d),
            d,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, toggles: HrmToggles) {
        if toggles.pixel {
            self.blocks.iter().for_each(|b| b.init(store, rng));
        }
        if toggles.gated() {
            for m in [&self.cat_avg, &self.cat_max, &self.gate] {
                m.init(store, rng);
            }
        }
        if toggles.semantic {
            self.sem_avg.init(store, rng);
            self.sem_max.init(store, rng);
        }
    }

    pub fn param_count(&self, toggles: HrmToggles) -> usize {
        let mut n = 0;
        if toggles.pixel {
            n += self.blocks.iter().map(WindowBlock::param_count).sum::<usize>();
        }
        if toggles.gated() {
            n += self.cat_avg.param_count() + self.cat_max.param_count() + self.gate.param_count();
        }
        if toggles.semantic {
            n += self.sem_avg.param_count() + self.sem_max.param_count();
        }
        n
    }

    /// Both window blocks in sequence.
    pub fn pixel<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, grid: (usize, usize), visible: &[bool]) -> Var<'t> {
        ctx.record("pixel_refine");
        let y = self.blocks[0].forward(ctx, x, grid, visible);
        self.blocks[1].forward(ctx, y, grid, visible)
    }

    /// `[N_C, HW, D]` → `[N_C, D]`; classes without visible tokens pool to zero.
    pub fn category<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, visible: &Rc<Vec<bool>>) -> Var<'t> {
        ctx.record("category_prototype");
        let avg = x.masked_mean_axis(1, visible.clone());
        let max = x.masked_max_axis(1, visible.clone());
        self.cat_avg.forward(ctx, avg).add(self.cat_max.forward(ctx, max))
    }

    /// `[N_C, D]` → `[1, D]`, pooling over the classes marked active.
    pub fn semantic<'t>(&self, ctx: &Ctx<'t>, category: Var<'t>, active: &Rc<Vec<bool>>) -> Var<'t> {
        ctx.record("semantic_prototype");
        let nc = category.shape()[0];
        let c = category.reshape(&[1, nc, self.d]);
        let avg = c.masked_mean_axis(1, active.clone());
        let max = c.masked_max_axis(1, active.clone());
        self.sem_avg.forward(ctx, avg).add(self.sem_max.forward(ctx, max))
    }

    /// Channel gate `σ(MLP([P^c_n, P^s]))` applied per class: `[N_C, HW, D]`.
    pub fn fuse<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, category: Var<'t>, semantic: Var<'t>) -> Var<'t> {
        ctx.record("fuse");
        let nc = category.shape()[0];
        let sem = ctx.tape.constant(Tensor::zeros(&[nc, self.d])).add(semantic);
        let g = self.gate.forward(ctx, category.concat_last(sem)).sigmoid();
        x.mul(g.reshape(&[nc, 1, self.d]))
    }

    /// Full branch refinement under `toggles`. With category off the gate
    /// sees zeros in place of the category prototype (it is still pooled to
    /// feed the semantic prototype); likewise for semantic off.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, grid: (usize, usize), visible: &Rc<Vec<bool>>, toggles: HrmToggles) -> Var<'t> {
        let x = if toggles.pixel { self.pixel(ctx, x, grid, visible) } else { x };
        if !toggles.gated() {
            return x;
        }
        let shape = x.shape();
        let (nc, hw) = (shape[0], shape[1]);
        let active: Rc<Vec<bool>> = Rc::new((0..nc).map(|n| visible[n * hw..(n + 1) * hw].iter().any(|&v| v)).collect());
        let cat = self.category(ctx, x, visible);
        let zeros = |shape: &[usize]| ctx.tape.constant(Tensor::zeros(shape));
        let sem_in = if toggles.semantic { self.semantic(ctx, cat, &active) } else { zeros(&[1, self.d]) };
        let cat_in = if toggles.category { cat } else { zeros(&[nc, self.d]) };
        self.fuse(ctx, x, cat_in, sem_in)
    }
}

fn check_partition(corr: &CorrelationVolume, part: &TokenPartition) -> Result<()> {
    let (h, w, nc, _) = corr.dims();
    if part.tokens() != h * w || part.n_classes() != nc {
        return Err(DisaError::Mask(format!("mask covers {} tokens x {} classes, volume is {h}x{w}x{nc}", part.tokens(), part.n_classes())));
    }
    Ok(())
}

/// Masked window refinement of one branch volume under the stored weights.
pub fn pixel_refine(store: &ParamStore, refiner: &BranchRefiner, c_branch: &CorrelationVolume, part: &TokenPartition, branch: Branch) -> Result<CorrelationVolume> {
    c_branch.expect_stage(Stage::Raw, "pixel_refine")?;
    check_partition(c_branch, part)?;
    let (h, w, _, _) = c_branch.dims();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let x = tape.constant(c_branch.class_major());
    let y = refiner.pixel(&ctx, x, (h, w), &part.visibility(branch));
    CorrelationVolume::from_class_major(&y.value(), h, w, Stage::Pixel)
}

/// Category prototypes `[1, N_C, D]` pooled over the branch's visible tokens.
pub fn category_prototype(store: &ParamStore, refiner: &BranchRefiner, c_prime: &CorrelationVolume, part: &TokenPartition, branch: Branch) -> Result<Tensor> {
    c_prime.expect_stage(Stage::Pixel, "category_prototype")?;
    check_partition(c_prime, part)?;
    let (h, w, nc, d) = c_prime.dims();
    let visible = part.visibility(branch);
    if let Some(n) = (0..nc).find(|&n| !visible[n * h * w..(n + 1) * h * w].iter().any(|&v| v)) {
        return Err(DisaError::EmptyBranch(format!("class {n} has no {} tokens", branch.key())));
    }
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let p = refiner.category(&ctx, tape.constant(c_prime.class_major()), &Rc::new(visible));
    Ok((*p.value()).clone().reshape(&[1, nc, d])?)
}

/// Semantic prototype `[1, 1, D]` from category prototypes `[1, N_C, D]`.
pub fn semantic_prototype(store: &ParamStore, refiner: &BranchRefiner, category: &Tensor) -> Result<Tensor> {
    let s = category.shape();
    if s.len() != 3 || s[0] != 1 || s[2] != refiner.d {
        return Err(shape_err(format!("category prototypes must be [1, N_C, {}], got {s:?}", refiner.d)));
    }
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let c = tape.constant(category.clone().reshape(&[s[1], s[2]])?);
    let p = refiner.semantic(&ctx, c, &Rc::new(vec![true; s[1]]));
    Ok((*p.value()).clone().reshape(&[1, 1, s[2]])?)
}

/// Gate a pixel-refined volume with its branch prototypes.
pub fn fuse(store: &ParamStore, refiner: &BranchRefiner, c_prime: &CorrelationVolume, protos: &PrototypeSet) -> Result<CorrelationVolume> {
    c_prime.expect_stage(Stage::Pixel, "fuse")?;
    let (h, w, nc, d) = c_prime.dims();
    protos.category.expect_shape(&[1, nc, d], "category prototypes")?;
    if d != refiner.d {
        return Err(shape_err(format!("volume width {d}, refiner width {}", refiner.d)));
    }
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let cat = tape.constant(protos.category.clone().reshape(&[nc, d])?);
    let sem = tape.constant(protos.semantic.clone().reshape(&[1, d])?);
    let y = refiner.fuse(&ctx, tape.constant(c_prime.class_major()), cat, sem);
    CorrelationVolume::from_class_major(&y.value(), h, w, Stage::Fused)
}
