//! Parameters, layers and the optimizer.
//!
//! Learned tensors live in a [`ParamStore`] keyed by stable dotted paths
//! (`hrm.fg.pixel.0.wq`). Layers are lightweight descriptors that know their
//! key prefix; a forward pass pulls tensors onto the tape through a [`Ctx`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{DisaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Replace an existing tensor, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| DisaError::Validation(format!("unknown parameter `{name}`")))?;
        value.expect_shape(slot.shape(), name)?;
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// One forward pass: the tape, the parameters it reads, and an op trace.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    store: &'t ParamStore,
    track: bool,
    used: RefCell<BTreeMap<String, Var<'t>>>,
    trace: RefCell<Vec<(&'static str, Instant)>>,
}

impl<'t> Ctx<'t> {
    /// Parameters are tracked for gradients.
    pub fn training(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Ctx { tape, store, track: true, used: RefCell::default(), trace: RefCell::default() }
    }

    /// Parameters enter the tape as constants.
    pub fn inference(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Ctx { tape, store, track: false, used: RefCell::default(), trace: RefCell::default() }
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    /// The parameter as a tape node; repeated lookups share one node.
    pub fn param(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.used.borrow().get(name) {
            return *v;
        }
        let t = self.store.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`")).clone();
        let v = if self.track { self.tape.var(t) } else { self.tape.constant(t) };
        self.used.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn record(&self, op: &'static str) {
        self.trace.borrow_mut().push((op, Instant::now()));
    }

    pub fn take_trace(&self) -> Vec<&'static str> {
        self.take_timed_trace().into_iter().map(|(op, _)| op).collect()
    }

    /// Ops with the instant each one started.
    pub fn take_timed_trace(&self) -> Vec<(&'static str, Instant)> {
        std::mem::take(&mut *self.trace.borrow_mut())
    }

    /// Gradients of every parameter touched in this pass.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.used
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// How a weight matrix starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot-style normal with `std = gain·sqrt(2 / (fan_in + fan_out))`.
    Xavier(f64),
    /// Identity plus small normal noise; square layers only.
    NearIdentity(f64),
    Zeros,
}

/// `y = x·W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear { name: name.into(), d_in, d_out, bias }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, init: Init) {
        let w = match init {
            Init::Xavier(gain) => normal_tensor(rng, &[self.d_in, self.d_out], gain * (2.0 / (self.d_in + self.d_out) as f64).sqrt()),
            Init::NearIdentity(std) => {
                assert_eq!(self.d_in, self.d_out, "identity init needs a square layer");
                let mut w = normal_tensor(rng, &[self.d_in, self.d_out], std);
                for i in 0..self.d_in {
                    w.data_mut()[i * self.d_out + i] += 1.0;
                }
                w
            }
            Init::Zeros => Tensor::zeros(&[self.d_in, self.d_out]),
        };
        store.insert(self.weight_key(), w);
        if self.bias {
            store.insert(self.bias_key(), Tensor::zeros(&[self.d_out]));
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias { self.d_out } else { 0 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(ctx.param(&self.weight_key()));
        if self.bias {
            y.add(ctx.param(&self.bias_key()))
        } else {
            y
        }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp { first: Linear::new(format!("{name}.0"), d_in, d_hidden, true), second: Linear::new(format!("{name}.1"), d_hidden, d_out, true) }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.first.init(store, rng, Init::Xavier(1.0));
        self.second.init(store, rng, Init::Xavier(1.0));
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        self.second.forward(ctx, self.first.forward(ctx, x).relu())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.params.iter_mut() {
            let n = param.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name).map(|g| g.data());
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let p = &mut param.data_mut()[i];
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn warmup_then_cosine() {
        let s = WarmupCosine { base_lr: 1.0, warmup: 10, total: 110 };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(109) < 1e-3);
    }

    #[test]
    fn adamw_with_zero_lr_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new("l", 3, 2, true).init(&mut store, &mut rng, Init::Xavier(1.0));
        let before = store.clone();
        let grads: BTreeMap<String, Tensor> = store.iter().map(|(k, v)| (k.clone(), Tensor::full(v.shape(), 0.7))).collect();
        let mut opt = AdamW::new(1e-4);
        for _ in 0..5 {
            opt.step(&mut store, &grads, 0.0);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(&[2], vec![0.5, -0.1]).unwrap());
        let mut opt = AdamW::new(0.01);
        opt.step(&mut store, &grads, 0.1);
        // First step: m̂ = g, v̂ = g², so the Adam term is sign(g) up to eps.
        let p = store.get("p").unwrap().data();
        let expect0 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
        let expect1 = -2.0 - 0.1 * (-0.1 / (0.1 + 1e-8) + 0.01 * -2.0);
        assert!((p[0] - expect0).abs() < 1e-12);
        assert!((p[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn linear_forward_and_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new("l", 2, 2, true);
        lin.init(&mut store, &mut rng, Init::NearIdentity(0.0));
        let tape = Tape::new();
        let ctx = Ctx::training(&tape, &store);
        let x = tape.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let y = lin.forward(&ctx, x);
        assert_eq!(y.value().data(), &[3.0, 4.0]);
        let grads = ctx.param_grads(&tape.backward(y.sum()));
        assert_eq!(grads["l.w"].data(), &[3.0, 3.0, 4.0, 4.0]);
        assert_eq!(grads["l.b"].data(), &[1.0, 1.0]);
    }
}
