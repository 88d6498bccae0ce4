//! A small reverse-mode tape.
//!
//! Every operation appends a node holding its value and a closure mapping the
//! output gradient to parent gradients. Node ids are a topological order, so
//! `backward` is a single reverse sweep. Tapes are cheap and single-threaded;
//! build one per forward pass.
//!
//! Shape misuse inside the tape is a programming error and panics. Public
//! pipeline operations validate their inputs before they reach the tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{permute_index, Tensor};

type Grads = Vec<Option<Vec<f64>>>;
type BackFn = Box<dyn Fn(&[f64]) -> Grads>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of one scalar output with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Mean,
    Max,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: vec![], backward: None, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64]) -> Grads + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|p| nodes[p.id].tracked);
        let backward: Option<BackFn> = if tracked { Some(Box::new(backward)) } else { None };
        nodes.push(Node { value: Rc::new(value), parents: parents.iter().map(|p| p.id).collect(), backward, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[pid].tracked {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| nodes[i].tracked)
                    .map(|g| Tensor::new(nodes[i].value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Gradients { grads }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(da == db || da == 1 || db == 1, "cannot broadcast {a:?} with {b:?}");
        out[i] = da.max(db);
    }
    out
}

/// For each element of `out`, the flat index into a tensor of shape `src`
/// broadcast against it.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - src.len();
    let src_strides = Tensor::strides(src);
    let strides: Vec<usize> = (0..out.len())
        .map(|i| if i < pad || src[i - pad] == 1 { 0 } else { src_strides[i - pad] })
        .collect();
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// `out[n×m] += a[n×k] · b[k×m]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out[n×k] += g[n×m] · b[k×m]ᵀ`
fn mm_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for j in 0..m {
                s += grow[j] * brow[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · g[n×m]`
fn mm_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * grow[j];
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn elementwise<F, D>(&self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap();
        let y_rc = Rc::new(y.clone());
        self.tape.push(y, &[*self], move |g| {
            let d = x.data().iter().zip(y_rc.data()).zip(g).map(|((&xv, &yv), &gv)| gv * df(xv, yv)).collect();
            vec![Some(d)]
        })
    }

    fn binary<F, DA, DB>(&self, other: Var<'t>, f: F, da: DA, db: DB) -> Var<'t>
    where
        F: Fn(f64, f64) -> f64,
        DA: Fn(f64, f64, f64) -> f64 + 'static,
        DB: Fn(f64, f64, f64) -> f64 + 'static,
    {
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let y: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &z)| f(x, z)).collect();
            let y = Tensor::new(a.shape(), y).unwrap();
            return self.tape.push(y, &[*self, other], move |g| {
                let ga = (0..g.len()).map(|i| da(a.data()[i], b.data()[i], g[i])).collect();
                let gb = (0..g.len()).map(|i| db(a.data()[i], b.data()[i], g[i])).collect();
                vec![Some(ga), Some(gb)]
            });
        }
        let shape = broadcast_shape(a.shape(), b.shape());
        let amap = broadcast_map(a.shape(), &shape);
        let bmap = broadcast_map(b.shape(), &shape);
        let y: Vec<f64> = amap.iter().zip(&bmap).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
        let y = Tensor::new(&shape, y).unwrap();
        self.tape.push(y, &[*self, other], move |g| {
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for (o, (&i, &j)) in amap.iter().zip(&bmap).enumerate() {
                let (x, z) = (a.data()[i], b.data()[j]);
                ga[i] += da(x, z, g[o]);
                gb[j] += db(x, z, g[o]);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Broadcasting addition (numpy rules, right-aligned).
    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.elementwise(|v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.elementwise(|v| v + c, |_, _| 1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.elementwise(|v| if v > 0.0 { v } else { 0.0 }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.elementwise(|v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var<'t> {
        self.elementwise(f64::exp, |_, y| y)
    }

    /// Natural log; callers keep inputs positive.
    pub fn ln(&self) -> Var<'t> {
        self.elementwise(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let n = x.len();
        let s: f64 = x.data().iter().sum();
        self.tape.push(Tensor::scalar(s), &[*self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let y = (*x).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.tape.push(y, &[*self], |g| vec![Some(g.to_vec())])
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let (shape, src) = permute_index(x.shape(), axes);
        self.gather_flat(Rc::new(src), &shape)
    }

    /// `out[i] = x[index[i]]`; gradients scatter-add back.
    pub fn gather_flat(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let n_in = x.len();
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather shape/index length mismatch");
        let y = Tensor::new(shape, index.iter().map(|&i| x.data()[i]).collect()).unwrap();
        self.tape.push(y, &[*self], move |g| {
            let mut gx = vec![0.0; n_in];
            for (o, &i) in index.iter().enumerate() {
                gx[i] += g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Concatenate along the last axis; leading shapes must match.
    pub fn concat_last(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat_last leading shapes differ");
        let p = *sa.last().unwrap();
        let q = *sb.last().unwrap();
        let rows = a.len() / p.max(1);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let y = Tensor::new(&shape, data).unwrap();
        self.tape.push(y, &[*self, other], move |g| {
            let mut ga = Vec::with_capacity(rows * p);
            let mut gb = Vec::with_capacity(rows * q);
            for r in 0..rows {
                let row = &g[r * (p + q)..(r + 1) * (p + q)];
                ga.extend_from_slice(&row[..p]);
                gb.extend_from_slice(&row[p..]);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Matrix product over the last two axes. `other` is either a plain
    /// `[k, m]` matrix applied to every leading index, or carries the same
    /// leading (batch) axes as `self`.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices, got {sa:?} x {sb:?}");
        let k = sa[sa.len() - 1];
        assert_eq!(k, sb[sb.len() - 2], "matmul inner dims: {sa:?} x {sb:?}");
        let m = sb[sb.len() - 1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(m);
        if sb.len() == 2 {
            let n = a.len() / k;
            let mut y = vec![0.0; n * m];
            mm_acc(a.data(), b.data(), &mut y, n, k, m);
            let y = Tensor::new(&out_shape, y).unwrap();
            return self.tape.push(y, &[*self, other], move |g| {
                let mut ga = vec![0.0; n * k];
                mm_a_bt_acc(g, b.data(), &mut ga, n, k, m);
                let mut gb = vec![0.0; k * m];
                mm_at_b_acc(a.data(), g, &mut gb, n, k, m);
                vec![Some(ga), Some(gb)]
            });
        }
        assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul batch dims: {sa:?} x {sb:?}");
        let n = sa[sa.len() - 2];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut y = vec![0.0; batch * n * m];
        for bi in 0..batch {
            mm_acc(&a.data()[bi * n * k..(bi + 1) * n * k], &b.data()[bi * k * m..(bi + 1) * k * m], &mut y[bi * n * m..(bi + 1) * n * m], n, k, m);
        }
        let y = Tensor::new(&out_shape, y).unwrap();
        self.tape.push(y, &[*self, other], move |g| {
            let mut ga = vec![0.0; batch * n * k];
            let mut gb = vec![0.0; batch * k * m];
            for bi in 0..batch {
                let gs = &g[bi * n * m..(bi + 1) * n * m];
                mm_a_bt_acc(gs, &b.data()[bi * k * m..(bi + 1) * k * m], &mut ga[bi * n * k..(bi + 1) * n * k], n, k, m);
                mm_at_b_acc(&a.data()[bi * n * k..(bi + 1) * n * k], gs, &mut gb[bi * k * m..(bi + 1) * k * m], n, k, m);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t> {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let y = Tensor::new(x.shape(), y).unwrap();
        let p = Rc::new(y.clone());
        self.tape.push(y, &[*self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for ((gr, pr), out) in g.chunks(c).zip(p.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for i in 0..c {
                    out[i] = pr[i] * (gr[i] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Var<'t> {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Tensor::new(x.shape(), y).unwrap();
        let ly = Rc::new(y.clone());
        self.tape.push(y, &[*self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for ((gr, lr), out) in g.chunks(c).zip(ly.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let s: f64 = gr.iter().sum();
                for i in 0..c {
                    out[i] = gr[i] - lr[i].exp() * s;
                }
            }
            vec![Some(gx)]
        })
    }

    fn reduce_axis(&self, axis: usize, mask: Option<Rc<Vec<bool>>>, kind: Reduce) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if let Some(m) = &mask {
            assert_eq!(m.len(), outer * n, "reduce mask must cover [outer, axis]");
        }
        let visible = |o: usize, i: usize| mask.as_ref().is_none_or(|m| m[o * n + i]);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut y = vec![0.0; outer * inner];
        // mean: count per outer; max: argmax per output element
        let mut counts = vec![0usize; outer];
        let mut argmax = vec![usize::MAX; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                if !visible(o, i) {
                    continue;
                }
                counts[o] += 1;
                for j in 0..inner {
                    let src = (o * n + i) * inner + j;
                    let dst = o * inner + j;
                    let v = x.data()[src];
                    match kind {
                        Reduce::Mean => y[dst] += v,
                        Reduce::Max => {
                            if argmax[dst] == usize::MAX || v > y[dst] {
                                y[dst] = v;
                                argmax[dst] = src;
                            }
                        }
                    }
                }
            }
            if kind == Reduce::Mean && counts[o] > 0 {
                for j in 0..inner {
                    y[o * inner + j] /= counts[o] as f64;
                }
            }
        }
        let len = x.len();
        let y = Tensor::new(&out_shape, y).unwrap();
        self.tape.push(y, &[*self], move |g| {
            let mut gx = vec![0.0; len];
            match kind {
                Reduce::Mean => {
                    for o in 0..outer {
                        if counts[o] == 0 {
                            continue;
                        }
                        let inv = 1.0 / counts[o] as f64;
                        for i in 0..n {
                            if mask.as_ref().is_some_and(|m| !m[o * n + i]) {
                                continue;
                            }
                            for j in 0..inner {
                                gx[(o * n + i) * inner + j] += g[o * inner + j] * inv;
                            }
                        }
                    }
                }
                Reduce::Max => {
                    for (dst, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            gx[src] += g[dst];
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t> {
        self.reduce_axis(axis, None, Reduce::Mean)
    }

    pub fn max_axis(&self, axis: usize) -> Var<'t> {
        self.reduce_axis(axis, None, Reduce::Max)
    }

    /// Mean over `axis` restricted to positions where `mask[outer, i]` holds.
    /// Slices with nothing visible reduce to 0.
    pub fn masked_mean_axis(&self, axis: usize, mask: Rc<Vec<bool>>) -> Var<'t> {
        self.reduce_axis(axis, Some(mask), Reduce::Mean)
    }

    /// Max over `axis` restricted to visible positions; empty slices give 0.
    pub fn masked_max_axis(&self, axis: usize, mask: Rc<Vec<bool>>) -> Var<'t> {
        self.reduce_axis(axis, Some(mask), Reduce::Max)
    }

    /// Scaled dot-product attention restricted to token groups.
    ///
    /// `self` is the query matrix `[T, d]`; `keys` and `values` are `[T, d]` and
    /// `[T, dv]`. Each token in `groups[g]` attends to exactly the tokens of
    /// that group. Tokens in no group produce a zero row. Groups must be disjoint.
    pub fn grouped_attention(&self, keys: Var<'t>, values: Var<'t>, groups: Rc<Vec<Vec<usize>>>) -> Var<'t> {
        let q = self.value();
        let k = keys.value();
        let v = values.value();
        let (t, d) = (q.shape()[0], q.shape()[1]);
        let dv = v.shape()[1];
        assert_eq!(k.shape(), q.shape(), "grouped_attention key shape");
        assert_eq!(v.shape()[0], t, "grouped_attention value rows");
        let scale = 1.0 / (d as f64).sqrt();
        let mut y = vec![0.0; t * dv];
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
        for grp in groups.iter() {
            let gsz = grp.len();
            let mut p = vec![0.0; gsz * gsz];
            for (a, &ta) in grp.iter().enumerate() {
                let qa = &q.data()[ta * d..(ta + 1) * d];
                let row = &mut p[a * gsz..(a + 1) * gsz];
                let mut best = f64::NEG_INFINITY;
                for (b, &tb) in grp.iter().enumerate() {
                    let kb = &k.data()[tb * d..(tb + 1) * d];
                    let s: f64 = qa.iter().zip(kb).map(|(x, z)| x * z).sum::<f64>() * scale;
                    row[b] = s;
                    best = best.max(s);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - best).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
                let out = &mut y[ta * dv..(ta + 1) * dv];
                for (b, &tb) in grp.iter().enumerate() {
                    let vb = &v.data()[tb * dv..(tb + 1) * dv];
                    for c in 0..dv {
                        out[c] += row[b] * vb[c];
                    }
                }
            }
            probs.push(p);
        }
        let y = Tensor::new(&[t, dv], y).unwrap();
        self.tape.push(y, &[*self, keys, values], move |g| {
            let mut gq = vec![0.0; t * d];
            let mut gk = vec![0.0; t * d];
            let mut gv = vec![0.0; t * dv];
            for (grp, p) in groups.iter().zip(&probs) {
                let gsz = grp.len();
                for (a, &ta) in grp.iter().enumerate() {
                    let go = &g[ta * dv..(ta + 1) * dv];
                    let prow = &p[a * gsz..(a + 1) * gsz];
                    // dP[a,b] = go · v_b
                    let mut dp = vec![0.0; gsz];
                    for (b, &tb) in grp.iter().enumerate() {
                        let vb = &v.data()[tb * dv..(tb + 1) * dv];
                        dp[b] = go.iter().zip(vb).map(|(x, z)| x * z).sum();
                        for c in 0..dv {
                            gv[tb * dv + c] += prow[b] * go[c];
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(x, z)| x * z).sum();
                    for (b, &tb) in grp.iter().enumerate() {
                        let ds = prow[b] * (dp[b] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            gq[ta * d + c] += ds * k.data()[tb * d + c];
                            gk[tb * d + c] += ds * q.data()[ta * d + c];
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        })
    }
}
