//! Slow, loop-based reference implementations.
//!
//! Everything here works on plain nested `Vec`s and shares no code with
//! `disa-core`; the dependency only runs the other way (as a dev-dependency of
//! the core crate). Each function is written the obvious way so that it can be
//! checked by eye.
//!
//! Matrix convention: a weight `w` of a linear layer is indexed `w[input][output]`
//! and applied as `y = x·w + b`.

pub type Matrix = Vec<Vec<f64>>;

/// Output rows and probability rows of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub output: Matrix,
    pub probs: Matrix,
}

/// Explicit double-loop softmax attention.
///
/// `visible[j]` hides key `j` from every query. A query with no visible key gets
/// an all-zero probability row and an all-zero output.
pub fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], visible: &[bool], scale: f64) -> AttentionResult {
    assert_eq!(k.len(), v.len());
    assert_eq!(k.len(), visible.len());
    let dv = v.first().map_or(0, |r| r.len());
    let mut output = Vec::with_capacity(q.len());
    let mut probs = Vec::with_capacity(q.len());
    for qi in q {
        let mut logits = vec![f64::NEG_INFINITY; k.len()];
        let mut best = f64::NEG_INFINITY;
        for j in 0..k.len() {
            if visible[j] {
                let mut s = 0.0;
                for d in 0..qi.len() {
                    s += qi[d] * k[j][d];
                }
                logits[j] = s * scale;
                if logits[j] > best {
                    best = logits[j];
                }
            }
        }
        let mut p = vec![0.0; k.len()];
        let mut out = vec![0.0; dv];
        if best > f64::NEG_INFINITY {
            let mut z = 0.0;
            for j in 0..k.len() {
                if visible[j] {
                    p[j] = (logits[j] - best).exp();
                    z += p[j];
                }
            }
            for j in 0..k.len() {
                p[j] /= z;
                for d in 0..dv {
                    out[d] += p[j] * v[j][d];
                }
            }
        }
        output.push(out);
        probs.push(p);
    }
    AttentionResult { output, probs }
}

/// Central finite differences, one coordinate at a time.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(objective: F, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0);
    let mut x = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = objective(&x);
        x[i] = orig - h;
        let down = objective(&x);
        x[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Indices of the `k` largest scores, ties broken by lower index, returned in
/// ascending index order.
pub fn naive_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Average and max over the visible rows of `values` (rows are tokens).
/// Returns `None` when nothing is visible.
pub fn naive_pool(values: &[Vec<f64>], visible: &[bool]) -> Option<(Vec<f64>, Vec<f64>)> {
    let d = values.first()?.len();
    let mut sum = vec![0.0; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    let mut count = 0usize;
    for (row, &vis) in values.iter().zip(visible) {
        if !vis {
            continue;
        }
        count += 1;
        for c in 0..d {
            sum[c] += row[c];
            if row[c] > max[c] {
                max[c] = row[c];
            }
        }
    }
    if count == 0 {
        return None;
    }
    Some((sum.iter().map(|s| s / count as f64).collect(), max))
}

pub fn naive_linear(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..x.len() {
        for o in 0..y.len() {
            y[o] += x[i] * w[i][o];
        }
    }
    y
}

pub fn naive_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn naive_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp2 {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let h = naive_relu(&naive_linear(x, &self.w1, &self.b1));
        naive_linear(&h, &self.w2, &self.b2)
    }
}

/// Category prototype of one class: `mlp_avg(avg) + mlp_max(max)` over the
/// visible tokens.
pub fn naive_category_prototype(tokens: &[Vec<f64>], visible: &[bool], mlp_avg: &Mlp2, mlp_max: &Mlp2) -> Option<Vec<f64>> {
    let (avg, max) = naive_pool(tokens, visible)?;
    let a = mlp_avg.apply(&avg);
    let m = mlp_max.apply(&max);
    Some(a.iter().zip(&m).map(|(x, y)| x + y).collect())
}

/// Semantic prototype: the same avg/max construction but across classes.
pub fn naive_semantic_prototype(category: &[Vec<f64>], mlp_avg: &Mlp2, mlp_max: &Mlp2) -> Vec<f64> {
    let all = vec![true; category.len()];
    let (avg, max) = naive_pool(category, &all).expect("at least one class");
    let a = mlp_avg.apply(&avg);
    let m = mlp_max.apply(&max);
    a.iter().zip(&m).map(|(x, y)| x + y).collect()
}

/// Gated fusion, one class and one channel at a time.
/// `volume[n][t][d]`, returns the same layout.
pub fn naive_fuse(volume: &[Matrix], category: &[Vec<f64>], semantic: &[f64], gate_mlp: &Mlp2) -> Vec<Matrix> {
    let mut out = Vec::new();
    for (n, tokens) in volume.iter().enumerate() {
        let mut input = category[n].clone();
        input.extend_from_slice(semantic);
        let logits = gate_mlp.apply(&input);
        let gate: Vec<f64> = logits.iter().map(|&z| naive_sigmoid(z)).collect();
        let mut cls = Vec::new();
        for tok in tokens {
            let mut row = Vec::new();
            for d in 0..tok.len() {
                row.push(tok[d] * gate[d]);
            }
            cls.push(row);
        }
        out.push(cls);
    }
    out
}

/// Weights of one window attention block, loop-friendly.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
}

/// One masked window attention block over an `h`×`w` grid of a single class.
///
/// Windows are enumerated explicitly. Unshifted origins are `0, window, ...`;
/// shifted origins are `offset - window, offset, offset + window, ...` with
/// `offset = window / 2`, so the first shifted window is partial. Origins step
/// until the grid is covered. A visible token becomes `x + attn·wo + bo`; invisible tokens are
/// copied through unchanged.
pub fn naive_window_block(tokens: &[Vec<f64>], h: usize, w: usize, window: usize, shifted: bool, visible: &[bool], wts: &BlockWeights) -> Matrix {
    let offset = if shifted { (window / 2) as i64 } else { 0 };
    let first = if offset > 0 { offset - window as i64 } else { 0 };
    let d = tokens[0].len();
    let mut out = tokens.to_vec();
    let mut r0 = first;
    while r0 < h as i64 {
        let mut c0 = first;
        while c0 < w as i64 {
            let mut members = Vec::new();
            for r in r0..r0 + window as i64 {
                for c in c0..c0 + window as i64 {
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        let t = r as usize * w + c as usize;
                        if visible[t] {
                            members.push(t);
                        }
                    }
                }
            }
            if !members.is_empty() {
                let q: Matrix = members.iter().map(|&t| naive_linear(&tokens[t], &wts.wq, &wts.bq)).collect();
                let k: Matrix = members.iter().map(|&t| naive_linear(&tokens[t], &wts.wk, &wts.bk)).collect();
                let v: Matrix = members.iter().map(|&t| naive_linear(&tokens[t], &wts.wv, &wts.bv)).collect();
                let vis = vec![true; members.len()];
                let att = naive_attention(&q, &k, &v, &vis, 1.0 / (d as f64).sqrt());
                for (i, &t) in members.iter().enumerate() {
                    let upd = naive_linear(&att.output[i], &wts.wo, &wts.bo);
                    out[t] = tokens[t].iter().zip(&upd).map(|(x, u)| x + u).collect();
                }
            }
            c0 += window as i64;
        }
        r0 += window as i64;
    }
    out
}

/// One cross-attention layer's projections.
#[derive(Debug, Clone)]
pub struct CrossLayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionWeights {
    pub text_in: Matrix,
    pub text_in_b: Vec<f64>,
    pub image_in: Matrix,
    pub image_in_b: Vec<f64>,
    pub layers: Vec<CrossLayerWeights>,
    pub heads: usize,
}

fn project(rows: &[Vec<f64>], w: &Matrix) -> Matrix {
    let zero = vec![0.0; w[0].len()];
    rows.iter().map(|r| naive_linear(r, w, &zero)).collect()
}

/// Text-queries-image cross attention. Returns the final layer's head-averaged
/// attention as `[token][class]`.
pub fn naive_cross_attention(image: &[Vec<f64>], text: &[Vec<f64>], wts: &CrossAttentionWeights) -> Matrix {
    let mut q_state: Matrix = text.iter().map(|t| naive_linear(t, &wts.text_in, &wts.text_in_b)).collect();
    let memory: Matrix = image.iter().map(|t| naive_linear(t, &wts.image_in, &wts.image_in_b)).collect();
    let d = q_state[0].len();
    let dh = d / wts.heads;
    let mut last = vec![vec![0.0; text.len()]; image.len()];
    for (li, layer) in wts.layers.iter().enumerate() {
        let q = project(&q_state, &layer.wq);
        let k = project(&memory, &layer.wk);
        let v = project(&memory, &layer.wv);
        let mut concat = vec![vec![0.0; d]; text.len()];
        let final_layer = li + 1 == wts.layers.len();
        if final_layer {
            last = vec![vec![0.0; text.len()]; image.len()];
        }
        for h in 0..wts.heads {
            let qs: Matrix = q.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect();
            let ks: Matrix = k.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect();
            let vs: Matrix = v.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect();
            let att = naive_attention(&qs, &ks, &vs, &vec![true; image.len()], 1.0 / (dh as f64).sqrt());
            for n in 0..text.len() {
                for c in 0..dh {
                    concat[n][h * dh + c] = att.output[n][c];
                }
                if final_layer {
                    for t in 0..image.len() {
                        last[t][n] += att.probs[n][t] / wts.heads as f64;
                    }
                }
            }
        }
        let update = project(&concat, &layer.wo);
        for n in 0..text.len() {
            for c in 0..d {
                q_state[n][c] += update[n][c];
            }
        }
    }
    last
}

/// Per-token reassembly of two zero-filled branch volumes with an elementwise
/// gate: `g·fg + (1-g)·bg`. All slices are flat and equally long.
pub fn naive_reassemble(fg: &[f64], bg: &[f64], gate: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(fg.len());
    for i in 0..fg.len() {
        out.push(gate[i] * fg[i] + (1.0 - gate[i]) * bg[i]);
    }
    out
}

/// Hard reassembly: each token takes the value of the branch that owns it.
pub fn naive_hard_reassemble(fg: &[f64], bg: &[f64], owned_by_fg: &[bool]) -> Vec<f64> {
    (0..fg.len()).map(|i| if owned_by_fg[i] { fg[i] } else { bg[i] }).collect()
}

/// Softmax over two scores, written out by hand.
pub fn naive_softmax2(a: f64, b: f64) -> (f64, f64) {
    let ea = a.exp();
    let eb = b.exp();
    (ea / (ea + eb), eb / (ea + eb))
}

/// Mean two-class cross-entropy, one pair at a time.
pub fn naive_cross_entropy(probs: &[[f64; 2]], labels: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        for c in 0..2 {
            if y[c] > 0.0 {
                total -= y[c] * p[c].ln();
            }
        }
    }
    total / probs.len() as f64
}

/// Per-class IoU from explicit TP/FP/FN counting plus the mean over classes
/// that appear in the prediction or the ground truth.
pub fn naive_iou(pred: &[usize], gt: &[usize], n_classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for c in 0..n_classes {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for i in 0..pred.len() {
            let p = pred[i] == c;
            let g = gt[i] == c;
            if p && g {
                tp += 1;
            } else if p {
                fp += 1;
            } else if g {
                fn_ += 1;
            }
        }
        if tp + fp + fn_ == 0 {
            ious.push(None);
        } else {
            ious.push(Some(tp as f64 / (tp + fp + fn_) as f64));
        }
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (ious, miou)
}

/// Ridge-regression linear probe onto one-hot targets.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `[feature + bias][class]`
    pub weights: Matrix,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, ridge: f64) -> LinearProbe {
        let d = features[0].len() + 1;
        let mut ata = vec![vec![0.0; d]; d];
        let mut aty = vec![vec![0.0; n_classes]; d];
        for (x, &y) in features.iter().zip(labels) {
            let mut row = x.clone();
            row.push(1.0);
            for i in 0..d {
                for j in 0..d {
                    ata[i][j] += row[i] * row[j];
                }
                aty[i][y] += row[i];
            }
        }
        for (i, r) in ata.iter_mut().enumerate() {
            r[i] += ridge;
        }
        LinearProbe { weights: solve(ata, aty) }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut row = x.to_vec();
        row.push(1.0);
        let n_classes = self.weights[0].len();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let s: f64 = (0..row.len()).map(|i| row[i] * self.weights[i][c]).sum();
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        best
    }
}

/// Gauss-Jordan elimination with partial pivoting for `a·x = b` (b has several columns).
fn solve(mut a: Matrix, mut b: Matrix) -> Matrix {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
        }
        for j in 0..b[col].len() {
            b[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in 0..n {
                        a[i][j] -= f * a[col][j];
                    }
                    for j in 0..b[i].len() {
                        b[i][j] -= f * b[col][j];
                    }
                }
            }
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_attention_returns_value() {
        let r = naive_attention(&[vec![0.3, -1.0]], &[vec![2.0, 1.0]], &[vec![4.0, 5.0, 6.0]], &[true], 1.0);
        assert_eq!(r.output[0], vec![4.0, 5.0, 6.0]);
        assert_eq!(r.probs[0], vec![1.0]);
    }

    #[test]
    fn uniform_logits_give_quarter_probabilities() {
        let k = vec![vec![1.0, 0.0]; 4];
        let v = vec![vec![1.0]; 4];
        let r = naive_attention(&[vec![0.5, 0.5]], &k, &v, &[true; 4], 1.0);
        for p in &r.probs[0] {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_finite_difference() {
        let g = finite_difference(|x| x[0] * x[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_finite_difference_is_exact_for_any_step() {
        for h in [1e-6, 1e-2, 0.5, 3.0] {
            let g = finite_difference(|x| 2.0 * x[0] - 0.5 * x[1] + 1.0, &[1.0, -2.0], h);
            assert!((g[0] - 2.0).abs() < 1e-9);
            assert!((g[1] + 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_of_decreasing_sequence_is_prefix() {
        assert_eq!(naive_topk(&[5.0, 4.0, 3.0, 2.0, 1.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn topk_tie_rule() {
        assert_eq!(naive_topk(&[0.9, 0.1, 0.4, 0.4], 2), vec![0, 2]);
        assert_eq!(naive_topk(&[0.0; 4], 2), vec![0, 1]);
    }

    #[test]
    fn identical_masks_have_unit_iou() {
        let m = vec![0, 1, 1, 2, 0, 2];
        let (ious, miou) = naive_iou(&m, &m, 4);
        assert_eq!(ious[3], None);
        assert_eq!(miou, 1.0);
    }

    #[test]
    fn linear_probe_separates_planted_directions() {
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.9, 0.1], vec![0.2, 0.8]];
        let labels = vec![0, 1, 0, 1];
        let probe = LinearProbe::fit(&feats, &labels, 2, 1e-6);
        for (x, y) in feats.iter().zip(&labels) {
            assert_eq!(probe.predict(x), *y);
        }
    }
}
