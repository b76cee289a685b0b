//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`]; after [`Tape::backward`] their gradients can be
//! collected with [`Tape::param_grads`]. Everything is a 2-D matrix; scalars
//! are `1 x 1`.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Attention pattern: allowed key indices per query row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPattern {
    pub n_keys: usize,
    pub rows: Vec<Vec<u32>>,
}

impl AttentionPattern {
    pub fn n_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.rows[q].binary_search(&(k as u32)).is_ok()
    }
}

/// How each row of a token-embedding block is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowEmbed {
    /// `value * W[u] + B[u]` for longitudinal type `u`.
    Value(usize),
    /// Learned embedding `P[k]` of prediction kind `k`; the value is ignored.
    Prediction(usize),
}

/// Source of one scalar in an assembled column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    Const(f64),
    Elem(Var, usize, usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Array2<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        pattern: Rc<AttentionPattern>,
        heads: usize,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    BroadcastRow(Var),
    TokenEmbed {
        values: Var,
        w: Var,
        b: Var,
        pred: Var,
        rows: Vec<RowEmbed>,
    },
    Assemble(Vec<Scalar>),
    WeightedSum(Var, Array2<f64>),
    SquaredError(Var, Array2<f64>, Array2<f64>),
    SumScalars(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers parameter `id` with its current value.
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// Row-wise layer normalisation with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[i, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multiplies by a fixed mask (entries `0` or `1 / (1 - p)`).
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout(x, mask))
    }

    /// Multi-head attention restricted to `pattern`. Heads split the model
    /// dimension into contiguous blocks. Rows without allowed keys output zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, pattern: Rc<AttentionPattern>, heads: usize, scale: f64) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (nq, d) = qv.dim();
        assert_eq!(pattern.n_queries(), nq, "attention pattern rows");
        assert_eq!(pattern.n_keys, kv.nrows(), "attention pattern keys");
        let hd = d / heads;
        let mut out = Array2::zeros((nq, d));
        let mut probs = Vec::with_capacity(nq * heads);
        for i in 0..nq {
            let keys = &pattern.rows[i];
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let qi = qv.slice(s![i, cols.clone()]);
                let mut p: Vec<f64> = keys
                    .iter()
                    .map(|&z| scale * qi.dot(&kv.slice(s![z as usize, cols.clone()])))
                    .collect();
                let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in p.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in p.iter_mut() {
                    *x /= total;
                }
                let mut o = out.slice_mut(s![i, cols.clone()]);
                for (&z, &pz) in keys.iter().zip(&p) {
                    o.scaled_add(pz, &vv.slice(s![z as usize, cols.clone()]));
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                pattern,
                heads,
                scale,
                probs,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        self.push(out, Op::GatherRows(a, rows))
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn gather_elems(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let out = Array2::from_shape_fn((idx.len(), 1), |(i, _)| av[idx[i]]);
        self.push(out, Op::GatherElems(a, idx))
    }

    /// Repeats a `1 x d` row `n` times.
    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        let out = Array2::from_shape_fn((n, r.ncols()), |(_, c)| r[[0, c]]);
        self.push(out, Op::BroadcastRow(row))
    }

    /// Type-specific affine value embedding or prediction-kind embedding per row.
    pub fn token_embed(&mut self, values: Var, w: Var, b: Var, pred: Var, rows: Vec<RowEmbed>) -> Var {
        let vals = self.value(values);
        let (wv, bv, pv) = (self.value(w), self.value(b), self.value(pred));
        let d = wv.ncols();
        let mut out = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            match *r {
                RowEmbed::Value(u) => {
                    o.assign(&bv.row(u));
                    o.scaled_add(vals[[i, 0]], &wv.row(u));
                }
                RowEmbed::Prediction(k) => o.assign(&pv.row(k)),
            }
        }
        self.push(out, Op::TokenEmbed { values, w, b, pred, rows })
    }

    /// Column vector built from constants and entries of other nodes.
    pub fn assemble(&mut self, items: Vec<Scalar>) -> Var {
        let out = Array2::from_shape_fn((items.len(), 1), |(i, _)| match items[i] {
            Scalar::Const(c) => c,
            Scalar::Elem(v, r, c) => self.nodes[v.0].value[[r, c]],
        });
        self.push(out, Op::Assemble(items))
    }

    /// `Σ weights ∘ a` as a `1 x 1` node.
    pub fn weighted_sum(&mut self, a: Var, weights: Array2<f64>) -> Var {
        let s = (self.value(a) * &weights).sum();
        self.push(Array2::from_elem((1, 1), s), Op::WeightedSum(a, weights))
    }

    /// `Σ weights ∘ (a - target)²` as a `1 x 1` node.
    pub fn squared_error(&mut self, a: Var, target: Array2<f64>, weights: Array2<f64>) -> Var {
        let diff = self.value(a) - &target;
        let s = (&diff * &diff * &weights).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SquaredError(a, target, weights))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let s = parts.iter().map(|&p| self.scalar(p)).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumScalars(parts.to_vec()))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) {
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, v: Var, g: Array2<f64>) {
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn acc_with<F: FnOnce(&mut Array2<f64>)>(&mut self, v: Var, shape: (usize, usize), f: F) {
        let slot = self.grads[v.0].get_or_insert_with(|| Array2::zeros(shape));
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &Array2<f64>) {
        // Split borrow: take the op out temporarily.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::AddRow(a, row) => {
                self.acc(*a, g.clone());
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(*row, gr);
            }
            Op::Add(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.clone());
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.acc(*a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| *gv *= sigmoid(x));
                self.acc(*a, ga);
            }
            Op::Log(a) => {
                let ga = g / self.value(*a);
                self.acc(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).clone();
                let ggain = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let d = xhat.ncols() as f64;
                let dxhat = g * &gv;
                let mut gx = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let mean_dh = dh.sum() / d;
                    let mean_dh_xh = dh.dot(&xh) / d;
                    let is = inv_std[r];
                    let mut out = gx.row_mut(r);
                    for c in 0..xh.len() {
                        out[c] = is * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                    }
                }
                self.acc(*x, gx);
                self.acc(*gain, ggain);
                self.acc(*bias, gbias);
            }
            Op::Dropout(x, mask) => {
                let gx = g * mask;
                self.acc(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                pattern,
                heads,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, d) = qv.dim();
                let hd = d / heads;
                let mut gq = Array2::<f64>::zeros(qv.dim());
                let mut gk = Array2::<f64>::zeros(kv.dim());
                let mut gvv = Array2::<f64>::zeros(vv.dim());
                for i in 0..nq {
                    let keys = &pattern.rows[i];
                    for h in 0..*heads {
                        let cols = h * hd..(h + 1) * hd;
                        let p = &probs[i * heads + h];
                        let gi = g.slice(s![i, cols.clone()]);
                        let dp: Vec<f64> = keys
                            .iter()
                            .map(|&z| gi.dot(&vv.slice(s![z as usize, cols.clone()])))
                            .collect();
                        let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for (idx, &z) in keys.iter().enumerate() {
                            let z = z as usize;
                            gvv.slice_mut(s![z, cols.clone()]).scaled_add(p[idx], &gi);
                            let ds = p[idx] * (dp[idx] - inner) * scale;
                            if ds != 0.0 {
                                gq.slice_mut(s![i, cols.clone()])
                                    .scaled_add(ds, &kv.slice(s![z, cols.clone()]));
                                gk.slice_mut(s![z, cols.clone()])
                                    .scaled_add(ds, &qv.slice(s![i, cols.clone()]));
                            }
                        }
                    }
                }
                self.acc(*q, gq);
                self.acc(*k, gk);
                self.acc(*v, gvv);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    let gp = g.slice(s![.., c0..c0 + w]).to_owned();
                    self.acc(p, gp);
                    c0 += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let shape = self.value(*a).dim();
                self.acc_with(*a, shape, |ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = ga.row_mut(r);
                        row += &g.row(i);
                    }
                });
            }
            Op::GatherElems(a, idx) => {
                let shape = self.value(*a).dim();
                self.acc_with(*a, shape, |ga| {
                    for (i, &rc) in idx.iter().enumerate() {
                        ga[rc] += g[[i, 0]];
                    }
                });
            }
            Op::BroadcastRow(row) => {
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(*row, gr);
            }
            Op::TokenEmbed { values, w, b, pred, rows } => {
                let vals = self.value(*values).clone();
                let wv = self.value(*w).clone();
                let mut gvals = Array2::zeros(vals.dim());
                let mut gw = Array2::zeros(wv.dim());
                let mut gb = Array2::zeros(wv.dim());
                let mut gp = Array2::zeros(self.value(*pred).dim());
                for (i, r) in rows.iter().enumerate() {
                    let gi = g.row(i);
                    match *r {
                        RowEmbed::Value(u) => {
                            gvals[[i, 0]] = gi.dot(&wv.row(u));
                            gw.row_mut(u).scaled_add(vals[[i, 0]], &gi);
                            let mut br = gb.row_mut(u);
                            br += &gi;
                        }
                        RowEmbed::Prediction(k) => {
                            let mut pr = gp.row_mut(k);
                            pr += &gi;
                        }
                    }
                }
                self.acc(*values, gvals);
                self.acc(*w, gw);
                self.acc(*b, gb);
                self.acc(*pred, gp);
            }
            Op::Assemble(items) => {
                for (i, item) in items.iter().enumerate() {
                    if let Scalar::Elem(v, r, c) = *item {
                        let shape = self.value(v).dim();
                        let gi = g[[i, 0]];
                        self.acc_with(v, shape, |gv| gv[[r, c]] += gi);
                    }
                }
            }
            Op::WeightedSum(a, weights) => {
                let ga = weights * g[[0, 0]];
                self.acc(*a, ga);
            }
            Op::SquaredError(a, target, weights) => {
                let ga = (self.value(*a) - target) * weights * (2.0 * g[[0, 0]]);
                self.acc(*a, ga);
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    self.acc(p, g.clone());
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradients of all parameter nodes as `(parameter id, gradient)`. A
    /// parameter registered more than once has its gradients summed by the
    /// caller.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).and_then(|g| g.as_ref()).map(|g| (id, g)),
            _ => None,
        })
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central finite-difference check of d(root)/d(input) for a closure that
    /// rebuilds the graph from the input value.
    fn check<F: Fn(&mut Tape, Var) -> Var>(x0: Array2<f64>, f: F) {
        let mut tape = Tape::new();
        let x = tape.param(0, &x0);
        let y = f(&mut tape, x);
        tape.backward(y);
        let analytic = tape.grad(x).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let h = 1e-6;
        for idx in ndarray::indices(x0.dim()) {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[idx] += delta;
                let mut t = Tape::new();
                let xv = t.param(0, &xp);
                let y = f(&mut t, xv);
                t.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "index {idx:?}: analytic {a} numeric {numeric}");
        }
    }

    fn weights(n: usize, m: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn grad_matmul_affine_softplus_log() {
        check(weights(3, 4, 0.1), |t, x| {
            let w = t.constant(weights(4, 2, 0.5));
            let b = t.constant(weights(1, 2, 0.9));
            let y = t.affine(x, w, b);
            let y = t.softplus(y);
            let y = t.ln(y);
            t.weighted_sum(y, weights(3, 2, 1.3))
        });
    }

    #[test]
    fn grad_layer_norm_relu() {
        check(weights(3, 5, 0.2), |t, x| {
            let g = t.constant(weights(1, 5, 0.4));
            let b = t.constant(weights(1, 5, 0.8));
            let y = t.layer_norm(x, g, b);
            let y = t.relu(y);
            t.weighted_sum(y, weights(3, 5, 2.0))
        });
        // and w.r.t. the gain
        check(weights(1, 5, 0.4), |t, g| {
            let x = t.constant(weights(3, 5, 0.2));
            let b = t.constant(weights(1, 5, 0.8));
            let y = t.layer_norm(x, g, b);
            t.weighted_sum(y, weights(3, 5, 2.0))
        });
    }

    #[test]
    fn grad_attention() {
        let pattern = Rc::new(AttentionPattern {
            n_keys: 4,
            rows: vec![vec![0], vec![0, 1], vec![], vec![1, 3]],
        });
        for which in 0..3 {
            let p = pattern.clone();
            check(weights(4, 4, which as f64), move |t, x| {
                let others = [t.constant(weights(4, 4, 3.0)), t.constant(weights(4, 4, 4.0))];
                let (q, k, v) = match which {
                    0 => (x, others[0], others[1]),
                    1 => (others[0], x, others[1]),
                    _ => (others[0], others[1], x),
                };
                let y = t.attention(q, k, v, p.clone(), 2, 0.7);
                t.weighted_sum(y, weights(4, 4, 5.0))
            });
        }
    }

    #[test]
    fn attention_uniform_and_empty_rows() {
        let mut t = Tape::new();
        let q = t.constant(Array2::zeros((2, 2)));
        let k = t.constant(weights(3, 2, 0.3));
        let v = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]));
        let p = Rc::new(AttentionPattern { n_keys: 3, rows: vec![vec![0, 1, 2], vec![]] });
        let y = t.attention(q, k, v, p, 1, 1.0);
        let out = t.value(y);
        assert!((out[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((out[[0, 1]] - 5.0).abs() < 1e-12);
        assert_eq!(out.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_structural_ops() {
        check(weights(3, 2, 0.6), |t, x| {
            let c = t.constant(weights(3, 1, 0.1));
            let y = t.concat_cols(&[c, x]);
            let y = t.gather_rows(y, vec![2, 0, 2]);
            let e = t.gather_elems(y, vec![(0, 1), (1, 2), (2, 2)]);
            let r = t.gather_rows(x, vec![1]);
            let b = t.broadcast_row(r, 4);
            let s1 = t.weighted_sum(e, weights(3, 1, 0.3));
            let s2 = t.weighted_sum(b, weights(4, 2, 0.9));
            let col = t.assemble(vec![Scalar::Const(2.0), Scalar::Elem(x, 2, 1), Scalar::Elem(x, 0, 0)]);
            let s3 = t.weighted_sum(col, weights(3, 1, 1.7));
            let d = t.dropout(x, weights(3, 2, 2.2));
            let s4 = t.weighted_sum(d, weights(3, 2, 0.2));
            let s5 = t.squared_error(x, weights(3, 2, 1.1), weights(3, 2, 0.4));
            t.sum_scalars(&[s1, s2, s3, s4, s5])
        });
    }

    #[test]
    fn grad_token_embed() {
        let rows = vec![RowEmbed::Value(1), RowEmbed::Prediction(0), RowEmbed::Value(0), RowEmbed::Value(1)];
        for which in 0..4 {
            let rows = rows.clone();
            let shape = match which {
                0 => (4, 1),
                3 => (2, 3),
                _ => (2, 3),
            };
            check(weights(shape.0, shape.1, 0.4 + which as f64), move |t, x| {
                let mut parts = [t.constant(weights(4, 1, 0.5)),
                    t.constant(weights(2, 3, 0.6)),
                    t.constant(weights(2, 3, 0.7)),
                    t.constant(weights(2, 3, 0.8))];
                parts[which] = x;
                let y = t.token_embed(parts[0], parts[1], parts[2], parts[3], rows.clone());
                t.weighted_sum(y, weights(4, 3, 1.1))
            });
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
    }
}
