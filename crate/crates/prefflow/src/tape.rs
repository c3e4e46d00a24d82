//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! replays it in reverse to produce exact derivatives of a scalar output with
//! respect to every leaf. Matrices are row-major `Vec<f64>`; scalars are 1x1.
//!
//! The op set is the minimum needed by the denoisers and losses in this crate:
//! matrix products, row/column slicing and concatenation, row softmax, SiLU,
//! layer norm, softplus, and elementwise arithmetic.

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Matrix (n x d) plus a broadcast row vector (1 x d).
    AddRow(usize, usize),
    MatMul(usize, usize),
    /// `A * B^T` without materializing the transpose.
    MatMulNT(usize, usize),
    SoftmaxRows(usize),
    Silu(usize),
    /// Row-wise layer norm with a per-column gain (1 x d).
    LayerNormRows(usize, usize),
    Square(usize),
    Softplus(usize),
    SumAll(usize),
    MeanAll(usize),
    SliceRows(usize, usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Gradients of one scalar output with respect to every reachable node.
pub struct Grads {
    by_id: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_id[v.0].as_deref()
    }
}

const LN_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, rows, cols, value)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(1, 1, vec![value])
    }

    fn assert_same_shape(&self, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b);
        let (r, c) = self.shape(a);
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), r, c, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b);
        let (r, c) = self.shape(a);
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), r, c, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b);
        let (r, c) = self.shape(a);
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), r, c, v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, k) = self.shape(a);
        let v = self.value(a).iter().map(|&x| c * x).collect();
        self.push(Op::Scale(a.0, c), r, k, v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, c), "bias row must be 1x{c}, got {rr}x{rc}");
        let rv = self.value(row).to_vec();
        let mut v = self.value(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] += rv[j];
            }
        }
        self.push(Op::AddRow(a.0, row.0), r, c, v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let v = matmul(self.value(a), m, k, self.value(b), n);
        self.push(Op::MatMul(a.0, b.0), m, n, v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dims: {k} vs {k2}");
        let v = matmul_nt(self.value(a), m, k, self.value(b), n);
        self.push(Op::MatMulNT(a.0, b.0), m, n, v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                v[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                v[i * c + j] /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a.0), r, c, v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.push(Op::Silu(a.0), r, c, v)
    }

    pub fn layer_norm_rows(&mut self, a: Var, gain: Var) -> Var {
        let (r, c) = self.shape(a);
        let (gr, gc) = self.shape(gain);
        assert_eq!((gr, gc), (1, c), "gain must be 1x{c}");
        let x = self.value(a);
        let g = self.value(gain).to_vec();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                v[i * c + j] = g[j] * (row[j] - mean) * inv_std;
            }
        }
        self.push(Op::LayerNormRows(a.0, gain.0), r, c, v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| x * x).collect();
        self.push(Op::Square(a.0), r, c, v)
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| softplus(x)).collect();
        self.push(Op::Softplus(a.0), r, c, v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Op::SumAll(a.0), 1, 1, vec![s])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        self.push(Op::MeanAll(a.0), 1, 1, vec![s])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "row slice {start}+{len} out of {r}");
        let v = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows(a.0, start, len), len, c, v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, c) = self.shape(parts[0]);
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += pr;
            v.extend_from_slice(self.value(p));
        }
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rows, c, v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "col slice {start}+{len} out of {c}");
        let x = self.value(a);
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols(a.0, start, len), r, len, v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (r, _) = self.shape(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.shape(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut v = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p);
            for i in 0..r {
                v[i * total + off..i * total + off + w].copy_from_slice(&x[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), r, total, v)
    }

    /// Mean squared difference as a 1x1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean_all(s)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut by_id: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        by_id[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = by_id[id].take() else { continue };
            self.propagate(id, &g, &mut by_id);
            by_id[id] = Some(g);
        }
        Grads { by_id }
    }

    fn propagate(&self, id: usize, g: &[f64], by_id: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let (rows, cols) = (node.rows, node.cols);
        let mut acc = |target: usize, delta: Vec<f64>| {
            match &mut by_id[target] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            };
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                acc(*a, zip_map(g, bv, |x, y| x * y));
                acc(*b, zip_map(g, av, |x, y| x * y));
            }
            Op::Scale(a, c) => {
                acc(*a, g.iter().map(|&x| c * x).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                let mut rg = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        rg[j] += g[i * cols + j];
                    }
                }
                acc(*row, rg);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = self.nodes[*b].cols;
                // dA = dC * B^T ; dB = A^T * dC
                acc(*a, matmul_nt(g, m, n, &self.nodes[*b].value, k));
                acc(*b, matmul_tn(&self.nodes[*a].value, m, k, g, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = self.nodes[*b].rows;
                // C = A * B^T: dA = dC * B ; dB = dC^T * A
                acc(*a, matmul(g, m, n, &self.nodes[*b].value, k));
                acc(*b, matmul_tn(g, m, n, &self.nodes[*a].value, k));
            }
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut ag = vec![0.0; rows * cols];
                for i in 0..rows {
                    let srow = &s[i * cols..(i + 1) * cols];
                    let grow = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = srow.iter().zip(grow).map(|(&x, &y)| x * y).sum();
                    for j in 0..cols {
                        ag[i * cols + j] = srow[j] * (grow[j] - dot);
                    }
                }
                acc(*a, ag);
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let ag = zip_map(g, x, |gv, xv| {
                    let s = sigmoid(xv);
                    gv * (s + xv * s * (1.0 - s))
                });
                acc(*a, ag);
            }
            Op::LayerNormRows(a, gain) => {
                let x = &self.nodes[*a].value;
                let gv = &self.nodes[*gain].value;
                let mut ag = vec![0.0; rows * cols];
                let mut gg = vec![0.0; cols];
                for i in 0..rows {
                    let row = &x[i * cols..(i + 1) * cols];
                    let grow = &g[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    // d xhat = g * gain; then the standard layer-norm backward.
                    let dxhat: Vec<f64> = (0..cols).map(|j| grow[j] * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        gg[j] += grow[j] * xhat[j];
                        ag[i * cols + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                acc(*a, ag);
                acc(*gain, gg);
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, zip_map(g, x, |gv, xv| 2.0 * xv * gv));
            }
            Op::Softplus(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, zip_map(g, x, |gv, xv| gv * sigmoid(xv)));
            }
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.len();
                acc(*a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SliceRows(a, start, len) => {
                let ac = self.nodes[*a].cols;
                let ar = self.nodes[*a].rows;
                let mut ag = vec![0.0; ar * ac];
                ag[start * ac..(start + len) * ac].copy_from_slice(g);
                acc(*a, ag);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = (self.nodes[p].rows, self.nodes[p].cols);
                    let delta = g[off..off + pr * pc].to_vec();
                    acc(p, delta);
                    off += pr * pc;
                }
            }
            Op::SliceCols(a, start, len) => {
                let ac = self.nodes[*a].cols;
                let ar = self.nodes[*a].rows;
                let mut ag = vec![0.0; ar * ac];
                for i in 0..ar.min(rows) {
                    for j in 0..*len {
                        ag[i * ac + start + j] = g[i * len + j];
                    }
                }
                acc(*a, ag);
            }
            Op::ConcatCols(parts) => {
                let total = cols;
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = (self.nodes[p].rows, self.nodes[p].cols);
                    let mut delta = vec![0.0; pr * pc];
                    for i in 0..pr {
                        delta[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * total + off..i * total + off + pc]);
                    }
                    acc(p, delta);
                    off += pc;
                }
            }
        }
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

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `A (m x k) * B (k x n)`.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `A (m x k) * B^T` where `B` is `(n x k)`.
pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `A^T * B` where `A` is `(m x k)` and `B` is `(m x n)`.
pub fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    /// Central finite differences on a leaf, for checking the tape itself.
    fn numeric_grad(
        build: impl Fn(&mut Tape, &[f64]) -> Var,
        x0: &[f64],
        h: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; x0.len()];
        for i in 0..x0.len() {
            let mut xp = x0.to_vec();
            xp[i] += h;
            let mut xm = x0.to_vec();
            xm[i] -= h;
            let mut tp = Tape::new();
            let vp = build(&mut tp, &xp);
            let mut tm = Tape::new();
            let vm = build(&mut tm, &xm);
            g[i] = (tp.scalar_value(vp) - tm.scalar_value(vm)) / (2.0 * h);
        }
        g
    }

    fn check_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < tol,
                "coord {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut tape = Tape::new();
        let p = tape.leaf(1, 4, vec![1.0, -2.0, 3.0, 0.5]);
        let sq = tape.square(p);
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(p).unwrap(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        let c = tape.leaf_scalar(7.0);
        let _unused = tape.square(p);
        let grads = tape.backward(c);
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = Prng::new(11);
        let x0: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.normal() * 0.5).collect();
        let gain = vec![1.1, 0.9, 1.3, 0.7];

        let build = |tape: &mut Tape, x: &[f64]| {
            let a = tape.leaf(3, 4, x.to_vec());
            let wv = tape.leaf(4, 3, w.clone());
            let gv = tape.leaf(1, 4, gain.clone());
            let ln = tape.layer_norm_rows(a, gv);
            let h = tape.matmul(ln, wv);
            let s = tape.silu(h);
            let scores = tape.matmul_nt(s, s);
            let att = tape.softmax_rows(scores);
            let out = tape.matmul(att, s);
            let sq = tape.square(out);
            let m = tape.mean_all(sq);
            tape.softplus(m)
        };

        let mut tape = Tape::new();
        let loss = build(&mut tape, &x0);
        let grads = tape.backward(loss);
        // Leaf 0 is `a` by construction order.
        let analytic = grads.get(Var(0)).unwrap().to_vec();
        let numeric = numeric_grad(build, &x0, 1e-5);
        check_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn slices_and_concats_round_trip_gradients() {
        let mut rng = Prng::new(5);
        let x0: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let build = |tape: &mut Tape, x: &[f64]| {
            let a = tape.leaf(4, 6, x.to_vec());
            let top = tape.slice_rows(a, 0, 2);
            let bottom = tape.slice_rows(a, 2, 2);
            let swapped = tape.concat_rows(&[bottom, top]);
            let left = tape.slice_cols(swapped, 0, 3);
            let right = tape.slice_cols(swapped, 3, 3);
            let merged = tape.concat_cols(&[right, left]);
            let prod = tape.mul(merged, merged);
            let sc = tape.scale(prod, 0.25);
            tape.sum_all(sc)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &x0);
        let grads = tape.backward(loss);
        let analytic = grads.get(Var(0)).unwrap().to_vec();
        let numeric = numeric_grad(build, &x0, 1e-6);
        check_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn add_row_broadcast_gradients() {
        let x0 = vec![0.3, -0.4, 0.5, 0.1, 0.9, -0.2];
        let build = |tape: &mut Tape, x: &[f64]| {
            let b = tape.leaf(1, 3, x[..3].to_vec());
            let a = tape.leaf(1, 6, x.to_vec());
            let a2 = tape.slice_cols(a, 0, 3);
            let a3 = tape.concat_rows(&[a2, b]);
            let with_bias = tape.add_row(a3, b);
            let sq = tape.square(with_bias);
            tape.sum_all(sq)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &x0);
        let grads = tape.backward(loss);
        // x feeds both leaves: b (Var 0) reads x[..3], a (Var 1) reads all of x.
        let gb = grads.get(Var(0)).unwrap();
        let ga = grads.get(Var(1)).unwrap();
        let analytic: Vec<f64> =
            (0..6).map(|i| ga[i] + if i < 3 { gb[i] } else { 0.0 }).collect();
        let numeric = numeric_grad(build, &x0, 1e-6);
        check_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Prng::new(9);
        let mut tape = Tape::new();
        let a = tape.leaf(5, 7, (0..35).map(|_| rng.normal() * 3.0).collect());
        let s = tape.softmax_rows(a);
        for i in 0..5 {
            let row_sum: f64 = tape.value(s)[i * 7..(i + 1) * 7].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }
}
