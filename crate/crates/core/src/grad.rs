//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse and accumulates gradients
//! for every node reachable from a parameter leaf. Vectors are `1 x n`
//! matrices and scalar losses are `1 x 1`.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SumAll(Var),
    MeanRows(Var),
    SelectRow(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Mat,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        // per (sequence, head): seq_len x seq_len attention weights
        weights: Vec<Mat>,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `a * row` elementwise, broadcasting a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        let ng = self.ng(&[a]);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let out = self.value(a).slice(s![row..row + 1, ..]).to_owned();
        let ng = self.ng(&[a]);
        self.push(out, Op::SelectRow(a, row), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols(a, start, end), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalisation with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Per-column normalisation over the batch (training-mode batch norm).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.ncols());
        for mut col in xhat.columns_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy of `logits` (n x classes) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits));
        assert_eq!(probs.nrows(), labels.len(), "one label per row");
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[[i, y]].max(1e-300).ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(&[logits]);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of `n x 1` logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.ncols(), 1, "bce expects a single logit column");
        assert_eq!(z.nrows(), targets.len(), "one target per row");
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for (zi, &y) in z.column(0).iter().zip(targets) {
            // log(1 + e^z) - y z, stable for both signs of z
            loss += zi.max(0.0) - zi * y + (-zi.abs()).exp().ln_1p();
            probs.push(sigmoid(*zi));
        }
        let ng = self.ng(&[logits]);
        self.push(
            Array2::from_elem((1, 1), loss / n),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Scaled dot-product self-attention. Rows are grouped into consecutive
    /// sequences of `seq_len` tokens; the model width is split into `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.dim();
        assert!(seq_len > 0 && rows % seq_len == 0, "rows must split into sequences");
        assert!(heads > 0 && width % heads == 0, "width must split into heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, width));
        let mut weights = Vec::with_capacity(rows / seq_len * heads);
        for sq in 0..rows / seq_len {
            let r = sq * seq_len..(sq + 1) * seq_len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![r.clone(), c.clone()]);
                let ks = kv.slice(s![r.clone(), c.clone()]);
                let vs = vv.slice(s![r.clone(), c.clone()]);
                let w = softmax_rows(&(qs.dot(&ks.t()) * scale));
                out.slice_mut(s![r.clone(), c]).assign(&w.dot(&vs));
                weights.push(w);
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                weights,
            },
            ng,
        )
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                acc(*a, g * self.value(*row));
                acc(
                    *row,
                    (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Abs(a) => {
                let sign = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*a, g * &sign);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).dim();
                acc(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::MeanRows(a) => {
                let (n, m) = self.value(*a).dim();
                let d = g.broadcast((n, m)).expect("row broadcast").to_owned() / n as f64;
                acc(*a, d);
            }
            Op::SelectRow(a, row) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![*row..*row + 1, ..]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, &gy - &(y * &dot));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gx = g * self.value(*gamma);
                let m = xhat.ncols() as f64;
                let mut dx = Array2::zeros(xhat.dim());
                for (r, ((mut drow, grow), xrow)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(gx.rows())
                    .zip(xhat.rows())
                    .enumerate()
                {
                    let mean_g = grow.sum() / m;
                    let mean_gx = grow.dot(&xrow) / m;
                    Zip::from(&mut drow)
                        .and(&grow)
                        .and(&xrow)
                        .for_each(|d, &gi, &xi| *d = inv_std[r] * (gi - mean_g - xi * mean_gx));
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gx = g * self.value(*gamma);
                let n = xhat.nrows() as f64;
                let mut dx = Array2::zeros(xhat.dim());
                for (c, ((mut dcol, gcol), xcol)) in dx
                    .columns_mut()
                    .into_iter()
                    .zip(gx.columns())
                    .zip(xhat.columns())
                    .enumerate()
                {
                    let mean_g = gcol.sum() / n;
                    let mean_gx = gcol.dot(&xcol) / n;
                    Zip::from(&mut dcol)
                        .and(&gcol)
                        .and(&xcol)
                        .for_each(|d, &gi, &xi| *d = inv_std[c] * (gi - mean_g - xi * mean_gx));
                }
                acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len() as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[[i, y]] -= 1.0;
                }
                acc(*logits, d * (g[[0, 0]] / n));
            }
            Op::BceLogits {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len() as f64;
                let d = Array2::from_shape_fn((targets.len(), 1), |(i, _)| {
                    (probs[i] - targets[i]) * g[[0, 0]] / n
                });
                acc(*logits, d);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, width) = qv.dim();
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros((rows, width));
                let mut dk = Array2::zeros((rows, width));
                let mut dv = Array2::zeros((rows, width));
                let mut wi = weights.iter();
                for sq in 0..rows / seq_len {
                    let r = sq * seq_len..(sq + 1) * seq_len;
                    for h in 0..*heads {
                        let c = h * dh..(h + 1) * dh;
                        let w = wi.next().expect("cached weights");
                        let go = g.slice(s![r.clone(), c.clone()]);
                        let qs = qv.slice(s![r.clone(), c.clone()]);
                        let ks = kv.slice(s![r.clone(), c.clone()]);
                        let vs = vv.slice(s![r.clone(), c.clone()]);
                        dv.slice_mut(s![r.clone(), c.clone()]).assign(&w.t().dot(&go));
                        let dw = go.dot(&vs.t());
                        let dot = (&dw * w).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = (w * &(&dw - &dot)) * scale;
                        dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
                        dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d loss / d input for every input entry.
    pub(crate) fn check_gradient<F>(inputs: &[Mat], build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
            for pos in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Mat> = inputs.to_vec();
                    let cell = perturbed[idx].iter_mut().nth(pos).unwrap();
                    *cell += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.into_iter().map(|m| g.param(m)).collect();
                    let l = build(&mut g, &vars);
                    g.scalar(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = *analytic.iter().nth(pos).unwrap();
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < tol || (a - numeric).abs() < 1e-8,
                    "input {idx} entry {pos}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_bias_relu_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random_mat(&mut rng, 4, 3), random_mat(&mut rng, 3, 5), random_mat(&mut rng, 1, 5)];
        check_gradient(
            &inputs,
            |g, v| {
                let h = g.matmul(v[0], v[1]);
                let h = g.add_row(h, v[2]);
                let h = g.relu(h);
                let h = g.scale(h, 0.7);
                g.sum_all(h)
            },
            1e-5,
        );
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [random_mat(&mut rng, 3, 4), random_mat(&mut rng, 3, 4), random_mat(&mut rng, 1, 4)];
        check_gradient(
            &inputs,
            |g, v| {
                let a = g.mul(v[0], v[1]);
                let b = g.sub(a, v[1]);
                let c = g.mul_row(b, v[2]);
                let d = g.sigmoid(c);
                let e = g.abs(d);
                let f = g.add(e, v[0]);
                let m = g.mean_rows(f);
                g.mean_all(m)
            },
            1e-5,
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [random_mat(&mut rng, 3, 2), random_mat(&mut rng, 3, 3)];
        check_gradient(
            &inputs,
            |g, v| {
                let c = g.concat_cols(&[v[0], v[1]]);
                let s = g.slice_cols(c, 1, 4);
                let r = g.select_row(s, 2);
                let sq = g.mul(r, r);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            random_mat(&mut rng, 5, 4),
            random_mat(&mut rng, 1, 4),
            random_mat(&mut rng, 1, 4),
            random_mat(&mut rng, 5, 4),
        ];
        check_gradient(
            &inputs,
            |g, v| {
                let ln = g.layer_norm(v[0], v[1], v[2], 1e-5);
                let bn = g.batch_norm(ln, v[1], v[2], 1e-5);
                let sm = g.softmax_rows(bn);
                let w = g.mul(sm, v[3]);
                g.sum_all(w)
            },
            1e-4,
        );
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random_mat(&mut rng, 4, 3), random_mat(&mut rng, 4, 1)];
        check_gradient(
            &inputs,
            |g, v| {
                let ce = g.cross_entropy(v[0], &[0, 2, 1, 2]);
                let bce = g.bce_with_logits(v[1], &[1.0, 0.0, 1.0, 0.0]);
                g.add(ce, bce)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_multi_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [
            random_mat(&mut rng, 6, 4),
            random_mat(&mut rng, 6, 4),
            random_mat(&mut rng, 6, 4),
            random_mat(&mut rng, 6, 4),
        ];
        check_gradient(
            &inputs,
            |g, v| {
                let a = g.attention(v[0], v[1], v[2], 3, 2);
                let w = g.mul(a, v[3]);
                g.sum_all(w)
            },
            1e-5,
        );
    }

    #[test]
    fn single_token_attention_is_value_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (random_mat(&mut rng, 3, 4), random_mat(&mut rng, 3, 4), random_mat(&mut rng, 3, 4));
        let mut g = Graph::new();
        let (q, k, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let out = g.attention(q, k, vv, 1, 2);
        assert_eq!(g.value(out), &v);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let z = g.param(Array2::from_shape_vec((2, 1), vec![800.0, -800.0]).unwrap());
        let l = g.bce_with_logits(z, &[1.0, 0.0]);
        assert!(g.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Array2::ones((2, 2)));
        let p = g.param(Array2::ones((2, 2)));
        let m = g.matmul(c, p);
        let l = g.sum_all(m);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &Array2::from_elem((2, 2), 2.0));
    }
}
