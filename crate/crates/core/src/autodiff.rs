//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays them in reverse to accumulate gradients. Tensors are row-major
//! `f64` buffers; everything is 64-bit so finite-difference checks are
//! meaningful. Reduction loops run in fixed index order, so identical
//! inputs give bit-identical outputs.
//!
//! Only first-order gradients are supported. A tape is confined to one
//! logical thread; distinct tapes share no state.

use crate::error::{Error, Result};

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense numeric array with shape, row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {:?} expects {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape(format!(
                    "ragged rows: expected width {}, got {}",
                    c,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One-hot vector of length `n` (error if `index >= n`).
pub fn one_hot(index: usize, n: usize) -> Result<Tensor> {
    if index >= n {
        return Err(Error::Data(format!(
            "one_hot index {} out of range for {} classes",
            index, n
        )));
    }
    let mut data = vec![0.0; n];
    data[index] = 1.0;
    Ok(Tensor::from_vec(data))
}

/// Stack of one-hot rows, one per label.
pub fn one_hot_rows(labels: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n];
    for (b, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::Data(format!(
                "one_hot index {} out of range for {} classes",
                y, n
            )));
        }
        data[b * n + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), n], data)
}

/// In-place SGD update `p <- p - lr * g` over aligned parameter/gradient sets.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape != g.shape {
            return Err(Error::Shape(format!(
                "sgd_step: param shape {:?} vs grad shape {:?}",
                p.shape, g.shape
            )));
        }
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Node identity within one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    MeanRows(Var),
    Reshape(Var),
    Slice { x: Var, start: usize },
    SumAll(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    op: Op,
}

/// Ordered record of primitive operations. Inputs always precede their
/// consumers, so one reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { data, shape, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor as a leaf (gradient accumulates here).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
        }
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].grad.clone(),
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("{}: expected 2-D tensor, got {:?}", what, s))),
        }
    }

    // ── Forward primitives ───────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, ka, n);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b)))
    }

    fn elementwise_shapes(&self, a: Var, b: Var, what: &str) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            // rhs broadcast across leading rows
            Ok(true)
        } else {
            Err(Error::Shape(format!(
                "{}: incompatible shapes {:?} vs {:?}",
                what, sa, sb
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.elementwise_shapes(a, b, "add")?;
        let out = zip_broadcast(self.data(a), self.data(b), broadcast, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.elementwise_shapes(a, b, "sub")?;
        let out = zip_broadcast(self.data(a), self.data(b), broadcast, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Sub(a, b)))
    }

    /// Elementwise product; `b` may be a 1-D row vector broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.elementwise_shapes(a, b, "mul")?;
        let out = zip_broadcast(self.data(a), self.data(b), broadcast, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c))
    }

    /// Elementwise `max(0, x)`; subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Relu(a))
    }

    /// Elementwise `1 / (1 + exp(-x))`, strictly in (0,1). Saturates without
    /// overflowing: the exponential is only taken of a non-positive number.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Sigmoid(a))
    }

    /// Concatenate `[B×p]` and `[B×q]` along the last axis into `[B×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat lhs")?;
        let (rb, cb) = self.dims2(b, "concat rhs")?;
        if ra != rb {
            return Err(Error::Shape(format!(
                "concat: row counts disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(out, vec![ra, ca + cb], Op::ConcatCols(a, b)))
    }

    /// Mean over the first axis: `[B×k] -> [k]`, summed in index order.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        if r == 0 {
            return Err(Error::Data("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.data(a)[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        Ok(self.push(out, vec![c], Op::MeanRows(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(out, shape, Op::Reshape(a)))
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 || start + len > s[0] {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) out of bounds for shape {:?}",
                s
            )));
        }
        let out = self.data(a)[start..start + len].to_vec();
        Ok(self.push(out, vec![len], Op::Slice { x: a, start }))
    }

    /// Sum of all entries, as a `[1]` scalar. Summation runs in index order.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(vec![s], vec![1], Op::SumAll(a))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    ///
    /// Gradient w.r.t. the logits is `(softmax - one_hot) / B`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, n) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {} logit rows vs {} targets",
                b,
                targets.len()
            )));
        }
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Data(format!(
                    "target index {} out of range for {} classes",
                    t, n
                )));
            }
            let row = &self.data(logits)[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                probs[i * n + j] = (v - max).exp() / denom;
            }
            loss -= row[t] - max - denom.ln();
        }
        loss /= b as f64;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output; gradients accumulate into every
    /// node reachable backwards from `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward root must be scalar");
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let g = self.nodes[i].grad.clone();
                    // da += g · bᵀ
                    {
                        let bd = &self.nodes[b.0].data;
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            for c in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[r * n + j] * bd[c * n + j];
                                }
                                da[r * k + c] = s;
                            }
                        }
                        accumulate(&mut self.nodes[a.0].grad, &da);
                    }
                    // db += aᵀ · g
                    {
                        let ad = &self.nodes[a.0].data;
                        let mut db = vec![0.0; k * n];
                        for r in 0..k {
                            for c in 0..n {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += ad[j * k + r] * g[j * n + c];
                                }
                                db[r * n + c] = s;
                            }
                        }
                        accumulate(&mut self.nodes[b.0].grad, &db);
                    }
                }
                Op::Add(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    accumulate(&mut self.nodes[a.0].grad, &g);
                    self.accumulate_rhs(b, &g, |_x, _y, gv| gv);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    accumulate(&mut self.nodes[a.0].grad, &g);
                    self.accumulate_rhs(b, &g, |_x, _y, gv| -gv);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    // da += g ⊗ b (b broadcast if 1-D)
                    {
                        let bd = &self.nodes[b.0].data;
                        let ga: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(idx, gv)| gv * bd[idx % bd.len()])
                            .collect();
                        accumulate(&mut self.nodes[a.0].grad, &ga);
                    }
                    // db += g ⊗ a, column-reduced if broadcast
                    let ad = self.nodes[a.0].data.clone();
                    self.accumulate_rhs(b, &g, move |idx, _y, gv| gv * ad[idx]);
                }
                Op::Scale(a, c) => {
                    let g: Vec<f64> = self.nodes[i].grad.iter().map(|gv| c * gv).collect();
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                Op::Relu(a) => {
                    let g: Vec<f64> = self.nodes[i]
                        .grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                Op::Sigmoid(a) => {
                    let g: Vec<f64> = self.nodes[i]
                        .grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].shape[1];
                    let cb = self.nodes[b.0].shape[1];
                    let rows = self.nodes[a.0].shape[0];
                    let g = self.nodes[i].grad.clone();
                    for r in 0..rows {
                        for c in 0..ca {
                            self.nodes[a.0].grad[r * ca + c] += g[r * (ca + cb) + c];
                        }
                        for c in 0..cb {
                            self.nodes[b.0].grad[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a.0].shape[0];
                    let cols = self.nodes[a.0].shape[1];
                    let g = self.nodes[i].grad.clone();
                    for r in 0..rows {
                        for c in 0..cols {
                            self.nodes[a.0].grad[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let g = self.nodes[i].grad.clone();
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                Op::Slice { x, start } => {
                    let g = self.nodes[i].grad.clone();
                    for (j, gv) in g.iter().enumerate() {
                        self.nodes[x.0].grad[start + j] += gv;
                    }
                }
                Op::SumAll(a) => {
                    let g0 = self.nodes[i].grad[0];
                    for gv in self.nodes[a.0].grad.iter_mut() {
                        *gv += g0;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let g0 = self.nodes[i].grad[0];
                    let b = targets.len();
                    let n = self.nodes[logits.0].shape[1];
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..n {
                            let one = if c == t { 1.0 } else { 0.0 };
                            self.nodes[logits.0].grad[r * n + c] +=
                                g0 * (probs[r * n + c] - one) / b as f64;
                        }
                    }
                }
            }
        }
    }

    /// Accumulate into `b`'s grad, column-summing when `b` was row-broadcast.
    fn accumulate_rhs(&mut self, b: Var, g: &[f64], f: impl Fn(usize, f64, f64) -> f64) {
        let blen = self.nodes[b.0].data.len();
        if blen == g.len() {
            for (idx, gv) in g.iter().enumerate() {
                let contrib = f(idx, self.nodes[b.0].data[idx], *gv);
                self.nodes[b.0].grad[idx] += contrib;
            }
        } else {
            for (idx, gv) in g.iter().enumerate() {
                let j = idx % blen;
                let contrib = f(idx, self.nodes[b.0].data[j], *gv);
                self.nodes[b.0].grad[j] += contrib;
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[r * k + p] * b[p * n + j];
            }
            out[r * n + j] = s;
        }
    }
    out
}

fn zip_broadcast(a: &[f64], b: &[f64], broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if broadcast {
        a.iter().enumerate().map(|(i, &x)| f(x, b[i % b.len()])).collect()
    } else {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::seed::rng_from;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let va = tape.leaf(&a);
        let vi = tape.leaf(&eye);
        let out = tape.matmul(va, vi).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = rng_from(11);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

        let forward = |params: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let va = tape.leaf(&Tensor::new(vec![3, 4], params[0].clone()).unwrap());
            let vb = tape.leaf(&Tensor::new(vec![4, 2], params[1].clone()).unwrap());
            let c = tape.matmul(va, vb).unwrap();
            let s = tape.sigmoid(c);
            let out = tape.sum_all(s);
            tape.data(out)[0]
        };

        let mut tape = Tape::new();
        let va = tape.leaf(&Tensor::new(vec![3, 4], a.clone()).unwrap());
        let vb = tape.leaf(&Tensor::new(vec![4, 2], b.clone()).unwrap());
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sigmoid(c);
        let out = tape.sum_all(s);
        tape.backward(out);

        let params = vec![a, b];
        let fd = central_diff(&forward, &params, 1e-5);
        assert!(max_rel_err(tape.grad(va), &fd[0]) < 1e-6);
        assert!(max_rel_err(tape.grad(vb), &fd[1]) < 1e-6);
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![0.0, 3f64.ln(), 40.0, -40.0]));
        let y = tape.sigmoid(x);
        let d = tape.data(y);
        assert!(close(d[0], 0.5, 1e-15));
        assert!(close(d[1], 0.75, 1e-12));
        assert!(close(d[2], 1.0, 1e-12));
        assert!(d[2] < 1.0 && d[3] > 0.0, "sigmoid stays strictly inside (0,1)");
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);

        let all_neg = tape.leaf(&Tensor::from_vec(vec![-3.0, -0.5]));
        let z = tape.relu(all_neg);
        assert_eq!(tape.data(z), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_is_indicator_away_from_kink() {
        let xs = vec![-2.0, -0.7, 0.3, 1.9];
        let forward = |params: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::from_vec(params[0].clone()));
            let y = tape.relu(x);
            let s = tape.sum_all(y);
            tape.data(s)[0]
        };
        let fd = central_diff(&forward, &[xs.clone()], 1e-5);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(xs.clone()));
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert!(max_rel_err(tape.grad(x), &fd[0]) < 1e-6);
        for (g, &xv) in tape.grad(x).iter().zip(&xs) {
            let expect = if xv > 0.0 { 1.0 } else { 0.0 };
            assert!(close(*g, expect, 1e-9));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(close(tape.data(loss)[0], 2f64.ln(), 1e-15));
        tape.backward(loss);
        assert!(close(tape.grad(logits)[0], -0.5, 1e-15));
        assert!(close(tape.grad(logits)[1], 0.5, 1e-15));
    }

    #[test]
    fn cross_entropy_saturated_correct_class() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::new(vec![1, 2], vec![30.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.data(loss)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 3]));
        let err = tape.softmax_cross_entropy(logits, &[3]).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn sgd_step_cases() {
        // lr = 0 leaves params unchanged
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let g = vec![Tensor::from_vec(vec![5.0, 5.0])];
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        // p=1, g=2, lr=0.1 -> 0.8
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0)];
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!(close(p[0].data()[0], 0.8, 1e-15));

        // two steps on L = p²/2 from p=1, lr=0.5: 0.5 then 0.25
        let mut p = vec![Tensor::scalar(1.0)];
        for _ in 0..2 {
            let g = vec![p[0].clone()];
            sgd_step(&mut p, &g, 0.5).unwrap();
        }
        assert!(close(p[0].data()[0], 0.25, 1e-15));

        // shape mismatch errors
        let mut p = vec![Tensor::from_vec(vec![1.0])];
        let g = vec![Tensor::from_vec(vec![1.0, 2.0])];
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // backward of (l1 + l2) equals backward of l1 plus backward of l2
        let x0 = Tensor::new(vec![1, 2], vec![0.4, -1.2]).unwrap();

        let run = |combined: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(&x0);
            let l1 = tape.softmax_cross_entropy(x, &[0]).unwrap();
            let y = tape.sigmoid(x);
            let l2 = tape.sum_all(y);
            if combined {
                let tot = tape.add(l1, l2).unwrap();
                tape.backward(tot);
                (tape.grad(x).to_vec(), vec![])
            } else {
                tape.backward(l1);
                let g1 = tape.grad(x).to_vec();
                tape.backward(l2);
                let g2 = tape.grad(x).to_vec();
                (g1, g2)
            }
        };

        let (g_combined, _) = run(true);
        let (g1, g2) = run(false);
        for i in 0..2 {
            assert!(close(g_combined[i], g1[i] + g2[i], 1e-12));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = rng_from(3);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = || {
            let mut tape = Tape::new();
            let v = tape.leaf(&Tensor::new(vec![2, 3], x.clone()).unwrap());
            let s = tape.sigmoid(v);
            let m = tape.mean_rows(s).unwrap();
            tape.data(m).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_slice_mean_gradients() {
        let a0 = vec![1.0, 2.0, -0.5, 0.8];
        let b0 = vec![3.0, -1.0];
        let forward = |params: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let a = tape.leaf(&Tensor::new(vec![2, 2], params[0].clone()).unwrap());
            let b = tape.leaf(&Tensor::new(vec![2, 1], params[1].clone()).unwrap());
            let cat = tape.concat_cols(a, b).unwrap();
            let s = tape.sigmoid(cat);
            let m = tape.mean_rows(s).unwrap();
            let sl = tape.slice(m, 1, 2).unwrap();
            let out = tape.sum_all(sl);
            tape.data(out)[0]
        };
        let fd = central_diff(&forward, &[a0.clone(), b0.clone()], 1e-5);

        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![2, 2], a0).unwrap());
        let b = tape.leaf(&Tensor::new(vec![2, 1], b0).unwrap());
        let cat = tape.concat_cols(a, b).unwrap();
        let s = tape.sigmoid(cat);
        let m = tape.mean_rows(s).unwrap();
        let sl = tape.slice(m, 1, 2).unwrap();
        let out = tape.sum_all(sl);
        tape.backward(out);
        assert!(max_rel_err(tape.grad(a), &fd[0]) < 1e-6, "{:?} vs {:?}", tape.grad(a), fd[0]);
        assert!(max_rel_err(tape.grad(b), &fd[1]) < 1e-6);
    }

    #[test]
    fn one_hot_basics() {
        let t = one_hot(1, 3).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0]);
        assert!(one_hot(3, 3).is_err());
        let rows = one_hot_rows(&[2, 0], 3).unwrap();
        assert_eq!(rows.shape(), &[2, 3]);
        assert_eq!(rows.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
