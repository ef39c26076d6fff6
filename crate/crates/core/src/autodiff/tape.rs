use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use super::{Mode, Real};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<T>,
        inv_std: Array1<T>,
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    SegmentMax {
        x: NodeId,
        argmax: Array2<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Array2<T>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Gather {
        x: NodeId,
        rows: Vec<Vec<(usize, T)>>,
    },
    Interp {
        x: NodeId,
        rows: Vec<(usize, Vec<(usize, T)>)>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulConst {
        x: NodeId,
        c: Array2<T>,
    },
    Sum {
        x: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        probs: Array2<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
///
/// Values are never mutated once recorded. Call [`Tape::backward`] once on a
/// scalar node, then read gradients with [`Tape::grad`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Row index of the winning entry per (group, column) of a segment max.
    pub fn argmax(&self, id: NodeId) -> Option<&Array2<usize>> {
        match &self.nodes[id.0].op {
            Op::SegmentMax { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// `x W^T + b` with `x: n x d_in`, `W: d_out x d_in`, `b: 1 x d_out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, d_in) = self.shape(x);
        let (d_out, w_in) = self.shape(w);
        if d_in != w_in || self.shape(b) != (1, d_out) {
            return Err(Error::shape(format!(
                "linear: input width {d_in}, weight {d_out}x{w_in}, bias {:?}",
                self.shape(b)
            )));
        }
        let mut y = self.value(x).dot(&self.value(w).t());
        y += self.value(b);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// Batch normalization over rows using the batch's own statistics.
    ///
    /// Returns the node plus the (biased) batch mean and variance so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, Array1<T>, Array1<T>)> {
        self.check_bn(x, gamma, beta)?;
        let xv = self.value(x);
        let n = T::of(xv.nrows() as f64);
        let mean = xv.sum_axis(Axis(0)) / n;
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = centered * &inv_std;
        let id = self.bn_node(x, gamma, beta, xhat, inv_std, true);
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Array1<T>,
        var: &Array1<T>,
        eps: T,
    ) -> Result<NodeId> {
        self.check_bn(x, gamma, beta)?;
        let d = self.shape(x).1;
        if mean.len() != d || var.len() != d {
            return Err(Error::shape("batch norm running statistics width"));
        }
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (self.value(x) - mean) * &inv_std;
        Ok(self.bn_node(x, gamma, beta, xhat, inv_std, false))
    }

    fn check_bn(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<()> {
        let d = self.shape(x).1;
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(Error::shape(format!("batch norm: width {d} vs gamma/beta")));
        }
        Ok(())
    }

    fn bn_node(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<T>,
        inv_std: Array1<T>,
        batch_stats: bool,
    ) -> NodeId {
        let y = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.needs(&[x, gamma, beta]);
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[x]);
        self.push(y, Op::Relu { x }, rg)
    }

    /// Column-wise max within consecutive row groups.
    ///
    /// Group `g` spans rows `offsets[g]..offsets[g + 1]`; every group must be
    /// non-empty. The output has one row per group. Ties go to the lowest row.
    pub fn segment_max(&mut self, x: NodeId, offsets: &[usize]) -> Result<NodeId> {
        let (n, d) = self.shape(x);
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n {
            return Err(Error::shape(format!("segment_max: offsets do not cover {n} rows")));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("segment_max: empty group"));
        }
        let groups = offsets.len() - 1;
        let xv = self.value(x);
        let mut out = Array2::<T>::zeros((groups, d));
        let mut argmax = Array2::<usize>::zeros((groups, d));
        for g in 0..groups {
            let (lo, hi) = (offsets[g], offsets[g + 1]);
            let mut best = out.row_mut(g);
            let mut arg = argmax.row_mut(g);
            best.assign(&xv.row(lo));
            arg.fill(lo);
            for r in lo + 1..hi {
                Zip::from(&mut best).and(&mut arg).and(xv.row(r)).for_each(|b, a, &v| {
                    if v > *b {
                        *b = v;
                        *a = r;
                    }
                });
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SegmentMax { x, argmax }, rg))
    }

    /// Inverted dropout. Identity in eval mode or when `ratio == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, ratio: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::invalid(format!("dropout ratio {ratio} outside [0, 1)")));
        }
        if mode == Mode::Eval || ratio == 0.0 {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - ratio));
        let mask = self
            .value(x)
            .mapv(|_| if rng.random::<f64>() < ratio { T::zero() } else { scale });
        let y = self.value(x) * &mask;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Dropout { x, mask }, rg))
    }

    /// Concatenates along the feature (column) axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat of nothing"));
        };
        let n = self.shape(*first).0;
        if parts.iter().any(|p| self.shape(*p).0 != n) {
            return Err(Error::shape("concat: row counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
        let rg = self.needs(parts);
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Output row `i` is `sum_j w_ij * x[r_ij]` over the pairs in `rows[i]`.
    pub fn gather(&mut self, x: NodeId, rows: Vec<Vec<(usize, T)>>) -> Result<NodeId> {
        let (n, d) = self.shape(x);
        if rows.iter().flatten().any(|&(r, _)| r >= n) {
            return Err(Error::invalid("gather: row index out of range"));
        }
        let xv = self.value(x);
        let mut y = Array2::<T>::zeros((rows.len(), d));
        for (i, pairs) in rows.iter().enumerate() {
            let mut out = y.row_mut(i);
            for &(r, w) in pairs {
                out.scaled_add(w, &xv.row(r));
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Gather { x, rows }, rg))
    }

    /// Convex combination written relative to an anchor row:
    /// output row `i` is `x[a] + sum_j w_j * (x[r_j] - x[a])` for
    /// `rows[i] = (a, [(r_j, w_j)])`.
    ///
    /// Equal to `(1 - sum w) x[a] + sum w_j x[r_j]`, but reproduces constant
    /// inputs exactly.
    pub fn interpolate(&mut self, x: NodeId, rows: Vec<(usize, Vec<(usize, T)>)>) -> Result<NodeId> {
        let (n, d) = self.shape(x);
        if rows
            .iter()
            .any(|(a, pairs)| *a >= n || pairs.iter().any(|&(r, _)| r >= n))
        {
            return Err(Error::invalid("interpolate: row index out of range"));
        }
        let xv = self.value(x);
        let mut y = Array2::<T>::zeros((rows.len(), d));
        for (i, (anchor, pairs)) in rows.iter().enumerate() {
            let base = xv.row(*anchor);
            let mut out = y.row_mut(i);
            out.assign(&base);
            for &(r, w) in pairs {
                Zip::from(&mut out)
                    .and(xv.row(r))
                    .and(base)
                    .for_each(|o, &v, &b| *o += w * (v - b));
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Interp { x, rows }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add: shapes differ"));
        }
        let y = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul: shapes differ"));
        }
        let y = self.value(a) * self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: NodeId, c: Array2<T>) -> Result<NodeId> {
        if self.shape(x) != c.dim() {
            return Err(Error::shape("mul_const: shapes differ"));
        }
        let y = self.value(x) * &c;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::MulConst { x, c }, rg))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Array2::from_elem((1, 1), s), Op::Sum { x }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = self.shape(logits);
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        if b == 0 {
            return Err(Error::invalid("cross entropy over an empty batch"));
        }
        let probs = softmax_rows(self.value(logits));
        let lv = self.value(logits);
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.fold(T::zero(), |a, &v| a + (v - mx).exp()).ln() + mx;
            total += lse - row[l];
        }
        let loss = total / T::of(b as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    fn accumulate(&mut self, id: NodeId, g: Array2<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar node `root` (seed gradient 1).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::shape("backward needs a scalar root"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.local_grads(i, &dy);
            self.grads[i] = Some(dy);
            for (id, g) in contributions {
                self.accumulate(id, g);
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, dy: &Array2<T>) -> Vec<(NodeId, Array2<T>)> {
        let rg = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                if rg(w) {
                    out.push((*w, dy.t().dot(self.value(*x))));
                }
                if rg(b) {
                    out.push((*b, dy.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if rg(x) {
                    out.push((*x, dy.dot(self.value(*w))));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                if rg(gamma) {
                    out.push((*gamma, (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if rg(beta) {
                    out.push((*beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if rg(x) {
                    let g = self.value(*gamma).row(0).to_owned();
                    let dxhat = dy * &g;
                    let dx = if *batch_stats {
                        let n = T::of(dy.nrows() as f64);
                        let mean_d = dxhat.sum_axis(Axis(0)) / n;
                        let mean_dx = (&dxhat * xhat).sum_axis(Axis(0)) / n;
                        (dxhat - &mean_d - &(xhat * &mean_dx)) * inv_std
                    } else {
                        dxhat * inv_std
                    };
                    out.push((*x, dx));
                }
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(&self.nodes[i].value).for_each(|d, &y| {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                });
                out.push((*x, dx));
            }
            Op::SegmentMax { x, argmax } => {
                let mut dx = Array2::<T>::zeros(self.value(*x).dim());
                for ((g, j), &r) in argmax.indexed_iter() {
                    dx[[r, j]] += dy[[g, j]];
                }
                out.push((*x, dx));
            }
            Op::Dropout { x, mask } => out.push((*x, dy * mask)),
            Op::Concat { parts } => {
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if rg(p) {
                        out.push((*p, dy.slice(ndarray::s![.., col..col + w]).to_owned()));
                    }
                    col += w;
                }
            }
            Op::Gather { x, rows } => {
                let mut dx = Array2::<T>::zeros(self.value(*x).dim());
                for (r_out, pairs) in rows.iter().enumerate() {
                    let d = dy.row(r_out);
                    for &(r, w) in pairs {
                        dx.row_mut(r).scaled_add(w, &d);
                    }
                }
                out.push((*x, dx));
            }
            Op::Interp { x, rows } => {
                let mut dx = Array2::<T>::zeros(self.value(*x).dim());
                for (r_out, (anchor, pairs)) in rows.iter().enumerate() {
                    let d = dy.row(r_out);
                    let rest = pairs.iter().fold(T::zero(), |acc, &(_, w)| acc + w);
                    dx.row_mut(*anchor).scaled_add(T::one() - rest, &d);
                    for &(r, w) in pairs {
                        dx.row_mut(r).scaled_add(w, &d);
                    }
                }
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Mul { a, b } => {
                out.push((*a, dy * self.value(*b)));
                out.push((*b, dy * self.value(*a)));
            }
            Op::MulConst { x, c } => out.push((*x, dy * c)),
            Op::Sum { x } => {
                let s = dy[[0, 0]];
                out.push((*x, Array2::from_elem(self.value(*x).dim(), s)));
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let scale = dy[[0, 0]] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[[r, l]] -= T::one();
                }
                d.mapv_inplace(|v| v * scale);
                out.push((*logits, d));
            }
        }
        out
    }
}

/// Row-wise softmax, stabilized by subtracting each row's max.
pub fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let mx = row.fold(T::neg_infinity(), |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}
