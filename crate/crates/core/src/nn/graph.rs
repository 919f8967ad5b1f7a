//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] is built fresh for every example. Forward values are computed
//! eagerly as nodes are added; [`Graph::backward`] walks the tape in reverse
//! and accumulates parameter gradients into a [`Grads`] buffer.

use super::{Grads, Mat, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Const,
    /// One row of a parameter matrix (embedding lookup).
    Row(ParamId, usize),
    MatMul(NodeId, NodeId),
    /// Elementwise add; the right operand may be a single row broadcast over rows.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Mat),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Max2(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    VStack(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    Sum(NodeId),
    ColMax(NodeId, Vec<usize>),
    /// Same-padded 1-D convolution: input `L × C`, kernel `K × C`, bias `1 × 1`.
    Conv1d(NodeId, NodeId, NodeId),
    /// Chamfer distance with the nearest-neighbour assignments of both directions.
    Chamfer(NodeId, NodeId, Vec<usize>, Vec<usize>),
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

const NORM_EPS: f64 = 1e-12;

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        match &self.nodes[id.0] {
            Node { op: Op::Param(p), .. } => self.params.get(*p),
            Node { value: Some(v), .. } => v,
            Node { value: None, .. } => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value: Some(value) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn row(&mut self, id: ParamId, row: usize) -> NodeId {
        let v = Mat::row_vector(self.params.get(id).row(row).to_vec());
        self.push(Op::Row(id, row), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let v = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x + y)
        } else {
            assert!(vb.rows() == 1 && vb.cols() == va.cols(), "add {:?} + {:?}", va.shape(), vb.shape());
            let mut out = va.clone();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
            out
        };
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn mul_const(&mut self, a: NodeId, mask: Mat) -> NodeId {
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(Op::MulConst(a, mask), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn max2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), f64::max);
        self.push(Op::Max2(a, b), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn vstack(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "vstack column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Op::VStack(parts.to_vec()), Mat::from_vec(rows, cols, data))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        let mut out = Mat::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a).clone().reshaped(rows, cols);
        self.push(Op::Reshape(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Mat::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&super::mat::softmax(va.row(r)));
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Mat::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&super::mat::log_softmax(va.row(r)));
        }
        self.push(Op::LogSoftmaxRows(a), out)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            let norm = out.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            out.row_mut(r).iter_mut().for_each(|x| *x /= norm);
        }
        self.push(Op::L2NormalizeRows(a), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Mat::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v)
    }

    /// Column-wise maximum over rows (`R × C → 1 × C`).
    pub fn col_max(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut arg = vec![0usize; va.cols()];
        let mut out = Mat::row_vector(va.row(0).to_vec());
        for r in 1..va.rows() {
            for c in 0..va.cols() {
                if va.get(r, c) > out.get(0, c) {
                    out.set(0, c, va.get(r, c));
                    arg[c] = r;
                }
            }
        }
        self.push(Op::ColMax(a, arg), out)
    }

    pub fn conv1d_same(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> NodeId {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias).scalar_value());
        assert_eq!(x.cols(), k.cols(), "conv1d channel mismatch");
        let (len, width) = (x.rows() as isize, k.rows() as isize);
        let pad = (width - 1) / 2;
        let mut out = Mat::zeros(x.rows(), 1);
        for t in 0..len {
            let mut acc = b;
            for j in 0..width {
                let src = t + j - pad;
                if src < 0 || src >= len {
                    continue;
                }
                acc += k.row(j as usize).iter().zip(x.row(src as usize)).map(|(a, b)| a * b).sum::<f64>();
            }
            out.set(t as usize, 0, acc);
        }
        self.push(Op::Conv1d(input, kernel, bias), out)
    }

    /// Chamfer distance between two `N × D` point sets (mean squared nearest-neighbour distance, both ways).
    pub fn chamfer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (fwd, nn_ab) = nearest_sq(va, vb);
        let (bwd, nn_ba) = nearest_sq(vb, va);
        let v = fwd.iter().sum::<f64>() / va.rows() as f64 + bwd.iter().sum::<f64>() / vb.rows() as f64;
        self.push(Op::Chamfer(a, b, nn_ab, nn_ba), Mat::scalar(v))
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_scalars(&mut self, items: &[NodeId]) -> NodeId {
        let stacked = self.vstack(items);
        let s = self.sum(stacked);
        self.scale(s, 1.0 / items.len() as f64)
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: NodeId, grads: &mut Grads) {
        self.backward_scaled(loss, 1.0, grads);
    }

    pub fn backward_scaled(&self, loss: NodeId, seed: f64, grads: &mut Grads) {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Mat::scalar(seed));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(p) => grads.get_mut(*p).add_assign(&g),
                Op::Const => {}
                Op::Row(p, r) => {
                    let target = grads.get_mut(*p).row_mut(*r);
                    for (t, v) in target.iter_mut().zip(g.data()) {
                        *t += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    let vb = self.value(*b);
                    if vb.shape() == g.shape() {
                        acc(&mut adj, *b, g.clone());
                    } else {
                        let mut gb = Mat::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        acc(&mut adj, *b, gb);
                    }
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MulConst(a, m) => acc(&mut adj, *a, g.zip_map(m, |x, y| x * y)),
                Op::Scale(a, s) => acc(&mut adj, *a, g.map(|x| x * s)),
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    acc(&mut adj, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    acc(&mut adj, *a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Max2(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    for k in 0..va.len() {
                        if va.data()[k] >= vb.data()[k] {
                            gb.data_mut()[k] = 0.0;
                        } else {
                            ga.data_mut()[k] = 0.0;
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::VStack(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let (h, w) = self.value(p).shape();
                        let gp = Mat::from_vec(h, w, g.data()[row * w..(row + h) * w].to_vec());
                        row += h;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, g.reshaped(r, c));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yi * (gi - dot);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gi - yi.exp() * total;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut ga = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < NORM_EPS {
                            // Below the clamp the op is a plain scaling by 1/eps.
                            for (o, gi) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o = gi / NORM_EPS;
                            }
                            continue;
                        }
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gi - yi * dot) / norm;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, Mat::filled(r, c, g.scalar_value()));
                }
                Op::ColMax(a, arg) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for (col, &row) in arg.iter().enumerate() {
                        ga.set(row, col, g.get(0, col));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Conv1d(input, kernel, bias) => {
                    let x = self.value(*input);
                    let k = self.value(*kernel);
                    let (len, width) = (x.rows() as isize, k.rows() as isize);
                    let pad = (width - 1) / 2;
                    let mut gx = Mat::zeros(x.rows(), x.cols());
                    let mut gk = Mat::zeros(k.rows(), k.cols());
                    let mut gb = 0.0;
                    for t in 0..len {
                        let go = g.get(t as usize, 0);
                        gb += go;
                        for j in 0..width {
                            let src = t + j - pad;
                            if src < 0 || src >= len {
                                continue;
                            }
                            let (src, j) = (src as usize, j as usize);
                            for c in 0..x.cols() {
                                gk.row_mut(j)[c] += go * x.get(src, c);
                                gx.row_mut(src)[c] += go * k.get(j, c);
                            }
                        }
                    }
                    acc(&mut adj, *input, gx);
                    acc(&mut adj, *kernel, gk);
                    acc(&mut adj, *bias, Mat::scalar(gb));
                }
                Op::Chamfer(a, b, nn_ab, nn_ba) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let s = g.scalar_value();
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    let mut gb = Mat::zeros(vb.rows(), vb.cols());
                    let fa = 2.0 * s / va.rows() as f64;
                    for (p, &q) in nn_ab.iter().enumerate() {
                        for c in 0..va.cols() {
                            let d = va.get(p, c) - vb.get(q, c);
                            ga.row_mut(p)[c] += fa * d;
                            gb.row_mut(q)[c] -= fa * d;
                        }
                    }
                    let fb = 2.0 * s / vb.rows() as f64;
                    for (q, &p) in nn_ba.iter().enumerate() {
                        for c in 0..va.cols() {
                            let d = vb.get(q, c) - va.get(p, c);
                            gb.row_mut(q)[c] += fb * d;
                            ga.row_mut(p)[c] -= fb * d;
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// For every row of `from`, the squared distance to and index of its nearest row in `to`.
/// Ties resolve to the lowest index.
pub(crate) fn nearest_sq(from: &Mat, to: &Mat) -> (Vec<f64>, Vec<usize>) {
    crate::par::map_range(from.rows(), |p| {
        let x = from.row(p);
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        for q in 0..to.rows() {
            let d: f64 = x.iter().zip(to.row(q)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best {
                best = d;
                best_i = q;
            }
        }
        (best, best_i)
    })
    .into_iter()
    .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        crate::nn::uniform(rng, r, c, 1.0)
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let a = ps.add("a", random(&mut rng, 3, 4));
        let b = ps.add("b", random(&mut rng, 4, 2));
        let bias = ps.add("bias", random(&mut rng, 1, 2));
        let emb = ps.add("emb", random(&mut rng, 5, 4));
        let kern = ps.add("kern", random(&mut rng, 3, 2));
        let kb = ps.add("kb", random(&mut rng, 1, 1));
        let cloud = ps.add("cloud", random(&mut rng, 5, 3));
        let target = random(&mut rng, 4, 3);
        let mask = random(&mut rng, 3, 4);

        let loss = |ps: &ParamSet, grads: Option<&mut Grads>| {
            let mut g = Graph::new(ps);
            let (na, nb, nbias) = (g.param(a), g.param(b), g.param(bias));
            let h = g.matmul(na, nb);
            let h = g.add(h, nbias);
            let t = g.tanh(h);
            let s = g.sigmoid(h);
            let m = g.mul(t, s);
            let r = g.relu(m);
            let mx = g.max2(t, s);
            let cat = g.concat_cols(&[r, mx]);
            let st = g.vstack(&[cat, cat]);
            let sl = g.slice_cols(st, 1, 3);
            let tr = g.transpose(sl);
            let rs = g.reshape(tr, 2, 9);
            let sm = g.softmax_rows(rs);
            let lsm = g.log_softmax_rows(rs);
            let nrm = g.l2_normalize_rows(rs);
            let e = g.row(emb, 3);
            let e2 = g.row(emb, 1);
            let ee = g.sub(e, e2);
            let ee = g.scale(ee, 0.7);
            let masked = g.mul_const(na, mask.clone());
            let cm = g.col_max(masked);
            let conv_in = g.transpose(nb);
            let conv_in = g.transpose(conv_in);
            let (nk, nkb) = (g.param(kern), g.param(kb));
            let conv = g.conv1d_same(conv_in, nk, nkb);
            let nc = g.param(cloud);
            let tgt = g.constant(target.clone());
            let ch = g.chamfer(nc, tgt);
            let parts: Vec<NodeId> = [sm, lsm, nrm, ee, cm, conv]
                .into_iter()
                .map(|n| {
                    let sq = g.mul(n, n);
                    g.sum(sq)
                })
                .collect();
            let mut all = parts;
            all.push(ch);
            let total = g.mean_scalars(&all);
            let v = g.value(total).scalar_value();
            if let Some(gr) = grads {
                g.backward(total, gr);
            }
            v
        };
        let report = check_gradients(&ps, 1e-6, loss);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
