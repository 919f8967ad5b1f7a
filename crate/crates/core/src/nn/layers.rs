use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{xavier, Graph, Mat, NodeId, ParamId, ParamSet};

/// Affine map `x · W + b` over row vectors.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = params.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = params.add(format!("{name}.b"), Mat::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let h = g.matmul(x, w);
        g.add(h, b)
    }

    pub fn fan_out(&self, params: &ParamSet) -> usize {
        params.get(self.w).cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Single-layer LSTM cell with fused gate weights laid out as `[input | forget | output | cell]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = params.add(format!("{name}.w"), xavier(rng, input + hidden, 4 * hidden));
        let mut bias = Mat::zeros(1, 4 * hidden);
        for k in hidden..2 * hidden {
            bias.data_mut()[k] = 1.0;
        }
        let b = params.add(format!("{name}.b"), bias);
        Self { w, b, input, hidden }
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        let h = g.constant(Mat::zeros(1, self.hidden));
        let c = g.constant(Mat::zeros(1, self.hidden));
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, x: NodeId, state: LstmState) -> LstmState {
        let hd = self.hidden;
        let xh = g.concat_cols(&[x, state.h]);
        let (w, b) = (g.param(self.w), g.param(self.b));
        let z = g.matmul(xh, w);
        let z = g.add(z, b);
        let i = g.slice_cols(z, 0, hd);
        let f = g.slice_cols(z, hd, hd);
        let o = g.slice_cols(z, 2 * hd, hd);
        let u = g.slice_cols(z, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let u = g.tanh(u);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, u);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }
}

/// Inverted-dropout mask: entries are `0` or `1 / keep`. A keep probability of 1 yields all ones.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, keep: f64) -> Mat {
    if keep >= 1.0 {
        return Mat::filled(1, len, 1.0);
    }
    let data = (0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    Mat::row_vector(data)
}
