//! Graph-free incremental decoding with cached keys and values.

use super::{positions, Attn, Mlp, Model, Norm, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::kernels::{axpy, dot, matmul_acc, softmax_in_place};
use crate::numerics::Tensor;

/// Cross-attention keys and values per decoder layer, precomputed from `H_X`.
#[derive(Debug, Clone)]
pub struct Memory {
    rows: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Self-attention cache of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; n];
    matmul_acc(x, w.data(), &mut out, 1, k, n);
    out
}

fn mat_mat(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; rows * n];
    matmul_acc(x, w.data(), &mut out, rows, k, n);
    out
}

impl Model {
    fn p(&self, i: usize) -> &Tensor {
        &self.params.get(i).value
    }

    fn norm_row(&self, x: &[f64], n: Norm) -> Vec<f64> {
        let (g, b) = (self.p(n.g).data(), self.p(n.b).data());
        let d = x.len();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        (0..d).map(|j| (x[j] - mean) * rs * g[j] + b[j]).collect()
    }

    fn mlp_row(&self, x: &[f64], m: Mlp) -> Vec<f64> {
        let mut h = vec_mat(x, self.p(m.w1));
        for (v, b) in h.iter_mut().zip(self.p(m.b1).data()) {
            *v = (*v + b).max(0.0);
        }
        let mut o = vec_mat(&h, self.p(m.w2));
        for (v, b) in o.iter_mut().zip(self.p(m.b2).data()) {
            *v += b;
        }
        o
    }

    fn attend_row(&self, q: &[f64], keys: &[f64], values: &[f64], rows: usize, a: Attn) -> Vec<f64> {
        let d = self.cfg.d_model;
        let h = self.cfg.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; d];
        let mut p = vec![0.0; rows];
        for head in 0..h {
            let c0 = head * dh;
            let qh = &q[c0..c0 + dh];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = dot(qh, &keys[j * d + c0..j * d + c0 + dh]) * scale;
            }
            softmax_in_place(&mut p);
            for (j, &pj) in p.iter().enumerate() {
                axpy(pj, &values[j * d + c0..j * d + c0 + dh], &mut out[c0..c0 + dh]);
            }
        }
        vec_mat(&out, self.p(a.wo))
    }

    pub fn memory(&self, h_x: &Tensor) -> Result<Memory> {
        if h_x.shape().len() != 2 || h_x.cols() != self.cfg.d_model {
            return Err(Error::contract(format!(
                "encoder output {:?} does not match d_model {}",
                h_x.shape(),
                self.cfg.d_model
            )));
        }
        let rows = h_x.rows();
        let (keys, values) = self
            .layout
            .dec
            .iter()
            .map(|l| (mat_mat(h_x.data(), rows, self.p(l.cross.wk)), mat_mat(h_x.data(), rows, self.p(l.cross.wv))))
            .unzip();
        Ok(Memory { rows, keys, values })
    }

    pub fn start_decode(&self) -> DecodeState {
        DecodeState {
            pos: 0,
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
        }
    }

    /// Feed one token; returns the logits for the next position.
    pub fn step(&self, mem: &Memory, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        if state.pos >= self.cfg.max_len {
            return Err(Error::contract(format!("decoder prefix exceeds max_len {}", self.cfg.max_len)));
        }
        if token >= self.cfg.vocab_size {
            return Err(Error::contract(format!("token id {token} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let pe = positions(state.pos + 1, d);
        let mut x: Vec<f64> = self.p(self.layout.embed).row(token).to_vec();
        for (v, p) in x.iter_mut().zip(&pe[state.pos * d..]) {
            *v += p;
        }
        let t = state.pos + 1;
        for (l, layer) in self.layout.dec.iter().enumerate() {
            let n = self.norm_row(&x, layer.ln1);
            let q = vec_mat(&n, self.p(layer.self_attn.wq));
            state.keys[l].extend(vec_mat(&n, self.p(layer.self_attn.wk)));
            state.values[l].extend(vec_mat(&n, self.p(layer.self_attn.wv)));
            let a = self.attend_row(&q, &state.keys[l], &state.values[l], t, layer.self_attn);
            axpy(1.0, &a, &mut x);
            let n = self.norm_row(&x, layer.ln2);
            let q = vec_mat(&n, self.p(layer.cross.wq));
            let a = self.attend_row(&q, &mem.keys[l], &mem.values[l], mem.rows, layer.cross);
            axpy(1.0, &a, &mut x);
            let n = self.norm_row(&x, layer.ln3);
            let f = self.mlp_row(&n, layer.ff);
            axpy(1.0, &f, &mut x);
        }
        state.pos = t;
        let h = self.norm_row(&x, self.layout.dec_ln);
        let mut logits = vec_mat(&h, self.p(self.layout.out_w));
        for (v, b) in logits.iter_mut().zip(self.p(self.layout.out_b).data()) {
            *v += b;
        }
        Ok(logits)
    }
}
