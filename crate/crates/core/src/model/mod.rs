//! Encoder-decoder transformer with pooling and projection heads.

mod infer;

pub use infer::{DecodeState, Memory};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttnSegment, AttnSpec, Checkpoint, Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::text::{EncodedSeq, Vocabulary};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_proj: usize,
    /// 0 means 4·d_model.
    pub d_ff: usize,
    /// 0 means "take from the vocabulary".
    pub vocab_size: usize,
    pub max_len: usize,
    /// 0 means "take from the dataset".
    pub feature_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            layers: 3,
            d_proj: 256,
            d_ff: 0,
            vocab_size: 0,
            max_len: 100,
            feature_dim: 0,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn ff_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_proj", self.d_proj),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model {name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::config(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

/// Two-layer perceptron with ReLU: used for feed-forward blocks and projection heads.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    in_w: usize,
    in_b: usize,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    embed: usize,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out_w: usize,
    out_b: usize,
    head_x: Mlp,
    head_y: Mlp,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize, group: ParamGroup) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = Tensor::new(shape, data).expect("finite init");
        self.store.add(name, t, group)
    }

    fn constant(&mut self, name: String, n: usize, v: f64) -> usize {
        let t = Tensor::new(vec![n], vec![v; n]).expect("finite init");
        self.store.add(name, t, ParamGroup::Other)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.constant(format!("{prefix}.g"), d, 1.0),
            b: self.constant(format!("{prefix}.b"), d, 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let mut w = |n: &str| self.uniform(format!("{prefix}.{n}"), vec![d, d], d, ParamGroup::Other);
        Attn {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Mlp {
        let g = ParamGroup::Other;
        Mlp {
            w1: self.uniform(format!("{prefix}.w1"), vec![d_in, d_hidden], d_in, g),
            b1: self.uniform(format!("{prefix}.b1"), vec![d_hidden], d_in, g),
            w2: self.uniform(format!("{prefix}.w2"), vec![d_hidden, d_out], d_hidden, g),
            b2: self.uniform(format!("{prefix}.b2"), vec![d_out], d_hidden, g),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Sinusoidal position table, `len × d`.
pub fn positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64 * 2.0 / d as f64;
            let angle = pos as f64 / 10000f64.powf(k);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Parameters placed on a graph on first use.
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    pub fn new(model: &Model, trainable: bool) -> Self {
        Self {
            vars: vec![None; model.params.len()],
            trainable,
        }
    }

    /// Use already-placed variables, one per parameter in store order.
    pub fn with_vars(vars: &[Var]) -> Self {
        Self {
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        }
    }

    fn get(&mut self, g: &mut Graph, model: &Model, i: usize) -> Var {
        *self.vars[i].get_or_insert_with(|| {
            let t = model.params.get(i).value.clone();
            if self.trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
    }

    /// Graph variable for parameter `i`, if the forward pass touched it.
    pub fn var(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }
}

/// Dropout masks for one forward pass; `None` disables dropout.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout(g: &mut Graph, x: Var, drop: &mut Option<Dropout>) -> Result<Var> {
    let Some(d) = drop.as_mut().filter(|d| d.rate > 0.0) else {
        return Ok(x);
    };
    let keep = 1.0 - d.rate;
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    g.mul_const(x, mask)
}

/// Graph outputs of one teacher-forced batch.
pub struct BatchForward {
    pub logits: Var,
    /// Token-mean cross entropy over every real target position in the batch.
    pub ce: Var,
    /// `N × d_proj`, present when latents were requested.
    pub z_x: Option<Var>,
    pub z_y: Option<Var>,
    /// Decoder input length per sample.
    pub dec_lens: Vec<usize>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (d, f, v, ff) = (cfg.d_model, cfg.feature_dim, cfg.vocab_size, cfg.ff_width());
        let in_w = b.uniform("enc.in.w".into(), vec![f, d], f, ParamGroup::Visual);
        let in_b = b.uniform("enc.in.b".into(), vec![d], f, ParamGroup::Visual);
        let enc = (0..cfg.layers)
            .map(|l| EncLayer {
                ln1: b.norm(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.norm(&format!("enc.{l}.ln2"), d),
                ff: b.mlp(&format!("enc.{l}.ff"), d, ff, d),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let embed = b.uniform("dec.embed".into(), vec![v, d], 1, ParamGroup::Other);
        let dec = (0..cfg.layers)
            .map(|l| DecLayer {
                ln1: b.norm(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln2: b.norm(&format!("dec.{l}.ln2"), d),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln3: b.norm(&format!("dec.{l}.ln3"), d),
                ff: b.mlp(&format!("dec.{l}.ff"), d, ff, d),
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let out_w = b.uniform("dec.out.w".into(), vec![d, v], d, ParamGroup::Other);
        let out_b = b.uniform("dec.out.b".into(), vec![v], d, ParamGroup::Other);
        let head_x = b.mlp("head_x", d, d, cfg.d_proj);
        let head_y = b.mlp("head_y", d, d, cfg.d_proj);
        let params = b.store;
        Ok(Self {
            cfg,
            params,
            layout: Layout {
                in_w,
                in_b,
                enc,
                enc_ln,
                embed,
                dec,
                dec_ln,
                out_w,
                out_b,
                head_x,
                head_y,
            },
        })
    }

    fn norm(&self, g: &mut Graph, b: &mut Binder, x: Var, n: Norm) -> Result<Var> {
        let gain = b.get(g, self, n.g);
        let bias = b.get(g, self, n.b);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn mlp(&self, g: &mut Graph, b: &mut Binder, x: Var, m: Mlp) -> Result<Var> {
        let (w1, b1, w2, b2) = (b.get(g, self, m.w1), b.get(g, self, m.b1), b.get(g, self, m.w2), b.get(g, self, m.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    fn attend(&self, g: &mut Graph, b: &mut Binder, x: Var, src: Var, a: Attn, spec: AttnSpec) -> Result<Var> {
        let (wq, wk, wv, wo) = (b.get(g, self, a.wq), b.get(g, self, a.wk), b.get(g, self, a.wv), b.get(g, self, a.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(src, wk)?;
        let v = g.matmul(src, wv)?;
        let h = g.attention(q, k, v, spec)?;
        g.matmul(h, wo)
    }

    fn check_features(&self, f: &Tensor) -> Result<()> {
        if f.shape().len() != 2 || f.cols() != self.cfg.feature_dim || f.rows() == 0 {
            return Err(Error::contract(format!(
                "patch features {:?} do not match feature_dim {}",
                f.shape(),
                self.cfg.feature_dim
            )));
        }
        Ok(())
    }

    /// Encode stacked patch sets. Returns `ΣP × d_model` and per-sample row counts.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        features: &[&Tensor],
        drop: &mut Option<Dropout>,
    ) -> Result<(Var, Vec<usize>)> {
        let d = self.cfg.d_model;
        let mut data = Vec::new();
        let mut pos = Vec::new();
        let mut counts = Vec::with_capacity(features.len());
        for f in features {
            self.check_features(f)?;
            data.extend_from_slice(f.data());
            pos.extend(positions(f.rows(), d));
            counts.push(f.rows());
        }
        let rows: usize = counts.iter().sum();
        let x = g.constant(Tensor::matrix(rows, self.cfg.feature_dim, data)?);
        let (w, bias) = (b.get(g, self, self.layout.in_w), b.get(g, self, self.layout.in_b));
        let h = g.matmul(x, w)?;
        let h = g.add_row(h, bias)?;
        let p = g.constant(Tensor::matrix(rows, d, pos)?);
        let mut h = g.add(h, p)?;
        h = apply_dropout(g, h, drop)?;
        let spec = AttnSpec {
            heads: self.cfg.heads,
            causal: false,
            segments: segments(&counts, &counts),
        };
        for layer in &self.layout.enc {
            let n = self.norm(g, b, h, layer.ln1)?;
            let a = self.attend(g, b, n, n, layer.attn, spec.clone())?;
            let a = apply_dropout(g, a, drop)?;
            h = g.add(h, a)?;
            let n = self.norm(g, b, h, layer.ln2)?;
            let f = self.mlp(g, b, n, layer.ff)?;
            let f = apply_dropout(g, f, drop)?;
            h = g.add(h, f)?;
        }
        Ok((self.norm(g, b, h, self.layout.enc_ln)?, counts))
    }

    /// Decoder hidden states (after the final norm) for stacked input sequences.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        memory: Var,
        mem_counts: &[usize],
        inputs: &[&[usize]],
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        if let Some(&l) = lens.iter().find(|&&l| l == 0 || l > self.cfg.max_len) {
            return Err(Error::contract(format!(
                "decoder prefix length {l} outside 1..={}",
                self.cfg.max_len
            )));
        }
        let ids: Vec<usize> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let table = b.get(g, self, self.layout.embed);
        let e = g.embedding(table, &ids)?;
        let pos: Vec<f64> = lens.iter().flat_map(|&l| positions(l, d)).collect();
        let p = g.constant(Tensor::matrix(ids.len(), d, pos)?);
        let mut h = g.add(e, p)?;
        h = apply_dropout(g, h, drop)?;
        let self_spec = AttnSpec {
            heads: self.cfg.heads,
            causal: true,
            segments: segments(&lens, &lens),
        };
        let cross_spec = AttnSpec {
            heads: self.cfg.heads,
            causal: false,
            segments: segments(&lens, mem_counts),
        };
        for layer in &self.layout.dec {
            let n = self.norm(g, b, h, layer.ln1)?;
            let a = self.attend(g, b, n, n, layer.self_attn, self_spec.clone())?;
            let a = apply_dropout(g, a, drop)?;
            h = g.add(h, a)?;
            let n = self.norm(g, b, h, layer.ln2)?;
            let a = self.attend(g, b, n, memory, layer.cross, cross_spec.clone())?;
            let a = apply_dropout(g, a, drop)?;
            h = g.add(h, a)?;
            let n = self.norm(g, b, h, layer.ln3)?;
            let f = self.mlp(g, b, n, layer.ff)?;
            let f = apply_dropout(g, f, drop)?;
            h = g.add(h, f)?;
        }
        self.norm(g, b, h, self.layout.dec_ln)
    }

    pub fn logits_graph(&self, g: &mut Graph, b: &mut Binder, hidden: Var) -> Result<Var> {
        let (w, bias) = (b.get(g, self, self.layout.out_w), b.get(g, self, self.layout.out_b));
        let l = g.matmul(hidden, w)?;
        g.add_row(l, bias)
    }

    /// Masked-mean pool each sample's rows of `h`, then apply φ_x or φ_y. Returns `N × d_proj`.
    pub fn pool_and_project(&self, g: &mut Graph, b: &mut Binder, h: Var, masks: &[Vec<bool>], head: Head) -> Result<Var> {
        let mut pooled = Vec::with_capacity(masks.len());
        let mut start = 0;
        for m in masks {
            let rows = g.slice_rows(h, start, m.len())?;
            pooled.push(g.masked_mean_pool(rows, m)?);
            start += m.len();
        }
        let stacked = g.stack_rows(&pooled)?;
        let mlp = match head {
            Head::X => self.layout.head_x,
            Head::Y => self.layout.head_y,
        };
        self.mlp(g, b, stacked, mlp)
    }

    /// Teacher-forced pass: decoder input is `ids[..length-1]`, targets `ids[1..length]`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        features: &[&Tensor],
        targets: &[EncodedSeq],
        latents: bool,
        drop: &mut Option<Dropout>,
    ) -> Result<BatchForward> {
        if features.len() != targets.len() || features.is_empty() {
            return Err(Error::contract(format!(
                "{} feature sets but {} targets",
                features.len(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| t.length < 2) {
            return Err(Error::contract(format!("target of length {} has no next-token position", t.length)));
        }
        let (memory, counts) = self.encode_graph(g, b, features, drop)?;
        let inputs: Vec<&[usize]> = targets.iter().map(|t| &t.ids[..t.length - 1]).collect();
        let gold: Vec<usize> = targets.iter().flat_map(|t| t.ids[1..t.length].iter().copied()).collect();
        let hidden = self.decode_graph(g, b, memory, &counts, &inputs, drop)?;
        let logits = self.logits_graph(g, b, hidden)?;
        let ce = g.cross_entropy(logits, &gold, None)?;
        let dec_lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let (z_x, z_y) = if latents {
            let mx: Vec<Vec<bool>> = counts.iter().map(|&c| vec![true; c]).collect();
            let my: Vec<Vec<bool>> = dec_lens.iter().map(|&c| vec![true; c]).collect();
            (
                Some(self.pool_and_project(g, b, memory, &mx, Head::X)?),
                Some(self.pool_and_project(g, b, hidden, &my, Head::Y)?),
            )
        } else {
            (None, None)
        };
        Ok(BatchForward {
            logits,
            ce,
            z_x,
            z_y,
            dec_lens,
        })
    }

    /// Encoder output for one patch set, `P × d_model`.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(self, false);
        let (h, _) = self.encode_graph(&mut g, &mut b, &[features], &mut None)?;
        Ok(g.value(h).clone())
    }

    /// Next-token logits after `prefix`, computed by a full (non-incremental) pass.
    pub fn decode_step(&self, h_x: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::contract("decoder prefix is empty"));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(self, false);
        let mem = g.constant(h_x.clone());
        let hidden = self.decode_graph(&mut g, &mut b, mem, &[h_x.rows()], &[prefix], &mut None)?;
        let logits = self.logits_graph(&mut g, &mut b, hidden)?;
        Ok(g.value(logits).row(prefix.len() - 1).to_vec())
    }

    /// Parameter indices of one optimizer group, in store order.
    pub fn group_indices(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params.get(i).group == group)
            .collect()
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary, extra: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            tensors: self.params.to_named(),
            meta: serde_json::json!({
                "model": serde_json::to_value(&self.cfg)?,
                "vocab": vocab.tokens(),
                "min_freq": vocab.min_freq(),
                "extra": extra,
            }),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, Vocabulary)> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| Error::contract(format!("checkpoint model config: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(ck.meta["vocab"].clone())
            .map_err(|e| Error::contract(format!("checkpoint vocabulary: {e}")))?;
        let min_freq = ck.meta["min_freq"].as_u64().unwrap_or(1) as usize;
        let vocab = Vocabulary::from_tokens(tokens, min_freq)?;
        if vocab.len() != cfg.vocab_size {
            return Err(Error::contract(format!(
                "checkpoint vocabulary has {} entries, model expects {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let mut m = Self::new(cfg, 0)?;
        m.params.load_named(ck.tensors)?;
        Ok((m, vocab))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    X,
    Y,
}

fn segments(q_lens: &[usize], k_lens: &[usize]) -> Vec<AttnSegment> {
    let (mut qs, mut ks) = (0, 0);
    q_lens
        .iter()
        .zip(k_lens)
        .map(|(&q, &k)| {
            let s = AttnSegment {
                q_start: qs,
                q_len: q,
                k_start: ks,
                k_len: k,
                q_offset: 0,
            };
            qs += q;
            ks += k;
            s
        })
        .collect()
}

/// Value-level contrastive inputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLatents {
    pub z_x: Tensor,
    pub z_y: Tensor,
    /// `N × N`, `cos(z_x[i], z_y[j]) / tau`.
    pub sims: Tensor,
    pub labels: Option<Vec<usize>>,
    pub tau: f64,
}

/// Cosine similarities over temperature.
pub fn similarity_matrix(z_x: &Tensor, z_y: &Tensor, tau: f64, labels: Option<Vec<usize>>) -> Result<BatchLatents> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    if z_x.shape().len() != 2 || z_x.shape() != z_y.shape() {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            left: z_x.shape().to_vec(),
            right: z_y.shape().to_vec(),
        });
    }
    let n = z_x.rows();
    if let Some(l) = &labels {
        if l.len() != n {
            return Err(Error::contract(format!("{} labels for a batch of {n}", l.len())));
        }
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nx: Vec<f64> = (0..n).map(|i| norm(z_x.row(i))).collect();
    let ny: Vec<f64> = (0..n).map(|i| norm(z_y.row(i))).collect();
    for (side, ns) in [("z_x", &nx), ("z_y", &ny)] {
        if let Some(i) = ns.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateVector(format!("{side} row {i} has zero norm")));
        }
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d: f64 = z_x.row(i).iter().zip(z_y.row(j)).map(|(a, b)| a * b).sum();
            s[i * n + j] = d / (nx[i] * ny[j] * tau);
        }
    }
    Ok(BatchLatents {
        z_x: z_x.clone(),
        z_y: z_y.clone(),
        sims: Tensor::matrix(n, n, s)?,
        labels,
        tau,
    })
}
