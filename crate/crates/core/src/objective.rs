//! Cross-entropy, the cluster-weighted contrastive loss, and their mixture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchForward, BatchLatents};
use crate::numerics::{Graph, Tensor, Var};
use crate::text::{EncodedSeq, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Wcl,
    Vanilla,
    Excluding,
    CeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub variant: Variant,
    /// Average the image→report and report→image directions.
    pub bidirectional: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            alpha: 2.0,
            tau: 1.0,
            variant: Variant::Wcl,
            bidirectional: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// α after the variant's override.
    pub fn effective_alpha(&self) -> f64 {
        match self.variant {
            Variant::Vanilla => 1.0,
            Variant::Excluding => 0.0,
            Variant::Wcl | Variant::CeOnly => self.alpha,
        }
    }

    /// λ after the variant's override.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::CeOnly => 0.0,
            _ => self.lambda,
        }
    }

    pub fn needs_latents(&self) -> bool {
        self.effective_lambda() > 0.0
    }
}

/// Row-major `n×n` denominator weights: 1 on the diagonal and for
/// different-cluster negatives, α for same-cluster negatives.
pub fn contrastive_weights(labels: &[usize], alpha: f64) -> Vec<f64> {
    let n = labels.len();
    let mut w = vec![1.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                w[i * n + j] = alpha;
            }
        }
    }
    w
}

/// Contrastive loss on a similarity node; `labels` must cover every batch member.
pub fn wcl_graph(g: &mut Graph, sims: Var, labels: Option<&[usize]>, alpha: f64, bidirectional: bool) -> Result<Var> {
    let labels = labels.ok_or_else(|| Error::contract("contrastive loss needs a cluster label for every sample"))?;
    let n = g.value(sims).rows();
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for a batch of {n}", labels.len())));
    }
    let w = contrastive_weights(labels, alpha);
    let forward = g.weighted_contrastive(sims, w.clone())?;
    if !bidirectional {
        return Ok(forward);
    }
    let t = g.transpose(sims)?;
    let backward = g.weighted_contrastive(t, w)?;
    let sum = g.add(forward, backward)?;
    Ok(g.scale(sum, 0.5))
}

pub fn wcl_loss(bl: &BatchLatents, alpha: f64) -> Result<f64> {
    wcl_loss_dir(bl, alpha, false)
}

pub fn wcl_loss_dir(bl: &BatchLatents, alpha: f64, bidirectional: bool) -> Result<f64> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::contract(format!("alpha must be nonnegative, got {alpha}")));
    }
    let mut g = Graph::new();
    let s = g.constant(bl.sims.clone());
    let l = wcl_graph(&mut g, s, bl.labels.as_deref(), alpha, bidirectional)?;
    Ok(g.scalar(l))
}

/// `(1−λ)·ce + λ·wcl`.
pub fn mixture_loss(ce: f64, wcl: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda must be in [0, 1], got {lambda}")));
    }
    Ok((1.0 - lambda) * ce + lambda * wcl)
}

pub fn variant_loss(bl: &BatchLatents, cfg: &LossConfig) -> Result<f64> {
    if cfg.variant == Variant::CeOnly {
        return Ok(0.0);
    }
    wcl_loss_dir(bl, cfg.effective_alpha(), cfg.bidirectional)
}

/// Token-mean cross entropy. `logits[i]` scores positions `0..max_len-1` of
/// sample `i` (predicting `ids[1..]`); PAD targets are skipped.
pub fn ce_loss(logits: &[Tensor], targets: &[EncodedSeq]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::contract(format!(
            "{} logit blocks for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut g = Graph::new();
    let mut rows = Vec::new();
    let mut gold = Vec::new();
    for (l, t) in logits.iter().zip(targets) {
        if l.shape().len() != 2 || l.rows() + 1 != t.ids.len() {
            return Err(Error::Dimension {
                op: "ce_loss",
                left: l.shape().to_vec(),
                right: vec![t.ids.len() - 1],
            });
        }
        rows.push(g.constant(l.clone()));
        gold.extend_from_slice(&t.ids[1..]);
    }
    let stacked = g.stack_rows(&rows)?;
    let ce = g.cross_entropy(stacked, &gold, Some(PAD))?;
    Ok(g.scalar(ce))
}

/// Loss nodes of one training batch.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub ce: Var,
    pub wcl: Option<Var>,
}

/// Mixture objective on a teacher-forced batch.
pub fn batch_objective(g: &mut Graph, fwd: &BatchForward, labels: Option<&[usize]>, cfg: &LossConfig) -> Result<LossNodes> {
    let lambda = cfg.effective_lambda();
    if lambda == 0.0 {
        return Ok(LossNodes {
            total: fwd.ce,
            ce: fwd.ce,
            wcl: None,
        });
    }
    let (zx, zy) = fwd
        .z_x
        .zip(fwd.z_y)
        .ok_or_else(|| Error::contract("contrastive objective needs projected latents"))?;
    let sims = g.cosine_similarity(zx, zy, cfg.tau)?;
    let wcl = wcl_graph(g, sims, labels, cfg.effective_alpha(), cfg.bidirectional)?;
    let a = g.scale(fwd.ce, 1.0 - lambda);
    let b = g.scale(wcl, lambda);
    let total = g.add(a, b)?;
    Ok(LossNodes {
        total,
        ce: fwd.ce,
        wcl: Some(wcl),
    })
}
