//! Training loop, validation-driven model selection and the λ×τ grid search.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{make_batches, Dataset, Split};
use crate::decoding::generate_texts;
use crate::error::{Error, Result};
use crate::io::{atomic_write, canonical_json_pretty, format_float};
use crate::metrics::nlg::bleu;
use crate::model::{Binder, Dropout, Model, ModelConfig};
use crate::numerics::{adam_step, AdamState, Checkpoint, Graph, ParamGroup, Tensor};
use crate::objective::{batch_objective, LossConfig};
use crate::text::{tokenize, Vocabulary};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_other: f64,
    /// 0 freezes the visual input projection.
    pub lr_visual: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub selection_metric: String,
    /// Vocabulary cutoff when no vocabulary file is supplied.
    pub min_freq: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            epochs: 30,
            batch_size: 16,
            lr_other: 1e-4,
            lr_visual: 5e-5,
            lr_decay: 0.8,
            seed: 0,
            selection_metric: "bleu4".into(),
            min_freq: 3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr_other > 0.0 && self.lr_other.is_finite()) {
            return Err(Error::config(format!("lr_other must be positive, got {}", self.lr_other)));
        }
        if !(self.lr_visual >= 0.0 && self.lr_visual.is_finite()) {
            return Err(Error::config(format!("lr_visual must be nonnegative, got {}", self.lr_visual)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.selection_metric != "bleu4" {
            return Err(Error::config(format!(
                "selection_metric must be \"bleu4\", got {:?}",
                self.selection_metric
            )));
        }
        if self.min_freq < 1 {
            return Err(Error::config("min_freq must be at least 1"));
        }
        let min_batch = if self.loss.needs_latents() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::config(format!(
                "batch_size must be at least {min_batch} for this loss, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Model config with vocabulary size and feature width filled in from the data.
    pub fn resolved_model(&self, vocab: &Vocabulary, dataset: &Dataset) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.feature_dim == 0 {
            m.feature_dim = dataset.feature_dim;
        } else if m.feature_dim != dataset.feature_dim {
            return Err(Error::config(format!(
                "model.feature_dim {} does not match dataset feature width {}",
                m.feature_dim, dataset.feature_dim
            )));
        }
        if m.vocab_size == 0 {
            m.vocab_size = vocab.len();
        } else if m.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "model.vocab_size {} does not match vocabulary of {}",
                m.vocab_size,
                vocab.len()
            )));
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub ce: f64,
    pub wcl: f64,
    pub mixed: f64,
    pub val_bleu4: f64,
    pub lr_other: f64,
    pub lr_visual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<String>,
}

impl TrainLog {
    /// Earliest epoch with the highest validation BLEU-4.
    pub fn select_best(epochs: &[EpochLog]) -> usize {
        let mut best = &epochs[0];
        for e in epochs {
            if e.val_bleu4 > best.val_bleu4 {
                best = e;
            }
        }
        best.epoch
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, canonical_json_pretty(self)?.as_bytes())
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Parameters of the best epoch.
    pub model: Model,
    pub checkpoint: Checkpoint,
}

/// Teacher-forced mixture loss of one batch and its components (ce, wcl, mixed).
pub fn batch_loss(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    targets: &[crate::text::EncodedSeq],
    labels: Option<&[usize]>,
    loss: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let mut b = Binder::new(model, false);
    let feats: Vec<&Tensor> = indices.iter().map(|&i| &dataset.records[i].features).collect();
    let fwd = model.forward_batch(&mut g, &mut b, &feats, targets, loss.needs_latents(), &mut None)?;
    let n = batch_objective(&mut g, &fwd, labels, loss)?;
    Ok((g.scalar(n.ce), n.wcl.map(|w| g.scalar(w)).unwrap_or(0.0), g.scalar(n.total)))
}

struct Optim {
    other_idx: Vec<usize>,
    visual_idx: Vec<usize>,
    other: AdamState,
    visual: Option<AdamState>,
}

impl Optim {
    fn new(model: &Model, cfg: &RunConfig) -> Result<Self> {
        let other_idx = model.group_indices(ParamGroup::Other);
        let visual_idx = model.group_indices(ParamGroup::Visual);
        let other = AdamState::new(model.params.group_size(ParamGroup::Other), cfg.lr_other)?;
        let visual = if cfg.lr_visual > 0.0 {
            Some(AdamState::new(model.params.group_size(ParamGroup::Visual), cfg.lr_visual)?)
        } else {
            None
        };
        Ok(Self {
            other_idx,
            visual_idx,
            other,
            visual,
        })
    }

    fn lrs(&self) -> (f64, f64) {
        (self.other.lr(), self.visual.as_ref().map(|v| v.lr()).unwrap_or(0.0))
    }

    fn decay(&mut self, factor: f64) -> Result<()> {
        self.other.decay_lr(factor)?;
        if let Some(v) = self.visual.as_mut() {
            v.decay_lr(factor)?;
        }
        Ok(())
    }
}

fn step_group(model: &mut Model, g: &Graph, b: &Binder, idx: &[usize], state: &mut AdamState) -> Result<()> {
    let zeros: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let touched = b.var(i).and_then(|v| g.grad(v)).is_some();
            if touched { Vec::new() } else { vec![0.0; model.params.get(i).value.len()] }
        })
        .collect();
    let grads: Vec<&[f64]> = idx
        .iter()
        .zip(&zeros)
        .map(|(&i, z)| b.var(i).and_then(|v| g.grad(v)).unwrap_or(z))
        .collect();
    let mut params: Vec<&mut Tensor> = model
        .params
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| idx.binary_search(i).is_ok())
        .map(|(_, p)| &mut p.value)
        .collect();
    adam_step(&mut params, &grads, state)
}

/// One optimizer step on a fixed batch; returns (ce, wcl, mixed) before the update.
pub fn train_step(
    model: &mut Model,
    optim_lrs: (f64, f64),
    dataset: &Dataset,
    indices: &[usize],
    targets: &[crate::text::EncodedSeq],
    labels: Option<&[usize]>,
    loss: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let cfg = RunConfig {
        lr_other: optim_lrs.0,
        lr_visual: optim_lrs.1,
        ..RunConfig::default()
    };
    let mut opt = Optim::new(model, &cfg)?;
    let mut g = Graph::new();
    let mut b = Binder::new(model, true);
    let feats: Vec<&Tensor> = indices.iter().map(|&i| &dataset.records[i].features).collect();
    let fwd = model.forward_batch(&mut g, &mut b, &feats, targets, loss.needs_latents(), &mut None)?;
    let n = batch_objective(&mut g, &fwd, labels, loss)?;
    let out = (g.scalar(n.ce), n.wcl.map(|w| g.scalar(w)).unwrap_or(0.0), g.scalar(n.total));
    g.backward(n.total)?;
    step_group(model, &g, &b, &opt.other_idx, &mut opt.other)?;
    if let Some(v) = opt.visual.as_mut() {
        step_group(model, &g, &b, &opt.visual_idx, v)?;
    }
    Ok(out)
}

/// Greedy-decode `split` and score corpus BLEU-4 against its references.
pub fn split_bleu4(model: &Model, vocab: &Vocabulary, dataset: &Dataset, split: Split) -> Result<f64> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Ok(0.0);
    }
    let feats: Vec<&Tensor> = idx.iter().map(|&i| &dataset.records[i].features).collect();
    let hyps: Vec<Vec<String>> = generate_texts(model, vocab, &feats, 1, model.cfg.max_len)?
        .iter()
        .map(|t| tokenize(t))
        .collect();
    let refs: Vec<Vec<String>> = idx.iter().map(|&i| dataset.records[i].tokens()).collect();
    bleu(&hyps, &refs, 4)
}

/// Train on the train split; select the epoch with the best validation BLEU-4.
///
/// With `out` set, the best checkpoint and the log are written there.
pub fn train(cfg: &RunConfig, dataset: &Dataset, vocab: &Vocabulary, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.split_indices(Split::Train).is_empty() {
        return Err(Error::config("dataset has no training reports"));
    }
    if dataset.split_indices(Split::Val).is_empty() {
        return Err(Error::config("dataset has no validation reports"));
    }
    let mcfg = cfg.resolved_model(vocab, dataset)?;
    let max_len = mcfg.max_len;
    let mut model = Model::new(mcfg, cfg.seed)?;
    let mut opt = Optim::new(&model, cfg)?;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(u64::MAX);
    let contrastive = cfg.loss.needs_latents();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let (lr_other, lr_visual) = opt.lrs();
        let batches = make_batches(dataset, Split::Train, cfg.batch_size, cfg.seed, epoch as u64, contrastive, vocab, max_len)?;
        let (mut ce_sum, mut wcl_sum, mut mixed_sum) = (0.0, 0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let mut b = Binder::new(&model, true);
            let feats: Vec<&Tensor> = batch.indices.iter().map(|&i| &dataset.records[i].features).collect();
            let mut drop = (model.cfg.dropout > 0.0).then(|| Dropout {
                rate: model.cfg.dropout,
                rng: &mut drop_rng,
            });
            let fwd = model.forward_batch(&mut g, &mut b, &feats, &batch.targets, contrastive, &mut drop)?;
            let n = batch_objective(&mut g, &fwd, batch.labels.as_deref(), &cfg.loss)?;
            let (ce, wcl, mixed) = (g.scalar(n.ce), n.wcl.map(|w| g.scalar(w)).unwrap_or(0.0), g.scalar(n.total));
            if !(ce.is_finite() && wcl.is_finite() && mixed.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: bi + 1,
                    ce,
                    wcl,
                    mixed,
                });
            }
            ce_sum += ce;
            wcl_sum += wcl;
            mixed_sum += mixed;
            g.backward(n.total)?;
            step_group(&mut model, &g, &b, &opt.other_idx, &mut opt.other)?;
            if let Some(v) = opt.visual.as_mut() {
                step_group(&mut model, &g, &b, &opt.visual_idx, v)?;
            }
        }
        let nb = batches.len() as f64;
        let val_bleu4 = split_bleu4(&model, vocab, dataset, Split::Val)?;
        log::info!(
            "epoch {}: ce {:.4} wcl {:.4} val bleu4 {:.4}",
            epoch + 1,
            ce_sum / nb,
            wcl_sum / nb,
            val_bleu4
        );
        if best.as_ref().is_none_or(|(s, _)| val_bleu4 > *s) {
            let extra = serde_json::json!({ "epoch": epoch + 1, "loss": serde_json::to_value(&cfg.loss)? });
            best = Some((val_bleu4, model.to_checkpoint(vocab, extra)?));
        }
        epochs.push(EpochLog {
            epoch: epoch + 1,
            ce: ce_sum / nb,
            wcl: wcl_sum / nb,
            mixed: mixed_sum / nb,
            val_bleu4,
            lr_other,
            lr_visual,
        });
        opt.decay(cfg.lr_decay)?;
    }
    let (_, checkpoint) = best.expect("at least one epoch");
    let best_epoch = TrainLog::select_best(&epochs);
    let mut log = TrainLog {
        epochs,
        best_epoch,
        best_checkpoint: None,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        log.best_checkpoint = Some(CHECKPOINT_FILE.into());
        log.save(&dir.join(LOG_FILE))?;
    }
    let (model, _) = Model::from_checkpoint(checkpoint.clone())?;
    Ok(TrainOutcome { log, model, checkpoint })
}

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_TAUS: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub tau: f64,
    pub val_bleu4: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Row-major over (λ, τ) in the given grid order.
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,tau,val_bleu4,best_epoch\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{}\n",
                format_float(c.lambda),
                format_float(c.tau),
                format_float(c.val_bleu4),
                c.best_epoch
            ));
        }
        s
    }
}

/// Highest BLEU-4; ties to the smaller λ, then the smaller τ.
pub fn select_cell(cells: &[GridCell]) -> usize {
    let mut best = 0;
    for (i, c) in cells.iter().enumerate().skip(1) {
        let b = &cells[best];
        let better = c.val_bleu4 > b.val_bleu4
            || (c.val_bleu4 == b.val_bleu4 && (c.lambda, c.tau).partial_cmp(&(b.lambda, b.tau)) == Some(std::cmp::Ordering::Less));
        if better {
            best = i;
        }
    }
    best
}

/// One run per (λ, τ) with seed `base.seed + cell_index`, at most `jobs` at a time.
pub fn grid_search(
    base: &RunConfig,
    lambdas: &[f64],
    taus: &[f64],
    dataset: &Dataset,
    vocab: &Vocabulary,
    jobs: usize,
    out: Option<&Path>,
) -> Result<GridResult> {
    if lambdas.is_empty() || taus.is_empty() {
        return Err(Error::config("grid search needs at least one lambda and one tau"));
    }
    let grid: Vec<(usize, f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| taus.iter().map(move |&t| (l, t)))
        .enumerate()
        .map(|(i, (l, t))| (i, l, t))
        .collect();
    let run = |&(i, lambda, tau): &(usize, f64, f64)| -> Result<GridCell> {
        let mut cfg = base.clone();
        cfg.loss.lambda = lambda;
        cfg.loss.tau = tau;
        cfg.seed = base.seed + i as u64;
        let dir: Option<PathBuf> = out.map(|o| o.join(format!("cell-{i:02}")));
        let outcome = train(&cfg, dataset, vocab, dir.as_deref())
            .map_err(|e| e.annotate(format!("grid cell {i} (lambda {lambda}, tau {tau})")))?;
        let best = outcome.log.best_epoch;
        Ok(GridCell {
            lambda,
            tau,
            val_bleu4: outcome.log.epochs[best - 1].val_bleu4,
            best_epoch: best,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let cells = pool.install(|| grid.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let result = GridResult {
        best: select_cell(&cells),
        cells,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        atomic_write(&dir.join("grid.csv"), result.to_csv().as_bytes())?;
    }
    Ok(result)
}
