//! Pipeline stages over files, and the content-hashed artifact manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datakit::{generate_synthetic, load_dataset, Dataset, Split, SynthSpec};
use crate::decoding::generate_texts;
use crate::error::{Error, Result};
use crate::io::{atomic_write, canonical_json, canonical_json_pretty, ndjson_string, read_json, sha256_file, sha256_hex};
use crate::metrics::{evaluate, labeler_from_tag, pair_by_id, read_texts};
use crate::model::Model;
use crate::numerics::{Checkpoint, Tensor};
use crate::text::Vocabulary;
use crate::trainer::{grid_search, train, GridResult, RunConfig, CHECKPOINT_FILE};
use crate::weaklabel::{kmeans, load_embeddings, save_labels, tfidf_embed, EmbeddingMatrix};

pub const DATASET_FILE: &str = "dataset.ndjson";
pub const MANIFEST_VERSION: &str = "wclgen-manifest-1";

/// A file written by one stage and the settings (including input hashes) that produced it.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub name: &'static str,
    pub path: PathBuf,
    pub config: Value,
}

/// A directory argument names its `dataset.ndjson`.
pub fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

fn input_hash(p: &Path) -> Result<String> {
    sha256_file(p)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn load_spec(path: &Path) -> Result<SynthSpec> {
    read_json(path).map_err(|e| e.annotate(format!("synthetic spec {}", path.display())))
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = read_json(path).map_err(|e| e.annotate(format!("run config {}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(spec: &SynthSpec, out_dir: &Path) -> Result<StageOutput> {
    let (dataset, _) = generate_synthetic(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(DATASET_FILE);
    dataset.save(&path)?;
    Ok(StageOutput {
        name: "dataset",
        path,
        config: json!({ "spec": serde_json::to_value(spec)? }),
    })
}

/// Vocabulary over the training split.
pub fn vocab(data: &Path, min_freq: usize, out: &Path) -> Result<StageOutput> {
    if min_freq < 1 {
        return Err(Error::config("--min-freq must be at least 1"));
    }
    let data = dataset_path(data);
    let d = load_dataset(&data)?;
    let v = Vocabulary::build(&d.tokenized(Split::Train), min_freq)?;
    ensure_parent(out)?;
    v.save(out)?;
    Ok(StageOutput {
        name: "vocab",
        path: out.to_path_buf(),
        config: json!({ "min_freq": min_freq, "inputs": { "dataset": input_hash(&data)? } }),
    })
}

fn train_tfidf(d: &Dataset, v: &Vocabulary) -> Result<EmbeddingMatrix> {
    tfidf_embed(&d.tokenized(Split::Train), v)
}

/// TF-IDF embeddings of the training reports.
pub fn embed(data: &Path, vocab_path: &Path, out: &Path) -> Result<StageOutput> {
    let data = dataset_path(data);
    let d = load_dataset(&data)?;
    let v = Vocabulary::load(vocab_path)?;
    let emb = train_tfidf(&d, &v)?;
    ensure_parent(out)?;
    emb.save(&d.ids(Split::Train), out)?;
    Ok(StageOutput {
        name: "embeddings",
        path: out.to_path_buf(),
        config: json!({
            "provider": "tfidf",
            "inputs": { "dataset": input_hash(&data)?, "vocab": input_hash(vocab_path)? },
        }),
    })
}

pub enum EmbeddingSource<'a> {
    /// Computed on the fly from this vocabulary.
    Tfidf(&'a Path),
    File(&'a Path),
}

impl<'a> EmbeddingSource<'a> {
    /// `tfidf` or a path; `tfidf` needs a vocabulary.
    pub fn parse(tag: &'a str, vocab: Option<&'a Path>) -> Result<Self> {
        if tag == "tfidf" {
            vocab
                .map(EmbeddingSource::Tfidf)
                .ok_or_else(|| Error::config("--embeddings tfidf needs --vocab"))
        } else {
            Ok(EmbeddingSource::File(Path::new(tag)))
        }
    }
}

/// K-means over the training reports; writes `{"id", "label"}` lines.
pub fn cluster(data: &Path, source: EmbeddingSource, k: usize, seed: u64, max_iters: usize, out: &Path) -> Result<StageOutput> {
    if k == 0 {
        return Err(Error::config("--k must be at least 1 (1 <= k <= number of training reports)"));
    }
    if max_iters == 0 {
        return Err(Error::config("--max-iters must be at least 1"));
    }
    let data = dataset_path(data);
    let d = load_dataset(&data)?;
    let ids = d.ids(Split::Train);
    if k > ids.len() {
        return Err(Error::config(format!(
            "--k must not exceed the {} training reports, got {k}",
            ids.len()
        )));
    }
    let (emb, source_cfg) = match source {
        EmbeddingSource::Tfidf(vp) => (
            train_tfidf(&d, &Vocabulary::load(vp)?)?,
            json!({ "provider": "tfidf", "vocab": input_hash(vp)? }),
        ),
        EmbeddingSource::File(p) => (load_embeddings(p, &ids)?, json!({ "provider": "file", "embeddings": input_hash(p)? })),
    };
    let model = kmeans(&emb, k, seed, max_iters)?;
    log::info!(
        "k-means: k={k} iterations={} inertia={:.6}",
        model.iterations_run,
        model.inertia
    );
    ensure_parent(out)?;
    save_labels(&ids, &model.labels, out)?;
    Ok(StageOutput {
        name: "labels",
        path: out.to_path_buf(),
        config: json!({
            "k": k,
            "seed": seed,
            "max_iters": max_iters,
            "inputs": { "dataset": input_hash(&data)?, "source": source_cfg },
        }),
    })
}

fn training_inputs(cfg: &RunConfig, data: &Path, clusters: Option<&Path>, vocab_path: Option<&Path>) -> Result<(Dataset, Vocabulary, Value)> {
    let data = dataset_path(data);
    let mut d = load_dataset(&data)?;
    let mut inputs = serde_json::Map::new();
    inputs.insert("dataset".into(), input_hash(&data)?.into());
    match clusters {
        Some(p) => {
            d.attach_clusters(&crate::weaklabel::load_labels(p)?)?;
            inputs.insert("labels".into(), input_hash(p)?.into());
        }
        None if cfg.loss.needs_latents() => {
            return Err(Error::config("a contrastive loss needs --clusters"));
        }
        None => {}
    }
    let v = match vocab_path {
        Some(p) => {
            inputs.insert("vocab".into(), input_hash(p)?.into());
            Vocabulary::load(p)?
        }
        None => Vocabulary::build(&d.tokenized(Split::Train), cfg.min_freq)?,
    };
    Ok((d, v, Value::Object(inputs)))
}

/// Train one run; the artifact is the best-epoch checkpoint in `out_dir`.
pub fn train_stage(cfg: &RunConfig, data: &Path, clusters: Option<&Path>, vocab_path: Option<&Path>, out_dir: &Path) -> Result<StageOutput> {
    cfg.validate()?;
    let (d, v, inputs) = training_inputs(cfg, data, clusters, vocab_path)?;
    let outcome = train(cfg, &d, &v, Some(out_dir))?;
    log::info!("best epoch {}", outcome.log.best_epoch);
    Ok(StageOutput {
        name: "checkpoint",
        path: out_dir.join(CHECKPOINT_FILE),
        config: json!({ "run": serde_json::to_value(cfg)?, "inputs": inputs }),
    })
}

pub fn gridsearch_stage(
    cfg: &RunConfig,
    lambdas: &[f64],
    taus: &[f64],
    data: &Path,
    clusters: Option<&Path>,
    vocab_path: Option<&Path>,
    jobs: usize,
    out_dir: &Path,
) -> Result<(GridResult, StageOutput)> {
    cfg.validate()?;
    let (d, v, inputs) = training_inputs(cfg, data, clusters, vocab_path)?;
    let result = grid_search(cfg, lambdas, taus, &d, &v, jobs, Some(out_dir))?;
    let stage = StageOutput {
        name: "grid",
        path: out_dir.join("grid.csv"),
        config: json!({
            "run": serde_json::to_value(cfg)?,
            "lambdas": lambdas,
            "taus": taus,
            "inputs": inputs,
        }),
    };
    Ok((result, stage))
}

#[derive(Serialize)]
struct Generation<'a> {
    id: &'a str,
    text: &'a str,
}

/// Decode one split; writes `{"id", "text"}` lines in dataset order.
pub fn generate(checkpoint: &Path, data: &Path, split: Split, beam: usize, max_len: usize, out: &Path) -> Result<StageOutput> {
    if beam == 0 {
        return Err(Error::config("--beam must be at least 1"));
    }
    if max_len < 3 {
        return Err(Error::config(format!("--max-len must be at least 3, got {max_len}")));
    }
    let (model, v) = Model::from_checkpoint(Checkpoint::load(checkpoint)?)?;
    let data = dataset_path(data);
    let d = load_dataset(&data)?;
    if d.feature_dim != model.cfg.feature_dim {
        return Err(Error::config(format!(
            "dataset feature width {} does not match the checkpoint's {}",
            d.feature_dim, model.cfg.feature_dim
        )));
    }
    let idx = d.split_indices(split);
    let feats: Vec<&Tensor> = idx.iter().map(|&i| &d.records[i].features).collect();
    let texts = generate_texts(&model, &v, &feats, beam, max_len)?;
    let rows: Vec<Generation> = idx
        .iter()
        .zip(&texts)
        .map(|(&i, t)| Generation {
            id: &d.records[i].id,
            text: t,
        })
        .collect();
    ensure_parent(out)?;
    atomic_write(out, ndjson_string(&rows)?.as_bytes())?;
    Ok(StageOutput {
        name: "generations",
        path: out.to_path_buf(),
        config: json!({
            "split": split.to_string(),
            "beam": beam,
            "max_len": max_len,
            "inputs": { "checkpoint": input_hash(checkpoint)?, "dataset": input_hash(&data)? },
        }),
    })
}

/// Histogram CSV written beside an evaluation report.
pub fn histogram_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}_length_hist.csv"))
}

pub fn eval(generations: &Path, references: &Path, labeler: &str, out: &Path) -> Result<StageOutput> {
    let lab = labeler_from_tag(labeler)?;
    let references = dataset_path(references);
    let (hyps, refs) = pair_by_id(&read_texts(generations)?, &read_texts(&references)?)?;
    if hyps.is_empty() {
        return Err(Error::config(format!("{} holds no generations", generations.display())));
    }
    let report = evaluate(&hyps, &refs, lab.as_ref())?;
    ensure_parent(out)?;
    report.save(out)?;
    atomic_write(&histogram_path(out), report.histogram_csv().as_bytes())?;
    Ok(StageOutput {
        name: "eval",
        path: out.to_path_buf(),
        config: json!({
            "labeler": labeler,
            "inputs": { "generations": input_hash(generations)?, "references": input_hash(&references)? },
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub config_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION.into(),
            artifacts: BTreeMap::new(),
        }
    }
}

fn manifest_dir(path: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
    Ok(abs.parent().map(Path::to_path_buf).unwrap_or_default())
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::ingestion(path, format!("unknown manifest version {:?}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        atomic_write(path, canonical_json_pretty(self)?.as_bytes())
    }

    /// Hash `stage`'s file and record it relative to `manifest_path`.
    pub fn record(&mut self, manifest_path: &Path, stage: &StageOutput) -> Result<()> {
        let base = manifest_dir(manifest_path)?;
        let abs = std::path::absolute(&stage.path).map_err(|e| Error::io(&stage.path, e))?;
        let rel = pathdiff::diff_paths(&abs, &base).unwrap_or(abs.clone());
        let entry = ArtifactEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_file(&stage.path)?,
            config_sha256: sha256_hex(canonical_json(&stage.config)?.as_bytes()),
        };
        self.artifacts.insert(stage.name.to_string(), entry);
        Ok(())
    }
}

/// Add `stage` to the manifest at `path`, creating it if needed.
pub fn record_in(path: &Path, stage: &StageOutput) -> Result<()> {
    let mut m = if path.exists() { Manifest::load(path)? } else { Manifest::default() };
    m.record(path, stage)?;
    m.save(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Staleness {
    Missing,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaleArtifact {
    pub name: String,
    pub path: String,
    pub reason: Staleness,
}

/// Re-hash every listed artifact; an empty list means the manifest is current.
pub fn verify_manifest(path: &Path) -> Result<Vec<StaleArtifact>> {
    let m = Manifest::load(path)?;
    let base = manifest_dir(path)?;
    let mut stale = Vec::new();
    for (name, entry) in &m.artifacts {
        let file = base.join(&entry.path);
        let reason = if !file.is_file() {
            Some(Staleness::Missing)
        } else if sha256_file(&file)? != entry.sha256 {
            Some(Staleness::Modified)
        } else {
            None
        };
        if let Some(reason) = reason {
            stale.push(StaleArtifact {
                name: name.clone(),
                path: entry.path.clone(),
                reason,
            });
        }
    }
    Ok(stale)
}

/// Stage settings of a full pipeline run beyond the synthetic spec and run config.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub min_freq: usize,
    pub k: usize,
    pub cluster_seed: u64,
    pub max_iters: usize,
    pub beam: usize,
    pub max_len: usize,
    pub split: Split,
    pub labeler: String,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            min_freq: 3,
            k: 13,
            cluster_seed: 0,
            max_iters: 100,
            beam: 3,
            max_len: 100,
            split: Split::Test,
            labeler: "toy".into(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// synth → vocab → embed → cluster → train → generate → eval under `out_dir`,
/// then a manifest of the seven artifacts.
pub fn run_pipeline(spec: &SynthSpec, cfg: &RunConfig, opts: &PipelineOptions, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let data_dir = out_dir.join("data");
    let vocab_path = out_dir.join("vocab.json");
    let emb_path = out_dir.join("embeddings.ndjson");
    let labels_path = out_dir.join("labels.ndjson");
    let run_dir = out_dir.join("run");
    let gen_path = out_dir.join("generations.ndjson");
    let eval_path = out_dir.join("eval.json");

    let stages = [
        synth(spec, &data_dir)?,
        vocab(&data_dir, opts.min_freq, &vocab_path)?,
        embed(&data_dir, &vocab_path, &emb_path)?,
        cluster(&data_dir, EmbeddingSource::File(&emb_path), opts.k, opts.cluster_seed, opts.max_iters, &labels_path)?,
        train_stage(cfg, &data_dir, Some(&labels_path), Some(&vocab_path), &run_dir)?,
        generate(&run_dir.join(CHECKPOINT_FILE), &data_dir, opts.split, opts.beam, opts.max_len, &gen_path)?,
        eval(&gen_path, &data_dir, &opts.labeler, &eval_path)?,
    ];
    let mut m = Manifest::default();
    for s in &stages {
        m.record(&manifest_path, s)?;
    }
    m.save(&manifest_path)?;
    Ok(m)
}
