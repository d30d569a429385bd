//! Paired image-feature/report datasets, the synthetic generator, and batching.

mod synth;

pub use synth::{generate_synthetic, generate_with_templates, FindingTemplates, Latent, SynthSpec, SynthTemplates};

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, canonical_json, read_json, read_ndjson};
use crate::metrics::LabelVector;
use crate::numerics::Tensor;
use crate::text::{encode, tokenize, EncodedSeq, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub id: String,
    pub split: Split,
    pub report: String,
    /// patch_count × feature_dim.
    pub features: Tensor,
    pub gold_labels: Option<LabelVector>,
    pub cluster: Option<usize>,
}

impl ReportRecord {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ReportRecord>,
    pub feature_dim: usize,
    pub patch_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FeatureField {
    Inline(Vec<Vec<f64>>),
    Sidecar { path: String },
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    split: Split,
    report: String,
    features: FeatureField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_labels: Option<LabelVector>,
}

impl Dataset {
    /// Validate shapes, id uniqueness, and finiteness.
    pub fn new(records: Vec<ReportRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::contract("dataset has no records"))?;
        let (patch_count, feature_dim) = (first.features.rows(), first.features.cols());
        let mut seen = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.features.shape() != [patch_count, feature_dim] {
                return Err(Error::contract(format!(
                    "record {:?} has features {:?}, expected [{patch_count}, {feature_dim}]",
                    r.id,
                    r.features.shape()
                )));
            }
            if seen.insert(r.id.as_str(), i).is_some() {
                return Err(Error::contract(format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(Self {
            records,
            feature_dim,
            patch_count,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of one split, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.split_indices(split)
            .into_iter()
            .map(|i| self.records[i].id.clone())
            .collect()
    }

    pub fn tokenized(&self, split: Split) -> Vec<Vec<String>> {
        self.split_indices(split)
            .into_iter()
            .map(|i| self.records[i].tokens())
            .collect()
    }

    /// Attach weak cluster labels to every training record.
    pub fn attach_clusters(&mut self, labels: &HashMap<String, usize>) -> Result<()> {
        for r in &mut self.records {
            if r.split != Split::Train {
                r.cluster = None;
                continue;
            }
            r.cluster = Some(*labels.get(&r.id).ok_or_else(|| {
                Error::contract(format!("training record {:?} has no cluster label", r.id))
            })?);
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = RecordLine {
                id: r.id.clone(),
                split: r.split,
                report: r.report.clone(),
                features: FeatureField::Inline((0..r.features.rows()).map(|p| r.features.row(p).to_vec()).collect()),
                gold_labels: r.gold_labels,
            };
            out.push_str(&canonical_json(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_ndjson()?.as_bytes())
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> std::result::Result<Tensor, String> {
    if rows.is_empty() {
        return Err("features have no patches".into());
    }
    Tensor::from_rows(&rows).map_err(|e| e.to_string())
}

/// Read a dataset NDJSON file; sidecar feature paths resolve against its directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new(""));
    let lines = read_ndjson::<RecordLine>(path)?;
    if lines.is_empty() {
        return Err(Error::ingestion(path, "no records"));
    }
    let mut records = Vec::with_capacity(lines.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut shape: Option<(usize, [usize; 2])> = None;
    for (lineno, l) in lines {
        let fail = |msg: String| Error::ingestion(path, format!("line {lineno} (id {:?}): {msg}", l.id));
        if let Some(prev) = seen.get(&l.id) {
            return Err(fail(format!("duplicate id, first used on line {prev}")));
        }
        let rows = match &l.features {
            FeatureField::Inline(rows) => rows.clone(),
            FeatureField::Sidecar { path: p } => {
                read_json::<Vec<Vec<f64>>>(&base.join(p)).map_err(|e| fail(format!("sidecar {p}: {e}")))?
            }
        };
        let features = rows_to_tensor(rows).map_err(fail)?;
        let s = [features.rows(), features.cols()];
        match shape {
            None => shape = Some((lineno, s)),
            Some((first, want)) if want != s => {
                return Err(fail(format!(
                    "features are {}x{}, but line {first} set {}x{}",
                    s[0], s[1], want[0], want[1]
                )))
            }
            _ => {}
        }
        seen.insert(l.id.clone(), lineno);
        records.push(ReportRecord {
            id: l.id,
            split: l.split,
            report: l.report,
            features,
            gold_labels: l.gold_labels,
            cluster: None,
        });
    }
    Dataset::new(records)
}

/// One training or evaluation minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices into `Dataset::records`.
    pub indices: Vec<usize>,
    pub targets: Vec<EncodedSeq>,
    /// Cluster labels; present only for training batches.
    pub labels: Option<Vec<usize>>,
}

/// Shuffle one split with a generator keyed by (seed, epoch) and cut it into batches.
/// The final short batch is kept.
pub fn make_batches(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    contrastive: bool,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Batch>> {
    let min = if contrastive { 2 } else { 1 };
    if batch_size < min {
        return Err(Error::config(format!(
            "batch_size must be at least {min}{}, got {batch_size}",
            if contrastive { " for contrastive training" } else { "" }
        )));
    }
    let order = epoch_order(dataset.split_indices(split), seed, epoch);
    order
        .chunks(batch_size)
        .map(|idx| {
            let targets = idx
                .iter()
                .map(|&i| encode(&dataset.records[i].tokens(), vocab, max_len))
                .collect::<Result<Vec<_>>>()?;
            let labels = if split == Split::Train && contrastive {
                Some(
                    idx.iter()
                        .map(|&i| {
                            dataset.records[i].cluster.ok_or_else(|| {
                                Error::contract(format!("record {:?} has no cluster label", dataset.records[i].id))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(Batch {
                indices: idx.to_vec(),
                targets,
                labels,
            })
        })
        .collect()
}

pub fn epoch_order(mut indices: Vec<usize>, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    indices.shuffle(&mut rng);
    indices
}
