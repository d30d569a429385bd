//! Weak cluster labels: embed each training report, cluster with K-means,
//! assign every report the id of its nearest centroid.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, ndjson_string, read_ndjson};
use crate::text::{Vocabulary, SPECIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderTag {
    Tfidf,
    External,
}

/// Row-major `rows × dim` report embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub provider: ProviderTag,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, provider: ProviderTag) -> Result<Self> {
        if dim == 0 || rows * dim != data.len() {
            return Err(Error::contract(format!(
                "embedding matrix {rows}x{dim} cannot hold {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {} is not finite", i / dim)));
        }
        Ok(Self {
            rows,
            dim,
            data,
            provider,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Write as NDJSON `{"id", "vec"}` lines.
    pub fn save(&self, ids: &[String], path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            vec: &'a [f64],
        }
        if ids.len() != self.rows {
            return Err(Error::contract(format!("{} ids for {} embedding rows", ids.len(), self.rows)));
        }
        let lines: Vec<Line> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| Line { id, vec: self.row(i) })
            .collect();
        atomic_write(path, ndjson_string(&lines)?.as_bytes())
    }
}

/// TF-IDF over the non-special vocabulary: raw counts times
/// `ln((1+N)/(1+df)) + 1`, rows L2-normalized. Out-of-vocabulary tokens are ignored.
pub fn tfidf_embed<S: AsRef<str>>(corpus: &[Vec<S>], vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let dim = vocab.tokens().len();
    if dim == 0 {
        return Err(Error::contract("tf-idf needs a vocabulary with at least one non-special token"));
    }
    let n = corpus.len();
    let mut counts = vec![0.0; n * dim];
    let mut df = vec![0usize; dim];
    for (r, doc) in corpus.iter().enumerate() {
        let row = &mut counts[r * dim..(r + 1) * dim];
        for t in doc {
            if let Some(id) = vocab.id(t.as_ref()).filter(|&id| id >= SPECIALS.len()) {
                row[id - SPECIALS.len()] += 1.0;
            }
        }
        for (c, d) in row.iter().zip(df.iter_mut()) {
            if *c > 0.0 {
                *d += 1;
            }
        }
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    for row in counts.chunks_mut(dim) {
        for (v, w) in row.iter_mut().zip(&idf) {
            *v *= w;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    EmbeddingMatrix::new(n, dim, counts, ProviderTag::Tfidf)
}

/// Inverse document frequency used by [`tfidf_embed`].
pub fn idf(n_docs: usize, doc_freq: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + doc_freq as f64)).ln() + 1.0
}

/// Read NDJSON `{"id", "vec"}` and align rows to `ids`. Ids absent from `ids` are ignored.
pub fn load_embeddings(path: &Path, ids: &[String]) -> Result<EmbeddingMatrix> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        vec: Vec<f64>,
    }
    let lines: Vec<(usize, Line)> = read_ndjson(path)?;
    let mut by_id: HashMap<String, (usize, Vec<f64>)> = HashMap::new();
    let mut dim = None;
    for (lineno, l) in lines {
        if l.vec.is_empty() {
            return Err(Error::ingestion(path, format!("line {lineno} (id {}): empty vector", l.id)));
        }
        match dim {
            None => dim = Some(l.vec.len()),
            Some(d) if d != l.vec.len() => {
                return Err(Error::ingestion(
                    path,
                    format!("line {lineno} (id {}): width {} differs from {d}", l.id, l.vec.len()),
                ))
            }
            _ => {}
        }
        if l.vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::ingestion(path, format!("line {lineno} (id {}): non-finite value", l.id)));
        }
        if by_id.insert(l.id.clone(), (lineno, l.vec)).is_some() {
            return Err(Error::ingestion(path, format!("line {lineno}: duplicate id {}", l.id)));
        }
    }
    let dim = dim.ok_or_else(|| Error::ingestion(path, "no embeddings in file"))?;
    let mut data = Vec::with_capacity(ids.len() * dim);
    for id in ids {
        let (_, v) = by_id
            .get(id)
            .ok_or_else(|| Error::ingestion(path, format!("missing embedding for report id {id}")))?;
        data.extend_from_slice(v);
    }
    EmbeddingMatrix::new(ids.len(), dim, data, ProviderTag::External)
}

/// Fitted K-means partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid for a vector; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, self.dim, x).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sum of squared distances of every point to its assigned centroid.
pub fn inertia(emb: &EmbeddingMatrix, centroids: &[f64], labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(emb.row(i), &centroids[l * emb.dim..(l + 1) * emb.dim]))
        .sum()
}

fn kmeans_pp_init(emb: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = emb.rows;
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = emb.row(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), emb.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // rounding can leave target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        centroids.extend_from_slice(emb.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(emb.row(i), emb.row(pick)));
        }
    }
    centroids
}

/// K-means++ seeding then Lloyd iterations until the assignment stops changing
/// or `max_iters` is reached. Empty clusters take the point farthest from its
/// centroid among clusters with more than one member.
pub fn kmeans(emb: &EmbeddingMatrix, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    let n = emb.rows;
    if k == 0 || k > n {
        return Err(Error::contract(format!("k must satisfy 1 <= k <= {n} (number of reports), got {k}")));
    }
    if max_iters == 0 {
        return Err(Error::contract("max_iters must be at least 1"));
    }
    let dim = emb.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(emb, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut iterations_run = 0;

    for it in 1..=max_iters {
        let mut dists = vec![0.0; n];
        let mut next: Vec<usize> = (0..n)
            .map(|i| {
                let (c, d) = nearest(&centroids, dim, emb.row(i));
                dists[i] = d;
                c
            })
            .collect();
        repair_empty(&mut next, &mut dists, k);
        let changed = next != labels;

        let mut sums = vec![0.0; k * dim];
        let mut sizes = vec![0usize; k];
        for (i, &l) in next.iter().enumerate() {
            sizes[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(emb.row(i)) {
                *s += v;
            }
        }
        for (c, &size) in sizes.iter().enumerate() {
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s /= size as f64;
            }
        }
        centroids = sums;
        labels = next;
        let current = inertia(emb, &centroids, &labels);
        if let Some(&prev) = history.last() {
            debug_assert!(
                current <= prev + 1e-12 * prev.max(1.0),
                "inertia increased from {prev} to {current} at iteration {it}"
            );
        }
        history.push(current);
        iterations_run = it;
        if !changed {
            break;
        }
    }

    Ok(ClusterModel {
        k,
        dim,
        centroids,
        inertia: *history.last().expect("at least one iteration"),
        labels,
        seed,
        iterations_run,
        inertia_history: history,
    })
}

fn repair_empty(labels: &mut [usize], dists: &mut [f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n guarantees a cluster with a spare point");
        sizes[labels[donor]] -= 1;
        labels[donor] = c;
        sizes[c] = 1;
        dists[donor] = 0.0;
    }
}

/// Nearest-centroid label for every embedding row.
pub fn assign_labels(model: &ClusterModel, emb: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if emb.dim != model.dim {
        return Err(Error::contract(format!(
            "embedding width {} does not match cluster model width {}",
            emb.dim, model.dim
        )));
    }
    Ok((0..emb.rows).map(|i| model.nearest(emb.row(i))).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelLine {
    pub id: String,
    pub label: usize,
}

pub fn save_labels(ids: &[String], labels: &[usize], path: &Path) -> Result<()> {
    if ids.len() != labels.len() {
        return Err(Error::contract(format!("{} ids for {} labels", ids.len(), labels.len())));
    }
    let lines: Vec<LabelLine> = ids
        .iter()
        .zip(labels)
        .map(|(id, &label)| LabelLine { id: id.clone(), label })
        .collect();
    atomic_write(path, ndjson_string(&lines)?.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let mut out = HashMap::new();
    for (lineno, l) in read_ndjson::<LabelLine>(path)? {
        if out.insert(l.id.clone(), l.label).is_some() {
            return Err(Error::ingestion(path, format!("line {lineno}: duplicate id {}", l.id)));
        }
    }
    Ok(out)
}
