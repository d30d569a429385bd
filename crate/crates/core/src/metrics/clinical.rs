//! Clinical-efficacy labels and micro-averaged precision/recall/F1.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_ndjson;
use crate::text::tokenize;

pub const N_FINDINGS: usize = 14;

const BUNDLED_TABLE: &str = include_str!("../../data/findings.json");

/// Positive/negative decision per finding, in the order of the finding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector {
    pub findings: [bool; N_FINDINGS],
}

impl LabelVector {
    pub fn from_positive(idx: &[usize]) -> Self {
        let mut findings = [false; N_FINDINGS];
        for &i in idx {
            findings[i] = true;
        }
        Self { findings }
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.findings.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

pub trait Labeler: Send + Sync {
    fn label(&self, text: &str) -> Result<LabelVector>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindingSpec {
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindingTable {
    pub negation_cues: Vec<String>,
    pub window: usize,
    pub findings: Vec<FindingSpec>,
}

impl FindingTable {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_TABLE).expect("bundled finding table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = crate::io::read_json(path)?;
        if t.findings.len() != N_FINDINGS {
            return Err(Error::config(format!(
                "finding table {} declares {} findings, expected {N_FINDINGS}",
                path.display(),
                t.findings.len()
            )));
        }
        Ok(t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.findings.iter().map(|f| f.name.as_str()).collect()
    }
}

/// Keyword matcher: a finding is positive when one of its phrases occurs with
/// no negation cue in the preceding `window` tokens of the same sentence.
#[derive(Debug, Clone)]
pub struct KeywordLabeler {
    keywords: Vec<Vec<Vec<String>>>,
    cues: Vec<Vec<String>>,
    window: usize,
}

impl KeywordLabeler {
    pub fn new(table: &FindingTable) -> Self {
        let split = |s: &String| tokenize(s);
        Self {
            keywords: table
                .findings
                .iter()
                .map(|f| f.keywords.iter().map(split).collect())
                .collect(),
            cues: table.negation_cues.iter().map(split).collect(),
            window: table.window,
        }
    }

    pub fn bundled() -> Self {
        Self::new(&FindingTable::bundled())
    }

    fn negated(&self, tokens: &[String], start: usize, sentence_start: usize) -> bool {
        let lo = start.saturating_sub(self.window).max(sentence_start);
        self.cues.iter().any(|cue| {
            let n = cue.len();
            n <= start - lo && (lo..=start - n).any(|p| tokens[p..p + n] == cue[..])
        })
    }

    pub fn label_tokens(&self, tokens: &[String]) -> LabelVector {
        let mut out = LabelVector::default();
        let mut sentence_start = vec![0; tokens.len()];
        let mut s = 0;
        for (i, t) in tokens.iter().enumerate() {
            sentence_start[i] = s;
            if t == "." {
                s = i + 1;
            }
        }
        for (f, phrases) in self.keywords.iter().enumerate() {
            out.findings[f] = phrases.iter().any(|ph| {
                let n = ph.len();
                n > 0
                    && tokens.len() >= n
                    && (0..=tokens.len() - n)
                        .any(|i| tokens[i..i + n] == ph[..] && !self.negated(tokens, i, sentence_start[i]))
            });
        }
        out
    }
}

impl Labeler for KeywordLabeler {
    fn label(&self, text: &str) -> Result<LabelVector> {
        Ok(self.label_tokens(&tokenize(text)))
    }
}

/// Labels computed offline, keyed by whitespace-normalized lowercase text.
#[derive(Debug, Clone)]
pub struct FileLabeler {
    by_text: HashMap<String, LabelVector>,
}

#[derive(Deserialize)]
struct LabelFileLine {
    text: String,
    labels: LabelVector,
}

fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

impl FileLabeler {
    pub fn load(path: &Path) -> Result<Self> {
        let by_text = read_ndjson::<LabelFileLine>(path)?
            .into_iter()
            .map(|(_, l)| (normalize(&l.text), l.labels))
            .collect();
        Ok(Self { by_text })
    }
}

impl Labeler for FileLabeler {
    fn label(&self, text: &str) -> Result<LabelVector> {
        let key = normalize(text);
        self.by_text
            .get(&key)
            .copied()
            .ok_or_else(|| Error::contract(format!("label file has no entry for report {key:?}")))
    }
}

/// Resolve `toy` or `file:<path>`.
pub fn labeler_from_tag(tag: &str) -> Result<Box<dyn Labeler>> {
    if tag == "toy" {
        return Ok(Box::new(KeywordLabeler::bundled()));
    }
    if let Some(path) = tag.strip_prefix("file:") {
        return Ok(Box::new(FileLabeler::load(Path::new(path))?));
    }
    Err(Error::config(format!("unknown labeler {tag:?}; expected \"toy\" or \"file:<path>\"")))
}

pub fn label_report(text: &str, labeler: &dyn Labeler) -> Result<LabelVector> {
    labeler.label(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged over every (report, finding) decision; 0/0 is 0.
pub fn ce_metrics(pred: &[LabelVector], gold: &[LabelVector]) -> Result<ClinicalScores> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predicted label vectors but {} gold",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("clinical metrics over an empty corpus"));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        for (&pv, &gv) in p.findings.iter().zip(&g.findings) {
            match (pv, gv) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClinicalScores { precision, recall, f1 })
}
