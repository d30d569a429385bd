//! Corpus evaluation.

pub mod clinical;
pub mod nlg;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, canonical_json_pretty, read_ndjson};
use crate::text::tokenize;

pub use clinical::{ce_metrics, label_report, labeler_from_tag, ClinicalScores, FindingTable, KeywordLabeler, Labeler, LabelVector, N_FINDINGS};
pub use nlg::{bleu, lcs_len, meteor_lite, rouge_l, ROUGE_BETA};

pub const HIST_BINS: usize = 20;
pub const HIST_WIDTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: BTreeMap<String, f64>,
    pub rouge_l: f64,
    pub meteor: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub length_hist: Vec<usize>,
    pub n_reports: usize,
}

impl EvalReport {
    pub fn bleu_n(&self, n: usize) -> f64 {
        self.bleu[&n.to_string()]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, canonical_json_pretty(self)?.as_bytes())
    }

    pub fn histogram_csv(&self) -> String {
        histogram_csv(&self.length_hist)
    }
}

/// Bin `min(L / 5, 19)` per report.
pub fn length_histogram<S>(generated: &[Vec<S>]) -> Vec<usize> {
    let mut bins = vec![0; HIST_BINS];
    for g in generated {
        bins[(g.len() / HIST_WIDTH).min(HIST_BINS - 1)] += 1;
    }
    bins
}

pub fn histogram_csv(bins: &[usize]) -> String {
    let mut out = String::from("bin_start,bin_end,count\n");
    for (i, c) in bins.iter().enumerate() {
        out.push_str(&format!("{},{},{c}\n", i * HIST_WIDTH, (i + 1) * HIST_WIDTH));
    }
    out
}

/// Score generated texts against references, labelling both with `labeler`.
pub fn evaluate(generated: &[String], references: &[String], labeler: &dyn Labeler) -> Result<EvalReport> {
    if generated.len() != references.len() {
        return Err(Error::contract(format!(
            "{} generations but {} references",
            generated.len(),
            references.len()
        )));
    }
    let hyps: Vec<Vec<String>> = generated.iter().map(|s| tokenize(s)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    let mut bleu_map = BTreeMap::new();
    for n in 1..=4 {
        bleu_map.insert(n.to_string(), bleu(&hyps, &refs, n)?);
    }
    let pred: Vec<LabelVector> = generated.par_iter().map(|t| labeler.label(t)).collect::<Result<_>>()?;
    let gold: Vec<LabelVector> = references.par_iter().map(|t| labeler.label(t)).collect::<Result<_>>()?;
    let ce = ce_metrics(&pred, &gold)?;
    Ok(EvalReport {
        bleu: bleu_map,
        rouge_l: rouge_l(&hyps, &refs)?,
        meteor: meteor_lite(&hyps, &refs)?,
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
        length_hist: length_histogram(&hyps),
        n_reports: hyps.len(),
    })
}

#[derive(Deserialize)]
struct TextLine {
    id: String,
    #[serde(alias = "report")]
    text: String,
}

/// Read `{"id", "text"}` lines (or dataset lines carrying `report`).
pub fn read_texts(path: &Path) -> Result<Vec<(String, String)>> {
    let rows = read_ndjson::<TextLine>(path)?;
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        if let Some(prev) = seen.insert(r.id.clone(), line) {
            return Err(Error::ingestion(path, format!("line {line}: id {:?} already used on line {prev}", r.id)));
        }
        out.push((r.id, r.text));
    }
    Ok(out)
}

/// Pair generations with references by id, in generation order.
pub fn pair_by_id(generated: &[(String, String)], references: &[(String, String)]) -> Result<(Vec<String>, Vec<String>)> {
    let by_id: HashMap<&str, &str> = references.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let mut hyps = Vec::with_capacity(generated.len());
    let mut refs = Vec::with_capacity(generated.len());
    for (id, text) in generated {
        let r = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::contract(format!("generation {id:?} has no reference")))?;
        hyps.push(text.clone());
        refs.push(r.to_string());
    }
    Ok((hyps, refs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn histogram_examples() {
        let mk = |n: usize| vec!["w"; n];
        let h = length_histogram(&[mk(3), mk(7), mk(98)]);
        assert_eq!((h[0], h[1], h[19]), (1, 1, 1));
        assert_eq!(length_histogram(&[mk(0)])[0], 1);
        assert_eq!(length_histogram(&[mk(100)])[19], 1);
        assert_eq!(length_histogram(&[mk(250)])[19], 1);
    }

    #[test]
    fn histogram_csv_layout() {
        let csv = histogram_csv(&length_histogram(&[vec!["a"; 6]]));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 21);
        assert_eq!(lines[0], "bin_start,bin_end,count");
        assert_eq!(lines[2], "5,10,1");
    }

    #[test]
    fn identical_corpus_scores() {
        let texts = vec![
            "the heart is enlarged . there is a small pleural effusion .".to_string(),
            "no pneumothorax . lungs are clear of consolidation .".to_string(),
        ];
        let r = evaluate(&texts, &texts, &KeywordLabeler::bundled()).unwrap();
        for n in 1..=4 {
            assert_eq!(r.bleu_n(n), 1.0);
        }
        assert_eq!(r.rouge_l, 1.0);
        assert!(r.meteor > 0.99 && r.meteor <= 1.0);
        assert_eq!((r.ce_precision, r.ce_recall, r.ce_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.length_hist.iter().sum::<usize>(), 2);
    }

    #[test]
    fn pairing_and_reading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ndjson");
        std::fs::write(&p, "{\"id\":\"b\",\"report\":\"y\"}\n{\"id\":\"a\",\"text\":\"x\"}\n").unwrap();
        let refs = read_texts(&p).unwrap();
        let gens = vec![("a".to_string(), "g1".to_string()), ("b".to_string(), "g2".to_string())];
        let (h, r) = pair_by_id(&gens, &refs).unwrap();
        assert_eq!(h, vec!["g1", "g2"]);
        assert_eq!(r, vec!["x", "y"]);
        assert!(pair_by_id(&[("z".into(), "q".into())], &refs).is_err());
        std::fs::write(&p, "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n").unwrap();
        assert!(read_texts(&p).is_err());
    }

    fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
        // longest subsequence of `a` (over all 2^|a| masks) that is a subsequence of `b`
        let is_sub = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|c| it.any(|d| d == c))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_sub(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    proptest! {
        #[test]
        fn lcs_matches_subset_enumeration(
            a in prop::collection::vec(0u8..3, 0..=8),
            b in prop::collection::vec(0u8..3, 0..=8),
        ) {
            let sa: Vec<String> = a.iter().map(|c| c.to_string()).collect();
            let sb: Vec<String> = b.iter().map(|c| c.to_string()).collect();
            prop_assert_eq!(lcs_len(&sa, &sb), lcs_brute(&a, &b));
        }

        #[test]
        fn histogram_sums_to_corpus(lens in prop::collection::vec(0usize..200, 0..40)) {
            let docs: Vec<Vec<u8>> = lens.iter().map(|&n| vec![0; n]).collect();
            prop_assert_eq!(length_histogram(&docs).iter().sum::<usize>(), lens.len());
        }
    }
}
