//! Corpus BLEU, ROUGE-L, and an exact+stem METEOR variant.

use std::collections::HashMap;

use rayon::prelude::*;
use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Error, Result};

fn check_corpus<S>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::contract("metric over an empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-n with uniform weights and a single pooled brevity penalty.
pub fn bleu<S: AsRef<str> + Sync>(hyps: &[Vec<S>], refs: &[Vec<S>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order must be in 1..=4, got {n}")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (h, r) in hyps.iter().zip(refs) {
        for k in 1..=n {
            let hc = ngram_counts(h, k);
            let rc = ngram_counts(r, k);
            for (g, c) in &hc {
                matched[k - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if (0..n).any(|k| matched[k] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| (matched[k] as f64 / total[k] as f64).ln())
        .sum::<f64>()
        / n as f64;
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * log_p.exp()).min(1.0))
}

/// Longest common subsequence length.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

pub fn rouge_l_pair<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let r = l as f64 / reference.len() as f64;
    let p = l as f64 / hyp.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Mean per-pair ROUGE-L F-measure.
pub fn rouge_l<S: AsRef<str> + Sync>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let scores: Vec<f64> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| rouge_l_pair(h, r))
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Alignment between hypothesis and reference positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// (hyp index, ref index), sorted by hyp index.
    pub pairs: Vec<(usize, usize)>,
    pub chunks: usize,
}

/// Repeatedly align the longest run of consecutive matching free positions,
/// leftmost in the hypothesis and then in the reference.
fn align_stage(hyp: &[String], reference: &[String], hyp_to_ref: &mut [Option<usize>], ref_used: &mut [bool]) {
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..hyp.len() {
            for j in 0..reference.len() {
                let mut len = 0;
                while i + len < hyp.len()
                    && j + len < reference.len()
                    && hyp_to_ref[i + len].is_none()
                    && !ref_used[j + len]
                    && hyp[i + len] == reference[j + len]
                {
                    len += 1;
                }
                if len > 0 && best.is_none_or(|(_, _, l)| len > l) {
                    best = Some((i, j, len));
                }
            }
        }
        let Some((i, j, len)) = best else { return };
        for k in 0..len {
            hyp_to_ref[i + k] = Some(j + k);
            ref_used[j + k] = true;
        }
    }
}

/// Exact-match stage, then stem-match stage over the remaining tokens.
pub fn meteor_align<S: AsRef<str>>(hyp: &[S], reference: &[S], stemmer: &Stemmer) -> Alignment {
    let h: Vec<String> = hyp.iter().map(|s| s.as_ref().to_string()).collect();
    let r: Vec<String> = reference.iter().map(|s| s.as_ref().to_string()).collect();
    let mut hyp_to_ref = vec![None; h.len()];
    let mut ref_used = vec![false; r.len()];
    align_stage(&h, &r, &mut hyp_to_ref, &mut ref_used);
    let hs: Vec<String> = h.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let rs: Vec<String> = r.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    align_stage(&hs, &rs, &mut hyp_to_ref, &mut ref_used);

    let pairs: Vec<(usize, usize)> = hyp_to_ref
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let mut chunks = 0;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let continues = k > 0 && {
            let (pi, pj) = pairs[k - 1];
            pi + 1 == i && pj + 1 == j
        };
        if !continues {
            chunks += 1;
        }
    }
    Alignment { pairs, chunks }
}

pub fn meteor_pair<S: AsRef<str>>(hyp: &[S], reference: &[S], stemmer: &Stemmer) -> f64 {
    let a = meteor_align(hyp, reference, stemmer);
    let m = a.pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn english_stemmer() -> Stemmer {
    Stemmer::create(Algorithm::English)
}

/// Mean per-pair METEOR over exact and stem matches only.
pub fn meteor_lite<S: AsRef<str> + Sync>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let scores: Vec<f64> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map_init(english_stemmer, |st, (h, r)| meteor_pair(h, r, st))
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&[t("a b c d e")], &[t("a b c d e")], 4).unwrap(), 1.0);
        let b1 = bleu(&[t("the the the")], &[t("the cat")], 1).unwrap();
        assert!((b1 - 1.0 / 3.0).abs() < 1e-15, "{b1}");
        assert_eq!(bleu(&[t("x y z")], &[t("a b c")], 1).unwrap(), 0.0);
        assert!(bleu::<String>(&[], &[], 4).is_err());
        assert!(bleu(&[t("a")], &[t("a")], 5).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        // c=2, r=4: all unigrams match, BP = e^{1-2}
        let b = bleu(&[t("a b")], &[t("a b c d")], 1).unwrap();
        assert!((b - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[t("a b c")], &[t("a b c")]).unwrap(), 1.0);
        let f = rouge_l(&[t("a c d")], &[t("a b c d")]).unwrap();
        let (r, p, b2) = (0.75, 1.0, 1.44);
        assert!((f - (1.0 + b2) * r * p / (r + b2 * p)).abs() < 1e-15);
        assert!((f - 0.8356164383561644).abs() < 1e-12);
        assert_eq!(rouge_l(&[t("x y")], &[t("a b")]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[vec![]], &[t("a b")]).unwrap(), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let st = english_stemmer();
        let s = meteor_pair(&t("a b c d"), &t("a b c d"), &st);
        assert!((s - (1.0 - 0.5 / 64.0)).abs() < 1e-15);
        assert_eq!(meteor_pair(&t("x"), &t("y"), &st), 0.0);
        let a = meteor_align(&t("walking"), &t("walked"), &st);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(st.stem("walking"), st.stem("walked"));
    }

    #[test]
    fn meteor_prefers_contiguous_alignment() {
        let st = english_stemmer();
        // "the" occurs twice in the reference; aligning to the second keeps one chunk
        let a = meteor_align(&t("the cat"), &t("the dog the cat"), &st);
        assert_eq!(a.pairs, vec![(0, 2), (1, 3)]);
        assert_eq!(a.chunks, 1);
    }

    #[test]
    fn metrics_invariant_to_pair_order() {
        let hyps = vec![t("a b c d"), t("x y z"), t("the cat sat")];
        let refs = vec![t("a b d c"), t("x z y w"), t("the cat sat down")];
        let rh: Vec<_> = hyps.iter().rev().cloned().collect();
        let rr: Vec<_> = refs.iter().rev().cloned().collect();
        assert_eq!(bleu(&hyps, &refs, 2).unwrap(), bleu(&rh, &rr, 2).unwrap());
        assert!((rouge_l(&hyps, &refs).unwrap() - rouge_l(&rh, &rr).unwrap()).abs() < 1e-15);
        assert!((meteor_lite(&hyps, &refs).unwrap() - meteor_lite(&rh, &rr).unwrap()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(
            pairs in prop::collection::vec(
                (prop::collection::vec("[a-d]", 0..10), prop::collection::vec("[a-d]", 1..10)), 1..6)
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            for n in 1..=4 {
                let b = bleu(&h, &r, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&b));
            }
            let rl = rouge_l(&h, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&rl));
            let m = meteor_lite(&h, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
