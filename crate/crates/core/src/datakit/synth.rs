use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ReportRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{LabelVector, N_FINDINGS};
use crate::numerics::Tensor;

const BUNDLED_TEMPLATES: &str = include_str!("../../data/synth_templates.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindingTemplates {
    pub name: String,
    /// Paraphrases of a positive mention; `{sev}` is replaced by a severity word.
    pub positive: Vec<String>,
    pub negative: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTemplates {
    pub normal: String,
    pub severity: Vec<String>,
    pub findings: Vec<FindingTemplates>,
}

impl SynthTemplates {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_TEMPLATES).expect("bundled templates are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_findings: usize,
    pub templates_per_finding: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub patch_count: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Probability that a finding is present.
    pub positive_rate: f64,
    /// Probability that an absent finding gets a negation sentence.
    pub mention_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_findings: N_FINDINGS,
            templates_per_finding: 2,
            n_train: 160,
            n_val: 20,
            n_test: 20,
            patch_count: 49,
            feature_dim: 16,
            noise_sigma: 0.1,
            positive_rate: 0.15,
            mention_rate: 0.35,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, templates: &SynthTemplates) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_findings == 0 || self.n_findings > N_FINDINGS || self.n_findings > templates.findings.len() {
            return bad(format!("n_findings must be in 1..={N_FINDINGS}, got {}", self.n_findings));
        }
        let avail = templates.findings[..self.n_findings]
            .iter()
            .map(|f| f.positive.len())
            .min()
            .unwrap_or(0);
        if self.templates_per_finding < 2 || self.templates_per_finding > avail {
            return bad(format!(
                "templates_per_finding must be in 2..={avail}, got {}",
                self.templates_per_finding
            ));
        }
        if self.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        if self.patch_count == 0 || self.feature_dim == 0 {
            return bad("patch_count and feature_dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        for (name, p) in [("positive_rate", self.positive_rate), ("mention_rate", self.mention_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if templates.severity.is_empty() {
            return bad("template table declares no severity words".into());
        }
        Ok(())
    }
}

/// Everything the report text is a function of.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Latent {
    pub findings: Vec<bool>,
    pub severity: Vec<usize>,
    pub template: Vec<usize>,
    pub mentioned: Vec<bool>,
}

impl Latent {
    pub fn labels(&self) -> LabelVector {
        let mut l = LabelVector::default();
        l.findings[..self.findings.len()].copy_from_slice(&self.findings);
        l
    }

    /// Indices of the feature signatures this latent switches on.
    fn atoms(&self, t: usize, s: usize) -> Vec<usize> {
        let n = self.findings.len();
        let mut out = Vec::new();
        for f in 0..n {
            if self.findings[f] {
                out.push((f * t + self.template[f]) * s + self.severity[f]);
            } else if self.mentioned[f] {
                out.push(n * t * s + f);
            }
        }
        out
    }

    pub fn render(&self, templates: &SynthTemplates) -> String {
        let mut sentences: Vec<String> = Vec::new();
        for (f, &pos) in self.findings.iter().enumerate() {
            if pos {
                let tpl = &templates.findings[f].positive[self.template[f]];
                sentences.push(tpl.replace("{sev}", &templates.severity[self.severity[f]]));
            }
        }
        if sentences.is_empty() {
            sentences.push(templates.normal.clone());
        }
        for (f, &pos) in self.findings.iter().enumerate() {
            if !pos && self.mentioned[f] {
                sentences.push(templates.findings[f].negative.clone());
            }
        }
        sentences.join(" ")
    }
}

fn sample_latent(spec: &SynthSpec, n_sev: usize, rng: &mut ChaCha8Rng) -> Latent {
    let n = spec.n_findings;
    let mut l = Latent {
        findings: vec![false; n],
        severity: vec![0; n],
        template: vec![0; n],
        mentioned: vec![false; n],
    };
    for f in 0..n {
        l.findings[f] = rng.random::<f64>() < spec.positive_rate;
        l.severity[f] = rng.random_range(0..n_sev);
        l.template[f] = rng.random_range(0..spec.templates_per_finding);
        l.mentioned[f] = rng.random::<f64>() < spec.mention_rate;
        if l.findings[f] {
            l.mentioned[f] = true;
        } else {
            l.severity[f] = 0;
            l.template[f] = 0;
        }
    }
    l
}

/// Sample latents, render their reports, and synthesize patch features as a
/// sum of per-atom signature matrices plus Gaussian noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, Vec<Latent>)> {
    generate_with_templates(spec, &SynthTemplates::bundled())
}

pub fn generate_with_templates(spec: &SynthSpec, templates: &SynthTemplates) -> Result<(Dataset, Vec<Latent>)> {
    spec.validate(templates)?;
    let (t, s) = (spec.templates_per_finding, templates.severity.len());
    let n_atoms = spec.n_findings * t * s + spec.n_findings;
    let width = spec.patch_count * spec.feature_dim;

    let mut sig_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sig_rng.set_stream(0);
    let signatures: Vec<Vec<f64>> = (0..n_atoms)
        .map(|_| (0..width).map(|_| StandardNormal.sample(&mut sig_rng)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;

    let mut records = Vec::new();
    let mut latents = Vec::new();
    for (split, count) in [(Split::Train, spec.n_train), (Split::Val, spec.n_val), (Split::Test, spec.n_test)] {
        for i in 0..count {
            let latent = sample_latent(spec, s, &mut rng);
            let mut feat = vec![0.0; width];
            for a in latent.atoms(t, s) {
                for (x, y) in feat.iter_mut().zip(&signatures[a]) {
                    *x += y;
                }
            }
            if spec.noise_sigma > 0.0 {
                for x in &mut feat {
                    *x += noise.sample(&mut rng);
                }
            }
            records.push(ReportRecord {
                id: format!("{split}-{i:05}"),
                split,
                report: latent.render(templates),
                features: Tensor::matrix(spec.patch_count, spec.feature_dim, feat)?,
                gold_labels: Some(latent.labels()),
                cluster: None,
            });
            latents.push(latent);
        }
    }
    Ok((Dataset::new(records)?, latents))
}
