//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datakit::{Split, SynthSpec};
use crate::error::{Error, Result};
use crate::pipeline::{self, EmbeddingSource, PipelineOptions, StageOutput, Staleness};
use crate::trainer::{RunConfig, DEFAULT_LAMBDAS, DEFAULT_TAUS};

#[derive(Debug, Parser)]
#[command(name = "wclgen", version, about = "Report generation with a cluster-weighted contrastive objective")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// RNG seed; overrides the seed in spec or config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel workers for grid search.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Record the produced artifact in this manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Build the vocabulary from the training split.
    Vocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_freq: usize,
    },
    /// TF-IDF embeddings of the training reports.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// K-means weak labels for the training reports.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        /// `tfidf` or an embeddings NDJSON file.
        #[arg(long, default_value = "tfidf")]
        embeddings: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
    },
    /// Train one run and keep the best validation epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Decode one split with greedy (`--beam 1`) or beam search.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
    },
    /// Score generations against references.
    Eval {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// `toy` or `file:<path>`.
        #[arg(long, default_value = "toy")]
        labeler: String,
    },
    /// Train every (lambda, tau) cell and pick the best validation BLEU-4.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Run synth through eval into one directory and write its manifest.
    Pipeline {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 13)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        min_freq: usize,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
    },
    /// Re-hash the artifacts of a manifest.
    Verify {
        manifest: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
    }
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::config("--out is required"))
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => pipeline::load_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_spec(path: Option<&Path>, seed: Option<u64>) -> Result<SynthSpec> {
    let mut spec = match path {
        Some(p) => pipeline::load_spec(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn finish(g: &Global, stage: StageOutput) -> Result<()> {
    println!("{}: {}", stage.name, stage.path.display());
    if let Some(m) = &g.manifest {
        pipeline::record_in(m, &stage)?;
    }
    Ok(())
}

/// Run one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth { spec } => {
            let spec = synth_spec(spec.as_deref(), g.seed)?;
            finish(g, pipeline::synth(&spec, require_out(g)?)?)
        }
        Command::Vocab { data, min_freq } => finish(g, pipeline::vocab(&data, min_freq, require_out(g)?)?),
        Command::Embed { data, vocab } => finish(g, pipeline::embed(&data, &vocab, require_out(g)?)?),
        Command::Cluster {
            data,
            k,
            embeddings,
            vocab,
            max_iters,
        } => {
            let source = EmbeddingSource::parse(&embeddings, vocab.as_deref())?;
            let stage = pipeline::cluster(&data, source, k, g.seed.unwrap_or(0), max_iters, require_out(g)?)?;
            finish(g, stage)
        }
        Command::Train { data, clusters, vocab } => {
            let cfg = run_config(g)?;
            let stage = pipeline::train_stage(&cfg, &data, clusters.as_deref(), vocab.as_deref(), require_out(g)?)?;
            finish(g, stage)
        }
        Command::Generate {
            checkpoint,
            data,
            split,
            beam,
            max_len,
        } => finish(g, pipeline::generate(&checkpoint, &data, split, beam, max_len, require_out(g)?)?),
        Command::Eval {
            generations,
            references,
            labeler,
        } => finish(g, pipeline::eval(&generations, &references, &labeler, require_out(g)?)?),
        Command::Gridsearch {
            data,
            clusters,
            vocab,
            lambdas,
            taus,
        } => {
            let cfg = run_config(g)?;
            let lambdas = lambdas.unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
            let taus = taus.unwrap_or_else(|| DEFAULT_TAUS.to_vec());
            let (result, stage) = pipeline::gridsearch_stage(
                &cfg,
                &lambdas,
                &taus,
                &data,
                clusters.as_deref(),
                vocab.as_deref(),
                g.jobs,
                require_out(g)?,
            )?;
            let best = result.best_cell();
            println!(
                "best: lambda {} tau {} val_bleu4 {:.6} (epoch {})",
                best.lambda, best.tau, best.val_bleu4, best.best_epoch
            );
            finish(g, stage)
        }
        Command::Pipeline {
            spec,
            k,
            min_freq,
            beam,
            max_len,
        } => {
            let spec = synth_spec(Some(&spec), g.seed)?;
            let cfg = run_config(g)?;
            let opts = PipelineOptions {
                k,
                min_freq,
                beam,
                max_len,
                cluster_seed: g.seed.unwrap_or(0),
                ..PipelineOptions::default()
            };
            let out = require_out(g)?;
            let m = pipeline::run_pipeline(&spec, &cfg, &opts, out)?;
            for (name, a) in &m.artifacts {
                println!("{name}: {}", a.path);
            }
            Ok(())
        }
        Command::Verify { manifest } => {
            let stale = pipeline::verify_manifest(&manifest)?;
            if stale.is_empty() {
                println!("ok");
                return Ok(());
            }
            for s in &stale {
                let why = match s.reason {
                    Staleness::Missing => "missing",
                    Staleness::Modified => "modified",
                };
                println!("stale {} ({}): {why}", s.name, s.path);
            }
            Err(Error::Contract(format!("{} stale artifact(s)", stale.len())))
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
