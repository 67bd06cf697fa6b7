//! The `vclab` command line: prepare, train, convert and eval.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vclab_core::dataset::{synthesize_heldout, synthesize_toy_corpus, Corpus, ToySpec};
use vclab_core::eval::evaluate;
use vclab_core::losses::LossReport;
use vclab_core::phoneme_prior::PriorSet;
use vclab_core::pipeline::{
    convert_utterance, encode_corpus, estimate_latent_priors, run_stage, TrainConfig, TrainState,
};

use crate::checkpoint::{load_priors, load_state, save_priors, save_state};
use crate::codec::write_file;
use crate::config::{load_config, save_config};
use crate::corpus_io::{load_corpus, save_corpus, write_json};
use crate::error::{Error, Result};
use crate::features::write_features;
use crate::logs::{read_log, LogRow, TrainLog};
use crate::report::{latent_scatter, write_eval_outputs, write_paired_outputs, PairedReport};
use crate::svg::{line_chart, Series};

#[derive(Debug, Parser)]
#[command(name = "vclab", version, about = "Non-parallel many-to-many voice conversion laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus manifest, or write a synthetic corpus with --synthetic.
    Prepare(PrepareArgs),
    /// Run stage 1, prior estimation and stage 2.
    Train(TrainArgs),
    /// Convert utterances between speakers with a trained checkpoint.
    Convert(ConvertArgs),
    /// Compute latent, reconstruction and domain metrics for a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Corpus manifest to validate.
    #[arg(long, required_unless_present = "synthetic")]
    pub corpus: Option<PathBuf>,
    /// Write a synthetic corpus to --out instead of validating one.
    #[arg(long, requires = "out")]
    pub synthetic: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub speakers: usize,
    #[arg(long, default_value_t = 5)]
    pub phonemes: usize,
    #[arg(long, default_value_t = 24)]
    pub utts: usize,
    #[arg(long, default_value_t = 256)]
    pub frames: usize,
    #[arg(long, default_value_t = 36)]
    pub q: usize,
    /// Also write a held-out corpus from the same speakers to <out>/heldout.
    #[arg(long)]
    pub heldout: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Iterations of each stage.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, conflicts_with = "stage2_from")]
    pub stage1_only: bool,
    /// Skip stage 1 and continue from this checkpoint.
    #[arg(long)]
    pub stage2_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Source speaker name; every speaker when absent.
    #[arg(long)]
    pub source: Option<String>,
    /// Target speaker name; every other speaker when absent.
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prior set to score against; defaults to the checkpoint's own.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Second checkpoint to compare against under the same priors.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

/// Runs a parsed command and maps the outcome to an exit status:
/// 0 on success, 2 on invalid input, 1 on failures during computation.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(&a, out),
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Convert(a) => cmd_convert(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_runtime() {
                1
            } else {
                2
            }
        }
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) {
    let _ = writeln!(out, "{line}");
}

pub fn summarize(corpus: &Corpus, out: &mut dyn Write) {
    say(out, format_args!("speakers: {}", corpus.domains().len()));
    for d in corpus.domains() {
        let n = corpus.utterances_of(d.code).count();
        match d.f0_stats {
            Some(s) => say(out, format_args!("  {} {}: {n} utterances, log-F0 {:.4} ± {:.4}", d.code + 1, d.name, s.mean, s.std)),
            None => say(out, format_args!("  {} {}: {n} utterances, no F0 statistics", d.code + 1, d.name)),
        }
    }
    say(out, format_args!("utterances: {}", corpus.utterances().len()));
    say(out, format_args!("coefficients per frame: {}", corpus.q()));
    say(out, format_args!("total frames: {}", corpus.total_frames()));
    say(out, format_args!("phoneme histogram:"));
    for (name, count) in corpus.inventory().names().iter().zip(corpus.phoneme_histogram()) {
        say(out, format_args!("  {name}: {count}"));
    }
}

pub fn cmd_prepare(a: &PrepareArgs, out: &mut dyn Write) -> Result<()> {
    if a.synthetic {
        let dir = a.out.as_ref().expect("clap requires --out with --synthetic");
        let spec = ToySpec {
            n_speakers: a.speakers,
            n_phonemes: a.phonemes,
            utts_per_speaker: a.utts,
            frames_per_utt: a.frames,
            q: a.q,
        };
        let (corpus, _) = synthesize_toy_corpus(a.seed, &spec)?;
        let manifest = save_corpus(&corpus, dir)?;
        say(out, format_args!("wrote {}", manifest.display()));
        if a.heldout {
            let (held, _) = synthesize_heldout(a.seed, &spec)?;
            let m = save_corpus(&held, &dir.join("heldout"))?;
            say(out, format_args!("wrote {}", m.display()));
        }
        // Reload so the summary describes exactly what is on disk.
        summarize(&load_corpus(&manifest)?, out);
        return Ok(());
    }
    let path = a.corpus.as_ref().expect("clap requires --corpus without --synthetic");
    summarize(&load_corpus(path)?, out);
    Ok(())
}

/// Resolved configuration after applying command-line overrides.
pub fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.beta {
        cfg.weights.beta = b;
    }
    if let Some(n) = a.iterations {
        cfg.iterations_stage1 = n;
        cfg.iterations_stage2 = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    corpus: &'a Path,
    config: Option<&'a Path>,
    stage2_from: Option<&'a Path>,
    stage1_only: bool,
    seed: u64,
    settings: &'a TrainConfig,
}

fn train_with_log(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    stage: u8,
    until: u64,
    log_path: &Path,
) -> Result<()> {
    let mut log = TrainLog::create(log_path)?;
    let mut failure = None;
    let mut observer = |it: u64, r: &LossReport| {
        if failure.is_none() {
            failure = log.write(&LogRow::new(it, r)).err();
        }
    };
    run_stage(state, corpus, cfg, stage, until, &mut observer)?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.finish()
}

fn loss_chart(logs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for p in logs {
        rows.extend(read_log(p)?);
    }
    let mut offset = 0;
    let mut g = Series { name: "I_G".into(), points: Vec::new() };
    let mut d = Series { name: "I_D".into(), points: Vec::new() };
    let mut c = Series { name: "I_C".into(), points: Vec::new() };
    let mut last_stage = rows.first().map_or(1, |r| r.stage);
    let mut last_it = 0;
    for r in &rows {
        if r.stage != last_stage {
            offset += last_it;
            last_stage = r.stage;
        }
        last_it = r.iteration;
        let x = (offset + r.iteration) as f64;
        g.points.push((x, r.i_g));
        d.points.push((x, r.i_d));
        c.points.push((x, r.i_c));
    }
    Ok(line_chart("training objectives", &[g, d, c]))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(a)?;
    let corpus = load_corpus(&a.corpus)?;
    let dir = &a.out;
    save_config(&dir.join("config.toml"), &cfg)?;
    let record = RunRecord {
        corpus: &a.corpus,
        config: a.config.as_deref(),
        stage2_from: a.stage2_from.as_deref(),
        stage1_only: a.stage1_only,
        seed: cfg.seed,
        settings: &cfg,
    };
    write_json(&dir.join("run.json"), &record)?;
    say(
        out,
        format_args!(
            "batch {} | lr G {} D {} | Adam beta1 {} | lambda cls {} cyc {} id {} | beta {} | iterations {}+{} | seed {}",
            cfg.batch_size,
            cfg.learning_rate_g,
            cfg.learning_rate_d,
            cfg.adam_beta1,
            cfg.weights.lambda_cls,
            cfg.weights.lambda_cyc,
            cfg.weights.lambda_id,
            cfg.weights.beta,
            cfg.iterations_stage1,
            cfg.iterations_stage2,
            cfg.seed
        ),
    );
    let mut logs = Vec::new();
    let mut state = match &a.stage2_from {
        Some(p) => load_state(p)?,
        None => {
            let mut state = TrainState::new(&corpus, &cfg)?;
            let log = dir.join("stage1_log.csv");
            train_with_log(&mut state, &corpus, &cfg, 1, cfg.iterations_stage1, &log)?;
            logs.push(log);
            save_state(&dir.join("stage1.ckpt"), &state)?;
            say(out, format_args!("stage 1 done: {} iterations", state.iteration));
            state
        }
    };
    if !a.stage1_only {
        if state.priors.is_none() || state.stage == 1 {
            let missing = estimate_latent_priors(&mut state, &corpus, &cfg)?;
            if !missing.is_empty() {
                let names: Vec<&str> = missing.iter().map(|&p| corpus.inventory().names()[p].as_str()).collect();
                let _ = writeln!(err, "warning: no latent frames for phonemes {}", names.join(", "));
            }
        }
        save_priors(&dir.join("priors.bin"), state.priors.as_ref().expect("priors were just estimated"))?;
        let log = dir.join("stage2_log.csv");
        train_with_log(&mut state, &corpus, &cfg, 2, cfg.iterations_stage2, &log)?;
        logs.push(log);
        save_state(&dir.join("stage2.ckpt"), &state)?;
        say(out, format_args!("stage 2 done: {} iterations", state.iteration));
    }
    write_file(&dir.join("loss.svg"), loss_chart(&logs)?.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct ConversionEntry {
    id: String,
    source: String,
    target: String,
    feature_file: PathBuf,
}

pub fn cmd_convert(a: &ConvertArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let lookup = |name: &Option<String>| -> Result<Option<usize>> {
        match name {
            None => Ok(None),
            Some(n) => corpus
                .domain_by_name(n)
                .map(|d| Some(d.code))
                .ok_or_else(|| Error::Usage(format!("unknown speaker {n:?}"))),
        }
    };
    let (src, tgt) = (lookup(&a.source)?, lookup(&a.target)?);
    let state = load_state(&a.checkpoint)?;
    let mut entries = Vec::new();
    for u in corpus.utterances() {
        if src.is_some_and(|s| s != u.domain) {
            continue;
        }
        for t in corpus.domains() {
            let wanted = match tgt {
                Some(code) => code == t.code,
                None => t.code != u.domain,
            };
            if !wanted {
                continue;
            }
            let s = &corpus.domains()[u.domain];
            let converted = convert_utterance(&state.model.g, &u.features, s, t)?;
            let file = PathBuf::from("converted").join(format!("{}_to_{}.vcf", u.id, t.name));
            write_features(&a.out.join(&file), &converted)?;
            entries.push(ConversionEntry { id: u.id.clone(), source: s.name.clone(), target: t.name.clone(), feature_file: file });
        }
    }
    write_json(&a.out.join("conversions.json"), &entries)?;
    say(out, format_args!("converted {} utterance pairs", entries.len()));
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let state = load_state(&a.checkpoint)?;
    let priors: PriorSet = match &a.priors {
        Some(p) => load_priors(p)?,
        None => state
            .priors
            .clone()
            .ok_or_else(|| Error::Usage("checkpoint has no prior set; pass --priors".into()))?,
    };
    let report = evaluate(&state.model, &priors, &corpus)?;
    let (latents, labels) = encode_corpus(&state.model.g, &corpus)?;
    let scatter = latent_scatter(&latents, &labels, corpus.inventory().names());
    write_eval_outputs(&a.out, &report, corpus.inventory().names(), Some(&scatter))?;
    say(out, format_args!("nearest-Gaussian accuracy {:.4}", report.nearest_gaussian_accuracy));
    say(out, format_args!("mean Mahalanobis {:.4}", report.mean_mahalanobis));
    say(out, format_args!("MCD {:.4} dB", report.mcd));
    say(out, format_args!("domain accuracy {:.4}", report.domain_accuracy));
    if let Some(b) = &a.baseline {
        let base = load_state(b)?;
        let paired = PairedReport::new(evaluate(&base.model, &priors, &corpus)?, report);
        write_paired_outputs(&a.out, &paired)?;
        say(out, format_args!("accuracy change vs baseline {:+.4}", paired.delta.nearest_gaussian_accuracy));
    }
    Ok(())
}
