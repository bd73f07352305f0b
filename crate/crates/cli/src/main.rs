use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use xdlm_core::bench::{run_bench, CountingAllocator, Implementation};
use xdlm_core::config::{RunConfig, SampleMode};
use xdlm_core::corpus::{pack, read_corpus, CharVocab};
use xdlm_core::denoiser::{
    read_checkpoint, smoothed_ratio, train, write_checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
use xdlm_core::sampler::{ancestral_sample, confidence_generate, eval_generation, GenSchedule};
use xdlm_core::verify::{run_all, Fault};
use xdlm_core::{Denoiser, MixedKernel, ScalarContext, Schedule, TokenSeq, TransitionTag};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

/// Smoothing window, in history entries, for the loss ratio.
const SMOOTH_WINDOW: usize = 10;

#[derive(Parser)]
#[command(
    name = "xdlm",
    version,
    about = "Mixed uniform/absorbing discrete diffusion toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the scalar path against the dense oracle and closed forms.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long)]
        json: bool,
        /// Deliberately break one primitive to check that the suites notice.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Train the toy denoiser from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Generate samples from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Supplies `[sample]` defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Number of reverse steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Time scalar and oracle posterior + KL evaluation.
    Bench {
        /// Vocabulary sizes.
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SignFlip,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ancestral,
    Confidence,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify {
            seed,
            trials,
            json,
            inject_fault,
        } => cmd_verify(seed, trials as usize, json, inject_fault),
        Command::Train {
            config,
            out,
            seed,
            steps,
            json,
        } => cmd_train(&config, &out, seed, steps, json).map(|()| true),
        Command::Sample {
            checkpoint,
            config,
            mode,
            steps,
            n,
            seed,
            out,
            json,
        } => {
            let args = SampleArgs {
                mode,
                steps,
                n,
                seed,
            };
            cmd_sample(&checkpoint, config.as_deref(), args, &out, json).map(|()| true)
        }
        Command::Bench {
            n,
            batch,
            reps,
            seed,
            out,
            json,
        } => cmd_bench(&n, batch, reps, seed, out.as_deref(), json),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_verify(seed: u64, trials: usize, json: bool, fault: Option<FaultArg>) -> Result<bool> {
    let fault = fault.map(|FaultArg::SignFlip| Fault::FlipHLimitSign);
    let report = run_all(seed, trials, fault);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for s in &report.suites {
            let status = if s.passed { "PASS" } else { "FAIL" };
            print!(
                "{status} {:<10} instances={:<5} max_error={:.3e} tolerance={:.1e}",
                s.name, s.instances, s.max_error, s.tolerance
            );
            match &s.note {
                Some(note) => println!("  ({note})"),
                None => println!(),
            }
        }
    }
    if !report.passed() {
        eprintln!("verify failed: {}", report.failed_suites().join(", "));
    }
    Ok(report.passed())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    json: bool,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let mut tc = config.train_config();
    if let Some(seed) = seed {
        tc.seed = seed;
    }
    if let Some(steps) = steps {
        tc.steps = steps;
    }
    let text = read_corpus(&config.train.corpus)?;
    let vocab = CharVocab::build(&text)?;
    let seqs = pack(&text, &vocab, tc.seq_len)?;
    if seqs.is_empty() {
        bail!(
            "corpus {} is shorter than one sequence of length {}",
            config.train.corpus.display(),
            tc.seq_len
        );
    }

    let outcome = train(&tc, vocab.vocab_size(), vocab.mask_id(), &seqs)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join("model.bin");
    write_checkpoint(&ckpt, &outcome.model)?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        train: tc.clone(),
        mask_id: vocab.mask_id(),
        chars: vocab.chars().iter().collect(),
        param_count: outcome.model.param_count(),
        history: outcome.history.clone(),
        corpus: Some(fs::canonicalize(&config.train.corpus)?),
    };
    meta.write(&ckpt.with_extension("json"))?;
    write_json(&out.join("history.json"), &outcome.history)?;
    fs::write(out.join("vocab.json"), vocab.to_json()?)?;

    let ratio = smoothed_ratio(&outcome.history, SMOOTH_WINDOW);
    let summary = json!({
        "checkpoint": ckpt,
        "steps": tc.steps,
        "vocab_size": vocab.vocab_size(),
        "param_count": meta.param_count,
        "sequences": seqs.len(),
        "final_loss": outcome.history.last().map(|h| h.loss),
        "smoothed_loss_ratio": ratio,
    });
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        println!(
            "trained {} steps on {} sequences (N = {}, {} parameters)",
            tc.steps,
            seqs.len(),
            vocab.vocab_size(),
            meta.param_count
        );
        if let Some(r) = ratio {
            println!("smoothed loss ratio final/initial = {r:.4}");
        }
        println!("checkpoint written to {}", ckpt.display());
    }
    Ok(())
}

struct SampleArgs {
    mode: Option<ModeArg>,
    steps: Option<usize>,
    n: Option<usize>,
    seed: Option<u64>,
}

fn cmd_sample(
    checkpoint: &Path,
    config: Option<&Path>,
    args: SampleArgs,
    out: &Path,
    json: bool,
) -> Result<()> {
    let model = read_checkpoint(checkpoint)?;
    let meta_path = checkpoint.with_extension("json");
    let meta = CheckpointMeta::read(&meta_path)
        .with_context(|| format!("reading sidecar {}", meta_path.display()))?;
    let vocab = CharVocab::build(&meta.chars)?;
    if vocab.vocab_size() != model.vocab_size() || meta.mask_id != model.mask_id() {
        bail!("checkpoint and sidecar disagree on the vocabulary");
    }

    let defaults = config.map(RunConfig::load).transpose()?.map(|c| c.sample);
    let mode = match (args.mode, &defaults) {
        (Some(ModeArg::Ancestral), _) => SampleMode::Ancestral,
        (Some(ModeArg::Confidence), _) => SampleMode::Confidence,
        (None, Some(d)) => d.mode,
        (None, None) => SampleMode::Ancestral,
    };
    let steps = args
        .steps
        .or(defaults.as_ref().map(|d| d.steps))
        .unwrap_or(32);
    let n = args.n.or(defaults.as_ref().map(|d| d.n)).unwrap_or(16);
    let seed = args.seed.or(defaults.as_ref().map(|d| d.seed)).unwrap_or(0);
    if steps == 0 || n == 0 {
        bail!("--steps and --n must be at least 1");
    }

    let k = meta.train.k;
    let seq_len = meta.train.seq_len;
    let kernel = MixedKernel::new(model.vocab_size(), model.mask_id(), k)?;
    let ctx = ScalarContext::new(
        kernel,
        Schedule {
            kind: meta.train.schedule,
        },
    );
    let gen = GenSchedule::even(seq_len, steps, k)?;

    let trace_dir = out.join("traces");
    fs::create_dir_all(&trace_dir).with_context(|| format!("creating {}", trace_dir.display()))?;
    let mut samples: Vec<TokenSeq> = Vec::with_capacity(n);
    let mut with_remask = 0;
    let mut refines = 0;
    for i in 0..n {
        let sample_seed = seed.wrapping_add(i as u64);
        let (tokens, trace) = match mode {
            SampleMode::Ancestral => {
                ancestral_sample(&ctx, &model, seq_len, steps, sample_seed, None)?
            }
            SampleMode::Confidence => {
                let g = confidence_generate(&model, &gen, seq_len, k, sample_seed, None)?;
                (g.tokens, g.trace)
            }
        };
        with_remask += usize::from(trace.contains(TransitionTag::Remask));
        refines += trace.count(TransitionTag::UniformRefine);
        let path = trace_dir.join(format!("sample_{i:04}.jsonl"));
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        trace.write_jsonl(std::io::BufWriter::new(file))?;
        samples.push(tokens);
    }

    let mut text = String::new();
    for s in &samples {
        text += &vocab.detokenize(s.ids())?;
        text.push('\n');
    }
    fs::write(out.join("samples.txt"), text)?;
    let ids: Vec<&[usize]> = samples.iter().map(TokenSeq::ids).collect();
    write_json(&out.join("samples.json"), &ids)?;

    let reference = match &meta.corpus {
        Some(path) if path.exists() => pack(&read_corpus(path)?, &vocab, seq_len)?,
        _ => Vec::new(),
    };
    let eval = eval_generation(&samples, &reference)?;
    let summary = json!({
        "mode": match mode { SampleMode::Ancestral => "ancestral", SampleMode::Confidence => "confidence" },
        "steps": steps,
        "n": n,
        "k": k,
        "traces_with_remask": with_remask,
        "uniform_refine_events": refines,
        "token_entropy": eval.token_entropy,
        "ngram_tv": if reference.is_empty() { None } else { Some(eval.ngram_tv) },
    });
    write_json(&out.join("summary.json"), &summary)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        println!("wrote {n} samples to {}", out.join("samples.txt").display());
        println!("traces with REMASK: {with_remask}/{n}; UNIFORM_REFINE events: {refines}");
        println!("token entropy {:.4} nats", eval.token_entropy);
        if !reference.is_empty() {
            println!("bigram TV vs training corpus {:.4}", eval.ngram_tv);
        }
    }
    Ok(())
}

fn cmd_bench(
    sizes: &[usize],
    batch: usize,
    reps: usize,
    seed: u64,
    out: Option<&Path>,
    json: bool,
) -> Result<bool> {
    let report = run_bench(sizes, batch, reps, seed)?;
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let summary = json!({
        "report": &report,
        "scalar_alloc_slope": report.allocation_slope(Implementation::Scalar),
        "oracle_alloc_slope": report.allocation_slope(Implementation::Oracle),
        "largest_n": largest,
        "time_ratio_at_largest_n": report.time_ratio(largest),
    });
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("bench.json"), &summary)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else if report.gate_passed {
        print!("{}", report.table());
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        println!(
            "allocation slope: scalar {}, oracle {}",
            fmt(report.allocation_slope(Implementation::Scalar)),
            fmt(report.allocation_slope(Implementation::Oracle))
        );
        let ratio = report
            .time_ratio(largest)
            .map_or("n/a".to_string(), |v| format!("{v:.3e}"));
        println!("scalar/oracle time at N = {largest}: {ratio}");
    }
    if !report.gate_passed {
        eprintln!(
            "correctness gate failed: posterior error {:.3e}, KL error {:.3e}",
            report.gate_max_posterior_error, report.gate_max_kl_error
        );
    }
    Ok(report.gate_passed)
}
