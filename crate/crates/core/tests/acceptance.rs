//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xdlm_core::bench::{run_bench, CountingAllocator, Implementation};
use xdlm_core::config::RunConfig;
use xdlm_core::corpus::{pack, read_corpus, CharVocab};
use xdlm_core::denoiser::{
    batch_loss_on_draw, draw_batch, init_model, sgd_step, smoothed_ratio, train, TrainConfig,
};
use xdlm_core::sampler::{ancestral_sample, confidence_generate, GenSchedule};
use xdlm_core::verify::{
    gradient_suite, kl_suite, limit_suite, mdlm_suite, posterior_suite, udlm_suite, SuiteResult,
};
use xdlm_core::{
    Denoiser, MixedKernel, ScalarContext, Schedule, TokenSeq, ToyDenoiser, TransitionTag,
};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

const SEED: u64 = 20_240_601;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed_suite(suite: SuiteResult, elapsed: Duration, limit: Option<Duration>) -> Outcome {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let note = suite
        .note
        .as_deref()
        .map(|n| format!(", {n}"))
        .unwrap_or_default();
    outcome(
        suite.passed && in_time,
        format!(
            "{} instances, max error {:.3e} (tolerance {:.0e}), {:.2?}{note}",
            suite.instances, suite.max_error, suite.tolerance, elapsed
        ),
    )
}

fn run_suite(f: impl FnOnce() -> SuiteResult, limit: Option<Duration>) -> Outcome {
    let start = Instant::now();
    let suite = f();
    timed_suite(suite, start.elapsed(), limit)
}

/// The shipped demo run, shared by the training and sampling criteria.
struct Demo {
    config: TrainConfig,
    vocab: CharVocab,
    corpus: Vec<TokenSeq>,
    model: Option<ToyDenoiser>,
}

fn load_demo() -> Demo {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../demo/demo.toml");
    let run = RunConfig::load(&path).expect("demo config");
    let text = read_corpus(&run.train.corpus).expect("demo corpus");
    let vocab = CharVocab::build(&text).expect("vocabulary");
    let config = run.train_config();
    let corpus = pack(&text, &vocab, config.seq_len).expect("packing");
    Demo {
        config,
        vocab,
        corpus,
        model: None,
    }
}

/// Reference masked-diffusion trainer: weighted cross-entropy on masked
/// positions, differentiated directly through the softmax.
fn mdlm_step(
    model: &mut ToyDenoiser,
    schedule: &Schedule,
    x0: &[TokenSeq],
    times: &[f64],
    noisy: &[TokenSeq],
    lr: f64,
) -> f64 {
    let (n, mask) = (model.vocab_size(), model.mask_id());
    let positions: usize = x0.iter().map(TokenSeq::len).sum();
    let mut grads = model.zero_grads();
    let mut loss = 0.0;
    for ((x, z), &t) in x0.iter().zip(noisy).zip(times) {
        let cache = model.forward(z, t);
        let weight = -schedule.alpha_prime(t) / (1.0 - schedule.alpha(t));
        let mut dlogits = vec![0.0; z.len() * n];
        for (i, (&xi, &zi)) in x.ids().iter().zip(z.ids()).enumerate() {
            if zi != mask {
                continue;
            }
            let q = cache.probs_at(i, n);
            loss -= weight * q[xi].ln();
            for j in 0..n {
                if j != mask {
                    let target = if j == xi { 1.0 } else { 0.0 };
                    dlogits[i * n + j] = weight * (q[j] - target) / positions as f64;
                }
            }
        }
        model.backward_logits(&cache, &dlogits, &mut grads);
    }
    model.params.add_scaled(&grads, -lr);
    loss / positions as f64
}

fn max_param_diff(a: &ToyDenoiser, b: &ToyDenoiser) -> f64 {
    a.params
        .tensors()
        .iter()
        .zip(b.params.tensors())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Runs the scalar-loss trainer and the reference trainer side by side at
/// `k = 0` on identical draws, then checks that `train` lands on the same model.
fn mdlm_agreement(demo: &Demo, steps: usize) -> Result<(f64, f64, ToyDenoiser), String> {
    let config = TrainConfig {
        k: 0.0,
        steps,
        ..demo.config.clone()
    };
    let (n, mask) = (demo.vocab.vocab_size(), demo.vocab.mask_id());
    let ctx = config.context(n, mask).map_err(|e| e.to_string())?;
    let mut ours = init_model(&config, n, mask).map_err(|e| e.to_string())?;
    let mut reference = ours.clone();
    let mut velocity = ours.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut worst_param, mut worst_loss) = (0.0f64, 0.0f64);
    for _ in 0..steps {
        let batch: Vec<TokenSeq> = (0..config.batch)
            .map(|_| demo.corpus[rng.random_range(0..demo.corpus.len())].clone())
            .collect();
        let draw =
            draw_batch(&ctx, &batch, config.t_sampling, &mut rng).map_err(|e| e.to_string())?;
        let out = batch_loss_on_draw(&ours, &ctx, &batch, &draw).map_err(|e| e.to_string())?;
        sgd_step(&mut ours, &out.grads, &mut velocity, config.lr, 0.0);
        let ref_loss = mdlm_step(
            &mut reference,
            &ctx.schedule,
            &batch,
            &draw.times,
            &draw.noisy,
            config.lr,
        );
        worst_loss = worst_loss.max((out.loss - ref_loss).abs());
        worst_param = worst_param.max(max_param_diff(&ours, &reference));
    }
    let trained = train(&config, n, mask, &demo.corpus).map_err(|e| e.to_string())?;
    worst_param = worst_param.max(max_param_diff(&trained.model, &reference));
    Ok((worst_param, worst_loss, trained.model))
}

fn criterion_7(demo: &mut Demo, k0_model: &mut Option<ToyDenoiser>) -> Outcome {
    let n = demo.vocab.vocab_size();
    let start = Instant::now();
    let trained = match train(&demo.config, n, demo.vocab.mask_id(), &demo.corpus) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let elapsed = start.elapsed();
    let ratio = smoothed_ratio(&trained.history, 10).unwrap_or(f64::INFINITY);
    let min_loss = trained
        .history
        .iter()
        .map(|h| h.loss)
        .fold(f64::INFINITY, f64::min);
    demo.model = Some(trained.model);

    let demo_ok = demo.config.k == 0.1
        && n <= 64
        && demo.config.seq_len == 64
        && demo.config.steps == 2000
        && ratio <= 0.5
        && min_loss >= -1e-6
        && elapsed <= Duration::from_secs(600);
    let (agree_ok, agree) = match mdlm_agreement(demo, 50) {
        Ok((param, loss, model)) => {
            *k0_model = Some(model);
            (param <= 1e-9 && loss <= 1e-9, format!("k=0 vs reference trainer over 50 steps: max param diff {param:.2e}, max loss diff {loss:.2e}"))
        }
        Err(e) => (false, format!("k=0 comparison failed: {e}")),
    };
    outcome(
        demo_ok && agree_ok,
        format!(
            "N={n}, 2000 steps in {elapsed:.1?}, smoothed loss ratio {ratio:.4} (<= 0.5); {agree}"
        ),
    )
}

fn criterion_8(demo: &Demo, k0_model: Option<&ToyDenoiser>) -> Outcome {
    let (Some(model), Some(k0)) = (demo.model.as_ref(), k0_model) else {
        return outcome(false, "no trained models available");
    };
    let (n, seq_len) = (demo.vocab.vocab_size(), demo.config.seq_len);
    let ctx0 = ScalarContext::new(
        MixedKernel::new(n, demo.vocab.mask_id(), 0.0).unwrap(),
        Schedule::linear(),
    );
    let ctx1 = ScalarContext::new(
        MixedKernel::new(n, demo.vocab.mask_id(), 0.1).unwrap(),
        Schedule::linear(),
    );
    let (mut k0_remask, mut k0_refine, mut k1_with_remask) = (0, 0, 0);
    for seed in 0..100 {
        match ancestral_sample(&ctx0, k0, seq_len, 32, SEED + seed, None) {
            Ok((_, trace)) => {
                k0_remask += trace.count(TransitionTag::Remask);
                k0_refine += trace.count(TransitionTag::UniformRefine);
            }
            Err(e) => return outcome(false, format!("k=0 sampling failed: {e}")),
        }
        match ancestral_sample(&ctx1, model, seq_len, 32, SEED + seed, None) {
            Ok((_, trace)) => k1_with_remask += usize::from(trace.contains(TransitionTag::Remask)),
            Err(e) => return outcome(false, format!("k=0.1 sampling failed: {e}")),
        }
    }
    outcome(
        k0_remask == 0 && k0_refine == 0 && k1_with_remask >= 95,
        format!(
            "k=0: {k0_remask} REMASK, {k0_refine} UNIFORM_REFINE over 100 traces; k=0.1: {k1_with_remask}/100 traces with REMASK (>= 95)"
        ),
    )
}

/// Random schedule: absorb counts are a random composition of `seq_len`.
fn random_schedule(rng: &mut ChaCha8Rng, seq_len: usize, steps: usize) -> GenSchedule {
    let mut absorb = vec![0; steps];
    for _ in 0..seq_len {
        absorb[rng.random_range(0..steps)] += 1;
    }
    let uniform = (0..steps).map(|_| rng.random_range(0..=8)).collect();
    GenSchedule::new(absorb, uniform, seq_len).expect("valid schedule")
}

fn criterion_9(demo: &Demo) -> Outcome {
    let Some(model) = demo.model.as_ref() else {
        return outcome(false, "no trained model available");
    };
    let (seq_len, mask) = (demo.config.seq_len, demo.vocab.mask_id());
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut schedules = Vec::new();
    for steps in [1, 2, 7, 32, 64] {
        schedules.push(GenSchedule::even(seq_len, steps, 0.1).unwrap());
        let uniform = vec![4; steps];
        schedules.push(
            GenSchedule::new(
                GenSchedule::even(seq_len, steps, 0.0).unwrap().topk_absorb,
                uniform,
                seq_len,
            )
            .unwrap(),
        );
    }
    for _ in 0..10 {
        let steps = rng.random_range(1..=64);
        schedules.push(random_schedule(&mut rng, seq_len, steps));
    }
    let prompt = TokenSeq::new(demo.corpus[0].ids()[..8].to_vec());

    let (mut runs, mut leftover_masks, mut audited, mut violations, mut k0_refines) =
        (0, 0, 0, 0, 0);
    for (i, gen) in schedules.iter().enumerate() {
        for (k, prompt) in [(0.1, None), (0.1, Some(&prompt)), (0.0, None)] {
            let g = match confidence_generate(model, gen, seq_len, k, SEED + i as u64, prompt) {
                Ok(g) => g,
                Err(e) => return outcome(false, format!("generation failed: {e}")),
            };
            runs += 1;
            leftover_masks += g.tokens.count(mask);
            if k == 0.0 {
                k0_refines += g.refinements.len() + g.trace.count(TransitionTag::UniformRefine);
                continue;
            }
            // replay the trace and recompute both confidences from the model
            let mut state = vec![mask; seq_len];
            if let Some(p) = prompt {
                state[..p.len()].copy_from_slice(p.ids());
            }
            for step in &g.trace.steps {
                let preds = model.predict(&TokenSeq::new(state.clone()), step.t);
                for e in &step.events {
                    if e.tag == TransitionTag::UniformRefine {
                        audited += 1;
                        let p = preds[e.pos].probs();
                        if p[e.to] < p[e.from] {
                            violations += 1;
                        }
                    }
                }
                for e in &step.events {
                    state[e.pos] = e.to;
                }
            }
            violations += g
                .refinements
                .iter()
                .filter(|r| r.pred_confidence < r.current_confidence)
                .count();
            if g.refinements.len() != g.trace.count(TransitionTag::UniformRefine) {
                violations += 1;
            }
        }
    }
    outcome(
        leftover_masks == 0 && violations == 0 && k0_refines == 0 && audited > 0,
        format!(
            "{runs} generations over {} schedules: {leftover_masks} masks left, {audited} refine overwrites audited with {violations} violations, {k0_refines} refines at k=0",
            schedules.len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let report = match run_bench(&[64, 256, 1024], 32, 5, SEED) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("benchmark failed: {e}")),
    };
    if !report.gate_passed {
        return outcome(
            false,
            format!(
                "correctness gate failed (posterior {:.2e}, KL {:.2e})",
                report.gate_max_posterior_error, report.gate_max_kl_error
            ),
        );
    }
    let ratio = report.time_ratio(1024).unwrap_or(f64::INFINITY);
    let scalar = report
        .allocation_slope(Implementation::Scalar)
        .unwrap_or(f64::NAN);
    let oracle = report
        .allocation_slope(Implementation::Oracle)
        .unwrap_or(f64::NAN);
    outcome(
        report.allocator_instrumented
            && ratio <= 0.5
            && (scalar - 1.0).abs() <= 0.3
            && (oracle - 2.0).abs() <= 0.3,
        format!(
            "time ratio scalar/oracle at N=1024 {ratio:.2e} (<= 0.5); allocation slopes scalar {scalar:.3}, oracle {oracle:.3}"
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status}  {name}: {}", o.detail);
        results.push((id, name, o));
    };

    record(
        1,
        "scalar posterior matches dense oracle",
        guarded(|| {
            run_suite(
                || posterior_suite(SEED, 1000),
                Some(Duration::from_secs(30)),
            )
        }),
    );
    record(
        2,
        "scalar KL matches direct summation, KL >= -1e-9",
        guarded(|| run_suite(|| kl_suite(SEED + 1, 1000), None)),
    );
    record(
        3,
        "k=0 reduces to masked cross-entropy",
        guarded(|| run_suite(|| mdlm_suite(SEED + 2, 200), None)),
    );
    record(
        4,
        "k=1 limit matches the uniform closed form",
        guarded(|| run_suite(|| udlm_suite(SEED + 3, 200, None), None)),
    );
    record(
        5,
        "h_exact converges to h_limit at first order",
        guarded(|| run_suite(|| limit_suite(SEED + 4, 50, None), None)),
    );
    record(
        6,
        "analytic gradients match central differences",
        guarded(|| run_suite(|| gradient_suite(SEED + 5), Some(Duration::from_secs(60)))),
    );

    let mut demo = load_demo();
    let mut k0_model = None;
    record(
        7,
        "demo training halves the loss; k=0 matches reference trainer",
        guarded(|| criterion_7(&mut demo, &mut k0_model)),
    );
    record(
        8,
        "ancestral sampling remask dynamics",
        guarded(|| criterion_8(&demo, k0_model.as_ref())),
    );
    record(
        9,
        "confidence decoding contract",
        guarded(|| criterion_9(&demo)),
    );
    record(
        10,
        "scalar path is faster and allocates O(N)",
        guarded(criterion_10),
    );

    let failed: Vec<u32> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0)
        .collect();
    println!(
        "{} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
