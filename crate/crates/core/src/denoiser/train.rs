use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::{Params, ToyDenoiser};
use crate::kernel::{corrupt_with, MixedKernel, Schedule, ScheduleKind, TokenSeq};
use crate::scalar::{ScalarContext, Simplex};
use crate::{Error, Result};

/// Training times are drawn from `[T_MIN, T_MAX]`, away from the endpoints where the loss weight diverges.
pub const T_MIN: f64 = 1e-3;
pub const T_MAX: f64 = 1.0 - 1e-3;

/// Number of optimizer steps averaged into one history entry.
pub const HISTORY_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    Uniform,
    /// Item `i` of a batch of `B` gets `t = (i + u) / B` for a shared `u ~ U(0, 1)`.
    #[default]
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub seq_len: usize,
    pub d_model: usize,
    pub seed: u64,
    #[serde(default)]
    pub t_sampling: TimeSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 0.1,
            schedule: ScheduleKind::Linear,
            steps: 2000,
            batch: 32,
            lr: 1e-2,
            momentum: 0.0,
            seq_len: 64,
            d_model: 64,
            seed: 0,
            t_sampling: TimeSampling::Stratified,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("train.{key}: {msg}")));
        if !(0.0..=1.0).contains(&self.k) {
            return bad("k", format!("must lie in [0, 1], got {}", self.k));
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len", "must be at least 1".into());
        }
        if self.d_model == 0 {
            return bad("d_model", "must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            );
        }
        Ok(())
    }

    pub fn context(&self, vocab_size: usize, mask_id: usize) -> Result<ScalarContext> {
        let kernel = MixedKernel::new(vocab_size, mask_id, self.k)?;
        Ok(ScalarContext::new(
            kernel,
            Schedule {
                kind: self.schedule,
            },
        ))
    }
}

/// The times and corrupted sequences for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraw {
    pub times: Vec<f64>,
    pub noisy: Vec<TokenSeq>,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean per-token loss over every position of the batch.
    pub loss: f64,
    pub grads: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyDenoiser,
    pub history: Vec<HistoryEntry>,
}

pub fn draw_batch<R: Rng + ?Sized>(
    ctx: &ScalarContext,
    x0: &[TokenSeq],
    sampling: TimeSampling,
    rng: &mut R,
) -> Result<BatchDraw> {
    let b = x0.len();
    let shared: f64 = rng.random();
    let times: Vec<f64> = (0..b)
        .map(|i| {
            let u = match sampling {
                TimeSampling::Stratified => (i as f64 + shared) / b as f64,
                TimeSampling::Uniform => rng.random(),
            };
            T_MIN + (T_MAX - T_MIN) * u
        })
        .collect();
    let noisy = x0
        .iter()
        .zip(&times)
        .map(|(x, &t)| corrupt_with(&ctx.kernel, &ctx.schedule, x, t, rng))
        .collect::<Result<_>>()?;
    Ok(BatchDraw { times, noisy })
}

/// Mean loss over all positions of a fixed draw, with its gradient.
pub fn batch_loss_on_draw(
    model: &ToyDenoiser,
    ctx: &ScalarContext,
    x0: &[TokenSeq],
    draw: &BatchDraw,
) -> Result<BatchLoss> {
    let n = ctx.kernel.vocab_size();
    let positions: usize = x0.iter().map(TokenSeq::len).sum();
    if positions == 0 {
        return Err(Error::Empty("training batch"));
    }
    let scale = 1.0 / positions as f64;
    let mut grads = model.zero_grads();
    let mut total = 0.0;
    let mut grad_tok = vec![0.0; n];

    for ((x, zt), &t) in x0.iter().zip(&draw.noisy).zip(&draw.times) {
        let cache = model.forward(zt, t);
        let mut dprobs = vec![0.0; zt.len() * n];
        for (i, (&xi, &zi)) in x.ids().iter().zip(zt.ids()).enumerate() {
            let pred = Simplex::from_normalized(cache.probs_at(i, n).to_vec());
            total += ctx.loss_term_with_grad(t, zi, xi, &pred, &mut grad_tok)?;
            for (d, g) in dprobs[i * n..(i + 1) * n].iter_mut().zip(&grad_tok) {
                *d = g * scale;
            }
        }
        model.probs_grad_to_logits(&cache, &mut dprobs);
        model.backward_logits(&cache, &dprobs, &mut grads);
    }
    Ok(BatchLoss {
        loss: total * scale,
        grads,
    })
}

/// Draws times and corruptions for `x0`, then evaluates the loss and gradient.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &ToyDenoiser,
    ctx: &ScalarContext,
    x0: &[TokenSeq],
    sampling: TimeSampling,
    rng: &mut R,
) -> Result<(BatchDraw, BatchLoss)> {
    let draw = draw_batch(ctx, x0, sampling, rng)?;
    let loss = batch_loss_on_draw(model, ctx, x0, &draw)?;
    Ok((draw, loss))
}

/// `v <- momentum v + g; theta <- theta - lr v`.
pub fn sgd_step(
    model: &mut ToyDenoiser,
    grads: &Params,
    velocity: &mut Params,
    lr: f64,
    momentum: f64,
) {
    for (v, g) in velocity.tensors_mut().into_iter().zip(grads.tensors()) {
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = momentum * *vi + gi;
        }
    }
    model.params.add_scaled(velocity, -lr);
}

/// The model [`train`] starts from.
pub fn init_model(config: &TrainConfig, vocab_size: usize, mask_id: usize) -> Result<ToyDenoiser> {
    ToyDenoiser::new(
        vocab_size,
        mask_id,
        config.d_model,
        config.seq_len,
        config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
    )
}

/// Runs SGD on `corpus` for `config.steps` steps.
///
/// Batches are drawn with replacement. One history entry is recorded per
/// ten steps, holding the mean loss of those steps.
pub fn train(
    config: &TrainConfig,
    vocab_size: usize,
    mask_id: usize,
    corpus: &[TokenSeq],
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    for seq in corpus {
        seq.validate(vocab_size)?;
        if seq.len() != config.seq_len {
            return Err(Error::Domain(format!(
                "corpus sequence of length {} does not match seq_len {}",
                seq.len(),
                config.seq_len
            )));
        }
    }
    let ctx = config.context(vocab_size, mask_id)?;
    let mut model = init_model(config, vocab_size, mask_id)?;
    let mut velocity = model.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.steps / HISTORY_EVERY);
    let mut window = 0.0;
    let mut batch = Vec::with_capacity(config.batch);

    for step in 1..=config.steps {
        batch.clear();
        batch.extend((0..config.batch).map(|_| corpus[rng.random_range(0..corpus.len())].clone()));
        let (_, out) = batch_loss(&model, &ctx, &batch, config.t_sampling, &mut rng)?;
        sgd_step(
            &mut model,
            &out.grads,
            &mut velocity,
            config.lr,
            config.momentum,
        );
        window += out.loss;
        if step % HISTORY_EVERY == 0 {
            history.push(HistoryEntry {
                step,
                loss: window / HISTORY_EVERY as f64,
            });
            window = 0.0;
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Mean of the last `window` history entries over the mean of the first `window`.
pub fn smoothed_ratio(history: &[HistoryEntry], window: usize) -> Option<f64> {
    let w = window.min(history.len() / 2);
    if w == 0 {
        return None;
    }
    let mean = |h: &[HistoryEntry]| h.iter().map(|e| e.loss).sum::<f64>() / h.len() as f64;
    Some(mean(&history[history.len() - w..]) / mean(&history[..w]))
}
