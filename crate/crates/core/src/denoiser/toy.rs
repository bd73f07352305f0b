//! A per-position residual MLP denoiser with hand-written backpropagation.
//!
//! For position `i` with noisy token `z_i` at time `t`:
//!
//! ```text
//! h0     = tok[z_i] + pos[i] + t * time
//! hidden = h0 + tanh(h0 W1 + b1)
//! logits = hidden W2 + b2            (mask logit forced to -inf)
//! probs  = softmax(logits)
//! ```
//!
//! `W2` and `b2` start at zero, so a fresh model predicts the uniform
//! distribution over the non-mask tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Denoiser;
use crate::kernel::TokenSeq;
use crate::scalar::Simplex;
use crate::{Error, Result};

/// Parameter tensors, in checkpoint order. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `N x d`
    pub tok_emb: Vec<f64>,
    /// `L x d`
    pub pos_emb: Vec<f64>,
    /// `d`
    pub time_emb: Vec<f64>,
    /// `d x d`, row-major (input, output)
    pub w_hidden: Vec<f64>,
    /// `d`
    pub b_hidden: Vec<f64>,
    /// `d x N`, row-major (input, output)
    pub w_out: Vec<f64>,
    /// `N`
    pub b_out: Vec<f64>,
}

impl Params {
    pub const NAMES: [&'static str; 7] = [
        "tok_emb", "pos_emb", "time_emb", "w_hidden", "b_hidden", "w_out", "b_out",
    ];

    pub fn zeros(vocab_size: usize, d_model: usize, max_len: usize) -> Self {
        Self {
            tok_emb: vec![0.0; vocab_size * d_model],
            pos_emb: vec![0.0; max_len * d_model],
            time_emb: vec![0.0; d_model],
            w_hidden: vec![0.0; d_model * d_model],
            b_hidden: vec![0.0; d_model],
            w_out: vec![0.0; d_model * vocab_size],
            b_out: vec![0.0; vocab_size],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.tok_emb,
            &self.pos_emb,
            &self.time_emb,
            &self.w_hidden,
            &self.b_hidden,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.time_emb,
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Activations kept from [`ToyDenoiser::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<usize>,
    pub t: f64,
    /// `L x d`
    h0: Vec<f64>,
    /// `L x d`, `tanh(h0 W1 + b1)`
    act: Vec<f64>,
    /// `L x d`
    hidden: Vec<f64>,
    /// `L x N`
    pub probs: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn probs_at(&self, pos: usize, vocab_size: usize) -> &[f64] {
        &self.probs[pos * vocab_size..(pos + 1) * vocab_size]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    vocab_size: usize,
    mask_id: usize,
    d_model: usize,
    max_len: usize,
    pub params: Params,
}

impl ToyDenoiser {
    /// Random embeddings and hidden layer; zero output projection.
    pub fn new(
        vocab_size: usize,
        mask_id: usize,
        d_model: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeroed(vocab_size, mask_id, d_model, max_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_scale = 1.0;
        let w_scale = 1.0 / (d_model as f64).sqrt();
        let p = &mut model.params;
        for v in p
            .tok_emb
            .iter_mut()
            .chain(p.pos_emb.iter_mut())
            .chain(p.time_emb.iter_mut())
        {
            *v = rng.random_range(-emb_scale..emb_scale);
        }
        for v in p.w_hidden.iter_mut() {
            *v = rng.random_range(-w_scale..w_scale);
        }
        Ok(model)
    }

    pub fn zeroed(
        vocab_size: usize,
        mask_id: usize,
        d_model: usize,
        max_len: usize,
    ) -> Result<Self> {
        if vocab_size < 2 || mask_id >= vocab_size {
            return Err(Error::Domain(format!(
                "invalid vocabulary: N = {vocab_size}, mask id = {mask_id}"
            )));
        }
        if d_model == 0 || max_len == 0 {
            return Err(Error::Domain(
                "model width and length must be positive".into(),
            ));
        }
        Ok(Self {
            vocab_size,
            mask_id,
            d_model,
            max_len,
            params: Params::zeros(vocab_size, d_model, max_len),
        })
    }

    /// Wraps existing parameters, checking every tensor length.
    pub fn from_params(
        vocab_size: usize,
        mask_id: usize,
        d_model: usize,
        max_len: usize,
        params: Params,
    ) -> Result<Self> {
        let mut model = Self::zeroed(vocab_size, mask_id, d_model, max_len)?;
        for ((name, want), got) in Params::NAMES
            .iter()
            .zip(model.params.tensors())
            .zip(params.tensors())
        {
            if want.len() != got.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has {} values, expected {}",
                    got.len(),
                    want.len()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn zero_grads(&self) -> Params {
        Params::zeros(self.vocab_size, self.d_model, self.max_len)
    }

    /// Runs the network and keeps the activations.
    ///
    /// Panics if the sequence is longer than the position table or holds an out-of-range id.
    pub fn forward(&self, zt: &TokenSeq, t: f64) -> ForwardCache {
        let (n, d) = (self.vocab_size, self.d_model);
        let len = zt.len();
        assert!(
            len <= self.max_len,
            "sequence length {len} exceeds {}",
            self.max_len
        );
        let p = &self.params;
        let mut h0 = vec![0.0; len * d];
        let mut act = vec![0.0; len * d];
        let mut hidden = vec![0.0; len * d];
        let mut probs = vec![0.0; len * n];
        let mut pre = vec![0.0; d];

        for (i, &tok) in zt.ids().iter().enumerate() {
            assert!(tok < n, "token {tok} out of range");
            let h0_i = &mut h0[i * d..(i + 1) * d];
            let tok_row = &p.tok_emb[tok * d..(tok + 1) * d];
            let pos_row = &p.pos_emb[i * d..(i + 1) * d];
            for c in 0..d {
                h0_i[c] = tok_row[c] + pos_row[c] + t * p.time_emb[c];
            }

            pre.copy_from_slice(&p.b_hidden);
            for (r, &x) in h0_i.iter().enumerate() {
                let w_row = &p.w_hidden[r * d..(r + 1) * d];
                for (acc, &w) in pre.iter_mut().zip(w_row) {
                    *acc += x * w;
                }
            }
            let act_i = &mut act[i * d..(i + 1) * d];
            let hid_i = &mut hidden[i * d..(i + 1) * d];
            for c in 0..d {
                act_i[c] = pre[c].tanh();
                hid_i[c] = h0_i[c] + act_i[c];
            }

            let logits = &mut probs[i * n..(i + 1) * n];
            logits.copy_from_slice(&p.b_out);
            for (r, &x) in hid_i.iter().enumerate() {
                let w_row = &p.w_out[r * n..(r + 1) * n];
                for (acc, &w) in logits.iter_mut().zip(w_row) {
                    *acc += x * w;
                }
            }
            softmax_without(logits, self.mask_id);
        }

        ForwardCache {
            tokens: zt.0.clone(),
            t,
            h0,
            act,
            hidden,
            probs,
        }
    }

    /// Converts a gradient on the output probabilities into one on the logits, in place.
    pub fn probs_grad_to_logits(&self, cache: &ForwardCache, dprobs: &mut [f64]) {
        let n = self.vocab_size;
        for (i, g) in dprobs.chunks_exact_mut(n).enumerate() {
            let q = cache.probs_at(i, n);
            let dot: f64 = q.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for (gj, &qj) in g.iter_mut().zip(q) {
                *gj = qj * (*gj - dot);
            }
            g[self.mask_id] = 0.0;
        }
    }

    /// Accumulates parameter gradients given `dL/dlogits` (`L x N`).
    pub fn backward_logits(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut Params) {
        let (n, d) = (self.vocab_size, self.d_model);
        let p = &self.params;
        let mut dhidden = vec![0.0; d];
        let mut dpre = vec![0.0; d];
        let mut dh0 = vec![0.0; d];

        for (i, &tok) in cache.tokens.iter().enumerate() {
            let dl = &dlogits[i * n..(i + 1) * n];
            if dl.iter().all(|&g| g == 0.0) {
                continue;
            }
            let hid_i = &cache.hidden[i * d..(i + 1) * d];
            for (j, &g) in dl.iter().enumerate() {
                grads.b_out[j] += g;
            }
            for r in 0..d {
                let w_row = &p.w_out[r * n..(r + 1) * n];
                let gw_row = &mut grads.w_out[r * n..(r + 1) * n];
                let x = hid_i[r];
                let mut acc = 0.0;
                for j in 0..n {
                    gw_row[j] += x * dl[j];
                    acc += w_row[j] * dl[j];
                }
                dhidden[r] = acc;
            }

            let act_i = &cache.act[i * d..(i + 1) * d];
            for c in 0..d {
                dpre[c] = dhidden[c] * (1.0 - act_i[c] * act_i[c]);
                grads.b_hidden[c] += dpre[c];
            }
            let h0_i = &cache.h0[i * d..(i + 1) * d];
            for r in 0..d {
                let w_row = &p.w_hidden[r * d..(r + 1) * d];
                let gw_row = &mut grads.w_hidden[r * d..(r + 1) * d];
                let x = h0_i[r];
                let mut acc = 0.0;
                for c in 0..d {
                    gw_row[c] += x * dpre[c];
                    acc += w_row[c] * dpre[c];
                }
                dh0[r] = dhidden[r] + acc;
            }

            for c in 0..d {
                grads.tok_emb[tok * d + c] += dh0[c];
                grads.pos_emb[i * d + c] += dh0[c];
                grads.time_emb[c] += cache.t * dh0[c];
            }
        }
    }
}

/// Softmax over all entries except `skip`, which is set to exactly 0.
fn softmax_without(logits: &mut [f64], skip: usize) {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, v) in logits.iter_mut().enumerate() {
        if j == skip {
            *v = 0.0;
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

impl Denoiser for ToyDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn mask_id(&self) -> usize {
        self.mask_id
    }

    fn predict(&self, zt: &TokenSeq, t: f64) -> Vec<Simplex> {
        let cache = self.forward(zt, t);
        cache
            .probs
            .chunks_exact(self.vocab_size)
            .map(|p| Simplex::from_normalized(p.to_vec()))
            .collect()
    }
}
