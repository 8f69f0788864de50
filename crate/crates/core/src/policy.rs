//! The toy autoregressive policy.
//!
//! The next-token distribution is `softmax((U·φ(prefix) + b) / T)` where
//! `φ(prefix)` is the mean embedding of every prefix token. Gradients are
//! computed analytically from a recorded forward pass ([`SequenceTape`]).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{TokenId, Vocab, EOS_ID};
use crate::seeds::{self, Stream};

pub const DEFAULT_DIM: usize = 16;
pub const INIT_SCALE: f64 = 0.1;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dim: usize,
    pub vocab_size: usize,
    /// Row-major `vocab_size × dim`.
    pub embeddings: Vec<f64>,
    /// Row-major `vocab_size × dim`.
    pub output: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self {
            dim,
            vocab_size,
            embeddings: vec![0.0; vocab_size * dim],
            output: vec![0.0; vocab_size * dim],
            bias: vec![0.0; vocab_size],
        }
    }

    /// Uniform(-0.1, 0.1) embeddings and output map, zero bias.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, Stream::Init, &[]);
        let mut p = Self::zeros(vocab_size, dim);
        for x in p.embeddings.iter_mut().chain(p.output.iter_mut()) {
            *x = rng.gen_range(-INIT_SCALE..INIT_SCALE);
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.embeddings.len() + self.output.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let vd = self.vocab_size * self.dim;
        if self.dim == 0 || self.vocab_size == 0 {
            return Err(Error::validation(
                "policy",
                "dim and vocab_size must be positive",
            ));
        }
        if self.embeddings.len() != vd
            || self.output.len() != vd
            || self.bias.len() != self.vocab_size
        {
            return Err(Error::validation(
                "policy",
                "tensor shapes do not match dim and vocab_size",
            ));
        }
        if !self.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("policy", "non-finite parameter"));
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.vocab_size != vocab.len() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint has vocab size {}, active vocab has {}",
                self.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.embeddings.iter().chain(&self.output).chain(&self.bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.embeddings
            .iter_mut()
            .chain(self.output.iter_mut())
            .chain(self.bias.iter_mut())
    }

    pub fn get(&self, i: usize) -> f64 {
        let n = self.embeddings.len();
        if i < n {
            self.embeddings[i]
        } else if i < 2 * n {
            self.output[i - n]
        } else {
            self.bias[i - 2 * n]
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let n = self.embeddings.len();
        if i < n {
            self.embeddings[i] = v;
        } else if i < 2 * n {
            self.output[i - n] = v;
        } else {
            self.bias[i - 2 * n] = v;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.iter_mut().for_each(|x| *x = v);
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    fn embedding(&self, t: TokenId) -> &[f64] {
        &self.embeddings[t * self.dim..(t + 1) * self.dim]
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.vocab_size) {
            Some(&t) => Err(Error::InvalidToken(t)),
            None => Ok(()),
        }
    }

    /// Logits for a context vector.
    fn logits_at(&self, phi: &[f64]) -> Vec<f64> {
        let d = self.dim;
        self.output
            .chunks_exact(d)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(phi).map(|(u, x)| u * x).sum::<f64>() + b)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let text = serde_json::to_string(&ck)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::validation(
                "checkpoint.format_version",
                format!("unsupported version {}", ck.format_version),
            ));
        }
        ck.params.validate()?;
        Ok(ck.params)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    #[serde(flatten)]
    params: PolicyParams,
}

/// Deep copy used as a frozen reference or old policy.
pub fn snapshot(params: &PolicyParams) -> PolicyParams {
    params.clone()
}

/// Running sum of prefix embeddings.
#[derive(Debug, Clone)]
struct Prefix {
    sum: Vec<f64>,
    count: usize,
}

impl Prefix {
    fn new(params: &PolicyParams, ids: &[TokenId]) -> Self {
        let mut p = Self {
            sum: vec![0.0; params.dim],
            count: 0,
        };
        for &t in ids {
            p.push(params, t);
        }
        p
    }

    fn push(&mut self, params: &PolicyParams, t: TokenId) {
        for (s, e) in self.sum.iter_mut().zip(params.embedding(t)) {
            *s += e;
        }
        self.count += 1;
    }

    fn phi(&self) -> Vec<f64> {
        let inv = 1.0 / self.count as f64;
        self.sum.iter().map(|s| s * inv).collect()
    }
}

pub fn next_token_logits(params: &PolicyParams, prefix: &[TokenId]) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::Empty("prefix"));
    }
    params.check_ids(prefix)?;
    Ok(params.logits_at(&Prefix::new(params, prefix).phi()))
}

/// Numerically stable `log_softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) * inv;
    let lse = logits
        .iter()
        .map(|z| (z * inv - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|z| z * inv - lse).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub group_size: usize,
    pub rng_seed: u64,
    /// Argmax decoding; recorded log-probabilities still use `temperature`.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            max_new_tokens: 16,
            group_size: 7,
            rng_seed: 0,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::validation(
                "temperature",
                "must be a positive finite number",
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::validation("max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub token_ids: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    /// Decoded text, end-of-sequence excluded.
    pub text: String,
    /// Ended with end-of-sequence rather than the length cap.
    pub terminated: bool,
}

/// Draws one completion continuing `prompt`.
fn sample_one(
    params: &PolicyParams,
    prompt: &Prefix,
    cfg: &SamplingConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<Completion> {
    let mut ctx = prompt.clone();
    let mut token_ids = Vec::with_capacity(cfg.max_new_tokens);
    let mut logprobs = Vec::with_capacity(cfg.max_new_tokens);
    let mut terminated = false;
    for _ in 0..cfg.max_new_tokens {
        let logits = params.logits_at(&ctx.phi());
        let lp = log_softmax(&logits, cfg.temperature);
        let tok = if cfg.greedy {
            argmax(&logits)
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        token_ids.push(tok);
        logprobs.push(lp[tok]);
        if tok == EOS_ID {
            terminated = true;
            break;
        }
        ctx.push(params, tok);
    }
    let body = if terminated {
        &token_ids[..token_ids.len() - 1]
    } else {
        &token_ids[..]
    };
    let text = vocab.detokenize(body)?;
    Ok(Completion {
        token_ids,
        logprobs,
        text,
        terminated,
    })
}

/// Samples `cfg.group_size` completions for one prompt, deterministically in
/// `cfg.rng_seed`.
pub fn sample_group(
    params: &PolicyParams,
    prompt_ids: &[TokenId],
    cfg: &SamplingConfig,
    vocab: &Vocab,
) -> Result<Vec<Completion>> {
    cfg.validate()?;
    if prompt_ids.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    params.check_ids(prompt_ids)?;
    let prompt = Prefix::new(params, prompt_ids);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    (0..cfg.group_size)
        .map(|_| sample_one(params, &prompt, cfg, vocab, &mut rng))
        .collect()
}

/// Per-token log-probabilities of `completion` after `prompt`.
pub fn sequence_logprob(
    params: &PolicyParams,
    prompt_ids: &[TokenId],
    completion_ids: &[TokenId],
    temperature: f64,
) -> Result<Vec<f64>> {
    Ok(SequenceTape::forward(params, prompt_ids, completion_ids, temperature)?.logprobs)
}

/// Same as [`sequence_logprob`], checked against an expected length.
pub fn sequence_logprob_checked(
    params: &PolicyParams,
    prompt_ids: &[TokenId],
    completion_ids: &[TokenId],
    temperature: f64,
    expected_len: usize,
) -> Result<Vec<f64>> {
    if completion_ids.len() != expected_len {
        return Err(Error::validation(
            "completion",
            format!(
                "length {} does not match {expected_len}",
                completion_ids.len()
            ),
        ));
    }
    sequence_logprob(params, prompt_ids, completion_ids, temperature)
}

/// Forward pass over one completion, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SequenceTape {
    temperature: f64,
    prompt_len: usize,
    phis: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    pub logprobs: Vec<f64>,
}

impl SequenceTape {
    pub fn forward(
        params: &PolicyParams,
        prompt_ids: &[TokenId],
        completion_ids: &[TokenId],
        temperature: f64,
    ) -> Result<Self> {
        if prompt_ids.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if !(temperature > 0.0) {
            return Err(Error::validation("temperature", "must be positive"));
        }
        params.check_ids(prompt_ids)?;
        params.check_ids(completion_ids)?;
        let mut ctx = Prefix::new(params, prompt_ids);
        let n = completion_ids.len();
        let mut tape = Self {
            temperature,
            prompt_len: prompt_ids.len(),
            phis: Vec::with_capacity(n),
            probs: Vec::with_capacity(n),
            logprobs: Vec::with_capacity(n),
        };
        for &tok in completion_ids {
            let phi = ctx.phi();
            let lp = log_softmax(&params.logits_at(&phi), temperature);
            tape.logprobs.push(lp[tok]);
            tape.probs.push(lp.iter().map(|l| l.exp()).collect());
            tape.phis.push(phi);
            ctx.push(params, tok);
        }
        Ok(tape)
    }

    /// Accumulates `Σ_t coeffs[t] · ∇ logπ(token_t)` into `grad`.
    pub fn backward(
        &self,
        params: &PolicyParams,
        prompt_ids: &[TokenId],
        completion_ids: &[TokenId],
        coeffs: &[f64],
        grad: &mut PolicyParams,
    ) {
        let d = params.dim;
        let n = completion_ids.len();
        debug_assert_eq!(coeffs.len(), n);
        // v[t] = Uᵀ g_t / m_t, the gradient reaching each prefix embedding
        let mut v = vec![vec![0.0; d]; n];
        let mut g = vec![0.0; params.vocab_size];
        for t in 0..n {
            let c = coeffs[t];
            if c == 0.0 {
                continue;
            }
            let scale = c / self.temperature;
            for (gk, p) in g.iter_mut().zip(&self.probs[t]) {
                *gk = -scale * p;
            }
            g[completion_ids[t]] += scale;
            let phi = &self.phis[t];
            let inv_m = 1.0 / (self.prompt_len + t) as f64;
            let vt = &mut v[t];
            for (k, &gk) in g.iter().enumerate() {
                grad.bias[k] += gk;
                let urow = &params.output[k * d..(k + 1) * d];
                let grow = &mut grad.output[k * d..(k + 1) * d];
                for j in 0..d {
                    grow[j] += gk * phi[j];
                    vt[j] += gk * urow[j] * inv_m;
                }
            }
        }
        // prompt tokens see every position, completion token i sees t > i
        let mut suffix = vec![0.0; d];
        for i in (0..n).rev() {
            let tok = completion_ids[i];
            let row = &mut grad.embeddings[tok * d..(tok + 1) * d];
            for j in 0..d {
                row[j] += suffix[j];
            }
            for j in 0..d {
                suffix[j] += v[i][j];
            }
        }
        for &tok in prompt_ids {
            let row = &mut grad.embeddings[tok * d..(tok + 1) * d];
            for j in 0..d {
                row[j] += suffix[j];
            }
        }
    }
}
