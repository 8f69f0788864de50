//! Group-relative advantages, the clipped GRPO objective with a k3 KL penalty,
//! the supervised baseline loss, optimizers and the training loops.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, IntentSchema, Split, Turn, NO_TOOL};
use crate::error::{Error, Result};
use crate::policy::{self, Completion, PolicyParams, SamplingConfig, SequenceTape};
use crate::prompting::{
    canonical_completion, render_instruction, PromptInstance, PromptVariant, TokenId, Vocab, EOS_ID,
};
use crate::rewards::{score_completion, RewardRecord, RewardWeights, Strictness};
use crate::seeds::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters of a GRPO run. Defaults are sized for the toy policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub temperature: f64,
    pub batch_prompts: usize,
    pub max_steps: usize,
    pub std_floor: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_new_tokens: usize,
    /// Optimizer updates per sampled batch; 1 keeps training strictly on-policy.
    pub inner_updates: usize,
    /// Re-snapshot the reference policy every N steps. `None` keeps the initial one.
    pub reference_refresh: Option<u64>,
    pub variant: PromptVariant,
    pub strictness: Strictness,
    pub weights: RewardWeights,
    pub seed: u64,
    /// Rollout threads. Results do not depend on it.
    pub threads: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 7,
            clip_epsilon: 0.2,
            kl_coeff: 0.01,
            learning_rate: 0.04,
            temperature: 0.9,
            batch_prompts: 64,
            max_steps: 300,
            std_floor: 1e-6,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_new_tokens: 16,
            inner_updates: 1,
            reference_refresh: None,
            variant: PromptVariant::WithThought,
            strictness: Strictness::Strict,
            weights: RewardWeights::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::validation("group_size", "must be at least 2"));
        }
        if !(self.clip_epsilon >= 0.0) {
            return Err(Error::validation("clip_epsilon", "must be >= 0"));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(Error::validation("kl_coeff", "must be >= 0"));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::validation("std_floor", "must be > 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "learning_rate",
                "must be finite and >= 0",
            ));
        }
        if self.batch_prompts == 0 {
            return Err(Error::validation("batch_prompts", "must be at least 1"));
        }
        if self.inner_updates == 0 {
            return Err(Error::validation("inner_updates", "must be at least 1"));
        }
        if self.threads == 0 {
            return Err(Error::validation("threads", "must be at least 1"));
        }
        self.weights.validate()?;
        self.sampling(0).validate()
    }

    pub fn sampling(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            group_size: self.group_size,
            rng_seed: seed,
            greedy: false,
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        Optimizer::new(
            self.optimizer,
            self.learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
        )
    }
}

// ---------------------------------------------------------------------------
// Advantages

pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `A_j = (r_j - mean) / max(std, floor)` with population std; a group whose
/// std does not exceed the floor gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::validation(
            "group_size",
            "advantages need at least 2 rewards",
        ));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::validation("rewards", "must be finite"));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let std = population_std(rewards);
    if std <= std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

// ---------------------------------------------------------------------------
// Loss

/// `x - 1 - ln x`, an unbiased non-negative KL estimator for `x = π_ref/π`.
pub fn k3(x: f64) -> f64 {
    x - 1.0 - x.ln()
}

/// One prompt's sampled group with its rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub sample_id: String,
    pub prompt_ids: Vec<TokenId>,
    pub completions: Vec<Completion>,
    pub rewards: Vec<RewardRecord>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    /// Log-probabilities recorded when the group was sampled.
    pub fn old_logprobs(&self, j: usize) -> &[f64] {
        &self.completions[j].logprobs
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: PolicyParams,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub tokens: usize,
}

struct GroupPartial {
    objective: f64,
    kl: f64,
    clipped: usize,
    grad: PolicyParams,
}

/// Per-token clipped surrogate `min(ρA, clip(ρ)A)` and its derivative in `log π`.
fn surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, unclipped, false)
    } else {
        (clipped, 0.0, true)
    }
}

/// GRPO loss over a batch of groups with exact gradients w.r.t. `live`.
///
/// `loss = -(1/N_tok) Σ [min(ρA, clip(ρ,1±ε)A) - β·k3(π_ref/π)]` where ρ is
/// the per-token ratio against the logprobs recorded at sampling time and A is
/// the completion's advantage broadcast over its tokens.
pub fn grpo_loss(
    live: &PolicyParams,
    reference: &PolicyParams,
    rollouts: &[GroupRollout],
    cfg: &GrpoConfig,
) -> Result<LossOutput> {
    let n_tok: usize = rollouts
        .iter()
        .flat_map(|g| &g.completions)
        .map(|c| c.token_ids.len())
        .sum();
    if n_tok == 0 {
        return Err(Error::Empty("rollout batch"));
    }
    let inv_n = 1.0 / n_tok as f64;
    let eps = cfg.clip_epsilon;
    let beta = cfg.kl_coeff;
    let temperature = cfg.temperature;

    let per_group = |(gi, g): (usize, &GroupRollout)| -> Result<GroupPartial> {
        let mut part = GroupPartial {
            objective: 0.0,
            kl: 0.0,
            clipped: 0,
            grad: PolicyParams::zeros(live.vocab_size, live.dim),
        };
        for (j, c) in g.completions.iter().enumerate() {
            let adv = g.advantages[j];
            let tape = SequenceTape::forward(live, &g.prompt_ids, &c.token_ids, temperature)?;
            let ref_lp = if beta > 0.0 {
                policy::sequence_logprob(reference, &g.prompt_ids, &c.token_ids, temperature)?
            } else {
                tape.logprobs.clone()
            };
            let old = g.old_logprobs(j);
            let mut coeffs = Vec::with_capacity(c.token_ids.len());
            for t in 0..c.token_ids.len() {
                let lp = tape.logprobs[t];
                let ratio = (lp - old[t]).exp();
                let (s, ds, was_clipped) = surrogate(ratio, adv, eps);
                let x = (ref_lp[t] - lp).exp();
                let kl = k3(x);
                if !(s.is_finite() && kl.is_finite()) {
                    return Err(Error::NonFinite {
                        group: gi,
                        what: format!("completion {j} token {t}: ratio {ratio}, kl {kl}"),
                    });
                }
                part.objective += s - beta * kl;
                part.kl += kl;
                part.clipped += usize::from(was_clipped);
                // d/dlogπ of -(s - β·k3) / N
                coeffs.push(-(ds - beta * (1.0 - x)) * inv_n);
            }
            tape.backward(live, &g.prompt_ids, &c.token_ids, &coeffs, &mut part.grad);
        }
        Ok(part)
    };

    let partials: Vec<GroupPartial> = if cfg.threads > 1 {
        rollouts
            .par_iter()
            .enumerate()
            .map(per_group)
            .collect::<Result<_>>()?
    } else {
        rollouts
            .iter()
            .enumerate()
            .map(per_group)
            .collect::<Result<_>>()?
    };

    let mut grad = PolicyParams::zeros(live.vocab_size, live.dim);
    let (mut objective, mut kl, mut clipped) = (0.0, 0.0, 0);
    for p in &partials {
        grad.add_scaled(&p.grad, 1.0);
        objective += p.objective;
        kl += p.kl;
        clipped += p.clipped;
    }
    Ok(LossOutput {
        loss: -objective * inv_n,
        grad,
        mean_kl: kl * inv_n,
        clip_fraction: clipped as f64 * inv_n,
        tokens: n_tok,
    })
}

/// A prompt with the gold completion it should produce (end-of-sequence included).
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
}

impl SftExample {
    pub fn from_prompt(prompt: &PromptInstance, intent: &str, vocab: &Vocab) -> Result<Self> {
        let mut target_ids = vocab.tokenize(&canonical_completion(prompt.variant, intent))?;
        target_ids.push(EOS_ID);
        Ok(Self {
            prompt_ids: prompt.token_ids.clone(),
            target_ids,
        })
    }
}

/// Mean negative log-likelihood of the gold completions (summed over tokens,
/// averaged over examples) and its gradient.
pub fn sft_loss(params: &PolicyParams, examples: &[SftExample]) -> Result<(f64, PolicyParams)> {
    if examples.is_empty() {
        return Err(Error::Empty("sft batch"));
    }
    let inv_n = 1.0 / examples.len() as f64;
    let mut grad = PolicyParams::zeros(params.vocab_size, params.dim);
    let mut loss = 0.0;
    for ex in examples {
        let tape = SequenceTape::forward(params, &ex.prompt_ids, &ex.target_ids, 1.0)?;
        loss -= tape.logprobs.iter().sum::<f64>() * inv_n;
        let coeffs = vec![-inv_n; ex.target_ids.len()];
        tape.backward(params, &ex.prompt_ids, &ex.target_ids, &coeffs, &mut grad);
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, 0.9, 0.999, 1e-8)
    }

    /// Applies one descent step along `grad`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -self.learning_rate),
            OptimizerKind::Adam => {
                let n = params.num_params();
                if self.m.len() != n {
                    self.m = vec![0.0; n];
                    self.v = vec![0.0; n];
                }
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training state and loops

/// Aggregates reported for every training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub format_rate: f64,
    pub accuracy: f64,
    pub mean_completion_tokens: f64,
}

const METRICS_RING: usize = 4096;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub optimizer: Optimizer,
    pub metrics: VecDeque<StepMetrics>,
    batches: BatchSampler,
}

impl TrainState {
    /// Starts a run; the reference policy is a snapshot of `params`.
    pub fn new(params: PolicyParams, optimizer: Optimizer, seed: u64) -> Self {
        Self {
            step: 0,
            reference: policy::snapshot(&params),
            params,
            optimizer,
            metrics: VecDeque::new(),
            batches: BatchSampler::new(seed),
        }
    }

    fn record(&mut self, m: StepMetrics) {
        if self.metrics.len() == METRICS_RING {
            self.metrics.pop_front();
        }
        self.metrics.push_back(m);
    }

    /// Indices of the next batch over a dataset of `n` items.
    pub fn next_batch(&mut self, n: usize, size: usize) -> Vec<usize> {
        self.batches.next(n, size)
    }

    /// Restarts batch order, e.g. when switching datasets between stages.
    pub fn reset_batches(&mut self, seed: u64) {
        self.batches = BatchSampler::new(seed);
    }
}

/// Epoch-wise shuffled batches; items within a batch are distinct.
#[derive(Debug, Clone)]
struct BatchSampler {
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, n: usize, size: usize) -> Vec<usize> {
        let size = size.min(n);
        if self.order.len() != n || self.pos + size > n {
            self.order = (0..n).collect();
            let mut rng = seeds::rng(self.seed, Stream::Batch, &[self.epoch]);
            self.order.shuffle(&mut rng);
            self.epoch += 1;
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Samples and scores one group for a prompt.
pub fn rollout_group(
    params: &PolicyParams,
    prompt: &PromptInstance,
    sampling: &SamplingConfig,
    cfg: &GrpoConfig,
    vocab: &Vocab,
    step: u64,
) -> Result<GroupRollout> {
    let completions = policy::sample_group(params, &prompt.token_ids, sampling, vocab)?;
    let rewards: Vec<RewardRecord> = completions
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let (f, a, r) = score_completion(
                &c.text,
                &prompt.gold_intent,
                prompt.variant,
                cfg.strictness,
                &cfg.weights,
            );
            RewardRecord {
                sample_id: prompt.dialogue_id.clone(),
                rollout_index: j,
                r_format: f,
                r_answer: a,
                combined: r,
                step,
            }
        })
        .collect();
    let scalar: Vec<f64> = rewards.iter().map(|r| r.combined).collect();
    let advantages = compute_advantages(&scalar, cfg.std_floor)?;
    Ok(GroupRollout {
        sample_id: prompt.dialogue_id.clone(),
        prompt_ids: prompt.token_ids.clone(),
        completions,
        rewards,
        advantages,
    })
}

/// Runs `f` over `items`, in parallel when `threads > 1`. Output order is
/// always the input order.
pub(crate) fn map_maybe_parallel<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync + Send,
{
    if threads > 1 {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub records: Vec<RewardRecord>,
    pub loss: f64,
    pub mean_kl: f64,
}

fn summarize(step: u64, rollouts: &[GroupRollout]) -> StepMetrics {
    let mut n = 0.0;
    let (mut reward, mut fmt, mut acc, mut len) = (0.0, 0.0, 0.0, 0.0);
    for g in rollouts {
        for (c, r) in g.completions.iter().zip(&g.rewards) {
            n += 1.0;
            reward += r.combined;
            fmt += f64::from(r.r_format);
            acc += f64::from(r.r_answer);
            len += c.token_ids.len() as f64;
        }
    }
    let n = if n == 0.0 { 1.0 } else { n };
    StepMetrics {
        step,
        mean_reward: reward / n,
        format_rate: fmt / n,
        accuracy: acc / n,
        mean_completion_tokens: len / n,
    }
}

/// One GRPO step on `batch`: sample G completions per prompt, score them,
/// normalize advantages per group and apply `cfg.inner_updates` optimizer
/// updates against the recorded sampling log-probabilities.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&PromptInstance],
    cfg: &GrpoConfig,
    vocab: &Vocab,
) -> Result<StepOutput> {
    let step = state.step;
    let rollouts = map_maybe_parallel(batch, cfg.threads, |i, prompt| {
        let seed = seeds::derive(cfg.seed, Stream::Sampling, &[step, i as u64]);
        rollout_group(&state.params, prompt, &cfg.sampling(seed), cfg, vocab, step)
    })?;
    let mut loss = 0.0;
    let mut mean_kl = 0.0;
    for _ in 0..cfg.inner_updates {
        let out = grpo_loss(&state.params, &state.reference, &rollouts, cfg)?;
        loss = out.loss;
        mean_kl = out.mean_kl;
        state.optimizer.step(&mut state.params, &out.grad);
    }
    state.step += 1;
    if let Some(k) = cfg.reference_refresh {
        if k > 0 && state.step % k == 0 {
            state.reference = policy::snapshot(&state.params);
        }
    }
    let metrics = summarize(step, &rollouts);
    state.record(metrics.clone());
    let records = rollouts.into_iter().flat_map(|g| g.rewards).collect();
    Ok(StepOutput {
        metrics,
        records,
        loss,
        mean_kl,
    })
}

/// Output of a multi-step run.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub metrics: Vec<StepMetrics>,
    pub records: Vec<RewardRecord>,
}

/// Runs `steps` GRPO steps over `dataset` with epoch-shuffled batches.
pub fn train_grpo(
    state: &mut TrainState,
    dataset: &[PromptInstance],
    cfg: &GrpoConfig,
    vocab: &Vocab,
    steps: usize,
) -> Result<RunLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut log = RunLog::default();
    for _ in 0..steps {
        let idx = state.next_batch(dataset.len(), cfg.batch_prompts);
        let batch: Vec<&PromptInstance> = idx.iter().map(|&i| &dataset[i]).collect();
        let out = train_step(state, &batch, cfg, vocab)?;
        log.metrics.push(out.metrics);
        log.records.extend(out.records);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.learning_rate, 0.9, 0.999, 1e-8)
    }
}

/// Greedy-decodes each prompt once and summarizes it like a GRPO step.
fn greedy_metrics(
    params: &PolicyParams,
    prompts: &[&PromptInstance],
    strictness: Strictness,
    weights: &RewardWeights,
    vocab: &Vocab,
    step: u64,
) -> Result<StepMetrics> {
    let cfg = SamplingConfig {
        greedy: true,
        group_size: 1,
        temperature: 1.0,
        ..SamplingConfig::default()
    };
    let mut rollouts = Vec::with_capacity(prompts.len());
    for p in prompts {
        let completions = policy::sample_group(params, &p.token_ids, &cfg, vocab)?;
        let rewards = completions
            .iter()
            .map(|c| {
                let (f, a, r) =
                    score_completion(&c.text, &p.gold_intent, p.variant, strictness, weights);
                RewardRecord {
                    sample_id: p.dialogue_id.clone(),
                    rollout_index: 0,
                    r_format: f,
                    r_answer: a,
                    combined: r,
                    step,
                }
            })
            .collect();
        rollouts.push(GroupRollout {
            sample_id: p.dialogue_id.clone(),
            prompt_ids: Vec::new(),
            completions,
            rewards,
            advantages: vec![0.0],
        });
    }
    Ok(summarize(step, &rollouts))
}

/// Mini-batch descent on [`sft_loss`] over gold completions. Each step logs
/// the same metrics as a GRPO step, measured by greedy decoding of the batch
/// before the update.
pub fn train_sft(
    state: &mut TrainState,
    dataset: &[PromptInstance],
    cfg: &SftConfig,
    strictness: Strictness,
    weights: &RewardWeights,
    vocab: &Vocab,
) -> Result<Vec<StepMetrics>> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let examples: Vec<SftExample> = dataset
        .iter()
        .map(|p| SftExample::from_prompt(p, &p.gold_intent, vocab))
        .collect::<Result<_>>()?;
    let per_epoch = dataset.len().div_ceil(cfg.batch_size.max(1));
    let mut out = Vec::new();
    for _ in 0..cfg.epochs * per_epoch {
        let idx = state.next_batch(dataset.len(), cfg.batch_size);
        let prompts: Vec<&PromptInstance> = idx.iter().map(|&i| &dataset[i]).collect();
        let metrics = greedy_metrics(
            &state.params,
            &prompts,
            strictness,
            weights,
            vocab,
            state.step,
        )?;
        let batch: Vec<SftExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let (_, grad) = sft_loss(&state.params, &batch)?;
        state.optimizer.step(&mut state.params, &grad);
        state.step += 1;
        state.record(metrics.clone());
        out.push(metrics);
    }
    Ok(out)
}

/// Settings of the documentation warm-up that stands in for pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Description words per synthetic question, inclusive range.
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            dim: policy::DEFAULT_DIM,
            steps: 3000,
            batch_size: 32,
            learning_rate: 0.2,
            min_words: 2,
            max_words: 4,
            seed: 0,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::validation(
                "min_words",
                "need 1 <= min_words <= max_words",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "learning_rate",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// A question made of words from one intent's description, answered with
/// that intent in the canonical format.
fn documentation_example(
    schema: &IntentSchema,
    variant: PromptVariant,
    vocab: &Vocab,
    cfg: &WarmupConfig,
    rng: &mut impl Rng,
) -> Result<SftExample> {
    let k = rng.gen_range(0..schema.len());
    let def = &schema.intents[k];
    let words: Vec<&str> = def.description.split_whitespace().collect();
    let n = rng
        .gen_range(cfg.min_words..=cfg.max_words)
        .min(words.len());
    let question = words
        .choose_multiple(rng, n)
        .copied()
        .collect::<Vec<_>>()
        .join(" ");
    let last = rng.gen_range(0..=schema.len());
    let dialogue = Dialogue {
        id: String::new(),
        turns: vec![Turn {
            user_utterance: question,
            assistant_response: String::new(),
            intent_label: None,
        }],
        last_tool: schema
            .intents
            .get(last)
            .map_or(NO_TOOL, |d| d.name.as_str())
            .to_string(),
        gold_intent: def.name.clone(),
        category: def.name.clone(),
        split: Split::Train,
        extra: Default::default(),
    };
    let prompt = render_instruction(schema, &dialogue, variant, vocab)?;
    SftExample::from_prompt(&prompt, &def.name, vocab)
}

/// Initializes a policy and fits it to questions built from the schema's own
/// descriptions. The result emits the output format and ties description
/// words to intent names; it never sees a dialogue or its label.
pub fn init_policy(
    vocab: &Vocab,
    schema: &IntentSchema,
    variant: PromptVariant,
    cfg: &WarmupConfig,
) -> Result<PolicyParams> {
    cfg.validate()?;
    let params = PolicyParams::init(vocab.len(), cfg.dim, cfg.seed);
    if cfg.steps == 0 {
        return Ok(params);
    }
    if schema.is_empty() {
        return Err(Error::Empty("schema"));
    }
    let mut optimizer = Optimizer::adam(cfg.learning_rate);
    let mut params = params;
    let mut rng = seeds::rng(cfg.seed, Stream::Init, &[1]);
    for _ in 0..cfg.steps {
        let batch: Vec<SftExample> = (0..cfg.batch_size)
            .map(|_| documentation_example(schema, variant, vocab, cfg, &mut rng))
            .collect::<Result<_>>()?;
        let (_, grad) = sft_loss(&params, &batch)?;
        optimizer.step(&mut params, &grad);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::CONTROL_TOKENS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0; 7], 1e-6).unwrap(), vec![0.0; 7]);
        assert_eq!(
            compute_advantages(&[0.0, 2.0], 1e-6).unwrap(),
            vec![-1.0, 1.0]
        );
        // mean 10/7, population variance 280/343
        let a = compute_advantages(&[0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0], 1e-6).unwrap();
        assert!((a[0] + 1.5811388300841898).abs() < 1e-12, "{}", a[0]);
        assert!((a[2] - 0.6324555320336759).abs() < 1e-12, "{}", a[2]);
        assert!(compute_advantages(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn k3_is_non_negative() {
        for x in [1e-6, 0.1, 0.5, 1.0, 2.0, 10.0, 1e4] {
            assert!(k3(x) >= 0.0);
        }
        assert_eq!(k3(1.0), 0.0);
    }

    #[test]
    fn surrogate_is_the_min() {
        for ratio in [0.5, 0.85, 1.0, 1.15, 1.5] {
            for adv in [-1.3, 0.0, 0.7] {
                let (s, _, _) = surrogate(ratio, adv, 0.2);
                assert!(s <= ratio * adv + 1e-15);
                assert!(s <= ratio.clamp(0.8, 1.2) * adv + 1e-15);
            }
        }
    }

    fn tiny_vocab(n: usize) -> Vocab {
        let mut tokens: Vec<String> = CONTROL_TOKENS.iter().map(|s| s.to_string()).collect();
        for i in tokens.len()..n {
            tokens.push(format!("w{i}"));
        }
        Vocab::from_tokens(tokens).unwrap()
    }

    fn random_group(p: &PolicyParams, vocab: &Vocab, seed: u64) -> GroupRollout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt: Vec<TokenId> = (0..5).map(|_| rng.gen_range(1..p.vocab_size)).collect();
        let cfg = SamplingConfig {
            temperature: 1.0,
            max_new_tokens: 6,
            group_size: 3,
            rng_seed: seed,
            greedy: false,
        };
        let completions = policy::sample_group(p, &prompt, &cfg, vocab).unwrap();
        let rewards: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
        GroupRollout {
            sample_id: format!("s{seed}"),
            prompt_ids: prompt,
            advantages: compute_advantages(&rewards, 1e-6).unwrap(),
            rewards: Vec::new(),
            completions,
        }
    }

    #[test]
    fn reinforce_limit() {
        let v = tiny_vocab(12);
        let p = PolicyParams::init(12, 4, 3);
        let groups: Vec<GroupRollout> = (0..3).map(|s| random_group(&p, &v, s)).collect();
        let cfg = GrpoConfig {
            kl_coeff: 0.0,
            temperature: 1.0,
            ..GrpoConfig::default()
        };
        let out = grpo_loss(&p, &p, &groups, &cfg).unwrap();
        let n_tok: usize = groups
            .iter()
            .flat_map(|g| &g.completions)
            .map(|c| c.token_ids.len())
            .sum();
        let mut expected = PolicyParams::zeros(12, 4);
        for g in &groups {
            for (c, a) in g.completions.iter().zip(&g.advantages) {
                let tape = SequenceTape::forward(&p, &g.prompt_ids, &c.token_ids, 1.0).unwrap();
                let coeffs = vec![-a / n_tok as f64; c.token_ids.len()];
                tape.backward(&p, &g.prompt_ids, &c.token_ids, &coeffs, &mut expected);
            }
        }
        for (a, b) in out.grad.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.mean_kl, 0.0);
    }

    #[test]
    fn kl_vanishes_when_live_is_reference() {
        let v = tiny_vocab(12);
        let p = PolicyParams::init(12, 4, 5);
        let groups: Vec<GroupRollout> = (0..2).map(|s| random_group(&p, &v, s + 10)).collect();
        let cfg = GrpoConfig {
            kl_coeff: 0.5,
            temperature: 1.0,
            ..GrpoConfig::default()
        };
        let with_kl = grpo_loss(&p, &p, &groups, &cfg).unwrap();
        let without = grpo_loss(
            &p,
            &p,
            &groups,
            &GrpoConfig {
                kl_coeff: 0.0,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(with_kl.mean_kl, 0.0);
        for (a, b) in with_kl.grad.iter().zip(without.grad.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn threads_do_not_change_the_loss() {
        let v = tiny_vocab(12);
        let p = PolicyParams::init(12, 4, 5);
        let r = PolicyParams::init(12, 4, 6);
        let groups: Vec<GroupRollout> = (0..6).map(|s| random_group(&p, &v, s)).collect();
        let cfg = GrpoConfig {
            temperature: 1.0,
            ..GrpoConfig::default()
        };
        let a = grpo_loss(&p, &r, &groups, &cfg).unwrap();
        let b = grpo_loss(&p, &r, &groups, &GrpoConfig { threads: 4, ..cfg }).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert!(a
            .grad
            .iter()
            .zip(b.grad.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sft_uniform_policy() {
        let p = PolicyParams::zeros(10, 3);
        let ex = SftExample {
            prompt_ids: vec![5, 6],
            target_ids: vec![2, 7, 1, 0],
        };
        let (loss, _) = sft_loss(&p, &[ex.clone()]).unwrap();
        assert!((loss - 4.0 * (10f64).ln()).abs() < 1e-12);
        let q = PolicyParams::init(10, 3, 2);
        let (loss, _) = sft_loss(&q, &[ex.clone()]).unwrap();
        let direct: f64 = policy::sequence_logprob(&q, &ex.prompt_ids, &ex.target_ids, 1.0)
            .unwrap()
            .iter()
            .sum();
        assert!((loss + direct).abs() < 1e-12);
    }

    #[test]
    fn adam_and_sgd_move_against_gradient() {
        let mut p = PolicyParams::zeros(3, 1);
        let mut g = PolicyParams::zeros(3, 1);
        g.bias = vec![1.0, -2.0, 0.0];
        Optimizer::sgd(0.1).step(&mut p, &g);
        assert_eq!(p.bias, vec![-0.1, 0.2, 0.0]);
        let mut p = PolicyParams::zeros(3, 1);
        let mut adam = Optimizer::adam(0.01);
        adam.step(&mut p, &g);
        assert!((p.bias[0] + 0.01).abs() < 1e-9);
        assert!((p.bias[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.bias[2], 0.0);
    }

    #[test]
    fn batches_cover_every_item_once_per_epoch() {
        let mut s = BatchSampler::new(4);
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.extend(s.next(20, 4));
        }
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(s.next(3, 10).len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        assert!(GrpoConfig {
            group_size: 1,
            ..GrpoConfig::default()
        }
        .validate()
        .is_err());
        assert!(GrpoConfig {
            std_floor: 0.0,
            ..GrpoConfig::default()
        }
        .validate()
        .is_err());
        assert!(GrpoConfig {
            clip_epsilon: -0.1,
            ..GrpoConfig::default()
        }
        .validate()
        .is_err());
        assert!(GrpoConfig {
            temperature: 0.0,
            ..GrpoConfig::default()
        }
        .validate()
        .is_err());
    }
}
