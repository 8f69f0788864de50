//! Reward-based curriculum sampling: reward collection, per-sample scores,
//! challenging-sample selection, positive mixing and the two-stage run.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalreport::{evaluate_prompts, score_histogram, DecodeMode, ScoreHistogram};
use crate::grpo::{
    map_maybe_parallel, rollout_group, train_grpo, GrpoConfig, StepMetrics, TrainState,
};
use crate::policy::PolicyParams;
use crate::prompting::{PromptInstance, Vocab};
use crate::rewards::{RewardRecord, RewardWeights};
use crate::seeds::{self, Stream};

// ---------------------------------------------------------------------------
// Reward log

/// The exact bytes of a reward log: one JSON record per line.
pub fn reward_log_bytes(records: &[RewardRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * 96);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the log and returns its digest.
pub fn write_reward_log(path: &Path, records: &[RewardRecord]) -> Result<String> {
    let bytes = reward_log_bytes(records)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a reward log and its digest.
pub fn read_reward_log(path: &Path) -> Result<(Vec<RewardRecord>, String)> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let digest = sha256_hex(&bytes);
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RewardRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        records.push(r);
    }
    Ok((records, digest))
}

/// Samples G completions for every prompt with `params` held fixed and
/// records their rewards, tagged with `step`.
pub fn collect_rewards(
    params: &PolicyParams,
    prompts: &[PromptInstance],
    cfg: &GrpoConfig,
    vocab: &Vocab,
    step: u64,
) -> Result<Vec<RewardRecord>> {
    cfg.validate()?;
    let groups = map_maybe_parallel(prompts, cfg.threads, |i, p| {
        let seed = seeds::derive(cfg.seed, Stream::Collect, &[step, i as u64]);
        rollout_group(params, p, &cfg.sampling(seed), cfg, vocab, step).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                group: i,
                what: format!("{}: {what}", p.dialogue_id),
            },
            other => other,
        })
    })?;
    Ok(groups.into_iter().flat_map(|g| g.rewards).collect())
}

// ---------------------------------------------------------------------------
// Scores

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Score from the latest complete visit of each sample.
    #[default]
    LastVisit,
    /// Mean of the per-visit scores over every visit.
    Average,
}

/// Score of every sample: the sum of its G combined rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: BTreeMap<String, f64>,
    pub group_size: usize,
    pub weights: RewardWeights,
    pub source_digest: String,
}

impl ScoreTable {
    pub fn threshold(&self) -> f64 {
        self.weights.max_per_rollout() * self.group_size as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "score"])?;
        for (id, s) in &self.scores {
            w.write_record([id.clone(), s.to_string()])?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        Ok(())
    }
}

/// Sums each sample's rewards, recomputed from `r_format`/`r_answer` and
/// `weights`. Every scored visit must hold exactly `group_size` records with
/// distinct rollout indices in `[0, group_size)`.
pub fn compute_scores(
    records: &[RewardRecord],
    weights: &RewardWeights,
    group_size: usize,
    mode: ScoreMode,
    source_digest: &str,
) -> Result<ScoreTable> {
    weights.validate()?;
    if group_size == 0 {
        return Err(Error::validation("group_size", "must be at least 1"));
    }
    // sample -> step -> (sum, rollout indices seen)
    let mut visits: BTreeMap<&str, BTreeMap<u64, (f64, BTreeSet<usize>, usize)>> = BTreeMap::new();
    for r in records {
        let v = visits
            .entry(r.sample_id.as_str())
            .or_default()
            .entry(r.step)
            .or_insert_with(|| (0.0, BTreeSet::new(), 0));
        v.0 += weights.lambda_format * f64::from(r.r_format)
            + weights.lambda_answer * f64::from(r.r_answer);
        v.1.insert(r.rollout_index);
        v.2 += 1;
    }
    let complete = |v: &(f64, BTreeSet<usize>, usize)| {
        v.2 == group_size && v.1.len() == group_size && v.1.iter().all(|&j| j < group_size)
    };
    let mut scores = BTreeMap::new();
    let mut incomplete = Vec::new();
    for (id, steps) in &visits {
        match mode {
            ScoreMode::LastVisit => {
                let (_, last) = steps
                    .iter()
                    .next_back()
                    .expect("a sample has at least one visit");
                if complete(last) {
                    scores.insert(id.to_string(), last.0);
                } else {
                    incomplete.push(id.to_string());
                }
            }
            ScoreMode::Average => {
                if steps.values().all(complete) {
                    let mean = steps.values().map(|v| v.0).sum::<f64>() / steps.len() as f64;
                    scores.insert(id.to_string(), mean);
                } else {
                    incomplete.push(id.to_string());
                }
            }
        }
    }
    if !incomplete.is_empty() {
        return Err(Error::IncompleteLog(incomplete));
    }
    Ok(ScoreTable {
        scores,
        group_size,
        weights: *weights,
        source_digest: source_digest.to_string(),
    })
}

/// Ids scoring strictly below the maximum `(λf + λa)·G`, sorted.
pub fn select_challenging(table: &ScoreTable) -> Vec<String> {
    let threshold = table.threshold();
    table
        .scores
        .iter()
        .filter(|(_, &s)| s < threshold)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Challenging-to-positive mixing ratio `c : p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio(pub u32, pub u32);

impl Ratio {
    pub fn validate(self) -> Result<()> {
        if self.0 == 0 {
            return Err(Error::validation(
                "ratio",
                "the challenging part must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn positives_for(self, challenging: usize) -> usize {
        (challenging as f64 * f64::from(self.1) / f64::from(self.0)).round() as usize
    }
}

impl std::str::FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation("ratio", format!("expected `c:p`, got `{s}`"));
        let (c, p) = s.split_once(':').ok_or_else(bad)?;
        let r = Ratio(
            c.trim().parse().map_err(|_| bad())?,
            p.trim().parse().map_err(|_| bad())?,
        );
        r.validate()?;
        Ok(r)
    }
}

/// The stage-2 training set and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumManifest {
    pub challenging_ids: Vec<String>,
    pub positive_ids: Vec<String>,
    pub ratio: Ratio,
    pub seed: u64,
    pub threshold: f64,
    pub source_digest: String,
}

impl CurriculumManifest {
    /// Challenging then positive ids.
    pub fn training_ids(&self) -> impl Iterator<Item = &String> {
        self.challenging_ids.iter().chain(&self.positive_ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

/// Draws `round(|C|·p/c)` positives uniformly without replacement from
/// `train_ids` minus the challenging set.
pub fn mix_positive(
    table: &ScoreTable,
    challenging: &[String],
    train_ids: &[String],
    ratio: Ratio,
    seed: u64,
) -> Result<CurriculumManifest> {
    ratio.validate()?;
    let known: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    if let Some(missing) = challenging.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::validation(
            "challenging_ids",
            format!("`{missing}` is not in the training set"),
        ));
    }
    let excluded: BTreeSet<&str> = challenging.iter().map(String::as_str).collect();
    let pool: Vec<&str> = known
        .iter()
        .copied()
        .filter(|id| !excluded.contains(id))
        .collect();
    let want = ratio.positives_for(challenging.len());
    if want > pool.len() {
        return Err(Error::PoolShortfall {
            requested: want,
            available: pool.len(),
        });
    }
    let mut rng = seeds::rng(seed, Stream::Mixing, &[]);
    let mut positive_ids: Vec<String> = pool
        .choose_multiple(&mut rng, want)
        .map(|s| s.to_string())
        .collect();
    positive_ids.sort();
    let mut challenging_ids = challenging.to_vec();
    challenging_ids.sort();
    Ok(CurriculumManifest {
        challenging_ids,
        positive_ids,
        ratio,
        seed,
        threshold: table.threshold(),
        source_digest: table.source_digest.clone(),
    })
}

/// What to do when the pool cannot supply the requested positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortfall {
    /// Fail with [`Error::PoolShortfall`].
    #[default]
    Error,
    /// Keep the ratio by using a uniform subset of the challenging samples.
    Downsample,
}

/// Scores to manifest: selects the challenging samples and mixes in
/// positives. Under [`Shortfall::Downsample`] the challenging set is cut to
/// the largest size whose positives fit in the pool; the dropped samples are
/// used neither as challenging nor as positives.
pub fn build_manifest(
    table: &ScoreTable,
    train_ids: &[String],
    ratio: Ratio,
    shortfall: Shortfall,
    seed: u64,
) -> Result<CurriculumManifest> {
    ratio.validate()?;
    let challenging = select_challenging(table);
    let pool = train_ids.len().saturating_sub(challenging.len());
    if shortfall == Shortfall::Error || ratio.positives_for(challenging.len()) <= pool {
        return mix_positive(table, &challenging, train_ids, ratio, seed);
    }
    let mut keep = challenging.len();
    while keep > 0 && ratio.positives_for(keep) > pool {
        keep -= 1;
    }
    let mut rng = seeds::rng(seed, Stream::Mixing, &[1]);
    let kept: BTreeSet<&String> = challenging.choose_multiple(&mut rng, keep).collect();
    let dropped: BTreeSet<&String> = challenging.iter().filter(|id| !kept.contains(id)).collect();
    let subset: Vec<String> = challenging
        .iter()
        .filter(|id| kept.contains(id))
        .cloned()
        .collect();
    let remaining: Vec<String> = train_ids
        .iter()
        .filter(|id| !dropped.contains(id))
        .cloned()
        .collect();
    mix_positive(table, &subset, &remaining, ratio, seed)
}

// ---------------------------------------------------------------------------
// Two-stage run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcsConfig {
    pub stage1_max_steps: usize,
    /// Stop stage 1 once validation accuracy moves less than this between
    /// evaluations. `None` always runs the full `stage1_max_steps`.
    pub validation_delta: Option<f64>,
    pub eval_every: usize,
    /// Training prompts sampled (not removed) to measure validation accuracy.
    pub validation_size: usize,
    pub stage2_steps: usize,
    pub ratio: Ratio,
    pub shortfall: Shortfall,
    pub score_mode: ScoreMode,
}

impl Default for RcsConfig {
    fn default() -> Self {
        Self {
            stage1_max_steps: 60,
            validation_delta: None,
            eval_every: 10,
            validation_size: 64,
            stage2_steps: 60,
            ratio: Ratio(1, 0),
            shortfall: Shortfall::Error,
            score_mode: ScoreMode::LastVisit,
        }
    }
}

impl RcsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_max_steps == 0 {
            return Err(Error::validation("stage1_max_steps", "must be at least 1"));
        }
        if let Some(d) = self.validation_delta {
            if !(d > 0.0) {
                return Err(Error::validation("validation_delta", "must be > 0"));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::validation("eval_every", "must be at least 1"));
        }
        if self.validation_size == 0 {
            return Err(Error::validation("validation_size", "must be at least 1"));
        }
        self.ratio.validate()
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub metrics: Vec<StepMetrics>,
    /// (step, validation accuracy) pairs.
    pub validation: Vec<(u64, f64)>,
    pub histogram: Option<ScoreHistogram>,
}

#[derive(Debug, Clone)]
pub struct RcsOutcome {
    pub stage1_params: PolicyParams,
    pub params: PolicyParams,
    pub stage1_steps: usize,
    /// Rewards logged during stage 1 followed by the offline collection pass.
    pub stage1_log: Vec<RewardRecord>,
    pub log_digest: String,
    pub scores: ScoreTable,
    pub manifest: CurriculumManifest,
    pub stage1: StageReport,
    /// `None` when no sample was challenging.
    pub stage2: Option<StageReport>,
}

fn greedy_accuracy(
    params: &PolicyParams,
    prompts: &[PromptInstance],
    cfg: &GrpoConfig,
    vocab: &Vocab,
) -> Result<f64> {
    let cats = vec![String::new(); prompts.len()];
    Ok(evaluate_prompts(
        params,
        prompts,
        &cats,
        cfg.strictness,
        vocab,
        DecodeMode::Greedy,
        cfg.threads,
    )?
    .accuracy())
}

/// Stage 1 trains on all of `train` until validation accuracy settles or the
/// cap is reached; the stage-1 policy is then scored offline on every
/// training sample, and stage 2 continues on the challenging samples plus
/// mixed positives.
pub fn run_rcs(
    state: &mut TrainState,
    train: &[PromptInstance],
    grpo: &GrpoConfig,
    rcs: &RcsConfig,
    vocab: &Vocab,
) -> Result<RcsOutcome> {
    grpo.validate()?;
    rcs.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = seeds::rng(grpo.seed, Stream::Batch, &[u64::MAX]);
    let validation: Vec<PromptInstance> = train
        .choose_multiple(&mut rng, rcs.validation_size.min(train.len()))
        .cloned()
        .collect();

    let mut stage1 = StageReport {
        metrics: Vec::new(),
        validation: vec![(
            state.step,
            greedy_accuracy(&state.params, &validation, grpo, vocab)?,
        )],
        histogram: None,
    };
    let mut log = Vec::new();
    let mut done = 0;
    while done < rcs.stage1_max_steps {
        let n = rcs.eval_every.min(rcs.stage1_max_steps - done);
        let run = train_grpo(state, train, grpo, vocab, n)?;
        done += n;
        stage1.metrics.extend(run.metrics);
        log.extend(run.records);
        let acc = greedy_accuracy(&state.params, &validation, grpo, vocab)?;
        let prev = stage1.validation.last().map_or(acc, |v| v.1);
        stage1.validation.push((state.step, acc));
        if let Some(delta) = rcs.validation_delta {
            if (acc - prev).abs() < delta {
                break;
            }
        }
    }

    let stage1_params = state.params.clone();
    log.extend(collect_rewards(
        &stage1_params,
        train,
        grpo,
        vocab,
        state.step,
    )?);
    let log_digest = sha256_hex(&reward_log_bytes(&log)?);
    let scores = compute_scores(
        &log,
        &grpo.weights,
        grpo.group_size,
        rcs.score_mode,
        &log_digest,
    )?;
    stage1.histogram = score_histogram(&scores, &grpo.weights, grpo.group_size).ok();
    let train_ids: Vec<String> = train.iter().map(|p| p.dialogue_id.clone()).collect();
    let manifest = build_manifest(&scores, &train_ids, rcs.ratio, rcs.shortfall, grpo.seed)?;

    let stage2 = if manifest.challenging_ids.is_empty() {
        None
    } else {
        let wanted: BTreeSet<&String> = manifest.training_ids().collect();
        let subset: Vec<PromptInstance> = train
            .iter()
            .filter(|p| wanted.contains(&p.dialogue_id))
            .cloned()
            .collect();
        state.reset_batches(seeds::derive(grpo.seed, Stream::Batch, &[2]));
        let run = train_grpo(state, &subset, grpo, vocab, rcs.stage2_steps)?;
        let acc = greedy_accuracy(&state.params, &validation, grpo, vocab)?;
        Some(StageReport {
            metrics: run.metrics,
            validation: vec![(state.step, acc)],
            histogram: None,
        })
    };

    Ok(RcsOutcome {
        stage1_params,
        params: state.params.clone(),
        stage1_steps: done,
        stage1_log: log,
        log_digest,
        scores,
        manifest,
        stage1,
        stage2,
    })
}
