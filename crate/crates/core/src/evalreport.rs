//! Accuracy per category, score histograms and completion-length statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, IntentSchema};
use crate::curriculum::ScoreTable;
use crate::error::{Error, Result};
use crate::grpo::{map_maybe_parallel, StepMetrics};
use crate::policy::{self, PolicyParams, SamplingConfig};
use crate::prompting::{render_instruction, PromptInstance, PromptVariant, Vocab};
use crate::rewards::{accuracy_reward, parse_completion, RewardWeights, Strictness};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl DecodeMode {
    fn sampling(self, index: usize, max_new_tokens: usize) -> SamplingConfig {
        match self {
            DecodeMode::Greedy => SamplingConfig {
                greedy: true,
                group_size: 1,
                temperature: 1.0,
                max_new_tokens,
                rng_seed: 0,
            },
            DecodeMode::Sample { temperature, seed } => SamplingConfig {
                greedy: false,
                group_size: 1,
                temperature,
                max_new_tokens,
                rng_seed: crate::seeds::derive(
                    seed,
                    crate::seeds::Stream::Sampling,
                    &[u64::MAX, index as u64],
                ),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl CategoryAccuracy {
    fn new(category: String, n: usize, correct: usize) -> Self {
        let accuracy = if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        };
        Self {
            category,
            n,
            correct,
            accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Sorted by category name.
    pub per_category: Vec<CategoryAccuracy>,
    pub overall: CategoryAccuracy,
    pub mode: DecodeMode,
    /// Per-sample correctness in input order.
    pub correct: Vec<bool>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy
    }

    pub fn category(&self, name: &str) -> Option<&CategoryAccuracy> {
        self.per_category.iter().find(|c| c.category == name)
    }

    /// `category,n,accuracy` rows followed by an `overall` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["category", "n", "accuracy"])?;
        for row in self
            .per_category
            .iter()
            .chain(std::iter::once(&self.overall))
        {
            w.write_record([
                row.category.clone(),
                row.n.to_string(),
                format!("{:.6}", row.accuracy),
            ])?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(format!("write {}", path.display()), io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Decodes one completion per prompt and checks the extracted action.
/// `categories[i]` is the reporting category of `prompts[i]`.
pub fn evaluate_prompts(
    params: &PolicyParams,
    prompts: &[PromptInstance],
    categories: &[String],
    strictness: Strictness,
    vocab: &Vocab,
    mode: DecodeMode,
    threads: usize,
) -> Result<EvalResult> {
    if prompts.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if categories.len() != prompts.len() {
        return Err(Error::validation(
            "categories",
            "one category per prompt is required",
        ));
    }
    let correct = map_maybe_parallel(prompts, threads, |i, p| {
        let cfg = mode.sampling(i, policy::SamplingConfig::default().max_new_tokens);
        let c = &policy::sample_group(params, &p.token_ids, &cfg, vocab)?[0];
        let parsed = parse_completion(&c.text, p.variant, strictness);
        Ok(accuracy_reward(&parsed, &p.gold_intent) == 1)
    })?;
    let mut by_cat: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (cat, ok) in categories.iter().zip(&correct) {
        let e = by_cat.entry(cat.as_str()).or_default();
        e.0 += 1;
        e.1 += usize::from(*ok);
    }
    let per_category = by_cat
        .into_iter()
        .map(|(c, (n, k))| CategoryAccuracy::new(c.to_string(), n, k))
        .collect();
    let total = correct.iter().filter(|&&x| x).count();
    Ok(EvalResult {
        per_category,
        overall: CategoryAccuracy::new("overall".to_string(), correct.len(), total),
        mode,
        correct,
    })
}

/// Renders `test` against `schema` and evaluates it; categories come from
/// each dialogue's `category` field.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &PolicyParams,
    schema: &IntentSchema,
    test: &[Dialogue],
    variant: PromptVariant,
    strictness: Strictness,
    vocab: &Vocab,
    mode: DecodeMode,
    threads: usize,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    params.check_vocab(vocab)?;
    let prompts = test
        .iter()
        .map(|d| render_instruction(schema, d, variant, vocab))
        .collect::<Result<Vec<_>>>()?;
    let categories: Vec<String> = test.iter().map(|d| d.category.clone()).collect();
    evaluate_prompts(
        params,
        &prompts,
        &categories,
        strictness,
        vocab,
        mode,
        threads,
    )
}

/// Counts of samples per integer score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `bins[b]` counts samples with score `b`.
    pub bins: Vec<usize>,
    pub total: usize,
}

impl ScoreHistogram {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["score", "count"])?;
        for (b, c) in self.bins.iter().enumerate() {
            w.write_record([b.to_string(), c.to_string()])?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        Ok(())
    }
}

/// Bins scores by value. Only integer-valued scores can be binned.
pub fn score_histogram(
    table: &ScoreTable,
    weights: &RewardWeights,
    group_size: usize,
) -> Result<ScoreHistogram> {
    let max = weights.max_per_rollout() * group_size as f64;
    if max.fract() != 0.0 {
        return Err(Error::validation(
            "weights",
            "histogram bins need integer-valued maximum scores",
        ));
    }
    let mut bins = vec![0; max as usize + 1];
    for (id, &score) in &table.scores {
        if score.fract() != 0.0 || score < 0.0 || score > max {
            return Err(Error::validation(
                "scores",
                format!("score {score} of `{id}` is not an integer in [0, {max}]"),
            ));
        }
        bins[score as usize] += 1;
    }
    Ok(ScoreHistogram {
        bins,
        total: table.scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean_tokens: f64,
    pub variance: f64,
    /// (quantile, value) pairs at 0.1, 0.5 and 0.9, nearest-rank.
    pub quantiles: Vec<(f64, f64)>,
    /// (step, mean tokens) pairs.
    pub series: Vec<(u64, f64)>,
}

const QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

/// Statistics over completion token counts.
pub fn length_stats(lengths: &[usize]) -> LengthStats {
    let n = lengths.len().max(1) as f64;
    let mean = lengths.iter().sum::<usize>() as f64 / n;
    let variance = lengths
        .iter()
        .map(|&l| (l as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let quantiles = QUANTILES
        .iter()
        .map(|&q| {
            let v = if sorted.is_empty() {
                0.0
            } else {
                let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
                sorted[rank - 1] as f64
            };
            (q, v)
        })
        .collect();
    LengthStats {
        mean_tokens: mean,
        variance,
        quantiles,
        series: Vec::new(),
    }
}

/// Per-step series from training metrics; the overall mean weights steps equally.
pub fn length_series(stream: &[StepMetrics]) -> LengthStats {
    let series: Vec<(u64, f64)> = stream
        .iter()
        .map(|m| (m.step, m.mean_completion_tokens))
        .collect();
    let n = series.len().max(1) as f64;
    let mean = series.iter().map(|s| s.1).sum::<f64>() / n;
    let variance = series.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / n;
    LengthStats {
        mean_tokens: mean,
        variance,
        quantiles: Vec::new(),
        series,
    }
}

impl LengthStats {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["step", "mean_tokens"])?;
        for (step, mean) in &self.series {
            w.write_record([step.to_string(), format!("{mean:.6}")])?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        Ok(())
    }
}

/// Writes the per-step metrics CSV.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record([
        "step",
        "mean_reward",
        "format_rate",
        "accuracy",
        "mean_completion_tokens",
    ])?;
    for m in metrics {
        w.write_record([
            m.step.to_string(),
            format!("{:.6}", m.mean_reward),
            format!("{:.6}", m.format_rate),
            format!("{:.6}", m.accuracy),
            format!("{:.6}", m.mean_completion_tokens),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    Ok(())
}

/// Reads a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut out = Vec::new();
    for (idx, row) in r.deserialize().enumerate() {
        out.push(row.map_err(|e: csv::Error| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 2,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::CONTROL_TOKENS;

    fn scores(pairs: &[(&str, f64)]) -> ScoreTable {
        ScoreTable {
            scores: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            group_size: 7,
            weights: RewardWeights::default(),
            source_digest: String::new(),
        }
    }

    #[test]
    fn histogram_of_perfect_table() {
        let ids: Vec<String> = (0..100).map(|i| format!("s{i}")).collect();
        let pairs: Vec<(&str, f64)> = ids.iter().map(|i| (i.as_str(), 14.0)).collect();
        let h = score_histogram(&scores(&pairs), &RewardWeights::default(), 7).unwrap();
        assert_eq!(h.bins.len(), 15);
        assert_eq!(h.bins[14], 100);
        assert_eq!(h.bins.iter().sum::<usize>(), 100);
        let empty = score_histogram(&scores(&[]), &RewardWeights::default(), 7).unwrap();
        assert_eq!(empty.total, 0);
        assert!(empty.bins.iter().all(|&b| b == 0));
    }

    #[test]
    fn histogram_rejects_fractions() {
        assert!(score_histogram(&scores(&[("a", 3.5)]), &RewardWeights::default(), 7).is_err());
        let w = RewardWeights::new(0.5, 1.0).unwrap();
        assert!(score_histogram(&scores(&[]), &w, 7).is_err());
    }

    #[test]
    fn lengths() {
        let s = length_stats(&[5, 5, 5, 5]);
        assert_eq!(s.mean_tokens, 5.0);
        assert_eq!(s.variance, 0.0);
        assert_eq!(length_stats(&[0, 2]).mean_tokens, 1.0);
        let m = |step, len| StepMetrics {
            step,
            mean_reward: 0.0,
            format_rate: 0.0,
            accuracy: 0.0,
            mean_completion_tokens: len,
        };
        let s = length_series(&[m(0, 4.0), m(1, 6.0)]);
        assert_eq!(s.series, vec![(0, 4.0), (1, 6.0)]);
        assert_eq!(s.mean_tokens, 5.0);
    }

    #[test]
    fn fixed_policy_is_right_only_on_its_own_category() {
        // greedy output is always "Action: a"
        let tokens: Vec<String> = CONTROL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(["a", "b", "q"].iter().map(|s| s.to_string()))
            .collect();
        let vocab = Vocab::from_tokens(tokens).unwrap();
        let mut p = PolicyParams::zeros(vocab.len(), 3);
        let (act, a, q, eos) = (
            crate::prompting::ACTION_ID,
            vocab.id("a").unwrap(),
            vocab.id("q").unwrap(),
            0,
        );
        for (tok, e) in [
            (q, [1.0, 0.0, 0.0]),
            (act, [0.0, 1.0, 0.0]),
            (a, [0.0, 0.0, 1.0]),
        ] {
            p.embeddings[tok * 3..tok * 3 + 3].copy_from_slice(&e);
        }
        for (tok, u) in [
            (act, [10.0, -20.0, 0.0]),
            (a, [0.0, 20.0, -30.0]),
            (eos, [0.0, 0.0, 30.0]),
        ] {
            p.output[tok * 3..tok * 3 + 3].copy_from_slice(&u);
        }
        let prompt = |gold: &str| PromptInstance {
            dialogue_id: gold.to_string(),
            rendered_text: String::new(),
            token_ids: vec![q],
            gold_intent: gold.to_string(),
            variant: PromptVariant::WithoutThought,
        };
        let prompts = vec![prompt("a"), prompt("b"), prompt("a")];
        let cats = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        let r = evaluate_prompts(
            &p,
            &prompts,
            &cats,
            Strictness::Strict,
            &vocab,
            DecodeMode::Greedy,
            1,
        )
        .unwrap();
        assert_eq!(r.category("a").unwrap().accuracy, 1.0);
        assert_eq!(r.category("b").unwrap().accuracy, 0.0);
        assert!((r.accuracy() - 2.0 / 3.0).abs() < 1e-15);
        assert!(evaluate_prompts(
            &p,
            &[],
            &[],
            Strictness::Strict,
            &vocab,
            DecodeMode::Greedy,
            1
        )
        .is_err());
    }
}
