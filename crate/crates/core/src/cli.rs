//! The `intent-rl` command line: every pipeline stage as a subcommand.
//!
//! All outputs land under `--out`, which also holds `artifacts.json`, a
//! sorted map of every file written so far to its SHA-256 digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::corpus::{
    self, build_exclusion_split, chat_keyword_relabel, chat_subdivision, generate_synthetic_corpus,
    generate_unseen_suite, group_intents, load_corpus, save_corpus, social_merge, subdivide_intent,
    Corpus, Split,
};
use crate::curriculum::{
    build_manifest, collect_rewards, compute_scores, read_reward_log, run_rcs, sha256_hex,
    write_reward_log, ScoreMode,
};
use crate::error::{Error, Result};
use crate::evalreport::{
    evaluate, length_series, read_metrics_csv, score_histogram, write_metrics_csv, DecodeMode,
    ScoreHistogram,
};
use crate::grpo::{init_policy, train_grpo, train_sft, TrainState};
use crate::policy::PolicyParams;
use crate::prompting::{build_vocab, render_all, PromptInstance, Vocab};
use crate::seeds::{self, Stream};

#[derive(Debug, Parser)]
#[command(
    name = "intent-rl",
    version,
    about = "Reinforcement-learned intent detection on a toy policy"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every stochastic stage (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Rollout threads (overrides `threads`). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EvalSplit {
    InDomain,
    Unseen,
    Subdivided,
    Grouped,
}

impl EvalSplit {
    fn name(self) -> &'static str {
        match self {
            EvalSplit::InDomain => "in_domain",
            EvalSplit::Unseen => "unseen",
            EvalSplit::Subdivided => "subdivided",
            EvalSplit::Grouped => "grouped",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus, the generalization suites and the vocabulary.
    GenData,
    /// Supervised baseline on gold completions.
    TrainSft {
        /// Drop every training dialogue of this intent.
        #[arg(long)]
        exclude: Option<String>,
    },
    /// GRPO training on the training split.
    TrainGrpo {
        #[arg(long)]
        exclude: Option<String>,
        /// Number of steps (overrides `grpo.max_steps`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample G rollouts per training sample with a fixed checkpoint and log rewards.
    CollectRewards {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a reward log, pick challenging samples and mix in positives.
    SelectCurriculum {
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Two-stage curriculum training.
    TrainRcs,
    /// Greedy accuracy, overall and per category.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "in_domain")]
        split: EvalSplit,
        /// Intent that was excluded from training; its row is reported.
        #[arg(long)]
        exclude: Option<String>,
    },
    /// Score histogram and completion-length series from training logs.
    Report {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

/// Exit code for an error: 1 for bad inputs, 2 for failures mid-run.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses the configuration and runs one subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out));
    let mut ctx = Context {
        cfg: cfg.resolve()?,
        out,
        written: Vec::new(),
    };
    let result = ctx.dispatch(&cli.command);
    ctx.update_artifacts()?;
    result
}

const CORPUS: &str = "data/corpus.jsonl";
const VOCAB: &str = "data/vocab.json";
const UNSEEN: &str = "data/unseen.jsonl";
const SUBDIVIDED: &str = "data/subdivided.jsonl";
const GROUPED: &str = "data/grouped.jsonl";
const GRPO_CKPT: &str = "checkpoints/grpo.json";
const GRPO_LOG: &str = "logs/grpo_rewards.jsonl";
const GRPO_METRICS: &str = "logs/grpo_metrics.csv";
const COLLECTED_LOG: &str = "logs/collected_rewards.jsonl";

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    written: Vec<PathBuf>,
}

impl Context {
    fn dispatch(&mut self, command: &Command) -> Result<()> {
        match command {
            Command::GenData => self.gen_data(),
            Command::TrainSft { exclude } => self.train_sft(exclude.as_deref()),
            Command::TrainGrpo { exclude, steps } => self.train_grpo(exclude.as_deref(), *steps),
            Command::CollectRewards { checkpoint } => self.collect(checkpoint.as_deref()),
            Command::SelectCurriculum { log } => self.select(log.as_deref()),
            Command::TrainRcs => self.train_rcs(),
            Command::Eval {
                checkpoint,
                split,
                exclude,
            } => self.eval(checkpoint.as_deref(), *split, exclude.as_deref()),
            Command::Report { log, metrics } => self.report(log.as_deref(), metrics.as_deref()),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Resolves a user-given path, or a default relative to `--out`.
    fn input(&self, given: Option<&Path>, default: &str) -> PathBuf {
        given.map_or_else(|| self.path(default), Path::to_path_buf)
    }

    fn create(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
        self.written.push(path.clone());
        Ok(path)
    }

    fn update_artifacts(&self) -> Result<()> {
        if self.written.is_empty() {
            return Ok(());
        }
        let index = self.out.join("artifacts.json");
        let mut map: BTreeMap<String, String> = match std::fs::read_to_string(&index) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        for path in &self.written {
            let Ok(bytes) = std::fs::read(path) else {
                continue;
            };
            let rel = path.strip_prefix(&self.out).unwrap_or(path);
            map.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
        }
        let text = serde_json::to_string_pretty(&map)? + "\n";
        std::fs::write(&index, text).map_err(|e| Error::io(format!("write {}", index.display()), e))
    }

    fn save_corpus(&mut self, rel: &str, corpus: &Corpus) -> Result<()> {
        let path = self.create(rel)?;
        save_corpus(&path, corpus)?;
        self.written.push(corpus::schema_path(&path));
        Ok(())
    }

    fn gen_data(&mut self) -> Result<()> {
        let spec = self.cfg.generator.clone();
        let base = generate_synthetic_corpus(&spec)?;
        let test = base.test();
        let mut suites = vec![(UNSEEN, generate_unseen_suite(&spec, &base.schema)?)];
        if base.schema.contains("chat") {
            let (schema, dialogues) = subdivide_intent(
                &base.schema,
                &test,
                "chat",
                &chat_subdivision(),
                &chat_keyword_relabel,
            )?;
            suites.push((SUBDIVIDED, Corpus { schema, dialogues }));
        }
        if base.schema.contains("friend_rec") && base.schema.contains("bot_rec") {
            let (schema, dialogues) = group_intents(
                &base.schema,
                &test,
                &["friend_rec", "bot_rec"],
                &social_merge(),
            )?;
            suites.push((GROUPED, Corpus { schema, dialogues }));
        }
        let mut schemas = vec![&base.schema];
        let mut dialogues = base.dialogues.clone();
        for (_, c) in &suites {
            schemas.push(&c.schema);
            dialogues.extend(c.dialogues.iter().cloned());
        }
        let vocab = build_vocab(&schemas, &dialogues);
        self.save_corpus(CORPUS, &base)?;
        for (rel, c) in &suites {
            self.save_corpus(rel, c)?;
        }
        let path = self.create(VOCAB)?;
        vocab.save(&path)?;
        println!(
            "corpus: {} train / {} test dialogues over {} intents; vocabulary {} tokens",
            base.train().len(),
            test.len(),
            base.schema.len(),
            vocab.len()
        );
        Ok(())
    }

    fn load_data(&self) -> Result<(Corpus, Vocab)> {
        let (corpus, warnings) = load_corpus(&self.path(CORPUS))?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        let vocab = Vocab::load(&self.path(VOCAB))?;
        Ok((corpus, vocab))
    }

    fn train_prompts(
        &self,
        corpus: &Corpus,
        vocab: &Vocab,
        exclude: Option<&str>,
    ) -> Result<Vec<PromptInstance>> {
        let train = match exclude {
            Some(name) => build_exclusion_split(&corpus.schema, &corpus.dialogues, name)?.0,
            None => corpus.split(Split::Train),
        };
        render_all(&corpus.schema, &train, self.cfg.grpo.variant, vocab)
    }

    fn load_checkpoint(&self, path: &Path, vocab: &Vocab) -> Result<PolicyParams> {
        let params = PolicyParams::load(path)?;
        params.check_vocab(vocab)?;
        Ok(params)
    }

    fn warm_start(&mut self, corpus: &Corpus, vocab: &Vocab) -> Result<PolicyParams> {
        let params = init_policy(
            vocab,
            &corpus.schema,
            self.cfg.grpo.variant,
            &self.cfg.warmup,
        )?;
        let path = self.create("checkpoints/init.json")?;
        params.save(&path)?;
        Ok(params)
    }

    fn exclusion(&self, flag: Option<&str>) -> Option<String> {
        flag.map(str::to_string)
            .or_else(|| self.cfg.eval.exclude.clone())
    }

    fn batch_seed(&self) -> u64 {
        seeds::derive(self.cfg.seed, Stream::Batch, &[0])
    }

    fn train_sft(&mut self, exclude: Option<&str>) -> Result<()> {
        let (corpus, vocab) = self.load_data()?;
        let exclude = self.exclusion(exclude);
        let prompts = self.train_prompts(&corpus, &vocab, exclude.as_deref())?;
        let init = self.warm_start(&corpus, &vocab)?;
        let mut state = TrainState::new(init, self.cfg.sft.optimizer(), self.batch_seed());
        let grpo = &self.cfg.grpo;
        let metrics = train_sft(
            &mut state,
            &prompts,
            &self.cfg.sft,
            grpo.strictness,
            &grpo.weights,
            &vocab,
        )?;
        let suffix = exclude.map(|n| format!("_wo_{n}")).unwrap_or_default();
        let ckpt = self.create(&format!("checkpoints/sft{suffix}.json"))?;
        state.params.save(&ckpt)?;
        let m = self.create(&format!("logs/sft{suffix}_metrics.csv"))?;
        write_metrics_csv(&m, &metrics)?;
        println!(
            "sft: {} steps, checkpoint {}",
            metrics.len(),
            ckpt.display()
        );
        Ok(())
    }

    fn train_grpo(&mut self, exclude: Option<&str>, steps: Option<usize>) -> Result<()> {
        let (corpus, vocab) = self.load_data()?;
        let exclude = self.exclusion(exclude);
        let prompts = self.train_prompts(&corpus, &vocab, exclude.as_deref())?;
        let init = self.warm_start(&corpus, &vocab)?;
        let grpo = self.cfg.grpo.clone();
        let mut state = TrainState::new(init, grpo.optimizer(), self.batch_seed());
        let run = train_grpo(
            &mut state,
            &prompts,
            &grpo,
            &vocab,
            steps.unwrap_or(grpo.max_steps),
        )?;
        let suffix = exclude.map(|n| format!("_wo_{n}")).unwrap_or_default();
        let ckpt = self.create(&format!("checkpoints/grpo{suffix}.json"))?;
        state.params.save(&ckpt)?;
        let m = self.create(&format!("logs/grpo{suffix}_metrics.csv"))?;
        write_metrics_csv(&m, &run.metrics)?;
        let log = self.create(&format!("logs/grpo{suffix}_rewards.jsonl"))?;
        write_reward_log(&log, &run.records)?;
        if let Some(last) = run.metrics.last() {
            println!(
                "grpo: {} steps, last batch reward {:.3}, accuracy {:.3}",
                run.metrics.len(),
                last.mean_reward,
                last.accuracy
            );
        }
        Ok(())
    }

    fn collect(&mut self, checkpoint: Option<&Path>) -> Result<()> {
        let (corpus, vocab) = self.load_data()?;
        let params = self.load_checkpoint(&self.input(checkpoint, GRPO_CKPT), &vocab)?;
        let prompts = self.train_prompts(&corpus, &vocab, None)?;
        let records = collect_rewards(&params, &prompts, &self.cfg.grpo, &vocab, 0)?;
        let path = self.create(COLLECTED_LOG)?;
        let digest = write_reward_log(&path, &records)?;
        println!("collected {} records, sha256 {digest}", records.len());
        Ok(())
    }

    fn select(&mut self, log: Option<&Path>) -> Result<()> {
        let (corpus, _) = self.load_data()?;
        let (records, digest) = read_reward_log(&self.input(log, COLLECTED_LOG))?;
        let grpo = &self.cfg.grpo;
        let table = compute_scores(
            &records,
            &grpo.weights,
            grpo.group_size,
            self.cfg.rcs.score_mode,
            &digest,
        )?;
        let train_ids: Vec<String> = corpus.train().into_iter().map(|d| d.id).collect();
        let rcs = &self.cfg.rcs;
        let manifest = build_manifest(&table, &train_ids, rcs.ratio, rcs.shortfall, self.cfg.seed)?;
        let scores = self.create("curriculum/scores.csv")?;
        table.write_csv(&scores)?;
        let m = self.create("curriculum/manifest.json")?;
        manifest.save(&m)?;
        if manifest.challenging_ids.is_empty() {
            println!("no challenging samples: no stage 2 needed");
        } else {
            println!(
                "{} challenging and {} positive samples selected",
                manifest.challenging_ids.len(),
                manifest.positive_ids.len()
            );
        }
        Ok(())
    }

    fn train_rcs(&mut self) -> Result<()> {
        let (corpus, vocab) = self.load_data()?;
        let prompts = self.train_prompts(&corpus, &vocab, None)?;
        let init = self.warm_start(&corpus, &vocab)?;
        let grpo = self.cfg.grpo.clone();
        let mut state = TrainState::new(init, grpo.optimizer(), self.batch_seed());
        let outcome = run_rcs(&mut state, &prompts, &grpo, &self.cfg.rcs, &vocab)?;

        let p = self.create("rcs/stage1/metrics.csv")?;
        write_metrics_csv(&p, &outcome.stage1.metrics)?;
        let p = self.create("rcs/stage1/validation.csv")?;
        write_validation_csv(&p, &outcome.stage1.validation)?;
        let p = self.create("rcs/stage1/rewards.jsonl")?;
        write_reward_log(&p, &outcome.stage1_log)?;
        let p = self.create("rcs/stage1/scores.csv")?;
        outcome.scores.write_csv(&p)?;
        if let Some(h) = &outcome.stage1.histogram {
            let p = self.create("rcs/stage1/score_histogram.csv")?;
            h.write_csv(&p)?;
        }
        let p = self.create("rcs/stage1/manifest.json")?;
        outcome.manifest.save(&p)?;
        let p = self.create("rcs/stage1/checkpoint.json")?;
        outcome.stage1_params.save(&p)?;

        match &outcome.stage2 {
            Some(stage2) => {
                let p = self.create("rcs/stage2/metrics.csv")?;
                write_metrics_csv(&p, &stage2.metrics)?;
                let p = self.create("rcs/stage2/validation.csv")?;
                write_validation_csv(&p, &stage2.validation)?;
                println!(
                    "rcs: stage 1 ran {} steps, stage 2 trained on {} samples for {} steps",
                    outcome.stage1_steps,
                    outcome.manifest.challenging_ids.len() + outcome.manifest.positive_ids.len(),
                    stage2.metrics.len()
                );
            }
            None => {
                let p = self.create("rcs/stage2/skipped.txt")?;
                std::fs::write(&p, "no challenging samples: no stage 2 needed\n")
                    .map_err(|e| Error::io(format!("write {}", p.display()), e))?;
                println!(
                    "rcs: stage 1 ran {} steps; no stage 2 needed",
                    outcome.stage1_steps
                );
            }
        }
        let p = self.create("rcs/stage2/checkpoint.json")?;
        outcome.params.save(&p)?;
        let p = self.create("checkpoints/rcs.json")?;
        outcome.params.save(&p)?;
        Ok(())
    }

    fn eval(
        &mut self,
        checkpoint: Option<&Path>,
        split: EvalSplit,
        exclude: Option<&str>,
    ) -> Result<()> {
        let vocab = Vocab::load(&self.path(VOCAB))?;
        let params = self.load_checkpoint(&self.input(checkpoint, GRPO_CKPT), &vocab)?;
        let file = match split {
            EvalSplit::InDomain => CORPUS,
            EvalSplit::Unseen => UNSEEN,
            EvalSplit::Subdivided => SUBDIVIDED,
            EvalSplit::Grouped => GROUPED,
        };
        let (suite, _) = load_corpus(&self.path(file))?;
        let test = suite.split(Split::Test);
        let exclude = self.exclusion(exclude);
        if let Some(name) = &exclude {
            if !suite.schema.contains(name) {
                return Err(Error::UnknownIntent(name.clone()));
            }
        }
        let grpo = &self.cfg.grpo;
        let result = evaluate(
            &params,
            &suite.schema,
            &test,
            grpo.variant,
            grpo.strictness,
            &vocab,
            DecodeMode::Greedy,
            self.cfg.threads,
        )?;
        let suffix = exclude
            .as_ref()
            .map(|n| format!("_wo_{n}"))
            .unwrap_or_default();
        let path = self.create(&format!("reports/eval_{}{suffix}.csv", split.name()))?;
        result.write_csv(&path)?;
        for row in &result.per_category {
            println!(
                "{:<16} n={:<4} accuracy {:.3}",
                row.category, row.n, row.accuracy
            );
        }
        println!(
            "{:<16} n={:<4} accuracy {:.3}",
            "overall",
            result.overall.n,
            result.accuracy()
        );
        Ok(())
    }

    fn report(&mut self, log: Option<&Path>, metrics: Option<&Path>) -> Result<()> {
        let grpo = &self.cfg.grpo;
        let (records, digest) = read_reward_log(&self.input(log, GRPO_LOG))?;
        let table = compute_scores(
            &records,
            &grpo.weights,
            grpo.group_size,
            ScoreMode::LastVisit,
            &digest,
        )?;
        let histogram: ScoreHistogram = score_histogram(&table, &grpo.weights, grpo.group_size)?;
        let stream = read_metrics_csv(&self.input(metrics, GRPO_METRICS))?;
        let lengths = length_series(&stream);
        let p = self.create("reports/score_histogram.csv")?;
        histogram.write_csv(&p)?;
        let p = self.create("reports/lengths.csv")?;
        lengths.write_csv(&p)?;
        println!(
            "{} samples scored, {} at the maximum; mean completion length {:.2} tokens",
            histogram.total,
            histogram.bins.last().copied().unwrap_or(0),
            lengths.mean_tokens
        );
        Ok(())
    }
}

fn write_validation_csv(path: &Path, rows: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "accuracy"])?;
    for (step, acc) in rows {
        w.write_record([step.to_string(), format!("{acc:.6}")])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    Ok(())
}
