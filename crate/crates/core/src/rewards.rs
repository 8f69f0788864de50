//! Rule-based rewards: ReAct completion parsing, the binary format and answer
//! rewards, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{PromptVariant, ACTION, FINISH, THOUGHT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_format: f64,
    pub lambda_answer: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_format: 1.0,
            lambda_answer: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn new(lambda_format: f64, lambda_answer: f64) -> Result<Self> {
        let w = Self {
            lambda_format,
            lambda_answer,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_format", self.lambda_format),
            ("lambda_answer", self.lambda_answer),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(
                    field,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        if self.lambda_format == 0.0 && self.lambda_answer == 0.0 {
            return Err(Error::validation(
                "weights",
                "lambda_format and lambda_answer are both zero",
            ));
        }
        Ok(())
    }

    /// Largest reward a single rollout can earn.
    pub fn max_per_rollout(&self) -> f64 {
        self.lambda_format + self.lambda_answer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    Strict,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    MissingThought,
    MissingAction,
    MissingFinish,
    EmptyAction,
    DuplicateThought,
    DuplicateAction,
    DuplicateFinish,
    WrongLineCount,
    ThoughtLineExpected,
    ActionLineExpected,
    FinishLineNotExact,
    ActionNotSingleToken,
}

impl Violation {
    /// Whether the violation also fails the relaxed format check.
    pub fn fails_relaxed(self) -> bool {
        matches!(
            self,
            Violation::MissingThought
                | Violation::MissingAction
                | Violation::MissingFinish
                | Violation::EmptyAction
        )
    }

    fn applies(self, strictness: Strictness) -> bool {
        match strictness {
            Strictness::Strict => true,
            Strictness::Relaxed => self.fails_relaxed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub thought: Option<String>,
    pub action: Option<String>,
    pub lines: Vec<String>,
    pub violations: Vec<Violation>,
}

fn rest_of_line_after<'a>(text: &'a str, keyword: &str) -> Option<&'a str> {
    let at = text.find(keyword)?;
    let rest = &text[at + keyword.len()..];
    Some(rest.split('\n').next().unwrap_or("").trim())
}

/// Parses a decoded completion. Never fails: anything off-format is recorded
/// as a violation. Lines are compared after trimming surrounding whitespace.
pub fn parse_completion(
    text: &str,
    variant: PromptVariant,
    strictness: Strictness,
) -> ParsedCompletion {
    let lines: Vec<String> = text.split('\n').map(|l| l.trim().to_string()).collect();
    let action = rest_of_line_after(text, ACTION)
        .filter(|a| !a.is_empty())
        .map(str::to_string);
    let thought = rest_of_line_after(text, THOUGHT).map(str::to_string);

    let count = |kw: &str| text.matches(kw).count();
    let with_thought = variant == PromptVariant::WithThought;
    let mut v = Vec::new();

    let mut keywords = vec![
        (ACTION, Violation::MissingAction, Violation::DuplicateAction),
        (FINISH, Violation::MissingFinish, Violation::DuplicateFinish),
    ];
    if with_thought {
        keywords.insert(
            0,
            (
                THOUGHT,
                Violation::MissingThought,
                Violation::DuplicateThought,
            ),
        );
    }
    for (kw, missing, duplicate) in keywords {
        match count(kw) {
            0 => v.push(missing),
            1 => {}
            _ => v.push(duplicate),
        }
    }
    if count(ACTION) > 0 && action.is_none() {
        v.push(Violation::EmptyAction);
    }

    let expected_lines = if with_thought { 3 } else { 2 };
    if lines.len() != expected_lines {
        v.push(Violation::WrongLineCount);
    }
    let offset = usize::from(with_thought);
    if with_thought && !lines[0].starts_with(THOUGHT) {
        v.push(Violation::ThoughtLineExpected);
    }
    match lines.get(offset) {
        Some(l) if l.starts_with(ACTION) => {
            let payload = l[ACTION.len()..].trim();
            if !payload.is_empty() && payload.split_whitespace().count() != 1 {
                v.push(Violation::ActionNotSingleToken);
            }
        }
        _ => v.push(Violation::ActionLineExpected),
    }
    if lines.get(offset + 1).map(String::as_str) != Some(FINISH) {
        v.push(Violation::FinishLineNotExact);
    }

    v.retain(|x| x.applies(strictness));
    v.sort();
    v.dedup();
    ParsedCompletion {
        thought,
        action,
        lines,
        violations: v,
    }
}

pub fn format_reward(parsed: &ParsedCompletion, strictness: Strictness) -> u8 {
    u8::from(!parsed.violations.iter().any(|x| x.applies(strictness)))
}

/// Exact, case-sensitive match of the extracted action against the gold intent.
pub fn accuracy_reward(parsed: &ParsedCompletion, gold: &str) -> u8 {
    u8::from(parsed.action.as_deref() == Some(gold.trim()))
}

pub fn combined_reward(r_format: u8, r_answer: u8, weights: &RewardWeights) -> f64 {
    weights.lambda_format * f64::from(r_format) + weights.lambda_answer * f64::from(r_answer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub sample_id: String,
    pub rollout_index: usize,
    pub r_format: u8,
    pub r_answer: u8,
    pub combined: f64,
    pub step: u64,
}

/// Parses and scores one completion.
pub fn score_completion(
    text: &str,
    gold: &str,
    variant: PromptVariant,
    strictness: Strictness,
    weights: &RewardWeights,
) -> (u8, u8, f64) {
    let parsed = parse_completion(text, variant, strictness);
    let f = format_reward(&parsed, strictness);
    let a = accuracy_reward(&parsed, gold);
    (f, a, combined_reward(f, a, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use PromptVariant::*;
    use Strictness::*;

    #[test]
    fn well_formed() {
        let p = parse_completion(
            "Thought: wants a room\nAction: find_hotel\nFinish!",
            WithThought,
            Strict,
        );
        assert_eq!(p.thought.as_deref(), Some("wants a room"));
        assert_eq!(p.action.as_deref(), Some("find_hotel"));
        assert!(p.violations.is_empty());
        assert_eq!(format_reward(&p, Strict), 1);
    }

    #[test]
    fn missing_thought() {
        let p = parse_completion("Action: find_hotel\nFinish!", WithThought, Strict);
        assert!(p.violations.contains(&Violation::MissingThought));
        assert_eq!(format_reward(&p, Strict), 0);
        let p = parse_completion("Action: find_hotel\nFinish!", WithoutThought, Strict);
        assert!(p.violations.is_empty());
    }

    #[test]
    fn trailing_text_strict_vs_relaxed() {
        let text = "Thought: a\nAction: b\nFinish! thanks";
        let s = parse_completion(text, WithThought, Strict);
        assert_eq!(s.violations, vec![Violation::FinishLineNotExact]);
        let r = parse_completion(text, WithThought, Relaxed);
        assert!(r.violations.is_empty());
        assert_eq!(format_reward(&s, Strict), 0);
        assert_eq!(format_reward(&r, Relaxed), 1);
        assert_eq!(format_reward(&s, Relaxed), 1);
    }

    #[test]
    fn duplicated_action() {
        let p = parse_completion(
            "Thought: a\nAction: b\nAction: c\nFinish!",
            WithThought,
            Strict,
        );
        assert!(p.violations.contains(&Violation::DuplicateAction));
        assert_eq!(p.action.as_deref(), Some("b"));
        assert_eq!(format_reward(&p, Strict), 0);
        assert_eq!(format_reward(&p, Relaxed), 1);
    }

    #[test]
    fn accuracy_is_exact() {
        let p = parse_completion(
            "Thought: x\nAction: find_hotel\nFinish!",
            WithThought,
            Strict,
        );
        assert_eq!(accuracy_reward(&p, "find_hotel"), 1);
        let p = parse_completion(
            "Thought: x\nAction: find_hotels\nFinish!",
            WithThought,
            Strict,
        );
        assert_eq!(accuracy_reward(&p, "find_hotel"), 0);
        let p = parse_completion("Thought: x\nFinish!", WithThought, Strict);
        assert_eq!(p.action, None);
        assert_eq!(accuracy_reward(&p, "find_hotel"), 0);
        let p = parse_completion("Action: Find_Hotel", WithThought, Strict);
        assert_eq!(accuracy_reward(&p, "find_hotel"), 0);
    }

    #[test]
    fn answer_reward_survives_broken_format() {
        let p = parse_completion("blah Action: taxi", WithThought, Strict);
        assert_eq!(format_reward(&p, Strict), 0);
        assert_eq!(accuracy_reward(&p, "taxi"), 1);
    }

    #[test]
    fn leading_whitespace_is_tolerated() {
        let p = parse_completion("  Thought: a\n Action: taxi \nFinish!", WithThought, Strict);
        assert!(p.violations.is_empty(), "{:?}", p.violations);
        assert_eq!(p.action.as_deref(), Some("taxi"));
    }

    #[test]
    fn combined_examples() {
        let w = RewardWeights::default();
        assert_eq!(combined_reward(1, 1, &w), 2.0);
        assert_eq!(combined_reward(0, 0, &w), 0.0);
        let w = RewardWeights::new(0.5, 1.0).unwrap();
        assert_eq!(combined_reward(1, 0, &w), 0.5);
        assert!(RewardWeights::new(0.0, 0.0).is_err());
        assert!(RewardWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn record_serialization_fields() {
        let r = RewardRecord {
            sample_id: "train-00001".into(),
            rollout_index: 3,
            r_format: 1,
            r_answer: 0,
            combined: 1.0,
            step: 12,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"sample_id":"train-00001","rollout_index":3,"r_format":1,"r_answer":0,"combined":1.0,"step":12}"#
        );
    }
}
