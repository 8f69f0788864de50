//! ReAct instruction rendering and the word-level vocabulary shared with the
//! policy.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, IntentSchema, NO_TOOL};
use crate::error::{Error, Result};

pub type TokenId = usize;

pub const EOS: &str = "<eos>";
pub const NEWLINE: &str = "\n";
pub const THOUGHT: &str = "Thought:";
pub const ACTION: &str = "Action:";
pub const FINISH: &str = "Finish!";
pub const QUESTION: &str = "Question:";

/// Reserved tokens, always at the start of the vocabulary in this order.
pub const CONTROL_TOKENS: [&str; 8] = [
    EOS, NEWLINE, THOUGHT, ACTION, FINISH, QUESTION, "Last", "Tool:",
];

pub const EOS_ID: TokenId = 0;
pub const NEWLINE_ID: TokenId = 1;
pub const THOUGHT_ID: TokenId = 2;
pub const ACTION_ID: TokenId = 3;
pub const FINISH_ID: TokenId = 4;

/// Body of the thought line in canonical completions.
pub const THOUGHT_TEXT: &str = "route";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    WithThought,
    WithoutThought,
}

const PREAMBLE: &str = "You are an agent that helps users choose the right tool or tools from the list of given tools to solve their problems.\n\
\n\
For each tool, you are first given its description and required parameters. Then, a logic module specifically explains the logical information needed for this tool to handle multi-turn conversation issues.\n\
\n\
## Tool APIs\n\
\n";

const FORMAT_HEAD: &str = "## Output Format\n\
\n\
Use the following format:\n\
\n\
Last Tool: the tool used in last query\n\
Question: the input question you must answer\n";

const FORMAT_THOUGHT: &str = "Thought: you should always think about what to do\n";

const FORMAT_TAIL: &str = "Action: the action to take\n\
Finish!\n\
\n\
Begin!\n";

/// Renders the instruction text. Pure in `(schema, dialogue, variant)`.
pub fn render_text(schema: &IntentSchema, dialogue: &Dialogue, variant: PromptVariant) -> String {
    let mut out = String::with_capacity(2048);
    out.push_str(PREAMBLE);
    for def in &schema.intents {
        out.push_str(&def.name);
        out.push_str(" : ");
        out.push_str(&canonical(&def.description));
        out.push('\n');
    }
    out.push_str("\n## Task Logic\n\n");
    for def in &schema.intents {
        out.push_str(&def.name);
        out.push_str(" : ");
        out.push_str(&canonical(&def.logic_text));
        out.push('\n');
    }
    out.push('\n');
    out.push_str(FORMAT_HEAD);
    if variant == PromptVariant::WithThought {
        out.push_str(FORMAT_THOUGHT);
    }
    out.push_str(FORMAT_TAIL);
    out.push_str("Last Tool: ");
    out.push_str(if dialogue.last_tool.is_empty() {
        NO_TOOL
    } else {
        &dialogue.last_tool
    });
    out.push_str("\nQuestion: ");
    out.push_str(&canonical(dialogue.current_utterance()));
    out
}

fn canonical(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The gold completion used for supervised training and as the oracle output.
pub fn canonical_completion(variant: PromptVariant, intent: &str) -> String {
    match variant {
        PromptVariant::WithThought => {
            format!("{THOUGHT} {THOUGHT_TEXT}\n{ACTION} {intent}\n{FINISH}")
        }
        PromptVariant::WithoutThought => format!("{ACTION} {intent}\n{FINISH}"),
    }
}

/// Splits on whitespace, keeping each newline as its own token.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push(NEWLINE);
        }
        out.extend(line.split_whitespace());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, c) in CONTROL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*c) {
                return Err(Error::SchemaMismatch(format!(
                    "vocab position {i} must hold control token {c:?}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::SchemaMismatch(format!(
                    "duplicate vocab token {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        split_words(text)
            .into_iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::OutOfVocabulary(w.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            let tok = self.token(id).ok_or(Error::InvalidToken(id))?;
            if id == NEWLINE_ID {
                out.push('\n');
                line_start = true;
            } else {
                if !line_start {
                    out.push(' ');
                }
                out.push_str(tok);
                line_start = false;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.tokens)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        Self::from_tokens(tokens)
    }

    /// Checks that every intent in `schema` is a single known token.
    pub fn check_schema(&self, schema: &IntentSchema) -> Result<()> {
        for name in schema.names() {
            if self.id(name).is_none() {
                return Err(Error::SchemaMismatch(format!(
                    "intent `{name}` is not a single vocabulary token"
                )));
            }
        }
        Ok(())
    }
}

/// Builds a vocabulary covering every word any of `schemas` can render for
/// any of `dialogues`, plus canonical completions. Control tokens come first,
/// the rest is sorted.
pub fn build_vocab(schemas: &[&IntentSchema], dialogues: &[Dialogue]) -> Vocab {
    let mut words: BTreeSet<String> = BTreeSet::new();
    let mut add = |text: &str| {
        for w in split_words(text) {
            words.insert(w.to_string());
        }
    };
    for text in [
        PREAMBLE,
        FORMAT_HEAD,
        FORMAT_THOUGHT,
        FORMAT_TAIL,
        "## Task Logic",
        ":",
        NO_TOOL,
        THOUGHT_TEXT,
    ] {
        add(text);
    }
    for schema in schemas {
        for def in &schema.intents {
            add(&def.name);
            add(&def.description);
            add(&def.logic_text);
        }
    }
    for d in dialogues {
        add(&d.last_tool);
        add(&d.gold_intent);
        add(d.current_utterance());
    }
    let mut tokens: Vec<String> = CONTROL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        words
            .into_iter()
            .filter(|w| !CONTROL_TOKENS.contains(&w.as_str())),
    );
    Vocab::from_tokens(tokens).expect("control tokens are placed first and words are deduplicated")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub dialogue_id: String,
    pub rendered_text: String,
    pub token_ids: Vec<TokenId>,
    pub gold_intent: String,
    pub variant: PromptVariant,
}

pub fn render_instruction(
    schema: &IntentSchema,
    dialogue: &Dialogue,
    variant: PromptVariant,
    vocab: &Vocab,
) -> Result<PromptInstance> {
    if schema.is_empty() {
        return Err(Error::Empty("schema"));
    }
    vocab.check_schema(schema)?;
    if vocab.id(&dialogue.gold_intent).is_none() {
        return Err(Error::SchemaMismatch(format!(
            "gold intent `{}` of `{}` is not a single vocabulary token",
            dialogue.gold_intent, dialogue.id
        )));
    }
    let rendered_text = render_text(schema, dialogue, variant);
    let token_ids = vocab.tokenize(&rendered_text)?;
    Ok(PromptInstance {
        dialogue_id: dialogue.id.clone(),
        rendered_text,
        token_ids,
        gold_intent: dialogue.gold_intent.clone(),
        variant,
    })
}

/// Renders a batch of dialogues against one schema.
pub fn render_all(
    schema: &IntentSchema,
    dialogues: &[Dialogue],
    variant: PromptVariant,
    vocab: &Vocab,
) -> Result<Vec<PromptInstance>> {
    dialogues
        .iter()
        .map(|d| render_instruction(schema, d, variant, vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, GeneratorSpec, IntentDef, Split, Turn};

    fn setup() -> (corpus::Corpus, Vocab) {
        let c = corpus::generate_synthetic_corpus(&GeneratorSpec {
            train_samples: 80,
            test_samples: 40,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let v = build_vocab(&[&c.schema], &c.dialogues);
        (c, v)
    }

    fn first_turn(c: &corpus::Corpus) -> Dialogue {
        c.dialogues
            .iter()
            .find(|d| d.turns.len() == 1)
            .unwrap()
            .clone()
    }

    #[test]
    fn with_thought_has_thought_line() {
        let schema = IntentSchema::new(
            "t",
            vec![
                IntentDef::new("hotel", "rooms to stay", "a"),
                IntentDef::new("taxi", "rides", "b"),
                IntentDef::new("train", "rail trips", "c"),
            ],
        )
        .unwrap();
        let d = Dialogue {
            id: "x".into(),
            turns: vec![Turn {
                user_utterance: "a room please".into(),
                assistant_response: String::new(),
                intent_label: None,
            }],
            last_tool: NO_TOOL.into(),
            gold_intent: "hotel".into(),
            category: "hotel".into(),
            split: Split::Test,
            extra: Default::default(),
        };
        let with = render_text(&schema, &d, PromptVariant::WithThought);
        let without = render_text(&schema, &d, PromptVariant::WithoutThought);
        assert!(with.contains("Thought:"));
        assert!(!without.contains("Thought:"));
        assert!(with.ends_with("Last Tool: none\nQuestion: a room please"));

        // the two variants differ by exactly the thought line
        let a: Vec<&str> = with.lines().collect();
        let b: Vec<&str> = without.lines().collect();
        assert_eq!(a.len(), b.len() + 1);
        let removed: Vec<&&str> = a.iter().filter(|l| !b.contains(l)).collect();
        assert_eq!(
            removed,
            vec![&"Thought: you should always think about what to do"]
        );
    }

    #[test]
    fn block_order_and_single_name_occurrence() {
        let (c, v) = setup();
        let d = first_turn(&c);
        let text = render_text(&c.schema, &d, PromptVariant::WithThought);
        let tools = text.find("## Tool APIs").unwrap();
        let logic = text.find("## Task Logic").unwrap();
        let format = text.find("## Output Format").unwrap();
        let last = text.rfind("Last Tool:").unwrap();
        let question = text.rfind("Question:").unwrap();
        assert!(tools < logic && logic < format && format < last && last < question);
        let tools_block = &text[tools..logic];
        for name in c.schema.names() {
            let n = tools_block
                .split_whitespace()
                .filter(|w| *w == name)
                .count();
            assert_eq!(n, 1, "{name}");
        }
        let p = render_instruction(&c.schema, &d, PromptVariant::WithThought, &v).unwrap();
        assert_eq!(v.detokenize(&p.token_ids).unwrap(), p.rendered_text);
    }

    #[test]
    fn generalization_schemas_name_each_intent_once() {
        let (c, _) = setup();
        let spec = GeneratorSpec::default();
        let unseen = corpus::generate_unseen_suite(&spec, &c.schema).unwrap();
        let (sub, _) = corpus::subdivide_intent(
            &c.schema,
            &c.test(),
            "chat",
            &corpus::chat_subdivision(),
            &corpus::chat_keyword_relabel,
        )
        .unwrap();
        let (grp, _) = corpus::group_intents(
            &sub,
            &c.test(),
            &["friend_rec", "bot_rec"],
            &corpus::social_merge(),
        )
        .unwrap();
        let d = first_turn(&c);
        for schema in [&c.schema, &unseen.schema, &sub, &grp] {
            let text = render_text(schema, &d, PromptVariant::WithoutThought);
            let block =
                &text[text.find("## Tool APIs").unwrap()..text.find("## Task Logic").unwrap()];
            for name in schema.names() {
                assert_eq!(
                    block.split_whitespace().filter(|w| *w == name).count(),
                    1,
                    "{name}"
                );
            }
        }
    }

    #[test]
    fn last_tool_rendered() {
        let (c, _) = setup();
        let multi = c.dialogues.iter().find(|d| d.turns.len() > 1).unwrap();
        let text = render_text(&c.schema, multi, PromptVariant::WithThought);
        assert!(text.contains(&format!("Last Tool: {}\n", multi.last_tool)));
    }

    #[test]
    fn vocab_is_deterministic_and_covers_corpus() {
        let (c, v) = setup();
        let again = build_vocab(&[&c.schema], &c.dialogues);
        assert_eq!(v, again);
        assert_eq!(v.id(FINISH), Some(FINISH_ID));
        assert_eq!(v.id(EOS), Some(EOS_ID));
        assert_eq!(v.id(NEWLINE), Some(NEWLINE_ID));
        for d in &c.dialogues {
            assert!(v.id(&d.gold_intent).is_some());
            for variant in [PromptVariant::WithThought, PromptVariant::WithoutThought] {
                let p = render_instruction(&c.schema, d, variant, &v).unwrap();
                assert_eq!(v.detokenize(&p.token_ids).unwrap(), p.rendered_text);
                let gold = canonical_completion(variant, &d.gold_intent);
                assert_eq!(v.detokenize(&v.tokenize(&gold).unwrap()).unwrap(), gold);
            }
        }
        let rest = &v.tokens()[CONTROL_TOKENS.len()..];
        assert!(rest.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tokenizer_counts_newlines() {
        let (_, v) = setup();
        let ids = v.tokenize("Action: hotel\nFinish!").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[2], NEWLINE_ID);
        let s = "Thought: route\nAction: taxi\nFinish!";
        assert_eq!(v.detokenize(&v.tokenize(s).unwrap()).unwrap(), s);
        match v.tokenize("Action: zzz") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, "zzz"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            v.detokenize(&[v.len()]),
            Err(Error::InvalidToken(_))
        ));
    }

    #[test]
    fn vocab_round_trip_and_validation() {
        let (_, v) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        let mut bad = v.tokens().to_vec();
        bad.swap(0, 4);
        assert!(Vocab::from_tokens(bad).is_err());
    }

    #[test]
    fn schema_vocab_mismatch() {
        let (c, v) = setup();
        let mut schema = c.schema.clone();
        schema.intents[0].name = "not_in_vocab".into();
        let err = render_instruction(&schema, &c.dialogues[0], PromptVariant::WithThought, &v)
            .unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }
}
