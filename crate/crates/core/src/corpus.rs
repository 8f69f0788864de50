//! Dialogue and intent data model, the synthetic task-oriented corpus, the
//! generalization split builders and JSONL persistence.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

/// Sentinel rendered as the last tool on first turns.
pub const NO_TOOL: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentDef {
    pub name: String,
    pub description: String,
    pub logic_text: String,
}

impl IntentDef {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        logic_text: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            logic_text: logic_text.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(Error::validation(
                "intent.name",
                format!("`{}` must be non-empty without whitespace", self.name),
            ));
        }
        if self.name.chars().any(char::is_uppercase) {
            return Err(Error::validation(
                "intent.name",
                format!("`{}` must be lowercase", self.name),
            ));
        }
        if self.description.trim().is_empty() {
            return Err(Error::validation(
                "intent.description",
                format!("`{}` has an empty description", self.name),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSchema {
    pub version_tag: String,
    pub intents: Vec<IntentDef>,
}

impl IntentSchema {
    pub fn new(version_tag: impl Into<String>, intents: Vec<IntentDef>) -> Result<Self> {
        let schema = Self {
            version_tag: version_tag.into(),
            intents,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intents.is_empty() {
            return Err(Error::validation(
                "schema.intents",
                "needs at least one intent",
            ));
        }
        let mut seen = HashSet::new();
        for def in &self.intents {
            def.validate()?;
            if !seen.insert(def.name.as_str()) {
                return Err(Error::validation(
                    "schema.intents",
                    format!("duplicate intent `{}`", def.name),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.intents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.intents.iter().any(|d| d.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&IntentDef> {
        self.intents.iter().find(|d| d.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.intents.iter().map(|d| d.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user_utterance: String,
    pub assistant_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub last_tool: String,
    pub gold_intent: String,
    pub category: String,
    pub split: Split,
    /// Fields this version does not know about, kept so they survive a round trip.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Dialogue {
    /// The utterance the intent has to be detected for.
    pub fn current_utterance(&self) -> &str {
        self.turns
            .last()
            .map(|t| t.user_utterance.as_str())
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::validation(
                "dialogue.turns",
                format!("`{}` has no turns", self.id),
            ));
        }
        if self
            .turns
            .iter()
            .any(|t| t.user_utterance.trim().is_empty())
        {
            return Err(Error::validation(
                "turn.user_utterance",
                format!("`{}` has an empty utterance", self.id),
            ));
        }
        let expected = self.turns[..self.turns.len() - 1]
            .iter()
            .rev()
            .find_map(|t| t.intent_label.as_deref())
            .unwrap_or(NO_TOOL);
        if self.last_tool != expected {
            return Err(Error::validation(
                "dialogue.last_tool",
                format!(
                    "`{}` has last_tool `{}`, expected `{expected}`",
                    self.id, self.last_tool
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_intents: usize,
    pub templates_per_intent: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub vocab_noise_tokens: usize,
    pub rng_seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_intents: 8,
            templates_per_intent: 8,
            train_samples: 800,
            test_samples: 200,
            vocab_noise_tokens: 16,
            rng_seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_intents", self.n_intents),
            ("templates_per_intent", self.templates_per_intent),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("vocab_noise_tokens", self.vocab_noise_tokens),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::validation(field, "must be at least 1"));
            }
        }
        if self.n_intents > LIBRARY.len() {
            return Err(Error::validation(
                "n_intents",
                format!("at most {} intents are available", LIBRARY.len()),
            ));
        }
        if self.train_samples < self.n_intents {
            return Err(Error::validation(
                "train_samples",
                "must be at least n_intents",
            ));
        }
        if self.test_samples < self.n_intents {
            return Err(Error::validation(
                "test_samples",
                "must be at least n_intents",
            ));
        }
        Ok(())
    }
}

/// A schema together with its dialogues.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: IntentSchema,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<Dialogue> {
        self.dialogues
            .iter()
            .filter(|d| d.split == split)
            .cloned()
            .collect()
    }

    pub fn train(&self) -> Vec<Dialogue> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<Dialogue> {
        self.split(Split::Test)
    }
}

// ---------------------------------------------------------------------------
// Intent library used by the synthetic generator.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Travel,
    Social,
    Assistant,
    Kids,
}

impl Family {
    fn shared_words(self) -> &'static [&'static str] {
        match self {
            Family::Travel => &["book", "reserve", "near", "tonight", "tomorrow", "cheap"],
            Family::Social => &["recommend", "suggest", "someone", "new"],
            Family::Assistant => &["make", "create", "something", "quick"],
            Family::Kids => &["child", "kids", "little", "fun"],
        }
    }
}

struct LibraryIntent {
    name: &'static str,
    description: &'static str,
    logic: &'static str,
    family: Family,
    common: [&'static str; 4],
    rare: [&'static str; 2],
}

const fn intent(
    name: &'static str,
    description: &'static str,
    logic: &'static str,
    family: Family,
    common: [&'static str; 4],
    rare: [&'static str; 2],
) -> LibraryIntent {
    LibraryIntent {
        name,
        description,
        logic,
        family,
        common,
        rare,
    }
}

/// Intents the generator can put into a training schema, in order.
const LIBRARY: [LibraryIntent; 11] = [
    intent(
        "attraction",
        "find a museum park gallery or sights to visit in town",
        "keep it while the user asks about places to visit",
        Family::Travel,
        ["museum", "park", "gallery", "sights"],
        ["theatre", "architecture"],
    ),
    intent(
        "hotel",
        "find and book lodging with a room for a night stay",
        "keep it while the user asks about rooms or nights",
        Family::Travel,
        ["lodging", "room", "night", "stay"],
        ["guesthouse", "bed"],
    ),
    intent(
        "restaurant",
        "find a place to eat food with a table for dinner",
        "keep it while the user asks about meals or tables",
        Family::Travel,
        ["eat", "food", "table", "dinner"],
        ["cuisine", "lunch"],
    ),
    intent(
        "taxi",
        "order a cab ride with pickup to drive you somewhere",
        "keep it while the user asks about pickup or rides",
        Family::Travel,
        ["cab", "ride", "pickup", "drive"],
        ["driver", "car"],
    ),
    intent(
        "train",
        "check rail tickets departure times and the station",
        "keep it while the user asks about departures or tickets",
        Family::Travel,
        ["rail", "tickets", "departure", "station"],
        ["platform", "railway"],
    ),
    intent(
        "chat",
        "free text conversation and writing help on any topic",
        "use it when no other tool fits the request",
        Family::Assistant,
        ["conversation", "writing", "topic", "talk"],
        ["essay", "opinion"],
    ),
    intent(
        "friend_rec",
        "recommend people and friends you may know to connect with",
        "switch here when the user wants human contacts",
        Family::Social,
        ["people", "friends", "connect", "know"],
        ["classmates", "neighbours"],
    ),
    intent(
        "bot_rec",
        "recommend chatbots and virtual agents as a partner",
        "switch here when the user wants an artificial contact",
        Family::Social,
        ["chatbots", "virtual", "agents", "partner"],
        ["companion", "persona"],
    ),
    intent(
        "set_signature",
        "set or change the personal signature on your profile",
        "keep it while the user edits profile text",
        Family::Assistant,
        ["signature", "profile", "personal", "change"],
        ["motto", "bio"],
    ),
    intent(
        "text_to_image",
        "generate a picture or drawing from a text prompt",
        "switch here when the user describes an image to produce",
        Family::Assistant,
        ["picture", "drawing", "generate", "prompt"],
        ["illustration", "sketch"],
    ),
    intent(
        "image_style",
        "transform the style of a photo into cartoon or painting",
        "switch here when the user uploads a photo to restyle",
        Family::Assistant,
        ["photo", "style", "cartoon", "painting"],
        ["filter", "anime"],
    ),
];

/// Intents that never appear in training; they back the unseen-intent suite.
const UNSEEN_LIBRARY: [LibraryIntent; 5] = [
    intent(
        "sing_song",
        "sing a nursery rhyme or song for children",
        "use it for singing requests",
        Family::Kids,
        ["sing", "song", "nursery", "rhyme"],
        ["lullaby", "melody"],
    ),
    intent(
        "tell_story",
        "tell a bedtime story or fairy tale",
        "use it for storytelling requests",
        Family::Kids,
        ["story", "bedtime", "fairy", "tale"],
        ["legend", "fable"],
    ),
    intent(
        "guess_game",
        "ask a riddle or guessing game puzzle",
        "use it for guessing games",
        Family::Kids,
        ["riddle", "guessing", "game", "puzzle"],
        ["quiz", "brainteaser"],
    ),
    intent(
        "animal_sounds",
        "play the sounds animals make like a cow or dog",
        "use it for animal noises",
        Family::Kids,
        ["animals", "sounds", "cow", "dog"],
        ["zoo", "farm"],
    ),
    intent(
        "homework_help",
        "explain school homework and simple lessons",
        "use it for school questions",
        Family::Kids,
        ["homework", "school", "lessons", "explain"],
        ["teacher", "exercise"],
    ),
];

/// Keyword families inside the chat intent, used for the subdivided suite.
pub const CHAT_SUBFAMILIES: [(&str, &str, [&str; 4]); 3] = [
    (
        "text_processing",
        "translate summarize calculate or write code for a text task",
        ["translate", "summarize", "calculate", "code"],
    ),
    (
        "safety_topic",
        "handle unsafe requests about violence weapons or drugs",
        ["violence", "weapons", "drugs", "unsafe"],
    ),
    (
        "free_chat",
        "casual chit chat jokes feelings and other small talk",
        ["joke", "feelings", "bored", "hobbies"],
    ),
];

const FRAMES: [&str; 8] = [
    "i want {a} and {b}",
    "can you help me with {a} {b}",
    "please find {a} for {b}",
    "i am looking for {a} with {b}",
    "do you know about {a} {b}",
    "help me get {a} {b} please",
    "could you sort out {a} and {b} for me",
    "i need {a} {b}",
];

const NOISE_WORDS: [&str; 20] = [
    "um", "hey", "so", "well", "actually", "ok", "hi", "thanks", "maybe", "right", "now", "today",
    "just", "also", "really", "quite", "there", "again", "still", "anyway",
];

const RESPONSES: [&str; 4] = [
    "sure here is what i found",
    "done let me know if you need more",
    "okay i have taken care of that",
    "here are some options for you",
];

fn noise_pool(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match NOISE_WORDS.get(i) {
            Some(w) => (*w).to_string(),
            None => format!("filler{i}"),
        })
        .collect()
}

fn library_def(lib: &LibraryIntent) -> IntentDef {
    IntentDef::new(lib.name, lib.description, lib.logic)
}

/// A fixed utterance skeleton for one intent. Hard templates carry a single
/// rare keyword surrounded by words shared across the intent family.
#[derive(Debug, Clone)]
struct Template {
    words: Vec<String>,
}

fn build_templates(lib: &LibraryIntent, count: usize, rng: &mut impl Rng) -> Vec<Template> {
    let shared = lib.family.shared_words();
    (0..count)
        .map(|t| {
            let frame = FRAMES[rng.gen_range(0..FRAMES.len())];
            let hard = t % 4 == 3;
            let (a, b, extra) = if hard {
                let rare = lib.rare[(t / 4) % lib.rare.len()];
                let mut picks: Vec<&str> = shared.choose_multiple(rng, 2).copied().collect();
                picks.shuffle(rng);
                (
                    rare.to_string(),
                    picks[0].to_string(),
                    Some(picks[1].to_string()),
                )
            } else {
                let picks: Vec<&str> = lib.common.choose_multiple(rng, 2).copied().collect();
                (picks[0].to_string(), picks[1].to_string(), None)
            };
            let (a, b) = if lib.name == "chat" {
                // every chat template names exactly one chat subfamily
                let (_, _, words) = CHAT_SUBFAMILIES[t % CHAT_SUBFAMILIES.len()];
                (a, words[(t / 3) % words.len()].to_string())
            } else {
                (a, b)
            };
            let mut words: Vec<String> = frame
                .replace("{a}", &a)
                .replace("{b}", &b)
                .split_whitespace()
                .map(str::to_string)
                .collect();
            if let Some(e) = extra {
                words.push(e);
            }
            Template { words }
        })
        .collect()
}

fn utterance(template: &Template, noise: &[String], rng: &mut impl Rng) -> String {
    let mut words = template.words.clone();
    let n_noise = rng.gen_range(0..=2);
    for _ in 0..n_noise {
        let w = noise[rng.gen_range(0..noise.len())].clone();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, w);
    }
    words.join(" ")
}

struct Generator<'a> {
    intents: Vec<&'a LibraryIntent>,
    templates: Vec<Vec<Template>>,
    noise: Vec<String>,
}

impl<'a> Generator<'a> {
    fn new(intents: Vec<&'a LibraryIntent>, spec: &GeneratorSpec, salt: u64) -> Self {
        let templates = intents
            .iter()
            .enumerate()
            .map(|(i, lib)| {
                let mut rng = seeds::rng(spec.rng_seed, Stream::Data, &[salt, i as u64]);
                build_templates(lib, spec.templates_per_intent, &mut rng)
            })
            .collect();
        Self {
            intents,
            templates,
            noise: noise_pool(spec.vocab_noise_tokens),
        }
    }

    fn dialogue(
        &self,
        id: String,
        intent: usize,
        split: Split,
        switch_pool: &[usize],
        rng: &mut impl Rng,
    ) -> Dialogue {
        let n_turns = match rng.gen_range(0..10) {
            0..=4 => 1,
            5..=7 => 2,
            _ => 3,
        };
        // at most one tool switch: all history turns share one intent
        let history_intent = if n_turns > 1 && rng.gen_bool(0.5) && !switch_pool.is_empty() {
            switch_pool[rng.gen_range(0..switch_pool.len())]
        } else {
            intent
        };
        let mut turns = Vec::with_capacity(n_turns);
        for k in 0..n_turns {
            let current = k + 1 == n_turns;
            let which = if current { intent } else { history_intent };
            let templates = &self.templates[which];
            let t = &templates[rng.gen_range(0..templates.len())];
            turns.push(Turn {
                user_utterance: utterance(t, &self.noise, rng),
                assistant_response: if current {
                    String::new()
                } else {
                    RESPONSES[rng.gen_range(0..RESPONSES.len())].to_string()
                },
                intent_label: if current {
                    None
                } else {
                    Some(self.intents[which].name.to_string())
                },
            });
        }
        let last_tool = if n_turns > 1 {
            self.intents[history_intent].name.to_string()
        } else {
            NO_TOOL.to_string()
        };
        let name = self.intents[intent].name.to_string();
        Dialogue {
            id,
            turns,
            last_tool,
            gold_intent: name.clone(),
            category: name,
            split,
            extra: Map::new(),
        }
    }
}

/// Generates the base schema and its train/test dialogues.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec) -> Result<Corpus> {
    spec.validate()?;
    let libs: Vec<&LibraryIntent> = LIBRARY[..spec.n_intents].iter().collect();
    let schema = IntentSchema::new(
        format!("synthetic-k{}-s{}", spec.n_intents, spec.rng_seed),
        libs.iter().map(|l| library_def(l)).collect(),
    )?;
    let gen = Generator::new(libs, spec, 0);
    let all: Vec<usize> = (0..spec.n_intents).collect();
    let mut dialogues = Vec::with_capacity(spec.train_samples + spec.test_samples);
    for (split, count, salt) in [
        (Split::Train, spec.train_samples, 1u64),
        (Split::Test, spec.test_samples, 2u64),
    ] {
        let mut rng = seeds::rng(spec.rng_seed, Stream::Data, &[salt]);
        for i in 0..count {
            let id = format!("{}-{:05}", split_name(split), i);
            let intent = i % spec.n_intents;
            dialogues.push(gen.dialogue(id, intent, split, &all, &mut rng));
        }
    }
    Ok(Corpus { schema, dialogues })
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Test dialogues over intents that never occur in training, together with
/// the base schema extended by their definitions.
pub fn generate_unseen_suite(spec: &GeneratorSpec, base: &IntentSchema) -> Result<Corpus> {
    spec.validate()?;
    let mut intents = base.intents.clone();
    intents.extend(UNSEEN_LIBRARY.iter().map(library_def));
    let schema = IntentSchema::new(format!("{}+unseen", base.version_tag), intents)?;
    let libs: Vec<&LibraryIntent> = UNSEEN_LIBRARY.iter().collect();
    let gen = Generator::new(libs, spec, 3);
    let per_intent = (spec.test_samples / spec.n_intents).max(1);
    let mut rng = seeds::rng(spec.rng_seed, Stream::Data, &[4]);
    let none: [usize; 0] = [];
    let dialogues = (0..per_intent * UNSEEN_LIBRARY.len())
        .map(|i| {
            gen.dialogue(
                format!("unseen-{i:05}"),
                i % UNSEEN_LIBRARY.len(),
                Split::Test,
                &none,
                &mut rng,
            )
        })
        .collect();
    Ok(Corpus { schema, dialogues })
}

/// Definitions replacing `chat` in the subdivided suite.
pub fn chat_subdivision() -> Vec<IntentDef> {
    CHAT_SUBFAMILIES
        .iter()
        .map(|(name, desc, _)| IntentDef::new(*name, *desc, "use it for this kind of chat"))
        .collect()
}

/// Maps a chat dialogue to its subfamily by scanning the current utterance
/// for subfamily keywords; anything unmatched is free chat.
pub fn chat_keyword_relabel(d: &Dialogue) -> String {
    let words: Vec<&str> = d.current_utterance().split_whitespace().collect();
    for (name, _, keywords) in CHAT_SUBFAMILIES.iter().take(2) {
        if words.iter().any(|w| keywords.contains(w)) {
            return (*name).to_string();
        }
    }
    CHAT_SUBFAMILIES[2].0.to_string()
}

pub fn social_merge() -> IntentDef {
    IntentDef::new(
        "social_rec",
        "recommend friends people chatbots or virtual agents to connect with",
        "switch here when the user wants any new contact",
    )
}

// ---------------------------------------------------------------------------
// Split builders.

/// Removes every training dialogue of `excluded`. The test set and schema are
/// left untouched so the excluded intent stays describable at inference.
pub fn build_exclusion_split(
    schema: &IntentSchema,
    dialogues: &[Dialogue],
    excluded: &str,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>)> {
    if !schema.contains(excluded) {
        return Err(Error::UnknownIntent(excluded.to_string()));
    }
    let train = dialogues
        .iter()
        .filter(|d| d.split == Split::Train && d.gold_intent != excluded)
        .cloned()
        .collect();
    let test = dialogues
        .iter()
        .filter(|d| d.split == Split::Test)
        .cloned()
        .collect();
    Ok((train, test))
}

/// Replaces `target` with finer-grained intents and relabels the test set.
/// Training dialogues are never relabeled.
pub fn subdivide_intent(
    schema: &IntentSchema,
    test: &[Dialogue],
    target: &str,
    sub_defs: &[IntentDef],
    relabel: &dyn Fn(&Dialogue) -> String,
) -> Result<(IntentSchema, Vec<Dialogue>)> {
    let pos = schema
        .intents
        .iter()
        .position(|d| d.name == target)
        .ok_or_else(|| Error::UnknownIntent(target.to_string()))?;
    if sub_defs.is_empty() {
        return Err(Error::validation("sub_defs", "needs at least one intent"));
    }
    let sub_names: BTreeSet<&str> = sub_defs.iter().map(|d| d.name.as_str()).collect();
    for name in &sub_names {
        if *name != target && schema.contains(name) {
            return Err(Error::validation(
                "sub_defs",
                format!("`{name}` already exists in the schema"),
            ));
        }
    }
    let mut intents = schema.intents.clone();
    intents.splice(pos..=pos, sub_defs.iter().cloned());
    let new_schema = IntentSchema::new(format!("{}+split:{target}", schema.version_tag), intents)?;

    let mut out = Vec::with_capacity(test.len());
    for d in test {
        let mut d = d.clone();
        if d.split == Split::Test && d.gold_intent == target {
            let label = relabel(&d);
            if !sub_names.contains(label.as_str()) {
                return Err(Error::validation(
                    "relabel_fn",
                    format!(
                        "returned `{label}` for `{}`, not one of the sub-intents",
                        d.id
                    ),
                ));
            }
            d.gold_intent = label;
        }
        out.push(d);
    }
    Ok((new_schema, out))
}

/// Merges several intents into one and relabels the test set accordingly.
pub fn group_intents(
    schema: &IntentSchema,
    test: &[Dialogue],
    targets: &[&str],
    merged: &IntentDef,
) -> Result<(IntentSchema, Vec<Dialogue>)> {
    if targets.is_empty() {
        return Err(Error::validation("targets", "needs at least one intent"));
    }
    let unique: BTreeSet<&str> = targets.iter().copied().collect();
    if unique.len() != targets.len() {
        return Err(Error::validation("targets", "contains duplicates"));
    }
    for t in targets {
        if !schema.contains(t) {
            return Err(Error::UnknownIntent((*t).to_string()));
        }
    }
    if schema.contains(&merged.name) {
        return Err(Error::validation(
            "merged.name",
            format!("`{}` already exists in the schema", merged.name),
        ));
    }
    let mut intents = Vec::with_capacity(schema.len());
    let mut placed = false;
    for def in &schema.intents {
        if unique.contains(def.name.as_str()) {
            if !placed {
                intents.push(merged.clone());
                placed = true;
            }
        } else {
            intents.push(def.clone());
        }
    }
    let new_schema = IntentSchema::new(
        format!("{}+group:{}", schema.version_tag, merged.name),
        intents,
    )?;
    let out = test
        .iter()
        .map(|d| {
            let mut d = d.clone();
            if d.split == Split::Test && unique.contains(d.gold_intent.as_str()) {
                d.gold_intent = merged.name.clone();
            }
            d
        })
        .collect();
    Ok((new_schema, out))
}

// ---------------------------------------------------------------------------
// Persistence.

/// Sidecar path holding the schema for a corpus file.
pub fn schema_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("schema.json")
}

pub fn write_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn write_schema(path: &Path, schema: &IntentSchema) -> Result<()> {
    let text = serde_json::to_string_pretty(schema)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_schema(path: &Path) -> Result<IntentSchema> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let schema: IntentSchema = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    schema.validate()?;
    Ok(schema)
}

/// Writes `<path>` (JSONL dialogues) and its schema sidecar.
pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_dialogues(path, &corpus.dialogues)?;
    write_schema(&schema_path(path), &corpus.schema)
}

const KNOWN_FIELDS: [&str; 6] = [
    "id",
    "turns",
    "last_tool",
    "gold_intent",
    "category",
    "split",
];

/// Dialogues plus warnings about fields that were preserved but not understood.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDialogues {
    pub dialogues: Vec<Dialogue>,
    pub warnings: Vec<String>,
}

pub fn read_dialogues(path: &Path) -> Result<LoadedDialogues> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut dialogues = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if let Value::Object(obj) = &value {
            for key in obj.keys() {
                if !KNOWN_FIELDS.contains(&key.as_str()) {
                    warnings.push(format!(
                        "{}:{lineno}: unknown field `{key}` preserved",
                        path.display()
                    ));
                }
            }
        }
        let d: Dialogue = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        d.validate().map_err(|e| malformed(e.to_string()))?;
        dialogues.push(d);
    }
    Ok(LoadedDialogues {
        dialogues,
        warnings,
    })
}

pub fn load_corpus(path: &Path) -> Result<(Corpus, Vec<String>)> {
    let schema = read_schema(&schema_path(path))?;
    let loaded = read_dialogues(path)?;
    Ok((
        Corpus {
            schema,
            dialogues: loaded.dialogues,
        },
        loaded.warnings,
    ))
}

/// Label counts, handy for reports and conservation checks.
pub fn label_counts(dialogues: &[Dialogue]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for d in dialogues {
        *counts.entry(d.gold_intent.clone()).or_insert(0) += 1;
    }
    counts
}
