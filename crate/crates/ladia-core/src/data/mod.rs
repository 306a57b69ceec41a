//! Dialogue corpus types: turns, dialogues, tokenization, vocabulary,
//! database-turn insertion and corpus splitting.
//!
//! A dialogue alternates user and system turns; a `(db_query, db_result)`
//! turn pair may sit between a user turn and the system turn that needs
//! database facts. Those pseudo-turns are the only supervision the model
//! consumes beyond raw text. `gold_*` fields carry evaluation-only
//! annotation and are never read by training code.

pub mod synth;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::db::{Database, Query, ResultFormat};
use crate::error::{Error, Result};
use crate::rng;

/// Reserved vocabulary ids.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// First token of every database query turn.
pub const QUERY_ID: u32 = 4;

/// Surface form of the query marker (kept a plain word so query turns
/// read as text, e.g. `query italian moderate`).
pub const QUERY_MARKER: &str = "query";

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", QUERY_MARKER];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    System,
    DbQuery,
    DbResult,
}

impl Role {
    /// Turns consumed on the user side of an exchange.
    pub fn is_user_side(self) -> bool {
        matches!(self, Role::User | Role::DbResult)
    }

    /// Turns produced on the system side of an exchange.
    pub fn is_system_side(self) -> bool {
        matches!(self, Role::System | Role::DbQuery)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::System => "system",
            Role::DbQuery => "db_query",
            Role::DbResult => "db_result",
        }
    }
}

/// One utterance (or database pseudo-turn).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub tokens: Vec<String>,
    /// Evaluation-only slot annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_slots: Option<BTreeMap<String, String>>,
    /// Evaluation-only action label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_action: Option<String>,
}

impl Turn {
    pub fn new(role: Role, tokens: Vec<String>) -> Self {
        Self {
            role,
            tokens,
            gold_slots: None,
            gold_action: None,
        }
    }

    /// Tokenize `text` and build a turn; reports whether the turn was
    /// truncated to the configured maximum length.
    pub fn from_text(role: Role, text: &str, cfg: &TokenizerConfig) -> (Self, bool) {
        let (tokens, truncated) = tokenize(text, cfg);
        (Self::new(role, tokens), truncated)
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// True for `db_query` turns and for generated responses that start
    /// with the query marker.
    pub fn is_query(&self) -> bool {
        self.role == Role::DbQuery
            || (self.role == Role::System && self.tokens.first().map(String::as_str) == Some(QUERY_MARKER))
    }
}

/// A complete dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// A user-side turn paired with the system-side turn it elicits. The
/// model treats `db_result` as user input and `db_query` as a system
/// output, so a dialogue with one query decomposes as
/// `(user, db_query), (db_result, system), ...`.
#[derive(Clone, Copy, Debug)]
pub struct Exchange<'a> {
    pub user: &'a Turn,
    pub system: &'a Turn,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Self {
        Self {
            id: id.into(),
            turns,
        }
    }

    /// Check role alternation: user and system turns alternate, with
    /// optional `(db_query, db_result)` pairs between a user turn and
    /// the system turn it precedes (several pairs in a row model
    /// repeated query attempts). Every turn must have tokens.
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::Validation(format!(
                "dialogue '{}': {detail}",
                self.id
            )))
        };
        if self.turns.is_empty() {
            return fail("no turns".to_string());
        }
        #[derive(PartialEq)]
        enum Expect {
            User,
            SystemOrQuery,
            Result,
            System,
        }
        let mut state = Expect::User;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.tokens.is_empty() {
                return fail(format!("turn {i} is empty"));
            }
            state = match (state, turn.role) {
                (Expect::User, Role::User) => Expect::SystemOrQuery,
                (Expect::SystemOrQuery, Role::System) => Expect::User,
                (Expect::SystemOrQuery, Role::DbQuery) => Expect::Result,
                (Expect::Result, Role::DbResult) => Expect::System,
                (Expect::System, Role::System) => Expect::User,
                (Expect::System, Role::DbQuery) => Expect::Result,
                (_, role) => {
                    return fail(format!("unexpected {} turn at index {i}", role.as_str()))
                }
            };
        }
        if state == Expect::Result || state == Expect::System {
            return fail("db_query without a following db_result and system turn".to_string());
        }
        Ok(())
    }

    /// Pair turns into exchanges. A trailing user turn with no reply is
    /// dropped.
    pub fn exchanges(&self) -> Vec<Exchange<'_>> {
        let mut out = Vec::new();
        let mut pending: Option<&Turn> = None;
        for turn in &self.turns {
            if turn.role.is_user_side() {
                pending = Some(turn);
            } else if let Some(user) = pending.take() {
                out.push(Exchange { user, system: turn });
            }
        }
        out
    }

    /// Turns with [`Role::User`] only (the script a live session would
    /// consume; db results are produced at run time).
    pub fn user_script(&self) -> Vec<Vec<String>> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| t.tokens.clone())
            .collect()
    }

    /// System turns that are proper responses (excludes query turns).
    pub fn responses(&self) -> Vec<&Turn> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::System)
            .collect()
    }
}

/// Tokenizer settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Case-fold before splitting.
    pub lowercase: bool,
    /// Hard cap per turn; longer turns are truncated (reported upstream).
    pub max_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            max_len: 40,
        }
    }
}

/// Whitespace + punctuation tokenization. Alphanumeric runs (and `'`)
/// stay together; any other non-space character becomes its own token.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> (Vec<String>, bool) {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(core::mem::take(word));
        }
    };
    for ch in text.chars() {
        let ch = if cfg.lowercase {
            ch.to_lowercase().next().unwrap_or(ch)
        } else {
            ch
        };
        if ch.is_alphanumeric() || ch == '\'' || ch == '_' {
            word.push(ch);
        } else if ch.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(ch.to_string());
        }
    }
    flush(&mut word, &mut tokens);
    let truncated = tokens.len() > cfg.max_len;
    if truncated {
        tokens.truncate(cfg.max_len);
    }
    (tokens, truncated)
}

/// Token ↔ id mapping with reserved entries for padding, unknowns,
/// sequence delimiters and the query marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for tok in RESERVED {
            v.push(tok);
        }
        v
    }

    fn push(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Count token frequencies over the corpus and keep tokens seen at
    /// least `min_freq` times. Iteration order is deterministic.
    pub fn build(corpus: &[Dialogue], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for d in corpus {
            for t in &d.turns {
                for tok in &t.tokens {
                    *freq.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
        let mut v = Self::reserved();
        for (tok, n) in freq {
            if n >= min_freq {
                v.push(tok);
            }
        }
        Ok(v)
    }

    /// Rebuild from a checkpointed token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, tok) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*tok) {
                return Err(Error::Validation(format!(
                    "vocabulary is missing reserved token '{tok}' at id {i}"
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            index.insert(tok.clone(), i as u32);
        }
        if index.len() != tokens.len() {
            return Err(Error::Validation("vocabulary has duplicate tokens".into()));
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

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("<unk>")
    }

    /// Map tokens to ids, unknowns to [`UNK`].
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Map ids back to tokens.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Disjoint train/dev/test split.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub ratios: (f64, f64, f64),
}

/// Shuffle dialogues with `seed` and partition by `ratios`
/// (train/dev/test, must sum to 1).
pub fn split_corpus(
    mut corpus: Vec<Dialogue>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if (total - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut r = rng::derive(seed, 0xD1A7);
    rng::shuffle(&mut r, &mut corpus);
    let n = corpus.len();
    let n_train = ((n as f64) * ratios.0) as usize;
    let n_dev = ((n as f64) * ratios.1) as usize;
    let mut it = corpus.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let dev: Vec<_> = it.by_ref().take(n_dev).collect();
    let test: Vec<_> = it.collect();
    Ok(CorpusSplit {
        train,
        dev,
        test,
        ratios,
    })
}

/// One pattern a trigger rule can test against a system turn.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// The turn's gold action equals this label.
    ActionIs(String),
    /// The turn contains this token.
    ContainsToken(String),
    /// The turn contains this token sequence.
    ContainsPhrase(Vec<String>),
    /// The turn mentions any database value of this slot.
    MentionsSlotValue(String),
}

/// Rules deciding which system turns need a database query inserted in
/// front of them, plus how query turns are rendered.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriggerRules {
    pub triggers: Vec<Trigger>,
    /// Constraint order for the positional query form.
    pub slot_order: Vec<String>,
    /// Render `query food italian` style slot/value pairs instead of the
    /// positional `query italian` form.
    #[serde(default)]
    pub named_form: bool,
    /// Append the match count to result turns.
    #[serde(default)]
    pub append_count: bool,
}

fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

impl TriggerRules {
    fn matches(&self, turn: &Turn, db: &Database) -> bool {
        self.triggers.iter().any(|t| match t {
            Trigger::ActionIs(a) => turn.gold_action.as_deref() == Some(a),
            Trigger::ContainsToken(tok) => turn.tokens.iter().any(|t| t == tok),
            Trigger::ContainsPhrase(seq) => contains_seq(&turn.tokens, seq),
            Trigger::MentionsSlotValue(slot) => db
                .distinct_values(slot)
                .iter()
                .any(|v| contains_seq(&turn.tokens, &v.split(' ').map(String::from).collect::<Vec<_>>())),
        })
    }

    /// Build the query turn for a triggered system turn from its gold
    /// slots. The executed query is always named; `named_form` only
    /// changes the surface tokens.
    fn query_turn(&self, slots: &BTreeMap<String, String>) -> (Turn, Query) {
        let mut tokens = vec![QUERY_MARKER.to_string()];
        let mut pairs = Vec::new();
        for slot in &self.slot_order {
            if let Some(v) = slots.get(slot) {
                if self.named_form {
                    tokens.push(slot.clone());
                }
                tokens.extend(v.split(' ').map(String::from));
                pairs.push((slot.clone(), v.clone()));
            }
        }
        (Turn::new(Role::DbQuery, tokens), Query::Named(pairs))
    }
}

/// Insert a `(db_query, db_result)` pair in front of every system turn
/// the rules mark as needing database facts. Returns the augmented
/// dialogue and warnings for triggered turns lacking slot annotation.
pub fn synthesize_query_turns(
    dialogue: &Dialogue,
    rules: &TriggerRules,
    db: &Database,
) -> (Dialogue, Vec<String>) {
    let mut warnings = Vec::new();
    let mut turns: Vec<Turn> = Vec::with_capacity(dialogue.turns.len());
    for (i, turn) in dialogue.turns.iter().enumerate() {
        let already_answered = matches!(turns.last(), Some(t) if t.role == Role::DbResult);
        if turn.role == Role::System && !already_answered && rules.matches(turn, db) {
            match turn.gold_slots.as_ref().filter(|s| !s.is_empty()) {
                Some(slots) => {
                    let (mut query_turn, query) = rules.query_turn(slots);
                    if query_turn.tokens.len() > 1 {
                        query_turn.gold_action = Some("QUERY".to_string());
                        let (row, count) = db.execute(&query);
                        let result_turn = db.format_result(
                            row,
                            count,
                            &ResultFormat {
                                append_count: rules.append_count,
                            },
                        );
                        turns.push(query_turn);
                        turns.push(result_turn);
                    } else {
                        warnings.push(format!(
                            "dialogue '{}': turn {i} triggered but its slots are outside slot_order; skipped",
                            dialogue.id
                        ));
                    }
                }
                None => warnings.push(format!(
                    "dialogue '{}': turn {i} triggered a query but has no gold slots; skipped",
                    dialogue.id
                )),
            }
        }
        turns.push(turn.clone());
    }
    (Dialogue::new(dialogue.id.clone(), turns), warnings)
}

/// Drop all database pseudo-turns (the ablation corpus).
pub fn strip_db_turns(dialogue: &Dialogue) -> Dialogue {
    Dialogue::new(
        dialogue.id.clone(),
        dialogue
            .turns
            .iter()
            .filter(|t| matches!(t.role, Role::User | Role::System))
            .cloned()
            .collect(),
    )
}
