//! Synthetic dialogue generator with by-construction gold labels.
//!
//! A generator spec lists intents (user/system token templates with
//! `<slot>` placeholders, an action label, and optionally a database
//! round-trip), a dialogue flow (fixed opening and closing plus a body
//! sampled by intent weight), and an entity layout (constraint slots
//! whose value combinations each back several named entities). The
//! output corpus carries gold constraints, requested slots, the correct
//! entity and per-decision action labels, so evaluation and
//! interpretation metrics can be checked against ground truth.
//!
//! With `per_dialogue_db_order`, each dialogue is grounded against its
//! own row permutation of the shared database (a database whose state
//! varies over time). The correct entity then cannot be predicted from
//! dialogue text alone — responses must read it out of the `db_result`
//! turn.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Dialogue, Role, Turn, QUERY_MARKER};
use crate::db::{Database, Query, ResultFormat};
use crate::error::{Error, Result};
use crate::rng;

/// One dialogue act the generator can emit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    /// Sampling weight when this intent appears in the body pool.
    pub weight: f64,
    /// User-turn templates; space-separated tokens, `<slot>` placeholders.
    pub user_templates: Vec<String>,
    /// System-turn templates.
    pub system_templates: Vec<String>,
    /// Gold action label of the system response.
    pub action: String,
    /// Precede the response with a `(db_query, db_result)` round-trip.
    pub needs_query: bool,
    /// Slot the user asks about; its value must appear in the response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests: Option<String>,
}

/// Non-constraint entity attributes and how their values are assigned.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailSlot {
    /// Values cycle through a fixed list by entity index.
    Cycle { slot: String, values: Vec<String> },
    /// Unique value `prefix` + entity index.
    Serial { slot: String, prefix: String },
}

impl DetailSlot {
    pub fn slot(&self) -> &str {
        match self {
            DetailSlot::Cycle { slot, .. } | DetailSlot::Serial { slot, .. } => slot,
        }
    }

    fn value(&self, index: usize) -> String {
        match self {
            DetailSlot::Cycle { values, .. } => values[index % values.len()].clone(),
            DetailSlot::Serial { prefix, .. } => format!("{prefix}{index}"),
        }
    }
}

/// Full generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Slots the user constrains, with their candidate values. The
    /// database holds `names_per_combo` entities for every value
    /// combination, and queries carry the values in this slot order.
    pub constraint_slots: Vec<(String, Vec<String>)>,
    /// Entity attributes beyond name and constraints.
    pub detail_slots: Vec<DetailSlot>,
    pub names_per_combo: usize,
    pub intents: Vec<IntentSpec>,
    /// Intent names fixed at the start of every dialogue.
    pub opening: Vec<String>,
    /// Intent pool sampled by weight between opening and closing.
    pub body: Vec<String>,
    /// Inclusive range of body length.
    pub body_len: (usize, usize),
    /// Intent names fixed at the end of every dialogue.
    pub closing: Vec<String>,
    pub dialogues: usize,
    /// Ground each dialogue against its own row permutation of the
    /// database.
    pub per_dialogue_db_order: bool,
}

/// Evaluation ground truth for one generated dialogue.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoldLabels {
    pub dialogue_id: String,
    /// Constraint slot → value the user expressed.
    pub constraints: BTreeMap<String, String>,
    /// Slots the user requested values for.
    pub requested: Vec<String>,
    /// Name of the entity the dialogue is about.
    pub entity_name: Option<String>,
    /// Action label per system-side turn, in turn order.
    pub actions: Vec<String>,
    /// Database row order this dialogue was grounded against
    /// (`None`: the shared order).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db_rows: Option<Vec<Vec<String>>>,
}

/// Generator output.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub corpus: Vec<Dialogue>,
    pub db: Database,
    pub gold: Vec<GoldLabels>,
}

impl Synthetic {
    /// The database a dialogue was grounded against.
    pub fn dialogue_db(&self, index: usize) -> Result<Database> {
        match self.gold.get(index).and_then(|g| g.db_rows.clone()) {
            Some(rows) => Database::new(self.db.schema().to_vec(), rows),
            None => Ok(self.db.clone()),
        }
    }
}

const NAME_SYLLABLES: [&str; 10] = [
    "ba", "re", "mo", "ti", "lu", "ka", "vo", "se", "pi", "da",
];

fn entity_name(index: usize) -> String {
    let base = format!(
        "{}{}",
        NAME_SYLLABLES[(index / 10) % 10],
        NAME_SYLLABLES[index % 10]
    );
    if index < 100 {
        base
    } else {
        format!("{base}{index}")
    }
}

impl GeneratorSpec {
    fn intent(&self, name: &str) -> Result<&IntentSpec> {
        self.intents
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| Error::Config(format!("flow references unknown intent '{name}'")))
    }

    fn known_slots(&self) -> Vec<&str> {
        let mut slots = vec!["name"];
        slots.extend(self.constraint_slots.iter().map(|(s, _)| s.as_str()));
        slots.extend(self.detail_slots.iter().map(DetailSlot::slot));
        slots
    }

    pub fn validate(&self) -> Result<()> {
        if self.dialogues == 0 {
            return Err(Error::Config("generator spec requests zero dialogues".into()));
        }
        if self.names_per_combo == 0 {
            return Err(Error::Config("names_per_combo must be at least 1".into()));
        }
        for (slot, values) in &self.constraint_slots {
            if values.is_empty() {
                return Err(Error::Config(format!("constraint slot '{slot}' has no values")));
            }
        }
        if self.body_len.0 > self.body_len.1 {
            return Err(Error::Config("body_len range is reversed".into()));
        }
        let slots = self.known_slots();
        for intent in &self.intents {
            if intent.user_templates.is_empty() || intent.system_templates.is_empty() {
                return Err(Error::Config(format!(
                    "intent '{}' needs at least one user and one system template",
                    intent.name
                )));
            }
            if intent.action.is_empty() {
                return Err(Error::Config(format!("intent '{}' has an empty action", intent.name)));
            }
            for tpl in intent.user_templates.iter().chain(&intent.system_templates) {
                for tok in tpl.split(' ') {
                    if let Some(slot) = tok.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
                        if !slots.contains(&slot) {
                            return Err(Error::Config(format!(
                                "intent '{}' references unknown slot '<{slot}>'",
                                intent.name
                            )));
                        }
                    }
                }
            }
            if let Some(req) = &intent.requests {
                if !slots.contains(&req.as_str()) {
                    return Err(Error::Config(format!(
                        "intent '{}' requests unknown slot '{req}'",
                        intent.name
                    )));
                }
            }
        }
        for name in self.opening.iter().chain(&self.body).chain(&self.closing) {
            self.intent(name)?;
        }
        for name in &self.body {
            if self.intent(name)?.weight <= 0.0 {
                return Err(Error::Config(format!(
                    "body intent '{name}' needs a positive weight"
                )));
            }
        }
        if self.body_len.1 > 0 && self.body.is_empty() && self.body_len.0 > 0 {
            return Err(Error::Config("non-empty body_len with an empty body pool".into()));
        }
        Ok(())
    }

    /// Build the shared database: `names_per_combo` entities for every
    /// constraint value combination, detail values assigned by entity
    /// index. Schema: name, constraint slots, detail slots.
    pub fn build_db(&self) -> Result<Database> {
        let mut schema = vec!["name".to_string()];
        schema.extend(self.constraint_slots.iter().map(|(s, _)| s.clone()));
        schema.extend(self.detail_slots.iter().map(|d| d.slot().to_string()));
        let mut combos: Vec<Vec<String>> = vec![Vec::new()];
        for (_, values) in &self.constraint_slots {
            let mut next = Vec::with_capacity(combos.len() * values.len());
            for combo in &combos {
                for v in values {
                    let mut c = combo.clone();
                    c.push(v.clone());
                    next.push(c);
                }
            }
            combos = next;
        }
        let mut rows = Vec::new();
        for combo in &combos {
            for _ in 0..self.names_per_combo {
                let index = rows.len();
                let mut row = vec![entity_name(index)];
                row.extend(combo.iter().cloned());
                row.extend(self.detail_slots.iter().map(|d| d.value(index)));
                rows.push(row);
            }
        }
        Database::new(schema, rows)
    }
}

fn fill_template(
    template: &str,
    constraints: &BTreeMap<String, String>,
    entity: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut tokens = Vec::new();
    for tok in template.split(' ') {
        match tok.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
            Some(slot) => {
                let value = constraints
                    .get(slot)
                    .or_else(|| entity.get(slot))
                    .expect("validated template placeholder");
                tokens.extend(value.split(' ').map(String::from));
            }
            None => tokens.push(tok.to_string()),
        }
    }
    tokens
}

/// Generate a corpus, its database and gold labels; deterministic in
/// `seed`.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec, seed: u64) -> Result<Synthetic> {
    spec.validate()?;
    let db = spec.build_db()?;
    let mut corpus = Vec::with_capacity(spec.dialogues);
    let mut gold = Vec::with_capacity(spec.dialogues);
    let query_order: Vec<String> = spec
        .constraint_slots
        .iter()
        .map(|(s, _)| s.clone())
        .collect();

    for i in 0..spec.dialogues {
        let mut r = rng::derive(seed, 0x5A17_0000 + i as u64);
        let id = format!("syn{i:04}");

        let mut constraints = BTreeMap::new();
        for (slot, values) in &spec.constraint_slots {
            let pick = rng::index(&mut r, values.len());
            constraints.insert(slot.clone(), values[pick].clone());
        }

        // The dialogue's own database view.
        let (dialogue_db, db_rows) = if spec.per_dialogue_db_order {
            let mut order: Vec<usize> = (0..db.len()).collect();
            rng::shuffle(&mut r, &mut order);
            let rows: Vec<Vec<String>> = order
                .iter()
                .map(|&j| {
                    db.entity(j)
                        .expect("index in range")
                        .into_iter()
                        .map(|(_, v)| v)
                        .collect()
                })
                .collect();
            (Database::new(db.schema().to_vec(), rows.clone())?, Some(rows))
        } else {
            (db.clone(), None)
        };

        let query = Query::Named(constraints.clone().into_iter().collect());
        let (row, count) = dialogue_db.execute(&query);
        let row = row.ok_or_else(|| {
            Error::Config(format!("dialogue '{id}': no entity matches {constraints:?}"))
        })?;
        let entity: BTreeMap<String, String> =
            dialogue_db.entity(row).expect("row in range").into_iter().collect();

        // Flow: opening, weighted body, closing.
        let mut flow: Vec<&IntentSpec> = Vec::new();
        for name in &spec.opening {
            flow.push(spec.intent(name)?);
        }
        let body_n = spec.body_len.0 + rng::index(&mut r, spec.body_len.1 - spec.body_len.0 + 1);
        if body_n > 0 {
            let pool: Vec<&IntentSpec> = spec
                .body
                .iter()
                .map(|n| spec.intent(n))
                .collect::<Result<_>>()?;
            let weights: Vec<f64> = pool.iter().map(|i| i.weight).collect();
            for _ in 0..body_n {
                flow.push(pool[rng::weighted_choice(&mut r, &weights)]);
            }
        }
        for name in &spec.closing {
            flow.push(spec.intent(name)?);
        }

        let mut turns = Vec::new();
        let mut actions = Vec::new();
        let mut requested = Vec::new();
        for intent in flow {
            let ut = &intent.user_templates[rng::index(&mut r, intent.user_templates.len())];
            let st = &intent.system_templates[rng::index(&mut r, intent.system_templates.len())];
            turns.push(Turn::new(Role::User, fill_template(ut, &constraints, &entity)));
            if intent.needs_query {
                let mut q_tokens = vec![QUERY_MARKER.to_string()];
                for slot in &query_order {
                    q_tokens.extend(constraints[slot].split(' ').map(String::from));
                }
                let mut q_turn = Turn::new(Role::DbQuery, q_tokens);
                q_turn.gold_action = Some("QUERY".to_string());
                q_turn.gold_slots = Some(constraints.clone());
                turns.push(q_turn);
                actions.push("QUERY".to_string());
                turns.push(dialogue_db.format_result(
                    Some(row),
                    count,
                    &ResultFormat::default(),
                ));
            }
            let mut s_turn = Turn::new(Role::System, fill_template(st, &constraints, &entity));
            s_turn.gold_action = Some(intent.action.clone());
            s_turn.gold_slots = Some(constraints.clone());
            turns.push(s_turn);
            actions.push(intent.action.clone());
            if let Some(req) = &intent.requests {
                requested.push(req.clone());
            }
        }

        let dialogue = Dialogue::new(id.clone(), turns);
        dialogue.validate()?;
        corpus.push(dialogue);
        gold.push(GoldLabels {
            dialogue_id: id,
            constraints,
            requested,
            entity_name: entity.get("name").cloned(),
            actions,
            db_rows,
        });
    }
    Ok(Synthetic { corpus, db, gold })
}

impl GeneratorSpec {
    /// Tiny memorization corpus: 20 short dialogues, one entity per
    /// food, deterministic responses, vocabulary well under 60 tokens,
    /// no database turns.
    pub fn overfit() -> Self {
        GeneratorSpec {
            constraint_slots: vec![(
                "food".to_string(),
                ["italian", "chinese", "indian", "french", "thai"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            )],
            detail_slots: vec![DetailSlot::Cycle {
                slot: "area".to_string(),
                values: ["north", "south", "east", "west", "centre"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            }],
            names_per_combo: 1,
            intents: vec![
                IntentSpec {
                    name: "request_food".to_string(),
                    weight: 1.0,
                    user_templates: vec!["hello i want <food> food".to_string()],
                    system_templates: vec!["<name> serves <food> food".to_string()],
                    action: "OFFER".to_string(),
                    needs_query: false,
                    requests: None,
                },
                IntentSpec {
                    name: "ask_area".to_string(),
                    weight: 1.0,
                    user_templates: vec!["where is it".to_string()],
                    system_templates: vec!["it is in the <area> part of town".to_string()],
                    action: "GIVE_DETAILS".to_string(),
                    needs_query: false,
                    requests: Some("area".to_string()),
                },
                IntentSpec {
                    name: "bye".to_string(),
                    weight: 1.0,
                    user_templates: vec!["thank you goodbye".to_string()],
                    system_templates: vec!["goodbye".to_string()],
                    action: "BYE".to_string(),
                    needs_query: false,
                    requests: None,
                },
            ],
            opening: vec![
                "request_food".to_string(),
                "ask_area".to_string(),
                "bye".to_string(),
            ],
            body: Vec::new(),
            body_len: (0, 0),
            closing: Vec::new(),
            dialogues: 20,
            per_dialogue_db_order: false,
        }
    }

    /// Database-grounded corpus with five uniformly frequent actions
    /// (GREET, QUERY, OFFER, GIVE_DETAILS, BYE). Six entities share
    /// every food/price combination and each dialogue is grounded
    /// against its own database row order, so the offered entity is
    /// unpredictable from the text alone — correct replies must read
    /// the `db_result` turn.
    pub fn grounded(dialogues: usize) -> Self {
        GeneratorSpec {
            constraint_slots: vec![
                (
                    "food".to_string(),
                    ["italian", "chinese", "indian", "french"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                ),
                (
                    "price".to_string(),
                    ["cheap", "moderate", "expensive"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                ),
            ],
            detail_slots: vec![
                DetailSlot::Cycle {
                    slot: "area".to_string(),
                    values: ["north", "south", "east", "west", "centre"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                },
                DetailSlot::Serial {
                    slot: "phone".to_string(),
                    prefix: "555100".to_string(),
                },
            ],
            names_per_combo: 6,
            intents: vec![
                IntentSpec {
                    name: "greet".to_string(),
                    weight: 1.0,
                    user_templates: vec!["hello".to_string()],
                    system_templates: vec!["hello how can i help you".to_string()],
                    action: "GREET".to_string(),
                    needs_query: false,
                    requests: None,
                },
                IntentSpec {
                    name: "request".to_string(),
                    weight: 1.0,
                    user_templates: vec![
                        "i want a <price> <food> restaurant".to_string(),
                        "find me a <price> restaurant serving <food> food".to_string(),
                    ],
                    system_templates: vec![
                        "<name> is a <price> <food> restaurant".to_string(),
                    ],
                    action: "OFFER".to_string(),
                    needs_query: true,
                    requests: None,
                },
                IntentSpec {
                    name: "ask_phone".to_string(),
                    weight: 1.0,
                    user_templates: vec!["what is the phone number".to_string()],
                    system_templates: vec!["the phone number is <phone>".to_string()],
                    action: "GIVE_DETAILS".to_string(),
                    needs_query: false,
                    requests: Some("phone".to_string()),
                },
                IntentSpec {
                    name: "bye".to_string(),
                    weight: 1.0,
                    user_templates: vec!["thank you goodbye".to_string()],
                    system_templates: vec!["goodbye".to_string()],
                    action: "BYE".to_string(),
                    needs_query: false,
                    requests: None,
                },
            ],
            opening: vec![
                "greet".to_string(),
                "request".to_string(),
                "ask_phone".to_string(),
            ],
            body: Vec::new(),
            body_len: (0, 0),
            closing: vec!["bye".to_string()],
            dialogues,
            per_dialogue_db_order: true,
        }
    }
}
