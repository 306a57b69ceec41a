//! File formats: JSONL corpora, JSON databases, gold labels, trigger
//! rules, manual latent→action maps, and latent sidecars.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ladia_core::data::{Dialogue, Role, TokenizerConfig, Trigger, TriggerRules, Turn};
use ladia_core::db::Database;
use ladia_core::interpret::ManualMap;

/// One serialized turn: tokens joined by single spaces.
#[derive(Debug, Serialize, Deserialize)]
pub struct TurnFile {
    pub role: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slots: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DialogueFile {
    pub id: String,
    pub turns: Vec<TurnFile>,
}

fn parse_role(s: &str) -> Option<Role> {
    match s {
        "user" => Some(Role::User),
        "system" => Some(Role::System),
        "db_query" => Some(Role::DbQuery),
        "db_result" => Some(Role::DbResult),
        _ => None,
    }
}

/// Read a JSONL corpus. Every dialogue is validated; malformed records
/// name the offending line and dialogue.
pub fn read_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading corpus {}", path.display()))?;
    let mut corpus = Vec::new();
    for (line_no, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueFile = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: malformed dialogue record", path.display(), line_no + 1))?;
        let mut turns = Vec::with_capacity(record.turns.len());
        for (i, t) in record.turns.into_iter().enumerate() {
            let role = parse_role(&t.role).ok_or_else(|| {
                anyhow!(
                    "{}:{}: dialogue {}: turn {} has unknown role {:?}",
                    path.display(),
                    line_no + 1,
                    record.id,
                    i,
                    t.role
                )
            })?;
            let mut turn = Turn::new(role, t.text.split_whitespace().map(String::from).collect());
            turn.gold_slots = t.slots;
            turn.gold_action = t.action;
            turns.push(turn);
        }
        let dialogue = Dialogue::new(record.id.clone(), turns);
        dialogue.validate().map_err(|e| {
            anyhow!(
                "{}:{}: dialogue {}: {}",
                path.display(),
                line_no + 1,
                record.id,
                e
            )
        })?;
        corpus.push(dialogue);
    }
    Ok(corpus)
}

/// Write a file, creating missing parent directories first so `--out`
/// paths into fresh directories behave like the `--out-dir` commands.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, contents)
}

/// Write a corpus as JSONL.
pub fn write_corpus(path: &Path, corpus: &[Dialogue]) -> Result<()> {
    let mut out = String::new();
    for d in corpus {
        let record = DialogueFile {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| TurnFile {
                    role: t.role.as_str().to_string(),
                    text: t.tokens.join(" "),
                    slots: t.gold_slots.clone(),
                    action: t.gold_action.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    write_file(path, out).with_context(|| format!("writing corpus {}", path.display()))?;
    Ok(())
}

/// Read a database: a JSON array of flat string-valued objects. The
/// schema is the key order of the first entity; every entity must carry
/// exactly those keys.
pub fn read_db(path: &Path) -> Result<Database> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading database {}", path.display()))?;
    let entities: Vec<serde_json::Map<String, serde_json::Value>> = serde_json::from_str(&raw)
        .with_context(|| format!("{}: database must be a JSON array of objects", path.display()))?;
    let Some(first) = entities.first() else {
        bail!("{}: database has no entities", path.display());
    };
    let schema: Vec<String> = first.keys().cloned().collect();
    let mut rows = Vec::with_capacity(entities.len());
    for (i, entity) in entities.iter().enumerate() {
        let mut row = Vec::with_capacity(schema.len());
        for key in &schema {
            match entity.get(key) {
                Some(serde_json::Value::String(v)) => row.push(v.clone()),
                Some(other) => bail!(
                    "{}: entity {} field {:?} must be a string, got {}",
                    path.display(),
                    i,
                    key,
                    other
                ),
                None => bail!("{}: entity {} is missing field {:?}", path.display(), i, key),
            }
        }
        if entity.len() != schema.len() {
            bail!(
                "{}: entity {} has fields outside the schema {:?}",
                path.display(),
                i,
                schema
            );
        }
        rows.push(row);
    }
    Ok(Database::new(schema, rows)?)
}

/// Write a database as a JSON array of objects in schema order.
pub fn write_db(path: &Path, db: &Database) -> Result<()> {
    let mut entities = Vec::with_capacity(db.len());
    for i in 0..db.len() {
        let entity = db.entity(i).expect("index in range");
        let mut map = serde_json::Map::new();
        for (k, v) in entity {
            map.insert(k, serde_json::Value::String(v));
        }
        entities.push(serde_json::Value::Object(map));
    }
    write_file(path, serde_json::to_string_pretty(&entities)?)
        .with_context(|| format!("writing database {}", path.display()))?;
    Ok(())
}

/// Gold labels as produced by the synthetic generator.
pub fn read_gold(path: &Path) -> Result<Vec<ladia_core::data::synth::GoldLabels>> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading gold labels {}", path.display()))?;
    Ok(serde_json::from_str(&raw)
        .with_context(|| format!("{}: malformed gold labels", path.display()))?)
}

pub fn write_gold(path: &Path, gold: &[ladia_core::data::synth::GoldLabels]) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(gold)?)
        .with_context(|| format!("writing gold labels {}", path.display()))?;
    Ok(())
}

/// Trigger rules for query-turn insertion.
pub fn read_trigger_rules(path: &Path) -> Result<TriggerRules> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading trigger rules {}", path.display()))?;
    let rules: TriggerRules = serde_json::from_str(&raw)
        .with_context(|| format!("{}: malformed trigger rules", path.display()))?;
    if rules.triggers.is_empty() {
        bail!("{}: trigger rules define no triggers", path.display());
    }
    Ok(rules)
}

pub fn write_trigger_rules(path: &Path, rules: &TriggerRules) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(rules)?)
        .with_context(|| format!("writing trigger rules {}", path.display()))?;
    Ok(())
}

/// One manual-map entry: a whole latent index vector and its action.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManualMapEntry {
    pub latent: Vec<usize>,
    pub action: String,
}

/// Read a manual latent→action map: a JSON list of entries. Duplicate
/// latent vectors are rejected.
pub fn read_manual_map(path: &Path) -> Result<ManualMap> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading manual map {}", path.display()))?;
    let entries: Vec<ManualMapEntry> = serde_json::from_str(&raw)
        .with_context(|| format!("{}: malformed manual map", path.display()))?;
    let mut map = ManualMap::default();
    for e in entries {
        if map.entries.insert(e.latent.clone(), e.action).is_some() {
            bail!("{}: duplicate latent vector {:?}", path.display(), e.latent);
        }
    }
    Ok(map)
}

/// Per-turn latent assignments accompanying a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentSidecarRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub indices: Vec<usize>,
}

pub fn write_latents(path: &Path, records: &[LatentSidecarRecord]) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(records)?)
        .with_context(|| format!("writing latents {}", path.display()))?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentSidecarRecord>> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading latents {}", path.display()))?;
    Ok(serde_json::from_str(&raw)
        .with_context(|| format!("{}: malformed latent sidecar", path.display()))?)
}

/// Best-effort conversion of a raw CamRest-style export (a JSON array
/// of dialogues holding `dial` lists with `usr.transcript` and
/// `sys.sent` fields) into the corpus format. Database conversion is
/// handled by [`read_db`] on the accompanying KB file, which already
/// matches our format.
pub fn convert_camrest(raw: &str, tokenizer: &TokenizerConfig) -> Result<Vec<Dialogue>> {
    let value: serde_json::Value =
        serde_json::from_str(raw).context("raw corpus is not valid JSON")?;
    let items = value
        .as_array()
        .ok_or_else(|| anyhow!("raw corpus must be a JSON array of dialogues"))?;
    let mut corpus = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let id = item
            .get("dialogue_id")
            .and_then(|v| v.as_u64())
            .map(|n| n.to_string())
            .unwrap_or_else(|| i.to_string());
        let dial = item
            .get("dial")
            .or_else(|| item.get("dialogue"))
            .and_then(|v| v.as_array())
            .ok_or_else(|| anyhow!("dialogue {id}: no 'dial' list"))?;
        let mut turns = Vec::new();
        // Informed constraints accumulate across the dialogue; each
        // system turn carries the state so far, so query synthesis can
        // read constraint values from it.
        let mut constraints = std::collections::BTreeMap::new();
        for entry in dial {
            let usr = entry
                .pointer("/usr/transcript")
                .and_then(|v| v.as_str())
                .unwrap_or_default();
            let sys = entry
                .pointer("/sys/sent")
                .and_then(|v| v.as_str())
                .unwrap_or_default();
            if usr.trim().is_empty() || sys.trim().is_empty() {
                continue;
            }
            if let Some(acts) = entry.pointer("/usr/slu").and_then(|v| v.as_array()) {
                for act in acts {
                    if act.get("act").and_then(|v| v.as_str()) != Some("inform") {
                        continue;
                    }
                    let Some(pairs) = act.get("slots").and_then(|v| v.as_array()) else {
                        continue;
                    };
                    for pair in pairs {
                        if let (Some(slot), Some(value)) = (
                            pair.get(0).and_then(|v| v.as_str()),
                            pair.get(1).and_then(|v| v.as_str()),
                        ) {
                            constraints.insert(slot.to_lowercase(), value.to_lowercase());
                        }
                    }
                }
            }
            turns.push(Turn::from_text(Role::User, usr, tokenizer).0);
            let mut system = Turn::from_text(Role::System, sys, tokenizer).0;
            if !constraints.is_empty() {
                system.gold_slots = Some(constraints.clone());
            }
            turns.push(system);
        }
        if turns.is_empty() {
            continue;
        }
        let dialogue = Dialogue::new(format!("camrest-{id}"), turns);
        dialogue
            .validate()
            .map_err(|e| anyhow!("dialogue {id}: {e}"))?;
        corpus.push(dialogue);
    }
    Ok(corpus)
}

/// Default trigger rules for CamRest-style corpora: any system turn
/// whose action is an offer, or that mentions a database entity, calls
/// for a query over the informable slots.
pub fn default_camrest_triggers(db: &Database) -> TriggerRules {
    let name_slot = db.schema().first().cloned().unwrap_or_default();
    TriggerRules {
        triggers: vec![
            Trigger::ActionIs("OFFER".to_string()),
            Trigger::MentionsSlotValue(name_slot),
        ],
        slot_order: db.schema().iter().skip(1).cloned().collect(),
        named_form: false,
        append_count: false,
    }
}
