//! Prior-only response generation.
//!
//! At run time the latent is the argmax of the prior — the posterior
//! networks are never evaluated, so a model stripped of them produces
//! bit-identical output. A scripted runner replays user turns and
//! handles database interaction: when the decoder opens a turn with the
//! query marker, the query is executed, its result is fed back as the
//! next user-side input, and decoding continues. A guard aborts a turn
//! after more than `max_query_attempts` consecutive queries.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Dialogue, Role, Turn, Vocab, QUERY_MARKER};
use crate::db::{Database, ResultFormat};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ContextState, DecodeMode, LatentSample, Model, TurnDropout};

/// Dialogue-level state carried between turns.
#[derive(Clone, Debug)]
pub struct Session {
    pub ctx: ContextState,
}

impl Session {
    pub fn new(model: &Model) -> Self {
        Self {
            ctx: ContextState::zeros(model.config.ctx_dim),
        }
    }
}

/// One generated system-side turn.
#[derive(Clone, Debug)]
pub struct GeneratedTurn {
    pub tokens: Vec<String>,
    /// Exact one-hot latent at the prior argmax.
    pub latent: LatentSample,
    /// True when decoding hit the length cap before the end marker.
    pub truncated: bool,
}

/// Generate the reply to one user-side input and advance the session:
/// encode the input, take the prior's argmax latent, decode greedily,
/// and update the context recurrence.
pub fn generate_response(
    model: &Model,
    vocab: &Vocab,
    session: &Session,
    user_tokens: &[String],
    max_len: usize,
) -> Result<(GeneratedTurn, Session)> {
    if user_tokens.is_empty() {
        return Err(Error::Invalid("cannot respond to an empty user turn".into()));
    }
    let ids = vocab.encode(user_tokens);
    let mut g = Graph::new(&model.store);
    let ctx = model.ctx_inputs(&mut g, &session.ctx);
    let enc_u = model.encode_user(&mut g, &ids);
    let prior = model.prior_params(&mut g, ctx, enc_u.final_h);
    let latent = Model::argmax_latent(&prior.values(&g));
    let z = model.sample_inputs(&mut g, &latent);
    let z_feat = model.z_features(&mut g, &z);
    let decoded = model.decode_system(
        &mut g,
        z_feat,
        ctx,
        enc_u.final_h,
        &enc_u.states,
        DecodeMode::Greedy { max_len },
        TurnDropout::default(),
    );
    let new_ctx = model.context_update(&mut g, ctx, enc_u.final_h, z_feat, TurnDropout::default());
    Ok((
        GeneratedTurn {
            tokens: vocab.decode(&decoded.tokens),
            latent,
            truncated: decoded.truncated,
        },
        Session {
            ctx: model.ctx_values(&g, new_ctx),
        },
    ))
}

/// Settings for scripted dialogue replay.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Decoding length cap per turn.
    pub max_len: usize,
    /// Surface form the model's queries are parsed under.
    pub named_queries: bool,
    /// Slot alignment for positional query surfaces; empty means schema
    /// prefix order.
    pub slot_order: Vec<String>,
    pub result_format: ResultFormat,
    /// Consecutive queries allowed within one turn before aborting.
    pub max_query_attempts: usize,
}

impl RunOptions {
    pub fn new(model: &Model) -> Self {
        Self {
            max_len: model.config.max_len,
            named_queries: false,
            slot_order: Vec::new(),
            result_format: ResultFormat::default(),
            max_query_attempts: 3,
        }
    }
}

/// Latent chosen for a generated system-side turn.
#[derive(Clone, Debug)]
pub struct TurnLatent {
    /// Index of the turn within the produced dialogue.
    pub turn_index: usize,
    pub latent: LatentSample,
}

/// Everything one user turn produced: the system-side turns (with any
/// interleaved `db_result` turns), their latents indexed relative to
/// `turns`, and diagnostics.
#[derive(Clone, Debug)]
pub struct TurnOutput {
    pub turns: Vec<Turn>,
    pub latents: Vec<TurnLatent>,
    pub warnings: Vec<String>,
}

/// Answer one user turn, advancing the session in place. With a
/// database attached, generated turns that open with the query marker
/// become `(db_query, db_result)` pairs whose result is fed back in
/// before generating again; without one they stay ordinary system
/// turns. More than `max_query_attempts` consecutive queries abort the
/// turn with a placeholder response and a diagnostic.
pub fn respond(
    model: &Model,
    vocab: &Vocab,
    session: &mut Session,
    user_tokens: &[String],
    db: Option<&Database>,
    opts: &RunOptions,
    label: &str,
) -> Result<TurnOutput> {
    let mut out = TurnOutput {
        turns: Vec::new(),
        latents: Vec::new(),
        warnings: Vec::new(),
    };
    let mut input = user_tokens.to_vec();
    let mut attempts = 0usize;
    loop {
        let (generated, next) = generate_response(model, vocab, session, &input, opts.max_len)?;
        *session = next;
        let is_query =
            db.is_some() && generated.tokens.first().map(String::as_str) == Some(QUERY_MARKER);
        if !is_query {
            let tokens = if generated.tokens.is_empty() {
                out.warnings
                    .push(format!("{label}: empty generation, substituted <unk>"));
                vec!["<unk>".to_string()]
            } else {
                generated.tokens
            };
            out.latents.push(TurnLatent {
                turn_index: out.turns.len(),
                latent: generated.latent,
            });
            out.turns.push(Turn::new(Role::System, tokens));
            return Ok(out);
        }
        attempts += 1;
        if attempts > opts.max_query_attempts {
            out.warnings.push(format!(
                "{label}: aborted after {attempts} consecutive queries"
            ));
            out.turns.push(Turn::new(Role::System, vec!["<unk>".to_string()]));
            return Ok(out);
        }
        let database = db.expect("query branch requires a database");
        match database.parse_query_tokens(&generated.tokens, &opts.slot_order, opts.named_queries) {
            Ok(query) => {
                out.latents.push(TurnLatent {
                    turn_index: out.turns.len(),
                    latent: generated.latent,
                });
                out.turns.push(Turn::new(Role::DbQuery, generated.tokens));
                let (row, count) = database.execute(&query);
                let result = database.format_result(row, count, &opts.result_format);
                input = result.tokens.clone();
                out.turns.push(result);
            }
            Err(err) => {
                out.warnings.push(format!(
                    "{label}: unparseable query ({err}), kept as response"
                ));
                out.latents.push(TurnLatent {
                    turn_index: out.turns.len(),
                    latent: generated.latent,
                });
                out.turns.push(Turn::new(Role::System, generated.tokens));
                return Ok(out);
            }
        }
    }
}

/// A replayed dialogue with its per-turn latents and any diagnostics.
#[derive(Clone, Debug)]
pub struct DialogueRun {
    pub dialogue: Dialogue,
    pub latents: Vec<TurnLatent>,
    pub warnings: Vec<String>,
}

/// Replay a scripted sequence of user turns against the model,
/// answering each with [`respond`].
pub fn run_dialogue(
    model: &Model,
    vocab: &Vocab,
    id: &str,
    script: &[Vec<String>],
    db: Option<&Database>,
    opts: &RunOptions,
) -> Result<DialogueRun> {
    let mut session = Session::new(model);
    let mut turns: Vec<Turn> = Vec::new();
    let mut latents = Vec::new();
    let mut warnings = Vec::new();

    for (turn_no, user) in script.iter().enumerate() {
        if user.is_empty() {
            return Err(Error::Invalid(format!(
                "dialogue {id}: scripted user turn {turn_no} is empty"
            )));
        }
        turns.push(Turn::new(Role::User, user.clone()));
        let label = format!("dialogue {id}, turn {turn_no}");
        let output = respond(model, vocab, &mut session, user, db, opts, &label)?;
        let base = turns.len();
        latents.extend(output.latents.into_iter().map(|l| TurnLatent {
            turn_index: base + l.turn_index,
            latent: l.latent,
        }));
        turns.extend(output.turns);
        warnings.extend(output.warnings);
    }
    let dialogue = Dialogue::new(id, turns);
    dialogue.validate()?;
    Ok(DialogueRun {
        dialogue,
        latents,
        warnings,
    })
}
