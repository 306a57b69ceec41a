//! Interactive chat loop over a trained checkpoint.
//!
//! Each line of input becomes one user turn; replies are printed with
//! the latent slot indices that produced them, and database round-trips
//! appear as explicit `db_query`/`db_result` lines. Reading `exit` or
//! hitting end-of-input terminates cleanly. The loop drives the same
//! single-turn handler as scripted replay, so a scripted stdin yields
//! exactly the transcript of the equivalent scripted run.

use std::io::{BufRead, Write};

use anyhow::{Context, Result};

use ladia_core::data::{tokenize, Role, TokenizerConfig, Turn, Vocab};
use ladia_core::db::Database;
use ladia_core::inference::{respond, RunOptions, Session};
use ladia_core::model::Model;

fn latent_suffix(indices: &[usize]) -> String {
    let rendered: Vec<String> = indices.iter().map(usize::to_string).collect();
    format!("  [z: {}]", rendered.join(" "))
}

/// Run the chat loop, returning the accumulated transcript.
pub fn chat<R: BufRead, W: Write>(
    model: &Model,
    vocab: &Vocab,
    db: Option<&Database>,
    opts: &RunOptions,
    tokenizer: &TokenizerConfig,
    input: R,
    mut output: W,
) -> Result<Vec<Turn>> {
    let mut session = Session::new(model);
    let mut transcript: Vec<Turn> = Vec::new();
    let mut lines = input.lines();
    let mut turn_no = 0usize;
    loop {
        write!(output, "user> ").context("writing prompt")?;
        output.flush().context("flushing prompt")?;
        let Some(line) = lines.next() else {
            writeln!(output).context("writing farewell")?;
            break;
        };
        let line = line.context("reading input line")?;
        let trimmed = line.trim();
        if trimmed == "exit" {
            break;
        }
        let (tokens, truncated) = tokenize(trimmed, tokenizer);
        if tokens.is_empty() {
            continue;
        }
        if truncated {
            writeln!(output, "! input truncated to {} tokens", tokenizer.max_len)?;
        }
        transcript.push(Turn::new(Role::User, tokens.clone()));
        let label = format!("turn {turn_no}");
        let reply = respond(model, vocab, &mut session, &tokens, db, opts, &label)?;
        for warning in &reply.warnings {
            writeln!(output, "! {warning}")?;
        }
        for (i, turn) in reply.turns.iter().enumerate() {
            let latent = reply
                .latents
                .iter()
                .find(|l| l.turn_index == i)
                .map(|l| latent_suffix(&l.latent.indices()))
                .unwrap_or_default();
            let prefix = match turn.role {
                Role::System => "system",
                Role::DbQuery => "db_query",
                Role::DbResult => "db_result",
                Role::User => "user",
            };
            writeln!(output, "{prefix}> {}{latent}", turn.text())?;
        }
        transcript.extend(reply.turns.iter().cloned());
        turn_no += 1;
    }
    Ok(transcript)
}
