//! Model checkpoints: a binary container holding the architecture
//! configuration, the vocabulary, and the flat parameter vector.
//!
//! Layout: 8 magic bytes, a little-endian u64 header length, a JSON
//! header (`{config, vocab}`), a little-endian u64 parameter count, then
//! that many little-endian f64 values. Parameters round-trip bit-exactly.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ladia_core::data::Vocab;
use ladia_core::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"LADIA\x00v1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
}

/// Serialize a model and its vocabulary.
pub fn save(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        vocab: vocab.tokens().to_vec(),
    })?;
    let flat = model.store.flat();
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + header.len() + flat.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    crate::formats::write_file(path, out)
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        bail!("checkpoint truncated while reading {what}");
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u64(buf: &mut &[u8], what: &str) -> Result<u64> {
    let bytes = take(buf, 8, what)?;
    Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
}

/// Load a model and vocabulary from a checkpoint file.
pub fn load(path: &Path) -> Result<(Model, Vocab)> {
    let data = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut buf = data.as_slice();
    let magic = take(&mut buf, MAGIC.len(), "magic bytes")?;
    if magic != MAGIC {
        bail!("{}: not a model checkpoint (bad magic bytes)", path.display());
    }
    let header_len = take_u64(&mut buf, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut buf, header_len, "header")?)
        .with_context(|| format!("{}: malformed checkpoint header", path.display()))?;
    let count = take_u64(&mut buf, "parameter count")? as usize;
    let raw = take(&mut buf, count.saturating_mul(8), "parameters")?;
    if !buf.is_empty() {
        bail!("{}: trailing bytes after parameters", path.display());
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let vocab = Vocab::from_tokens(header.vocab)
        .with_context(|| format!("{}: invalid checkpoint vocabulary", path.display()))?;
    if header.config.vocab_size != vocab.len() {
        bail!(
            "{}: config says vocab_size {} but the stored vocabulary has {} tokens",
            path.display(),
            header.config.vocab_size,
            vocab.len()
        );
    }
    let mut model = Model::new(header.config, 0)
        .with_context(|| format!("{}: invalid checkpoint config", path.display()))?;
    if model.store.len() != values.len() {
        bail!(
            "{}: checkpoint has {} parameter values, config expects {}",
            path.display(),
            values.len(),
            model.store.len()
        );
    }
    model.store.flat_mut().copy_from_slice(&values);
    Ok((model, vocab))
}
