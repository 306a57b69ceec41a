//! Command implementations behind the `ladia` binary.
//!
//! Subcommands compose the core modules: `prep` and `synth` produce
//! corpora, `train` fits a checkpoint, `generate` and `chat` run
//! inference, `eval` scores generations, `interpret` explains latents,
//! and `sweep` repeats train/generate/eval across a latent-count grid.
//! Every subcommand resolves one `RunConfig` (flags > config file >
//! defaults) and writes the resolved copy next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ladia_core::data::{
    split_corpus, synthesize_query_turns, Dialogue, TokenizerConfig, Vocab,
};
use ladia_core::data::synth::{generate_synthetic_corpus, GeneratorSpec, GoldLabels};
use ladia_core::db::Database;
use ladia_core::inference::run_dialogue;
use ladia_core::interpret::{
    apply_manual_map, collect_latents, export_tree, fit_tree, homogeneity, majority_baseline,
    record_label, tree_accuracy, AnnotatorLexicons, LatentRecord, ManualMapReport, TreeFormat,
    TreeTarget,
};
use ladia_core::metrics::{
    self, corpus_bleu, entity_match_rate, query_accuracy, success_rate, verify_report,
    EvalReport, PerplexityReport, SuccessGold,
};
use ladia_core::model::Model;
use ladia_core::rng;
use ladia_core::training;

use crate::checkpoint;
use crate::config::{ConfigPatch, RunConfig};
use crate::formats::{self, LatentSidecarRecord};
use crate::repl;

#[derive(Parser)]
#[command(
    name = "ladia",
    version,
    about = "Train, run, evaluate and interpret a latent-action dialogue model"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Parse the process arguments and run the chosen subcommand.
pub fn run() -> Result<()> {
    Cli::parse().command.execute()
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dialogue export into the corpus format.
    Prep(PrepArgs),
    /// Generate a synthetic corpus with database and gold labels.
    Synth(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Replay scripted user turns through a trained model.
    Generate(GenerateArgs),
    /// Chat with a trained model interactively.
    Chat(ChatArgs),
    /// Score generated dialogues against references and gold labels.
    Eval(EvalArgs),
    /// Explain latents: homogeneity, decision tree, manual map.
    Interpret(InterpretArgs),
    /// Train, generate and evaluate across a latent-count grid.
    Sweep(SweepArgs),
}

impl Command {
    fn execute(self) -> Result<()> {
        match self {
            Command::Prep(args) => args.run(),
            Command::Synth(args) => args.run(),
            Command::Train(args) => args.run(),
            Command::Generate(args) => args.run(),
            Command::Chat(args) => args.run(),
            Command::Eval(args) => args.run(),
            Command::Interpret(args) => args.run(),
            Command::Sweep(args) => args.run(),
        }
    }
}

/// Flags shared by every subcommand; each one overrides the matching
/// config-file field.
#[derive(Args, Clone, Default)]
struct SharedFlags {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of latent slots.
    #[arg(long = "n-latent", value_name = "N")]
    n_latent: Option<usize>,
    /// Categories per latent slot.
    #[arg(long = "k-latent", value_name = "K")]
    k_latent: Option<usize>,
    /// Enable decoder attention over the user encoding.
    #[arg(long, overrides_with = "noattn")]
    attn: bool,
    /// Disable decoder attention.
    #[arg(long, overrides_with = "attn")]
    noattn: bool,
    /// Positional query slot order, comma separated (default: the
    /// database schema order).
    #[arg(long = "slot-order", value_delimiter = ',', value_name = "SLOTS")]
    slot_order: Option<Vec<String>>,
}

impl SharedFlags {
    fn patch(&self) -> ConfigPatch {
        ConfigPatch {
            seed: self.seed,
            n_latent: self.n_latent,
            k_latent: self.k_latent,
            attention: match (self.attn, self.noattn) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
            slot_order: self.slot_order.clone(),
            ..ConfigPatch::default()
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.patch())
    }
}

fn tokenizer(cfg: &RunConfig) -> TokenizerConfig {
    TokenizerConfig {
        lowercase: true,
        max_len: cfg.max_len,
    }
}

/// `corpus.jsonl` + `train` → `corpus.train.jsonl`.
fn tagged_sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let ext = path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}{ext}"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    formats::write_file(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------
// prep
// ---------------------------------------------------------------------

#[derive(Args)]
struct PrepArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Raw JSON export (list of dialogues with usr/sys turn pairs).
    #[arg(long, value_name = "FILE")]
    raw: PathBuf,
    /// Database file; enables query-turn insertion.
    #[arg(long, value_name = "FILE")]
    db: Option<PathBuf>,
    /// Trigger rules (JSON); default rules trigger on OFFER actions and
    /// entity-name mentions.
    #[arg(long, value_name = "FILE", requires = "db")]
    triggers: Option<PathBuf>,
    /// Output corpus (JSONL).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Split ratios `train:dev:test` (e.g. 8:1:1); writes
    /// `<out>.train/dev/test` siblings instead of one file.
    #[arg(long, value_name = "A:B:C")]
    split: Option<String>,
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("split ratios {text:?} are not numbers"))?;
    let [a, b, c] = parts[..] else {
        bail!("split needs exactly three ratios, got {text:?}");
    };
    let total = a + b + c;
    if total <= 0.0 || a < 0.0 || b < 0.0 || c < 0.0 {
        bail!("split ratios must be non-negative with a positive sum, got {text:?}");
    }
    Ok((a / total, b / total, c / total))
}

impl PrepArgs {
    fn run(self) -> Result<()> {
        let cfg = self.shared.resolve()?;
        let raw = fs::read_to_string(&self.raw)
            .with_context(|| format!("reading raw corpus {}", self.raw.display()))?;
        let mut corpus = formats::convert_camrest(&raw, &tokenizer(&cfg))?;
        if corpus.is_empty() {
            bail!("{}: no usable dialogues", self.raw.display());
        }

        if let Some(db_path) = &self.db {
            let db = formats::read_db(db_path)?;
            let rules = match &self.triggers {
                Some(path) => formats::read_trigger_rules(path)?,
                None => formats::default_camrest_triggers(&db),
            };
            let mut inserted = 0usize;
            corpus = corpus
                .iter()
                .map(|d| {
                    let (augmented, warnings) = synthesize_query_turns(d, &rules, &db);
                    for w in warnings {
                        eprintln!("warning: {w}");
                    }
                    inserted += (augmented.turns.len() - d.turns.len()) / 2;
                    augmented
                })
                .collect();
            println!("inserted {inserted} query/result pairs");
        }

        match &self.split {
            Some(spec) => {
                let ratios = parse_ratios(spec)?;
                let split = split_corpus(corpus, ratios, cfg.seed)?;
                for (tag, part) in [
                    ("train", &split.train),
                    ("dev", &split.dev),
                    ("test", &split.test),
                ] {
                    let path = tagged_sibling(&self.out, tag);
                    formats::write_corpus(&path, part)?;
                    println!("wrote {} dialogues to {}", part.len(), path.display());
                }
            }
            None => {
                formats::write_corpus(&self.out, &corpus)?;
                println!("wrote {} dialogues to {}", corpus.len(), self.out.display());
            }
        }
        cfg.save_beside(&self.out)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 20 memorizable dialogues without database turns.
    Overfit,
    /// Database-grounded dialogues with five balanced actions.
    Grounded,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Built-in generator preset.
    #[arg(long, value_enum, default_value_t = Preset::Grounded)]
    preset: Preset,
    /// Generator spec (JSON), replacing the preset.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Number of dialogues (overrides the preset/spec value).
    #[arg(long)]
    dialogues: Option<usize>,
    /// Output directory (corpus.jsonl, db.json, gold.json, spec.json,
    /// config.json).
    #[arg(long = "out-dir", value_name = "DIR")]
    out_dir: PathBuf,
}

impl SynthArgs {
    fn run(self) -> Result<()> {
        let mut cfg = self.shared.resolve()?;
        let mut spec = match &self.spec {
            Some(path) => {
                let raw = fs::read_to_string(path)
                    .with_context(|| format!("reading generator spec {}", path.display()))?;
                serde_json::from_str::<GeneratorSpec>(&raw)
                    .with_context(|| format!("{}: malformed generator spec", path.display()))?
            }
            None => match self.preset {
                Preset::Overfit => GeneratorSpec::overfit(),
                Preset::Grounded => GeneratorSpec::grounded(200),
            },
        };
        if let Some(n) = self.dialogues {
            spec.dialogues = n;
        }
        let synthetic = generate_synthetic_corpus(&spec, cfg.seed)?;

        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        formats::write_corpus(&self.out_dir.join("corpus.jsonl"), &synthetic.corpus)?;
        formats::write_db(&self.out_dir.join("db.json"), &synthetic.db)?;
        formats::write_gold(&self.out_dir.join("gold.json"), &synthetic.gold)?;
        write_json(&self.out_dir.join("spec.json"), &spec)?;
        // Queries in the generated corpus carry constraint values in the
        // spec's slot order; record it so downstream commands parse them
        // the same way.
        if cfg.slot_order.is_empty() {
            cfg.slot_order = spec.constraint_slots.iter().map(|(s, _)| s.clone()).collect();
        }
        write_json(&self.out_dir.join("config.json"), &cfg)?;
        println!(
            "generated {} dialogues over {} entities in {}",
            synthetic.corpus.len(),
            synthetic.db.len(),
            self.out_dir.display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Training corpus (JSONL).
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Checkpoint output path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Training log (JSONL of per-step losses); default `<out>.log.jsonl`.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

/// Train on an in-memory corpus, writing checkpoint, log and resolved
/// config. Shared by `train` and `sweep`.
fn train_to(
    cfg: &RunConfig,
    corpus: &[Dialogue],
    out: &Path,
    log: &Path,
) -> Result<(Model, Vocab)> {
    let vocab = Vocab::build(corpus, cfg.min_freq)?;
    let mut model = Model::new(cfg.model_config(vocab.len()), cfg.seed)?;
    let records = training::train(&mut model, corpus, &vocab, &cfg.train_config())?;

    checkpoint::save(out, &model, &vocab)?;
    let mut log_lines = String::new();
    for r in &records {
        log_lines.push_str(&serde_json::to_string(r)?);
        log_lines.push('\n');
    }
    formats::write_file(log, log_lines)
        .with_context(|| format!("writing training log {}", log.display()))?;
    cfg.save_beside(out)?;

    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "trained {} steps on {} dialogues (|V|={}): total {:.4} -> {:.4}",
            records.len(),
            corpus.len(),
            vocab.len(),
            first.total,
            last.total
        );
    }
    Ok((model, vocab))
}

impl TrainArgs {
    fn run(self) -> Result<()> {
        let cfg = self.shared.resolve()?;
        let corpus = formats::read_corpus(&self.corpus)?;
        if corpus.is_empty() {
            bail!("{}: training corpus is empty", self.corpus.display());
        }
        let log = self.log.clone().unwrap_or_else(|| {
            let mut name = self
                .out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".to_string());
            name.push_str(".log.jsonl");
            self.out.with_file_name(name)
        });
        train_to(&cfg, &corpus, &self.out, &log)?;
        println!("checkpoint written to {}", self.out.display());
        Ok(())
    }
}

// ---------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Plain-text script: one user turn per line, forming one dialogue.
    #[arg(long, value_name = "FILE", conflicts_with = "corpus", required_unless_present = "corpus")]
    script: Option<PathBuf>,
    /// Corpus whose dialogues' user turns are replayed.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Database for executing generated queries.
    #[arg(long, value_name = "FILE")]
    db: Option<PathBuf>,
    /// Gold labels; enables per-dialogue database row orders.
    #[arg(long, value_name = "FILE", requires = "db")]
    gold: Option<PathBuf>,
    /// Output transcripts (JSONL); latents go to `<out>.latents.json`.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

/// Replay scripts through a model. Shared by `generate` and `sweep`.
fn generate_corpus(
    cfg: &RunConfig,
    model: &Model,
    vocab: &Vocab,
    scripts: &[(String, Vec<Vec<String>>)],
    db: Option<&Database>,
    gold: Option<&[GoldLabels]>,
) -> Result<(Vec<Dialogue>, Vec<LatentSidecarRecord>)> {
    let opts = cfg.run_options(model);
    let rows_by_id: BTreeMap<&str, &Vec<Vec<String>>> = gold
        .unwrap_or_default()
        .iter()
        .filter_map(|g| g.db_rows.as_ref().map(|rows| (g.dialogue_id.as_str(), rows)))
        .collect();
    let mut dialogues = Vec::with_capacity(scripts.len());
    let mut latents = Vec::new();
    for (id, script) in scripts {
        // Dialogues grounded against their own row order get a database
        // rebuilt in that order, mirroring how the corpus was generated.
        let own_db = match (db, rows_by_id.get(id.as_str())) {
            (Some(shared), Some(rows)) => {
                Some(Database::new(shared.schema().to_vec(), (*rows).clone())?)
            }
            _ => None,
        };
        let run = run_dialogue(
            model,
            vocab,
            id,
            script,
            own_db.as_ref().or(db),
            &opts,
        )?;
        for w in &run.warnings {
            eprintln!("warning: {w}");
        }
        latents.extend(run.latents.iter().map(|l| LatentSidecarRecord {
            dialogue_id: id.clone(),
            turn_index: l.turn_index,
            indices: l.latent.indices(),
        }));
        dialogues.push(run.dialogue);
    }
    Ok((dialogues, latents))
}

fn latents_path(out: &Path) -> PathBuf {
    // Append to the full output name, like the config and log sidecars:
    // `gen.jsonl` -> `gen.jsonl.latents.json`.
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".latents.json");
    out.with_file_name(name)
}

impl GenerateArgs {
    fn run(self) -> Result<()> {
        let cfg = self.shared.resolve()?;
        let (model, vocab) = checkpoint::load(&self.model)?;
        let db = self.db.as_deref().map(formats::read_db).transpose()?;
        let gold = self.gold.as_deref().map(formats::read_gold).transpose()?;

        let scripts: Vec<(String, Vec<Vec<String>>)> = match (&self.script, &self.corpus) {
            (Some(path), _) => {
                let raw = fs::read_to_string(path)
                    .with_context(|| format!("reading script {}", path.display()))?;
                let tok = tokenizer(&cfg);
                let turns: Vec<Vec<String>> = raw
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| ladia_core::data::tokenize(l, &tok).0)
                    .collect();
                if turns.is_empty() {
                    bail!("{}: script has no user turns", path.display());
                }
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "script".to_string());
                vec![(id, turns)]
            }
            (None, Some(path)) => formats::read_corpus(path)?
                .iter()
                .map(|d| (d.id.clone(), d.user_script()))
                .collect(),
            (None, None) => unreachable!("clap enforces script or corpus"),
        };

        let (dialogues, latents) =
            generate_corpus(&cfg, &model, &vocab, &scripts, db.as_ref(), gold.as_deref())?;
        formats::write_corpus(&self.out, &dialogues)?;
        formats::write_latents(&latents_path(&self.out), &latents)?;
        cfg.save_beside(&self.out)?;
        println!(
            "generated {} dialogues to {} (latents beside it)",
            dialogues.len(),
            self.out.display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------
// chat
// ---------------------------------------------------------------------

#[derive(Args)]
struct ChatArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Database for executing generated queries.
    #[arg(long, value_name = "FILE")]
    db: Option<PathBuf>,
}

impl ChatArgs {
    fn run(self) -> Result<()> {
        let cfg = self.shared.resolve()?;
        let (model, vocab) = checkpoint::load(&self.model)?;
        let db = self.db.as_deref().map(formats::read_db).transpose()?;
        let opts = cfg.run_options(&model);
        repl::chat(
            &model,
            &vocab,
            db.as_ref(),
            &opts,
            &tokenizer(&cfg),
            io::stdin().lock(),
            io::stdout().lock(),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Generated corpus (JSONL), e.g. from `generate`.
    #[arg(long, value_name = "FILE")]
    generated: PathBuf,
    /// Reference corpus (JSONL) the generations answer.
    #[arg(long, value_name = "FILE")]
    reference: PathBuf,
    /// Gold labels; enables entity match rate and success rate.
    #[arg(long, value_name = "FILE")]
    gold: Option<PathBuf>,
    /// Database; needed for entity match rate and success rate.
    #[arg(long, value_name = "FILE")]
    db: Option<PathBuf>,
    /// Checkpoint for reference-corpus perplexity.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Latent sidecar from `generate`; enables latent/action MI.
    #[arg(long, value_name = "FILE")]
    latents: Option<PathBuf>,
    /// Marginalize latents exactly in perplexity (needs n·K ≤ 16).
    #[arg(long)]
    exact_marginal: bool,
    /// Worker threads for perplexity scoring.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Fail (exit nonzero) when a computed metric is undefined.
    #[arg(long)]
    strict: bool,
    /// Report output (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

/// Split the corpus across `jobs` threads and merge per-chunk
/// perplexities in chunk order, so results do not depend on thread
/// scheduling.
fn perplexity_jobs(
    model: &Model,
    vocab: &Vocab,
    corpus: &[Dialogue],
    exact: bool,
    jobs: usize,
) -> Result<PerplexityReport> {
    if jobs <= 1 || corpus.len() <= 1 {
        return Ok(metrics::perplexity(model, vocab, corpus, exact)?);
    }
    let jobs = jobs.min(corpus.len());
    let chunk_len = corpus.len().div_ceil(jobs);
    let chunks: Vec<&[Dialogue]> = corpus.chunks(chunk_len).collect();
    let partials: Vec<ladia_core::Result<PerplexityReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| scope.spawn(move || metrics::perplexity(model, vocab, chunk, exact)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("perplexity worker panicked"))
            .collect()
    });
    let mut nats = 0.0;
    let mut tokens = 0usize;
    let mut turns = 0usize;
    for partial in partials {
        let p = partial?;
        nats += p.perplexity.ln() * p.tokens as f64;
        tokens += p.tokens;
        turns += p.turns;
    }
    Ok(PerplexityReport {
        perplexity: (nats / tokens as f64).exp(),
        tokens,
        turns,
        exact_marginal: exact,
    })
}

/// Pair the generated and reference corpora by dialogue id, in the
/// generated corpus's order.
fn align_by_id<'a>(
    generated: &[Dialogue],
    reference: &'a [Dialogue],
) -> Result<Vec<&'a Dialogue>> {
    let by_id: BTreeMap<&str, &Dialogue> =
        reference.iter().map(|d| (d.id.as_str(), d)).collect();
    generated
        .iter()
        .map(|g| {
            by_id
                .get(g.id.as_str())
                .copied()
                .ok_or_else(|| anyhow!("generated dialogue {} has no reference", g.id))
        })
        .collect()
}

/// Gold labels aligned to the generated corpus order.
fn align_gold<'a>(
    generated: &[Dialogue],
    gold: &'a [GoldLabels],
) -> Result<Vec<&'a GoldLabels>> {
    let by_id: BTreeMap<&str, &GoldLabels> =
        gold.iter().map(|g| (g.dialogue_id.as_str(), g)).collect();
    generated
        .iter()
        .map(|d| {
            by_id
                .get(d.id.as_str())
                .copied()
                .ok_or_else(|| anyhow!("dialogue {} has no gold labels", d.id))
        })
        .collect()
}

/// Resolve each gold annotation into the success-metric form: the
/// constraint set plus `(slot, value)` pairs looked up from the gold
/// entity's database row.
fn success_gold(
    generated: &[Dialogue],
    gold: &[&GoldLabels],
    db: &Database,
) -> Result<Vec<SuccessGold>> {
    let name_col = 0usize;
    let mut out = Vec::with_capacity(gold.len());
    for (dialogue, g) in generated.iter().zip(gold) {
        let mut requested = Vec::new();
        if !g.requested.is_empty() {
            let Some(entity) = g.entity_name.as_deref() else {
                bail!(
                    "dialogue {}: gold requests {:?} but names no entity",
                    dialogue.id,
                    g.requested
                );
            };
            // The gold row order (if any) holds the same rows as the
            // shared database, so value lookup can use either.
            let row = (0..db.len())
                .map(|i| db.entity(i).expect("index in range"))
                .find(|row| row[name_col].1 == entity)
                .ok_or_else(|| {
                    anyhow!("dialogue {}: gold entity {entity:?} is not in the database", dialogue.id)
                })?;
            for slot in &g.requested {
                let value = row
                    .iter()
                    .find(|(s, _)| s == slot)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| {
                        anyhow!("dialogue {}: requested slot {slot:?} is not in the schema", dialogue.id)
                    })?;
                requested.push((slot.clone(), value));
            }
        }
        out.push(SuccessGold {
            dialogue_id: g.dialogue_id.clone(),
            constraints: g.constraints.clone(),
            requested,
        });
    }
    Ok(out)
}

/// Everything `eval` needs, already loaded. Shared by `eval` and
/// `sweep`.
struct EvalInputs<'a> {
    generated: &'a [Dialogue],
    reference: &'a [Dialogue],
    gold: Option<&'a [GoldLabels]>,
    db: Option<&'a Database>,
    model: Option<(&'a Model, &'a Vocab)>,
    latents: Option<&'a [LatentSidecarRecord]>,
    exact_marginal: bool,
    jobs: usize,
}

fn evaluate(cfg: &RunConfig, inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let mut report = EvalReport::empty();
    let refs = align_by_id(inputs.generated, inputs.reference)?;

    // BLEU over aligned responses (queries excluded on both sides).
    let mut hyps = Vec::new();
    let mut refs_flat = Vec::new();
    let mut dropped = 0usize;
    for (gen, rf) in inputs.generated.iter().zip(&refs) {
        let g = gen.responses();
        let r = rf.responses();
        let n = g.len().min(r.len());
        dropped += g.len().max(r.len()) - n;
        for i in 0..n {
            hyps.push(g[i].tokens.clone());
            refs_flat.push(r[i].tokens.clone());
        }
    }
    if dropped > 0 {
        eprintln!("warning: {dropped} unpaired responses left out of BLEU");
    }
    if !hyps.is_empty() {
        report.bleu = Some(corpus_bleu(&hyps, &refs_flat)?);
    }

    if let Some((model, vocab)) = inputs.model {
        report.perplexity = Some(perplexity_jobs(
            model,
            vocab,
            inputs.reference,
            inputs.exact_marginal,
            inputs.jobs,
        )?);
    }

    report.query_accuracy = Some(query_accuracy(
        inputs.generated,
        &refs.iter().map(|d| (*d).clone()).collect::<Vec<_>>(),
    )?);

    if let (Some(gold), Some(db)) = (inputs.gold, inputs.db) {
        let aligned = align_gold(inputs.generated, gold)?;
        let name_slot = db
            .schema()
            .first()
            .ok_or_else(|| anyhow!("database has an empty schema"))?;
        let lexicon = db.distinct_values(name_slot);
        let entities: Vec<Option<String>> =
            aligned.iter().map(|g| g.entity_name.clone()).collect();
        report.emr = Some(entity_match_rate(inputs.generated, &entities, &lexicon)?);
        let sg = success_gold(inputs.generated, &aligned, db)?;
        report.success = Some(success_rate(
            inputs.generated,
            &sg,
            db,
            &cfg.slot_order,
            cfg.named_queries,
        )?);
    }

    if let Some(latents) = inputs.latents {
        let by_id: BTreeMap<&str, &Dialogue> =
            inputs.generated.iter().map(|d| (d.id.as_str(), d)).collect();
        let lexicons = AnnotatorLexicons {
            entity_names: inputs
                .db
                .map(|db| db.distinct_values(&db.schema()[0]))
                .unwrap_or_default(),
            ..AnnotatorLexicons::default()
        };
        let mut assignments: Vec<Vec<usize>> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for record in latents {
            let dialogue = by_id.get(record.dialogue_id.as_str()).ok_or_else(|| {
                anyhow!("latent record names unknown dialogue {}", record.dialogue_id)
            })?;
            let turn = dialogue.turns.get(record.turn_index).ok_or_else(|| {
                anyhow!(
                    "latent record points past dialogue {} (turn {})",
                    record.dialogue_id,
                    record.turn_index
                )
            })?;
            assignments.push(record.indices.clone());
            labels.push(ladia_core::interpret::rule_action_annotator(
                &turn.tokens,
                &lexicons,
            ));
        }
        if !assignments.is_empty() {
            report.latent_action_mi =
                Some(metrics::mutual_information(&assignments, &labels));
        }
    }

    verify_report(&report)?;
    Ok(report)
}

fn print_report(report: &EvalReport) {
    if let Some(b) = &report.bleu {
        println!("bleu            {:.2} ({} segments)", b.score, b.segments);
    }
    if let Some(p) = &report.perplexity {
        println!(
            "perplexity      {:.3} ({} tokens{})",
            p.perplexity,
            p.tokens,
            if p.exact_marginal { ", exact marginal" } else { "" }
        );
    }
    if let Some(e) = &report.emr {
        match e.rate {
            Some(rate) => println!(
                "entity match    {:.3} ({}/{} mentioning responses)",
                rate, e.matched, e.mentioning
            ),
            None => println!("entity match    undefined (no response mentions an entity)"),
        }
    }
    if let Some(q) = &report.query_accuracy {
        match q.accuracy {
            Some(acc) => println!("query accuracy  {:.3} ({}/{} turns)", acc, q.agreed, q.total),
            None => println!("query accuracy  undefined (no turns)"),
        }
    }
    if let Some(s) = &report.success {
        println!("success         {:.3} ({}/{})", s.rate, s.succeeded, s.total);
    }
    if let Some(mi) = report.latent_action_mi {
        println!("latent MI       {mi:.4} nats (labels: {})", report.mi_label_proxy);
    }
}

impl EvalArgs {
    fn run(self) -> Result<()> {
        let cfg = self.shared.resolve()?;
        let generated = formats::read_corpus(&self.generated)?;
        let reference = formats::read_corpus(&self.reference)?;
        let gold = self.gold.as_deref().map(formats::read_gold).transpose()?;
        let db = self.db.as_deref().map(formats::read_db).transpose()?;
        let loaded = self.model.as_deref().map(checkpoint::load).transpose()?;
        let latents = self
            .latents
            .as_deref()
            .map(formats::read_latents)
            .transpose()?;

        let report = evaluate(
            &cfg,
            &EvalInputs {
                generated: &generated,
                reference: &reference,
                gold: gold.as_deref(),
                db: db.as_ref(),
                model: loaded.as_ref().map(|(m, v)| (m, v)),
                latents: latents.as_deref(),
                exact_marginal: self.exact_marginal,
                jobs: self.jobs,
            },
        )?;

        write_json(&self.out, &report)?;
        cfg.save_beside(&self.out)?;
        print_report(&report);
        println!("report written to {}", self.out.display());

        let undefined = report.undefined_metrics();
        if !undefined.is_empty() {
            eprintln!("undefined metrics: {}", undefined.join(", "));
            if self.strict {
                bail!("undefined metrics under --strict: {}", undefined.join(", "));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// interpret
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    /// Gold action labels, falling back to rule-annotated actions.
    Action,
    /// Gold domain labels.
    Domain,
}

impl From<TargetArg> for TreeTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Action => TreeTarget::Action,
            TargetArg::Domain => TreeTarget::Domain,
        }
    }
}

#[derive(Args)]
struct InterpretArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Corpus to collect latent assignments from.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Database providing the entity lexicon for the rule annotator.
    #[arg(long, value_name = "FILE")]
    db: Option<PathBuf>,
    /// Tree prediction target.
    #[arg(long, value_enum, default_value_t = TargetArg::Action)]
    target: TargetArg,
    /// Decision tree depth limit.
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    /// Minimum records per leaf.
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,
    /// Held-out fraction for tree accuracy (0 scores on training
    /// records only).
    #[arg(long, default_value_t = 0.2)]
    heldout: f64,
    /// Manual latent→action map (JSON) to score.
    #[arg(long, value_name = "FILE")]
    manual_map: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out-dir", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(serde::Serialize)]
struct InterpretReport {
    records: usize,
    target: String,
    homogeneity: f64,
    majority_baseline: f64,
    train_records: usize,
    heldout_records: usize,
    tree_train_accuracy: f64,
    tree_heldout_accuracy: Option<f64>,
    manual_map: Option<ManualMapReport>,
}

impl InterpretArgs {
    fn run(self) -> Result<()> {
        let cfg = self.shared.resolve()?;
        if !(0.0..1.0).contains(&self.heldout) {
            bail!("--heldout must lie in [0, 1), got {}", self.heldout);
        }
        let (model, vocab) = checkpoint::load(&self.model)?;
        let corpus = formats::read_corpus(&self.corpus)?;
        let db = self.db.as_deref().map(formats::read_db).transpose()?;
        let lexicons = AnnotatorLexicons {
            entity_names: db
                .as_ref()
                .map(|db| db.distinct_values(&db.schema()[0]))
                .unwrap_or_default(),
            ..AnnotatorLexicons::default()
        };
        let records = collect_latents(&model, &vocab, &corpus, &lexicons);
        if records.is_empty() {
            bail!("{}: no system turns to collect latents from", self.corpus.display());
        }
        let target = TreeTarget::from(self.target);

        let clusters: Vec<Vec<usize>> = records.iter().map(|r| r.sample.indices()).collect();
        let labels = records
            .iter()
            .map(|r| record_label(r, target).map(str::to_string))
            .collect::<ladia_core::Result<Vec<_>>>()?;
        let h = homogeneity(&clusters, &labels);

        // Deterministic held-out split.
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut shuffle_rng = rng::derive(cfg.seed, 0x1A7E);
        rng::shuffle(&mut shuffle_rng, &mut order);
        let heldout_n = (records.len() as f64 * self.heldout).round() as usize;
        if self.heldout > 0.0 && heldout_n == 0 {
            bail!(
                "held-out split is empty ({} records at fraction {}); lower --heldout or add data",
                records.len(),
                self.heldout
            );
        }
        let (heldout_idx, train_idx) = order.split_at(heldout_n);
        let train: Vec<LatentRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
        let heldout: Vec<LatentRecord> = heldout_idx.iter().map(|&i| records[i].clone()).collect();
        if train.is_empty() {
            bail!("training split is empty; lower --heldout");
        }

        let tree = fit_tree(&train, target, self.max_depth, self.min_leaf)?;
        let train_acc = tree_accuracy(&tree, &train)?;
        let heldout_acc = if heldout.is_empty() {
            None
        } else {
            Some(tree_accuracy(&tree, &heldout)?)
        };
        let majority = majority_baseline(&records, target)?;

        let manual = self
            .manual_map
            .as_deref()
            .map(|path| -> Result<ManualMapReport> {
                let map = formats::read_manual_map(path)?;
                map.validate(model.config.latent.n, model.config.latent.k)?;
                Ok(apply_manual_map(&map, &records)?)
            })
            .transpose()?;

        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        write_json(&self.out_dir.join("latents.json"), &records)?;
        write_json(&self.out_dir.join("tree.json"), &tree)?;
        fs::write(
            self.out_dir.join("tree.txt"),
            export_tree(&tree, TreeFormat::Text),
        )?;
        fs::write(
            self.out_dir.join("tree.dot"),
            export_tree(&tree, TreeFormat::Dot),
        )?;
        let report = InterpretReport {
            records: records.len(),
            target: format!("{:?}", target).to_lowercase(),
            homogeneity: h,
            majority_baseline: majority,
            train_records: train.len(),
            heldout_records: heldout.len(),
            tree_train_accuracy: train_acc,
            tree_heldout_accuracy: heldout_acc,
            manual_map: manual,
        };
        write_json(&self.out_dir.join("interpret.json"), &report)?;
        write_json(&self.out_dir.join("config.json"), &cfg)?;

        println!("collected {} latent records", report.records);
        println!("homogeneity     {h:.4}");
        println!("majority        {majority:.4}");
        println!("tree train acc  {train_acc:.4}");
        if let Some(acc) = heldout_acc {
            println!("tree heldout    {acc:.4}");
        }
        if let Some(m) = &report.manual_map {
            println!(
                "manual map      {:.4} ({} abstained)",
                m.accuracy, m.abstained
            );
        }
        println!("artifacts in {}", self.out_dir.display());
        Ok(())
    }
}

// ---------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    shared: SharedFlags,
    /// Training corpus (JSONL).
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Corpus to replay and score against; defaults to the training
    /// corpus.
    #[arg(long, value_name = "FILE")]
    test: Option<PathBuf>,
    /// Database for query execution and grounding metrics.
    #[arg(long, value_name = "FILE")]
    db: Option<PathBuf>,
    /// Gold labels for grounding metrics and per-dialogue row orders.
    #[arg(long, value_name = "FILE", requires = "db")]
    gold: Option<PathBuf>,
    /// Latent counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 3, 5, 12])]
    grid: Vec<usize>,
    /// Worker threads for perplexity scoring.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Fail on undefined metrics.
    #[arg(long)]
    strict: bool,
    /// Output directory; one subdirectory per latent count.
    #[arg(long = "out-dir", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(serde::Serialize)]
struct SweepRow {
    n_latent: usize,
    k_latent: usize,
    bleu: Option<f64>,
    perplexity: Option<f64>,
    emr: Option<f64>,
    query_accuracy: Option<f64>,
    success: Option<f64>,
    latent_action_mi: Option<f64>,
}

impl SweepArgs {
    fn run(self) -> Result<()> {
        let base = self.shared.resolve()?;
        if self.grid.is_empty() {
            bail!("--grid needs at least one latent count");
        }
        let corpus = formats::read_corpus(&self.corpus)?;
        if corpus.is_empty() {
            bail!("{}: training corpus is empty", self.corpus.display());
        }
        let reference = match &self.test {
            Some(path) => formats::read_corpus(path)?,
            None => corpus.clone(),
        };
        let db = self.db.as_deref().map(formats::read_db).transpose()?;
        let gold = self.gold.as_deref().map(formats::read_gold).transpose()?;
        let scripts: Vec<(String, Vec<Vec<String>>)> = reference
            .iter()
            .map(|d| (d.id.clone(), d.user_script()))
            .collect();

        let mut rows = Vec::with_capacity(self.grid.len());
        let mut undefined_any = Vec::new();
        for &n in &self.grid {
            let mut cfg = base.clone();
            cfg.n_latent = n;
            let dir = self.out_dir.join(format!("n{n}"));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            println!("== n_latent = {n} ==");

            let ckpt = dir.join("model.ckpt");
            let (model, vocab) = train_to(&cfg, &corpus, &ckpt, &dir.join("train.log.jsonl"))?;

            let (dialogues, latents) =
                generate_corpus(&cfg, &model, &vocab, &scripts, db.as_ref(), gold.as_deref())?;
            let gen_path = dir.join("generated.jsonl");
            formats::write_corpus(&gen_path, &dialogues)?;
            formats::write_latents(&latents_path(&gen_path), &latents)?;

            let report = evaluate(
                &cfg,
                &EvalInputs {
                    generated: &dialogues,
                    reference: &reference,
                    gold: gold.as_deref(),
                    db: db.as_ref(),
                    model: Some((&model, &vocab)),
                    latents: Some(&latents),
                    exact_marginal: false,
                    jobs: self.jobs,
                },
            )?;
            write_json(&dir.join("report.json"), &report)?;
            print_report(&report);
            for metric in report.undefined_metrics() {
                undefined_any.push(format!("n={n}: {metric}"));
            }

            rows.push(SweepRow {
                n_latent: n,
                k_latent: cfg.k_latent,
                bleu: report.bleu.as_ref().map(|b| b.score),
                perplexity: report.perplexity.as_ref().map(|p| p.perplexity),
                emr: report.emr.as_ref().and_then(|e| e.rate),
                query_accuracy: report.query_accuracy.as_ref().and_then(|q| q.accuracy),
                success: report.success.as_ref().map(|s| s.rate),
                latent_action_mi: report.latent_action_mi,
            });
        }

        let summary = self.out_dir.join("sweep.json");
        write_json(&summary, &rows)?;
        base.save_beside(&summary)?;
        println!("sweep summary written to {}", summary.display());
        if !undefined_any.is_empty() {
            eprintln!("undefined metrics: {}", undefined_any.join("; "));
            if self.strict {
                bail!("undefined metrics under --strict");
            }
        }
        Ok(())
    }
}
