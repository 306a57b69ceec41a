//! Acceptance gate: eight end-to-end criteria, run sequentially, one
//! printed PASS/FAIL line each. The binary exits non-zero when any
//! gating criterion fails; criterion 8 is best-effort and reports
//! instead of gating.
//!
//! Runs as a `harness = false` test target so the criteria execute in
//! order (runtime budgets stay honest) and the per-criterion report is
//! always visible in `cargo test` output.

use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ladia_core::data::synth::{generate_synthetic_corpus, DetailSlot, GeneratorSpec, IntentSpec, Synthetic};
use ladia_core::data::{strip_db_turns, Dialogue, Role, Turn, Vocab};
use ladia_core::db::ResultFormat;
use ladia_core::graph::Graph;
use ladia_core::inference::{run_dialogue, RunOptions};
use ladia_core::interpret::{
    collect_latents, fit_tree, homogeneity, majority_baseline, tree_accuracy, AnnotatorLexicons,
    LatentRecord, TreeNode, TreeTarget,
};
use ladia_core::metrics::{
    corpus_bleu, entity_match_rate, mutual_information, perplexity, query_accuracy,
};
use ladia_core::model::{
    ContextState, DistributionParams, LatentConfig, LatentSample, Model, ModelConfig, TurnDropout,
};
use ladia_core::rng;
use ladia_core::training::{self, encode_dialogue, exchange_loss, kl_categorical, TrainConfig};

/// Outcome of one criterion beyond plain failure.
enum Outcome {
    Pass(String),
    /// Not run (criterion 8 without its optional dataset).
    Skip(String),
}

type CriterionResult = Result<Outcome, String>;

fn main() {
    let criteria: &[(usize, &str, fn() -> CriterionResult, Option<Duration>)] = &[
        (1, "gradient correctness", c1_gradient_check, Some(Duration::from_secs(60))),
        (2, "synthetic overfit", c2_synthetic_overfit, Some(Duration::from_secs(300))),
        (3, "metric oracles", c3_metric_oracles, None),
        (4, "database-grounding trend", c4_grounding_trend, Some(Duration::from_secs(600))),
        (5, "latent interpretability", c5_latent_interpretability, Some(Duration::from_secs(600))),
        (6, "prior-only inference", c6_prior_only_inference, None),
        (7, "CART split optimality", c7_cart_optimality, None),
        (8, "CamRest best-effort", c8_camrest_report, None),
    ];

    let mut failures = 0;
    for &(number, name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let line = match outcome {
            Ok(Ok(Outcome::Pass(detail))) => match budget {
                Some(limit) if elapsed > limit => {
                    failures += 1;
                    format!(
                        "criterion {number}: FAIL — {name}: passed checks but ran {:.1}s, over the {:.0}s budget",
                        elapsed.as_secs_f64(),
                        limit.as_secs_f64()
                    )
                }
                _ => format!(
                    "criterion {number}: PASS — {detail} ({:.1}s)",
                    elapsed.as_secs_f64()
                ),
            },
            Ok(Ok(Outcome::Skip(reason))) => {
                format!("criterion {number}: SKIP — {reason}")
            }
            Ok(Err(reason)) => {
                failures += 1;
                format!(
                    "criterion {number}: FAIL — {name}: {reason} ({:.1}s)",
                    elapsed.as_secs_f64()
                )
            }
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panicked".to_string());
                format!("criterion {number}: FAIL — {name}: panicked: {msg}")
            }
        };
        println!("{line}");
    }

    if failures > 0 {
        eprintln!("acceptance: {failures} criterion(s) failed");
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn turn(role: Role, text: &str) -> Turn {
    Turn::new(role, text.split_whitespace().map(String::from).collect())
}

// ---------------------------------------------------------------------
// Criterion 1: analytic gradients of the full training loss match
// central finite differences on a tiny model (every dimension <= 8,
// n=2, K=3). Each parameter group's relative error — L2 distance
// between the analytic and numeric gradient vectors over the larger of
// their norms — must be < 1e-4 (double precision), in under a minute.
// ---------------------------------------------------------------------

fn c1_gradient_check() -> CriterionResult {
    let dialogue = Dialogue::new(
        "grad0",
        vec![
            turn(Role::User, "a b"),
            turn(Role::System, "b c a"),
            turn(Role::User, "c a b a"),
            turn(Role::System, "a"),
        ],
    );
    let vocab = Vocab::build(std::slice::from_ref(&dialogue), 1).map_err(err)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 6,
        hidden_dim: 7,
        ctx_dim: 5,
        mlp_dim: 6,
        attn_dim: 4,
        latent: LatentConfig {
            n: 2,
            k: 3,
            feature_dim: 5,
        },
        attention: true,
        prior_sees_user_enc: true,
        max_len: 12,
    };
    let mut model = Model::new(config, 42).map_err(err)?;
    let exchanges = encode_dialogue(&dialogue, &vocab);
    if exchanges.len() != 2 {
        return Err(format!("expected 2 exchanges, got {}", exchanges.len()));
    }

    // Total loss: sum of reconstruction nats plus beta-weighted KL over
    // the dialogue, with a fixed temperature and a Gumbel noise stream
    // reseeded identically on every evaluation so the loss is a
    // deterministic function of the parameters.
    const TAU: f64 = 0.8;
    const BETA: f64 = 0.7;
    let loss = |model: &Model, grad: Option<&mut [f64]>| -> f64 {
        let mut g = Graph::new(&model.store);
        let mut ctx = model.ctx_inputs(&mut g, &ContextState::zeros(model.config.ctx_dim));
        let mut gumbel = rng::derive(7, 0xC1);
        let mut nats_nodes = Vec::new();
        let mut kl_nodes = Vec::new();
        for ex in &exchanges {
            let nodes =
                exchange_loss(model, &mut g, ex, ctx, TAU, &mut gumbel, TurnDropout::default())
                    .expect("exchange loss on fixed fixture");
            nats_nodes.push(nodes.nats);
            kl_nodes.push(nodes.kl);
            ctx = nodes.ctx;
        }
        let nats_sum = g.add_n(&nats_nodes);
        let kl_sum = g.add_n(&kl_nodes);
        let weighted_kl = g.scale(kl_sum, BETA);
        let root = g.add(nats_sum, weighted_kl);
        if let Some(grad) = grad {
            g.backward(root, grad);
        }
        g.scalar(root)
    };

    let dim = model.store.len();
    let mut analytic = vec![0.0; dim];
    let base = loss(&model, Some(&mut analytic));
    if !base.is_finite() {
        return Err(format!("loss is not finite: {base}"));
    }

    let groups: Vec<(String, usize, usize)> = model
        .store
        .specs()
        .iter()
        .map(|s| (s.name.clone(), s.offset, s.len()))
        .collect();
    // Per-group relative error: the L2 distance between the analytic and
    // numeric gradient vectors of the group, relative to the larger of the
    // two norms. Per-scalar ratios would be dominated by cancellation noise
    // (~1e-8 absolute) on near-zero gradient entries regardless of gradient
    // correctness; the group-level norm is what double precision can
    // meaningfully bound at 1e-4.
    const TOL: f64 = 1e-4;
    let mut worst_overall = 0.0f64;
    let mut failing_groups = Vec::new();
    for (name, offset, len) in &groups {
        let mut diff_sq = 0.0f64;
        let mut analytic_sq = 0.0f64;
        let mut numeric_sq = 0.0f64;
        for i in *offset..offset + len {
            let theta = model.store.flat()[i];
            let eps = 1e-5 * theta.abs().max(1.0);
            model.store.flat_mut()[i] = theta + eps;
            let up = loss(&model, None);
            model.store.flat_mut()[i] = theta - eps;
            let down = loss(&model, None);
            model.store.flat_mut()[i] = theta;
            let numeric = (up - down) / (2.0 * eps);
            let d = analytic[i] - numeric;
            diff_sq += d * d;
            analytic_sq += analytic[i] * analytic[i];
            numeric_sq += numeric * numeric;
        }
        let rel = diff_sq.sqrt() / analytic_sq.sqrt().max(numeric_sq.sqrt()).max(1e-12);
        worst_overall = worst_overall.max(rel);
        if rel >= TOL {
            failing_groups.push(format!("{name} ({rel:.2e})"));
        }
    }
    if !failing_groups.is_empty() {
        return Err(format!(
            "{}/{} parameter groups over {TOL:.0e}: {}",
            failing_groups.len(),
            groups.len(),
            failing_groups.join(", ")
        ));
    }
    Ok(Outcome::Pass(format!(
        "all {} parameter groups ({} parameters) match central differences; worst relative error {:.2e} < {TOL:.0e}",
        groups.len(),
        dim,
        worst_overall
    )))
}

// ---------------------------------------------------------------------
// Criterion 2: a 20-dialogue synthetic corpus (|V| <= 60, n=3, K=8) is
// memorized within 2000 steps: greedy inference reproduces >= 95% of
// training system turns exactly and train-corpus BLEU >= 95.
// ---------------------------------------------------------------------

fn c2_synthetic_overfit() -> CriterionResult {
    let spec = GeneratorSpec::overfit();
    let synth = generate_synthetic_corpus(&spec, 11).map_err(err)?;
    let vocab = Vocab::build(&synth.corpus, 1).map_err(err)?;
    if synth.corpus.len() != 20 {
        return Err(format!("expected 20 dialogues, got {}", synth.corpus.len()));
    }
    if vocab.len() > 60 {
        return Err(format!("vocabulary too large: {} > 60", vocab.len()));
    }

    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 40,
        hidden_dim: 64,
        ctx_dim: 48,
        mlp_dim: 48,
        attn_dim: 32,
        latent: LatentConfig {
            n: 3,
            k: 8,
            feature_dim: 32,
        },
        attention: true,
        prior_sees_user_enc: true,
        max_len: 40,
    };
    let mut model = Model::new(config, 0).map_err(err)?;
    let tcfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_steps: 2000,
        tau_start: 1.0,
        tau_floor: 0.3,
        tau_rate: 1e-3,
        kl_warmup: 400,
        beta_end: 1.0,
        dropout: 0.0,
        clip_norm: 5.0,
        seed: 0,
    };
    training::train(&mut model, &synth.corpus, &vocab, &tcfg).map_err(err)?;

    let opts = RunOptions::new(&model);
    let mut exact = 0usize;
    let mut total = 0usize;
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for d in &synth.corpus {
        let run = run_dialogue(&model, &vocab, &d.id, &d.user_script(), None, &opts).map_err(err)?;
        let generated = run.dialogue.responses();
        let reference = d.responses();
        if generated.len() != reference.len() {
            return Err(format!(
                "dialogue {}: generated {} responses for {} reference turns",
                d.id,
                generated.len(),
                reference.len()
            ));
        }
        for (g, r) in generated.iter().zip(&reference) {
            total += 1;
            if g.tokens == r.tokens {
                exact += 1;
            }
            hyps.push(g.tokens.clone());
            refs.push(r.tokens.clone());
        }
    }
    let fraction = exact as f64 / total as f64;
    let bleu = corpus_bleu(&hyps, &refs).map_err(err)?.score;
    if fraction < 0.95 {
        return Err(format!(
            "only {exact}/{total} system turns reproduced exactly ({:.1}% < 95%)",
            100.0 * fraction
        ));
    }
    if bleu < 95.0 {
        return Err(format!("train corpus BLEU {bleu:.2} < 95"));
    }
    Ok(Outcome::Pass(format!(
        "{exact}/{total} training system turns reproduced exactly ({:.1}%), train BLEU {bleu:.2}, |V|={} <= 60, 2000 steps",
        100.0 * fraction,
        vocab.len()
    )))
}

// ---------------------------------------------------------------------
// Criterion 3: frozen metric oracles. BLEU identity is exactly 100;
// an all-zero-parameter model is uniform so its perplexity equals |V|;
// KL(q, q) vanishes; the MI of independent uniform streams is near
// zero; the hand-computed homogeneity case matches to 1e-4.
// ---------------------------------------------------------------------

fn c3_metric_oracles() -> CriterionResult {
    let mut detail = String::new();

    // BLEU self-comparison: exactly 100.0.
    let sentences: Vec<Vec<String>> = [
        "the phone number is 555 1234",
        "goodbye",
        "there is a cheap italian place in the north",
    ]
    .iter()
    .map(|s| s.split_whitespace().map(String::from).collect())
    .collect();
    let identity = corpus_bleu(&sentences, &sentences).map_err(err)?.score;
    if identity != 100.0 {
        return Err(format!("identity BLEU {identity} != 100.0"));
    }
    write!(detail, "identity BLEU {identity}").unwrap();

    // Uniform model: zero every parameter, so all logits tie and the
    // per-token distribution is uniform over the vocabulary.
    let dialogue = Dialogue::new(
        "ppl0",
        vec![
            turn(Role::User, "a b"),
            turn(Role::System, "c a b"),
            turn(Role::User, "b"),
            turn(Role::System, "a c"),
        ],
    );
    let vocab = Vocab::build(std::slice::from_ref(&dialogue), 1).map_err(err)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 5,
        hidden_dim: 6,
        ctx_dim: 4,
        mlp_dim: 5,
        attn_dim: 4,
        latent: LatentConfig {
            n: 2,
            k: 3,
            feature_dim: 4,
        },
        attention: true,
        prior_sees_user_enc: true,
        max_len: 10,
    };
    let mut model = Model::new(config, 1).map_err(err)?;
    model.store.flat_mut().iter_mut().for_each(|v| *v = 0.0);
    let report = perplexity(&model, &vocab, std::slice::from_ref(&dialogue), false).map_err(err)?;
    let expect = vocab.len() as f64;
    if (report.perplexity - expect).abs() > 1e-6 {
        return Err(format!(
            "uniform-model perplexity {} differs from |V| = {expect} by more than 1e-6",
            report.perplexity
        ));
    }
    write!(detail, "; uniform perplexity {} = |V|", report.perplexity).unwrap();

    // KL of a distribution against itself.
    let q = DistributionParams {
        logits: vec![vec![0.3, -1.2, 2.0], vec![0.0, 0.5, -0.5]],
    };
    let kl = kl_categorical(&q, &q);
    if kl.abs() >= 1e-9 {
        return Err(format!("KL(q, q) = {kl:e} >= 1e-9"));
    }
    write!(detail, "; KL(q,q) {kl:.1e}").unwrap();

    // Mutual information of independent uniform draws (10k samples).
    let mut ra = rng::derive(123, 1);
    let mut rb = rng::derive(123, 2);
    let xs: Vec<usize> = (0..10_000).map(|_| rng::index(&mut ra, 5)).collect();
    let ys: Vec<usize> = (0..10_000).map(|_| rng::index(&mut rb, 5)).collect();
    let mi = mutual_information(&xs, &ys);
    if mi >= 0.02 {
        return Err(format!("independent-uniform MI {mi:.4} >= 0.02 nats"));
    }
    write!(detail, "; independent MI {mi:.4} nats").unwrap();

    // Hand-computed homogeneity: clusters [1,1,1,2] against classes
    // [A,A,B,B] -> 1 - H(class|cluster)/H(class) = 0.3113.
    let h = homogeneity(&[1, 1, 1, 2], &["A", "A", "B", "B"]);
    if (h - 0.3113).abs() > 1e-4 {
        return Err(format!("homogeneity hand case {h:.6} not within 1e-4 of 0.3113"));
    }
    write!(detail, "; homogeneity hand case {h:.4}").unwrap();

    Ok(Outcome::Pass(detail))
}

// ---------------------------------------------------------------------
// Criterion 4: database grounding. On a corpus where the offered entity
// is decided by a per-dialogue database ordering (and therefore cannot
// be predicted from text alone), training with db turns reaches entity
// match rate >= 0.90 while the same model trained on the stripped
// corpus stays <= 0.30; query decisions agree >= 0.90.
// ---------------------------------------------------------------------

fn c4_generator_spec() -> GeneratorSpec {
    let strs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let intent = |name: &str,
                  user: &[&str],
                  system: &[&str],
                  action: &str,
                  needs_query: bool,
                  requests: Option<&str>| IntentSpec {
        name: name.to_string(),
        weight: 1.0,
        user_templates: strs(user),
        system_templates: strs(system),
        action: action.to_string(),
        needs_query,
        requests: requests.map(String::from),
    };
    GeneratorSpec {
        constraint_slots: vec![
            ("food".to_string(), strs(&["italian", "chinese", "indian", "french"])),
            ("price".to_string(), strs(&["cheap", "moderate", "expensive"])),
        ],
        detail_slots: vec![
            DetailSlot::Cycle {
                slot: "area".to_string(),
                values: strs(&["north", "south", "east", "west", "centre"]),
            },
            DetailSlot::Serial {
                slot: "phone".to_string(),
                prefix: "555100".to_string(),
            },
        ],
        names_per_combo: 12,
        intents: vec![
            intent("greet", &["hello"], &["hello how can i help you"], "GREET", false, None),
            intent(
                "request",
                &[
                    "i want a <price> <food> restaurant",
                    "find me a <price> restaurant serving <food> food",
                ],
                &["<name> is a <price> <food> restaurant"],
                "OFFER",
                true,
                None,
            ),
            intent(
                "ask_phone",
                &["what is the phone number"],
                &["the phone number is <phone>"],
                "GIVE_DETAILS",
                false,
                Some("phone"),
            ),
            intent("bye", &["thank you goodbye"], &["goodbye"], "BYE", false, None),
        ],
        opening: vec!["greet".to_string(), "request".to_string(), "ask_phone".to_string()],
        body: Vec::new(),
        body_len: (0, 0),
        closing: vec!["bye".to_string()],
        dialogues: 360,
        per_dialogue_db_order: true,
    }
}

fn c4_train(corpus: &[Dialogue]) -> Result<(Model, Vocab), String> {
    let vocab = Vocab::build(corpus, 1).map_err(err)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 56,
        hidden_dim: 72,
        ctx_dim: 56,
        mlp_dim: 56,
        attn_dim: 56,
        latent: LatentConfig {
            n: 5,
            k: 10,
            feature_dim: 32,
        },
        attention: true,
        prior_sees_user_enc: true,
        max_len: 30,
    };
    let mut model = Model::new(config, 0).map_err(err)?;
    let tcfg = TrainConfig {
        lr: 1e-3,
        batch_size: 12,
        max_steps: 2200,
        tau_start: 1.0,
        tau_floor: 0.3,
        tau_rate: 1e-3,
        kl_warmup: 440,
        beta_end: 1.0,
        dropout: 0.0,
        clip_norm: 5.0,
        seed: 0,
    };
    training::train(&mut model, corpus, &vocab, &tcfg).map_err(err)?;
    Ok((model, vocab))
}

fn c4_generate(
    model: &Model,
    vocab: &Vocab,
    synth: &Synthetic,
    scripts: &[Dialogue],
    with_db: bool,
) -> Result<Vec<Dialogue>, String> {
    let opts = RunOptions {
        max_len: 30,
        named_queries: false,
        slot_order: vec!["food".to_string(), "price".to_string()],
        result_format: ResultFormat { append_count: false },
        max_query_attempts: 3,
    };
    let mut out = Vec::with_capacity(scripts.len());
    for (i, d) in scripts.iter().enumerate() {
        let db = if with_db {
            Some(synth.dialogue_db(i).map_err(err)?)
        } else {
            None
        };
        let run =
            run_dialogue(model, vocab, &d.id, &d.user_script(), db.as_ref(), &opts).map_err(err)?;
        out.push(run.dialogue);
    }
    Ok(out)
}

fn c4_grounding_trend() -> CriterionResult {
    let spec = c4_generator_spec();
    let synth = generate_synthetic_corpus(&spec, 0).map_err(err)?;
    let gold_entities: Vec<Option<String>> =
        synth.gold.iter().map(|g| g.entity_name.clone()).collect();
    let lexicon = synth.db.distinct_values(&synth.db.schema()[0].clone());

    // Arm with database turns.
    let (model_db, vocab_db) = c4_train(&synth.corpus)?;
    let generated_db = c4_generate(&model_db, &vocab_db, &synth, &synth.corpus, true)?;
    let emr_db = entity_match_rate(&generated_db, &gold_entities, &lexicon)
        .map_err(err)?
        .rate
        .ok_or("with-db entity match rate undefined: no response mentioned an entity")?;
    let qacc = query_accuracy(&generated_db, &synth.corpus)
        .map_err(err)?
        .accuracy
        .ok_or("query accuracy undefined: no turns compared")?;

    // Same corpus with db_query/db_result turns removed.
    let stripped: Vec<Dialogue> = synth.corpus.iter().map(strip_db_turns).collect();
    let (model_nodb, vocab_nodb) = c4_train(&stripped)?;
    let generated_nodb = c4_generate(&model_nodb, &vocab_nodb, &synth, &stripped, false)?;
    let emr_nodb = entity_match_rate(&generated_nodb, &gold_entities, &lexicon)
        .map_err(err)?
        .rate
        .ok_or("no-db entity match rate undefined: no response mentioned an entity")?;

    if emr_db < 0.90 {
        return Err(format!("with-db entity match rate {emr_db:.3} < 0.90"));
    }
    if emr_nodb > 0.30 {
        return Err(format!("no-db entity match rate {emr_nodb:.3} > 0.30"));
    }
    if qacc < 0.90 {
        return Err(format!("query accuracy {qacc:.3} < 0.90"));
    }
    Ok(Outcome::Pass(format!(
        "entity match rate {emr_db:.3} with db vs {emr_nodb:.3} without (thresholds 0.90 / 0.30), query accuracy {qacc:.3} >= 0.90, 360 dialogues per arm"
    )))
}

// ---------------------------------------------------------------------
// Criterion 5: latent interpretability. On a 5-action corpus whose
// action is determined by the current user utterance (uniform action
// frequencies, majority baseline exactly 0.20), the latents collected
// by prior argmax support a CART tree with held-out accuracy >= 0.80
// and cluster homogeneity against gold actions >= 0.5.
// ---------------------------------------------------------------------

const C5_PAIRS: [(&str, &str, &str); 5] = [
    ("hello there", "hello how can i help you", "GREET"),
    ("i want some food", "how about the golden house", "OFFER"),
    ("where is it", "it is in the north part of town", "GIVE_DETAILS"),
    ("book me a table", "booking done for you", "CONFIRM"),
    ("bye now", "goodbye have a nice day", "BYE"),
];

fn c5_corpus() -> Vec<Dialogue> {
    let mut r = rng::derive(7, 0xC5);
    (0..200)
        .map(|d| {
            let mut order = [0usize, 1, 2, 3, 4];
            rng::shuffle(&mut r, &mut order);
            let mut turns = Vec::with_capacity(10);
            for &i in &order {
                let (user, system, action) = C5_PAIRS[i];
                turns.push(turn(Role::User, user));
                let mut sys = turn(Role::System, system);
                sys.gold_action = Some(action.to_string());
                turns.push(sys);
            }
            Dialogue::new(format!("act{d:04}"), turns)
        })
        .collect()
}

fn c5_latent_interpretability() -> CriterionResult {
    let corpus = c5_corpus();
    let vocab = Vocab::build(&corpus, 1).map_err(err)?;
    // Attention is off and the decoder's context/utterance conditioning
    // is heavily dropped during training, so the latent variables are
    // the only reliable path from the user's request to the response.
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 16,
        hidden_dim: 24,
        ctx_dim: 16,
        mlp_dim: 24,
        attn_dim: 16,
        latent: LatentConfig {
            n: 10,
            k: 5,
            feature_dim: 16,
        },
        attention: false,
        prior_sees_user_enc: true,
        max_len: 12,
    };
    let mut model = Model::new(config, 0).map_err(err)?;
    let tcfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_steps: 1200,
        tau_start: 1.0,
        tau_floor: 0.3,
        tau_rate: 3e-3,
        kl_warmup: 240,
        beta_end: 0.2,
        dropout: 0.85,
        clip_norm: 5.0,
        seed: 0,
    };
    training::train(&mut model, &corpus, &vocab, &tcfg).map_err(err)?;

    let records = collect_latents(&model, &vocab, &corpus, &AnnotatorLexicons::default());
    if records.len() != 1000 {
        return Err(format!("expected 1000 latent records, got {}", records.len()));
    }

    let clusters: Vec<Vec<usize>> = records.iter().map(|r| r.sample.indices()).collect();
    let classes: Vec<&str> = records
        .iter()
        .map(|r| r.gold_action.as_deref().expect("gold actions set by construction"))
        .collect();
    let homog = homogeneity(&clusters, &classes);

    let majority = majority_baseline(&records, TreeTarget::Action).map_err(err)?;
    if (majority - 0.20).abs() > 1e-12 {
        return Err(format!("majority baseline {majority} is not the expected 0.20"));
    }

    // Seeded 80/20 split, tree fitted on the larger share.
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut split_rng = rng::derive(7, 0x51);
    rng::shuffle(&mut split_rng, &mut order);
    let heldout_len = records.len() / 5;
    let heldout: Vec<LatentRecord> = order[..heldout_len]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    let train: Vec<LatentRecord> = order[heldout_len..]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    let tree = fit_tree(&train, TreeTarget::Action, 4, 5).map_err(err)?;
    let heldout_acc = tree_accuracy(&tree, &heldout).map_err(err)?;

    if homog < 0.5 {
        return Err(format!("latent-cluster homogeneity {homog:.4} < 0.5"));
    }
    if heldout_acc < 0.80 {
        return Err(format!(
            "decision-tree held-out accuracy {heldout_acc:.4} < 0.80 (majority {majority:.2})"
        ));
    }
    let distinct: std::collections::BTreeSet<&Vec<usize>> = clusters.iter().collect();
    Ok(Outcome::Pass(format!(
        "homogeneity {homog:.3} >= 0.5, tree held-out accuracy {heldout_acc:.3} >= 0.80 vs majority {majority:.2}, {} latent clusters over 5 actions",
        distinct.len()
    )))
}

// ---------------------------------------------------------------------
// Criterion 6: prior-only inference. After training, randomizing every
// posterior-network and system-encoder parameter changes nothing about
// generation on a 50-turn scripted session (bitwise transcript and
// latent equality), proving inference never reads the posterior.
// ---------------------------------------------------------------------

fn c6_prior_only_inference() -> CriterionResult {
    let mut spec = c4_generator_spec();
    spec.names_per_combo = 2;
    spec.dialogues = 60;
    let synth = generate_synthetic_corpus(&spec, 3).map_err(err)?;
    let vocab = Vocab::build(&synth.corpus, 1).map_err(err)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 24,
        hidden_dim: 32,
        ctx_dim: 24,
        mlp_dim: 24,
        attn_dim: 24,
        latent: LatentConfig {
            n: 3,
            k: 5,
            feature_dim: 16,
        },
        attention: true,
        prior_sees_user_enc: true,
        max_len: 30,
    };
    let mut model = Model::new(config, 0).map_err(err)?;
    let tcfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_steps: 500,
        tau_start: 1.0,
        tau_floor: 0.3,
        tau_rate: 1e-3,
        kl_warmup: 100,
        beta_end: 1.0,
        dropout: 0.0,
        clip_norm: 5.0,
        seed: 0,
    };
    training::train(&mut model, &synth.corpus, &vocab, &tcfg).map_err(err)?;

    // 50 scripted user turns drawn from the training dialogues, replayed
    // as one long session against the shared database.
    let mut script: Vec<Vec<String>> = Vec::with_capacity(50);
    'fill: for d in &synth.corpus {
        for user in d.user_script() {
            script.push(user);
            if script.len() == 50 {
                break 'fill;
            }
        }
    }
    if script.len() != 50 {
        return Err(format!("assembled only {} scripted turns", script.len()));
    }

    let opts = RunOptions {
        max_len: 30,
        named_queries: false,
        slot_order: vec!["food".to_string(), "price".to_string()],
        result_format: ResultFormat { append_count: false },
        max_query_attempts: 3,
    };
    let transcript = |model: &Model| -> Result<(Vec<(Role, Vec<String>)>, Vec<Vec<usize>>), String> {
        let run = run_dialogue(model, &vocab, "script", &script, Some(&synth.db), &opts)
            .map_err(err)?;
        let turns = run
            .dialogue
            .turns
            .iter()
            .map(|t| (t.role, t.tokens.clone()))
            .collect();
        let latents = run.latents.iter().map(|l| l.latent.indices()).collect();
        Ok((turns, latents))
    };

    let before = transcript(&model)?;

    // Destroy everything inference must not depend on: the posterior MLP
    // and the system-side utterance encoder feeding it.
    let mut noise = rng::derive(9, 0x6E);
    let targets: Vec<(String, ladia_core::graph::ParamId)> = model
        .store
        .specs()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.name.starts_with("post.") || s.name.starts_with("enc_s."))
        .map(|(i, s)| (s.name.clone(), ladia_core::graph::ParamId(i)))
        .collect();
    if targets.len() != 7 {
        return Err(format!(
            "expected 7 posterior/system-encoder parameter groups, found {}: {:?}",
            targets.len(),
            targets.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
        ));
    }
    let mut randomized = 0usize;
    for (_, id) in &targets {
        for v in model.store.values_mut(*id) {
            *v = rng::uniform(&mut noise, 0.8);
            randomized += 1;
        }
    }

    let after = transcript(&model)?;
    if before.0 != after.0 {
        let diff = before
            .0
            .iter()
            .zip(&after.0)
            .position(|(a, b)| a != b)
            .map(|i| format!("first difference at turn {i}"))
            .unwrap_or_else(|| "transcript lengths differ".to_string());
        return Err(format!(
            "transcript changed after randomizing posterior weights ({diff})"
        ));
    }
    if before.1 != after.1 {
        return Err("latent assignments changed after randomizing posterior weights".to_string());
    }
    let generated_turns = before.0.iter().filter(|(r, _)| *r != Role::User).count();
    let queries = before.0.iter().filter(|(r, _)| *r == Role::DbQuery).count();
    Ok(Outcome::Pass(format!(
        "50-turn script: {generated_turns} generated turns ({queries} db queries) and every latent identical after randomizing {randomized} parameters across {} posterior/system-encoder groups",
        targets.len()
    )))
}

// ---------------------------------------------------------------------
// Criterion 7: CART split optimality. On trees fitted to 1000 random
// records (n=6, K=10 -> 60 candidate splits), every internal node's
// chosen split has weighted Gini impurity <= every enumerated
// alternative.
// ---------------------------------------------------------------------

fn c7_cart_optimality() -> CriterionResult {
    const N: usize = 6;
    const K: usize = 10;
    let classes = ["A", "B", "C", "D"];
    let mut r = rng::derive(13, 0x77);
    let records: Vec<LatentRecord> = (0..1000)
        .map(|i| {
            let indices: Vec<usize> = (0..N).map(|_| rng::index(&mut r, K)).collect();
            let slots: Vec<Vec<f64>> = indices
                .iter()
                .map(|&j| {
                    let mut row = vec![0.0; K];
                    row[j] = 1.0;
                    row
                })
                .collect();
            // Mostly structured labels (slot 0 decides) with 20% noise so
            // the tree grows several levels deep.
            let label = if rng::index(&mut r, 5) == 0 {
                classes[rng::index(&mut r, classes.len())]
            } else {
                classes[indices[0] % classes.len()]
            };
            LatentRecord {
                dialogue_id: format!("r{i}"),
                turn_index: 0,
                sample: LatentSample { slots, exact: true },
                rule_action: label.to_string(),
                gold_action: Some(label.to_string()),
                gold_domain: None,
            }
        })
        .collect();

    let tree = fit_tree(&records, TreeTarget::Action, 6, 1).map_err(err)?;

    let assignments: Vec<Vec<usize>> = records.iter().map(|r| r.sample.indices()).collect();
    let labels: Vec<&str> = records
        .iter()
        .map(|r| r.gold_action.as_deref().unwrap())
        .collect();

    fn gini(subset: &[usize], labels: &[&str]) -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        let mut counts = std::collections::BTreeMap::new();
        for &i in subset {
            *counts.entry(labels[i]).or_insert(0usize) += 1;
        }
        let total = subset.len() as f64;
        1.0 - counts
            .values()
            .map(|&c| {
                let p = c as f64 / total;
                p * p
            })
            .sum::<f64>()
    }

    fn weighted_gini(
        subset: &[usize],
        assignments: &[Vec<usize>],
        labels: &[&str],
        slot: usize,
        category: usize,
    ) -> f64 {
        let (yes, no): (Vec<usize>, Vec<usize>) =
            subset.iter().partition(|&&i| assignments[i][slot] == category);
        (yes.len() as f64 * gini(&yes, labels) + no.len() as f64 * gini(&no, labels))
            / subset.len() as f64
    }

    fn audit(
        node: &TreeNode,
        subset: &[usize],
        assignments: &[Vec<usize>],
        labels: &[&str],
        splits_checked: &mut usize,
    ) -> Result<(), String> {
        match node {
            TreeNode::Leaf { .. } => Ok(()),
            TreeNode::Split {
                slot,
                category,
                yes,
                no,
            } => {
                if *slot >= N || *category >= K {
                    return Err(format!("split tests invalid indicator ({slot}, {category})"));
                }
                let chosen = weighted_gini(subset, assignments, labels, *slot, *category);
                for s in 0..N {
                    for c in 0..K {
                        let alt = weighted_gini(subset, assignments, labels, s, c);
                        if chosen > alt + 1e-12 {
                            return Err(format!(
                                "node split ({slot}, {category}) has impurity {chosen:.6}, but ({s}, {c}) achieves {alt:.6} on the same {} records",
                                subset.len()
                            ));
                        }
                    }
                }
                *splits_checked += 1;
                let (yes_set, no_set): (Vec<usize>, Vec<usize>) = subset
                    .iter()
                    .partition(|&&i| assignments[i][*slot] == *category);
                audit(yes, &yes_set, assignments, labels, splits_checked)?;
                audit(no, &no_set, assignments, labels, splits_checked)
            }
        }
    }

    let all: Vec<usize> = (0..records.len()).collect();
    let mut splits_checked = 0usize;
    audit(&tree.root, &all, &assignments, &labels, &mut splits_checked)?;
    if splits_checked == 0 {
        return Err("tree fitted no splits; optimality check is vacuous".to_string());
    }
    Ok(Outcome::Pass(format!(
        "{splits_checked} internal nodes audited against all {} candidate splits each; every chosen split minimizes weighted Gini",
        N * K
    )))
}

// ---------------------------------------------------------------------
// Criterion 8 (optional, best-effort, not gating): full pipeline on the
// public CamRest676 data when CAMREST_PATH points at a directory
// containing the dialogue JSON and its knowledge base. Reports BLEU and
// query accuracy against reference targets instead of failing.
// ---------------------------------------------------------------------

fn c8_camrest_report() -> CriterionResult {
    let Some(dir) = std::env::var_os("CAMREST_PATH") else {
        return Ok(Outcome::Skip(
            "optional; set CAMREST_PATH to a directory with CamRest676.json and CamRestDB.json to run (multi-hour)"
                .to_string(),
        ));
    };
    let dir = std::path::PathBuf::from(dir);
    let find = |names: &[&str]| -> Result<std::path::PathBuf, String> {
        names
            .iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| format!("none of {names:?} found under {}", dir.display()))
    };
    let raw = find(&["CamRest676.json", "camrest676.json", "CamRest676_v2.json"])?;
    let db = find(&["CamRestDB.json", "camrestdb.json", "KB.json"])?;

    let work = std::env::temp_dir().join(format!("camrest-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&work).map_err(err)?;
    let bin = env!("CARGO_BIN_EXE_ladia");
    let run = |args: &[&str]| -> Result<(), String> {
        let output = std::process::Command::new(bin)
            .args(args)
            .output()
            .map_err(err)?;
        if !output.status.success() {
            return Err(format!(
                "`ladia {}` failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&output.stderr)
            ));
        }
        Ok(())
    };

    let corpus = work.join("camrest.jsonl");
    let model = work.join("model.ckpt");
    let generated = work.join("generated.jsonl");
    let report = work.join("report.json");
    let config = work.join("config.json");
    // Real-data-scale hyperparameters, attention off, database turns
    // synthesized from the converted annotations.
    std::fs::write(&config, r#"{"attention": false, "max_steps": 2000}"#).map_err(err)?;

    eprintln!("criterion 8: running the CamRest pipeline (this takes hours on CPU)");
    run(&[
        "prep",
        "--raw",
        raw.to_str().unwrap(),
        "--db",
        db.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
        "--split",
        "8:1:1",
    ])?;
    let train_split = work.join("camrest.train.jsonl");
    let test_split = work.join("camrest.test.jsonl");
    run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--corpus",
        train_split.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ])?;
    run(&[
        "generate",
        "--model",
        model.to_str().unwrap(),
        "--corpus",
        test_split.to_str().unwrap(),
        "--db",
        db.to_str().unwrap(),
        "--out",
        generated.to_str().unwrap(),
    ])?;
    run(&[
        "eval",
        "--generated",
        generated.to_str().unwrap(),
        "--reference",
        test_split.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ])?;

    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).map_err(err)?).map_err(err)?;
    let bleu = parsed["bleu"]["score"].as_f64();
    let qacc = parsed["query_accuracy"]["accuracy"].as_f64();
    let verdict = |v: Option<f64>, target: f64| match v {
        Some(x) if x >= target => format!("{x:.2} (meets {target})"),
        Some(x) => format!("{x:.2} (below {target}, reported as a deviation)"),
        None => "undefined".to_string(),
    };
    Ok(Outcome::Pass(format!(
        "best-effort CamRest run: BLEU {}, query accuracy {}; artifacts in {}",
        verdict(bleu, 10.0),
        verdict(qacc, 0.7),
        work.display()
    )))
}
