//! Corpus-level evaluation: BLEU, perplexity, entity match rate, query
//! accuracy, success rate, and mutual information.
//!
//! Every report carries its sample counts and, where the metric is
//! defined per dialogue or per turn, the raw records it was computed
//! from, so an independent pass over the records reproduces the
//! headline number exactly. Undefined metrics (empty denominators) are
//! `None` rather than a fabricated value.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Dialogue, Vocab};
use crate::db::{Database, Query};
use crate::error::{Error, Result};
use crate::fmath;
use crate::graph::{self, Graph};
use crate::model::{ContextState, DecodeMode, Model, TurnDropout};
use crate::training::encode_dialogue;

const BLEU_ORDER: usize = 4;
const BLEU_EPS: f64 = 1e-9;

/// Corpus BLEU summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0–100.
    pub score: f64,
    /// Modified n-gram precisions for orders 1–4 (after conventions).
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
    pub segments: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with 4-gram modified precisions and brevity penalty.
///
/// Conventions: aligned equal corpora score exactly 100; zero unigram
/// overlap scores exactly 0; an order with no hypothesis n-grams at all
/// is vacuous (precision 1); an order with n-grams but no matches takes
/// the add-ε floor.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "BLEU needs aligned corpora, got {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let mut hyp_tokens = 0;
    let mut ref_tokens = 0;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_tokens += hyp.len();
        ref_tokens += reference.len();
        for n in 1..=BLEU_ORDER {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in &hyp_counts {
                let clipped = (*count).min(ref_counts.get(gram).copied().unwrap_or(0));
                matches[n - 1] += clipped;
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let mut report = BleuReport {
        score: 0.0,
        precisions: [1.0; 4],
        brevity_penalty: 1.0,
        hyp_tokens,
        ref_tokens,
        segments: hypotheses.len(),
    };
    if hyp_tokens == 0 {
        report.score = if ref_tokens == 0 { 100.0 } else { 0.0 };
        return Ok(report);
    }
    if matches[0] == 0 {
        report.precisions[0] = 0.0;
        return Ok(report);
    }
    let mut log_sum = 0.0;
    for n in 0..BLEU_ORDER {
        let p = if totals[n] == 0 {
            1.0
        } else if matches[n] == 0 {
            BLEU_EPS
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        report.precisions[n] = p;
        log_sum += fmath::ln(p);
    }
    report.brevity_penalty = if hyp_tokens >= ref_tokens {
        1.0
    } else {
        fmath::exp(1.0 - ref_tokens as f64 / hyp_tokens as f64)
    };
    report.score = 100.0 * report.brevity_penalty * fmath::exp(log_sum / BLEU_ORDER as f64);
    Ok(report)
}

/// Perplexity summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerplexityReport {
    /// exp(mean per-token system-side cross-entropy), ≥ 1.
    pub perplexity: f64,
    pub tokens: usize,
    pub turns: usize,
    pub exact_marginal: bool,
}

fn teacher_nats(g: &Graph<'_>, logits: &[graph::NodeId], gold: &[u32]) -> f64 {
    let mut nats = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let target = gold.get(i).copied().unwrap_or(crate::data::EOS) as usize;
        let logp = graph::log_softmax_vec(g.value(l));
        nats -= logp[target];
    }
    nats
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| fmath::exp(v - max)).sum();
    max + fmath::ln(sum)
}

/// Inference-mode perplexity over system-side turns (responses and
/// database queries alike), teacher-forced on the gold corpus. The
/// latent comes from the prior: its argmax by default, or the exact
/// marginal over all joint assignments when `exact_marginal` is set
/// (only permitted for n·K ≤ 16). The context recurrence always follows
/// the argmax assignment.
pub fn perplexity(
    model: &Model,
    vocab: &Vocab,
    corpus: &[Dialogue],
    exact_marginal: bool,
) -> Result<PerplexityReport> {
    let latent = model.config.latent;
    if exact_marginal && latent.n * latent.k > 16 {
        return Err(Error::Config(format!(
            "exact marginal perplexity needs n*K <= 16, got {}*{}",
            latent.n, latent.k
        )));
    }
    let mut total_nats = 0.0;
    let mut tokens = 0usize;
    let mut turns = 0usize;
    for dialogue in corpus {
        let mut ctx_state = ContextState::zeros(model.config.ctx_dim);
        for ex in encode_dialogue(dialogue, vocab) {
            let mut g = Graph::new(&model.store);
            let ctx = model.ctx_inputs(&mut g, &ctx_state);
            let enc_u = model.encode_user(&mut g, &ex.user);
            let prior = model.prior_params(&mut g, ctx, enc_u.final_h);
            let prior_values = prior.values(&g);
            let argmax = Model::argmax_latent(&prior_values);

            if exact_marginal {
                let log_prior: Vec<Vec<f64>> = prior_values
                    .logits
                    .iter()
                    .map(|row| graph::log_softmax_vec(row))
                    .collect();
                let joints = latent.k.pow(latent.n as u32);
                let mut log_terms = Vec::with_capacity(joints);
                for joint in 0..joints {
                    let mut rem = joint;
                    let mut sample = argmax.clone();
                    let mut lp = 0.0;
                    for slot in 0..latent.n {
                        let k = rem % latent.k;
                        rem /= latent.k;
                        sample.slots[slot] = vec![0.0; latent.k];
                        sample.slots[slot][k] = 1.0;
                        lp += log_prior[slot][k];
                    }
                    let z = model.sample_inputs(&mut g, &sample);
                    let z_feat = model.z_features(&mut g, &z);
                    let dec = model.decode_system(
                        &mut g,
                        z_feat,
                        ctx,
                        enc_u.final_h,
                        &enc_u.states,
                        DecodeMode::Teacher(&ex.system),
                        TurnDropout::default(),
                    );
                    let nll = teacher_nats(&g, &dec.logits, &ex.system);
                    log_terms.push(lp - nll);
                }
                total_nats -= log_sum_exp(&log_terms);
            } else {
                let z = model.sample_inputs(&mut g, &argmax);
                let z_feat = model.z_features(&mut g, &z);
                let dec = model.decode_system(
                    &mut g,
                    z_feat,
                    ctx,
                    enc_u.final_h,
                    &enc_u.states,
                    DecodeMode::Teacher(&ex.system),
                    TurnDropout::default(),
                );
                total_nats += teacher_nats(&g, &dec.logits, &ex.system);
            }

            let z = model.sample_inputs(&mut g, &argmax);
            let z_feat = model.z_features(&mut g, &z);
            let new_ctx = model.context_update(&mut g, ctx, enc_u.final_h, z_feat, TurnDropout::default());
            ctx_state = model.ctx_values(&g, new_ctx);
            tokens += ex.system.len() + 1;
            turns += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::Invalid("perplexity needs at least one system turn".into()));
    }
    Ok(PerplexityReport {
        perplexity: fmath::exp(total_nats / tokens as f64),
        tokens,
        turns,
        exact_marginal,
    })
}

/// One response's entity-mention audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmrRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub mentions: Vec<String>,
    pub correct: bool,
}

/// Entity match rate summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmrReport {
    /// `matched / mentioning`; undefined when nothing mentions an
    /// entity.
    pub rate: Option<f64>,
    pub matched: usize,
    pub mentioning: usize,
    pub responses: usize,
    pub records: Vec<EmrRecord>,
}

/// True when `needle` occurs as a contiguous token subsequence.
pub fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Over generated responses that mention any lexicon entity, the
/// fraction whose mentions are exactly the aligned dialogue's gold
/// entity. Queries are excluded; a response mentioning several distinct
/// entities counts against the rate.
pub fn entity_match_rate(
    generated: &[Dialogue],
    gold_entities: &[Option<String>],
    lexicon: &[String],
) -> Result<EmrReport> {
    if generated.len() != gold_entities.len() {
        return Err(Error::Invalid(format!(
            "entity match rate needs aligned inputs, got {} dialogues vs {} gold entities",
            generated.len(),
            gold_entities.len()
        )));
    }
    let names: Vec<(String, Vec<String>)> = lexicon
        .iter()
        .map(|n| (n.clone(), n.split(' ').map(String::from).collect()))
        .collect();
    let mut report = EmrReport {
        rate: None,
        matched: 0,
        mentioning: 0,
        responses: 0,
        records: Vec::new(),
    };
    for (dialogue, gold) in generated.iter().zip(gold_entities) {
        for (turn_index, turn) in dialogue.turns.iter().enumerate() {
            if turn.role != crate::data::Role::System || turn.is_query() {
                continue;
            }
            report.responses += 1;
            let mentions: Vec<String> = names
                .iter()
                .filter(|(_, toks)| contains_seq(&turn.tokens, toks))
                .map(|(name, _)| name.clone())
                .collect();
            if mentions.is_empty() {
                continue;
            }
            report.mentioning += 1;
            let correct = match gold {
                Some(name) => mentions.iter().all(|m| m == name),
                None => false,
            };
            if correct {
                report.matched += 1;
            }
            report.records.push(EmrRecord {
                dialogue_id: dialogue.id.clone(),
                turn_index,
                mentions,
                correct,
            });
        }
    }
    if report.mentioning > 0 {
        report.rate = Some(report.matched as f64 / report.mentioning as f64);
    }
    Ok(report)
}

/// One aligned turn's query decisions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryRecord {
    pub dialogue_id: String,
    /// User-turn index within the dialogue.
    pub turn: usize,
    pub gold: bool,
    pub generated: bool,
}

/// Query placement agreement summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryAccuracyReport {
    pub accuracy: Option<f64>,
    pub agreed: usize,
    pub total: usize,
    pub records: Vec<QueryRecord>,
}

/// Per user turn: did the dialogue emit a database query before its
/// response?
fn query_decisions(dialogue: &Dialogue) -> Vec<bool> {
    let mut decisions = Vec::new();
    for turn in &dialogue.turns {
        match turn.role {
            crate::data::Role::User => decisions.push(false),
            _ => {
                if turn.is_query() {
                    if let Some(last) = decisions.last_mut() {
                        *last = true;
                    }
                }
            }
        }
    }
    decisions
}

/// Per-turn binary agreement on "a query is emitted in this turn";
/// query content is ignored. Turns present on only one side count as a
/// no-query decision there.
pub fn query_accuracy(generated: &[Dialogue], gold: &[Dialogue]) -> Result<QueryAccuracyReport> {
    if generated.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "query accuracy needs aligned corpora, got {} vs {} dialogues",
            generated.len(),
            gold.len()
        )));
    }
    let mut report = QueryAccuracyReport {
        accuracy: None,
        agreed: 0,
        total: 0,
        records: Vec::new(),
    };
    for (gen, gd) in generated.iter().zip(gold) {
        let a = query_decisions(gen);
        let b = query_decisions(gd);
        for i in 0..a.len().max(b.len()) {
            let generated_q = a.get(i).copied().unwrap_or(false);
            let gold_q = b.get(i).copied().unwrap_or(false);
            report.total += 1;
            if generated_q == gold_q {
                report.agreed += 1;
            }
            report.records.push(QueryRecord {
                dialogue_id: gd.id.clone(),
                turn: i,
                gold: gold_q,
                generated: generated_q,
            });
        }
    }
    if report.total > 0 {
        report.accuracy = Some(report.agreed as f64 / report.total as f64);
    }
    Ok(report)
}

/// Gold annotation for the success metric.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuccessGold {
    pub dialogue_id: String,
    /// Constraint set every generated query must reproduce.
    pub constraints: BTreeMap<String, String>,
    /// `(slot, value)` pairs whose value must surface in some response.
    pub requested: Vec<(String, String)>,
}

/// One dialogue's success audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuccessRecord {
    pub dialogue_id: String,
    pub queries_ok: bool,
    pub missing_values: Vec<String>,
    pub success: bool,
}

/// Success rate summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuccessReport {
    pub rate: f64,
    pub succeeded: usize,
    pub total: usize,
    pub records: Vec<SuccessRecord>,
}

fn query_constraint_set(
    db: &Database,
    query: &Query,
) -> BTreeSet<(String, String)> {
    match query {
        Query::Named(pairs) => pairs.iter().cloned().collect(),
        Query::Positional(values) => db
            .positional_order()
            .iter()
            .zip(values.iter())
            .map(|(s, v)| (s.clone(), v.clone()))
            .collect(),
    }
}

/// A dialogue succeeds iff every generated query's constraint set
/// equals the gold constraints (with at least one query when gold has
/// constraints) and every gold-requested value appears in some
/// generated response.
pub fn success_rate(
    generated: &[Dialogue],
    gold: &[SuccessGold],
    db: &Database,
    slot_order: &[String],
    named_form: bool,
) -> Result<SuccessReport> {
    if generated.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "success rate needs aligned inputs, got {} dialogues vs {} annotations",
            generated.len(),
            gold.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::Invalid("success rate over an empty corpus".into()));
    }
    let mut report = SuccessReport {
        rate: 0.0,
        succeeded: 0,
        total: generated.len(),
        records: Vec::new(),
    };
    for (dialogue, ann) in generated.iter().zip(gold) {
        let gold_set: BTreeSet<(String, String)> = ann
            .constraints
            .iter()
            .map(|(s, v)| (s.clone(), v.clone()))
            .collect();
        let mut queries_ok = true;
        let mut saw_query = false;
        for turn in dialogue.turns.iter().filter(|t| t.is_query()) {
            saw_query = true;
            match db.parse_query_tokens(&turn.tokens, slot_order, named_form) {
                Ok(q) => {
                    if query_constraint_set(db, &q) != gold_set {
                        queries_ok = false;
                    }
                }
                Err(_) => queries_ok = false,
            }
        }
        if !gold_set.is_empty() && !saw_query {
            queries_ok = false;
        }
        let responses = dialogue.responses();
        let mut missing_values = Vec::new();
        for (_, value) in &ann.requested {
            let value_tokens: Vec<String> = value.split(' ').map(String::from).collect();
            let found = responses
                .iter()
                .any(|t| contains_seq(&t.tokens, &value_tokens));
            if !found {
                missing_values.push(value.clone());
            }
        }
        let success = queries_ok && missing_values.is_empty();
        if success {
            report.succeeded += 1;
        }
        report.records.push(SuccessRecord {
            dialogue_id: ann.dialogue_id.clone(),
            queries_ok,
            missing_values,
            success,
        });
    }
    report.rate = report.succeeded as f64 / report.total as f64;
    Ok(report)
}

/// Plug-in entropy in nats of a discrete sample.
pub fn entropy<T: Ord>(xs: &[T]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for x in xs {
        *counts.entry(x).or_insert(0) += 1;
    }
    let n = xs.len() as f64;
    let mut h = 0.0;
    for c in counts.values() {
        let p = *c as f64 / n;
        h -= p * fmath::ln(p);
    }
    h.max(0.0)
}

/// Plug-in mutual information in nats between two aligned discrete
/// samples. Degenerate samples (fewer than two distinct values on
/// either side) give 0 by convention.
pub fn mutual_information<X: Ord, Y: Ord>(xs: &[X], ys: &[Y]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len().min(ys.len());
    if n == 0 {
        return 0.0;
    }
    let mut joint: BTreeMap<(&X, &Y), usize> = BTreeMap::new();
    let mut mx: BTreeMap<&X, usize> = BTreeMap::new();
    let mut my: BTreeMap<&Y, usize> = BTreeMap::new();
    for i in 0..n {
        *joint.entry((&xs[i], &ys[i])).or_insert(0) += 1;
        *mx.entry(&xs[i]).or_insert(0) += 1;
        *my.entry(&ys[i]).or_insert(0) += 1;
    }
    if mx.len() < 2 || my.len() < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for ((x, y), c) in &joint {
        let pxy = *c as f64 / nf;
        let px = mx[x] as f64 / nf;
        let py = my[y] as f64 / nf;
        mi += pxy * fmath::ln(pxy / (px * py));
    }
    mi.max(0.0)
}

/// Mean pairwise mutual information between latent slots, over all
/// unordered slot pairs; 0 for a single slot.
pub fn mean_pairwise_slot_mi(assignments: &[Vec<usize>]) -> f64 {
    let Some(first) = assignments.first() else {
        return 0.0;
    };
    let n = first.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let xi: Vec<usize> = assignments.iter().map(|a| a[i]).collect();
            let xj: Vec<usize> = assignments.iter().map(|a| a[j]).collect();
            sum += mutual_information(&xi, &xj);
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Bundle of every evaluation result, for serialization by callers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: Option<BleuReport>,
    pub perplexity: Option<PerplexityReport>,
    pub emr: Option<EmrReport>,
    pub query_accuracy: Option<QueryAccuracyReport>,
    pub success: Option<SuccessReport>,
    /// MI between the joint latent id and the rule-annotated action of
    /// the generated response (the label proxy is a reconstruction
    /// choice, recorded here by name).
    pub latent_action_mi: Option<f64>,
    pub mi_label_proxy: String,
}

impl EvalReport {
    pub fn empty() -> Self {
        Self {
            bleu: None,
            perplexity: None,
            emr: None,
            query_accuracy: None,
            success: None,
            latent_action_mi: None,
            mi_label_proxy: "rule_action_annotator(generated response)".to_string(),
        }
    }

    /// Metrics that were requested but undefined on this corpus.
    pub fn undefined_metrics(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if matches!(&self.emr, Some(e) if e.rate.is_none()) {
            out.push("emr");
        }
        if matches!(&self.query_accuracy, Some(q) if q.accuracy.is_none()) {
            out.push("query_accuracy");
        }
        out
    }
}

/// Independent recomputation of the headline numbers from raw records;
/// used to keep reports honest.
pub fn verify_report(report: &EvalReport) -> Result<()> {
    if let Some(emr) = &report.emr {
        let matched = emr.records.iter().filter(|r| r.correct).count();
        let mentioning = emr.records.len();
        let rate = if mentioning > 0 {
            Some(matched as f64 / mentioning as f64)
        } else {
            None
        };
        if matched != emr.matched || mentioning != emr.mentioning || rate != emr.rate {
            return Err(Error::Validation("entity match rate disagrees with its records".into()));
        }
    }
    if let Some(qa) = &report.query_accuracy {
        let agreed = qa.records.iter().filter(|r| r.gold == r.generated).count();
        let total = qa.records.len();
        let accuracy = if total > 0 {
            Some(agreed as f64 / total as f64)
        } else {
            None
        };
        if agreed != qa.agreed || total != qa.total || accuracy != qa.accuracy {
            return Err(Error::Validation("query accuracy disagrees with its records".into()));
        }
    }
    if let Some(s) = &report.success {
        let succeeded = s.records.iter().filter(|r| r.success).count();
        if succeeded != s.succeeded
            || s.records.len() != s.total
            || (s.rate - succeeded as f64 / s.total as f64).abs() > 1e-12
        {
            return Err(Error::Validation("success rate disagrees with its records".into()));
        }
    }
    Ok(())
}
