//! Explaining the discrete latents: collect per-turn assignments,
//! score clusterings against labels, fit small decision trees over the
//! latent indicators, and apply hand-written latent→action maps.
//!
//! Everything here treats the latents the way inference does: the
//! prior's argmax, exactly one-hot. Trees test single binary indicators
//! "slot s is category k", split by weighted Gini impurity, with
//! exhaustively optimal split choice at each node.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Dialogue, Vocab, QUERY_MARKER};
use crate::error::{Error, Result};
use crate::fmath;
use crate::graph::Graph;
use crate::metrics::entropy;
use crate::model::{ContextState, LatentSample, Model, TurnDropout};
use crate::training::encode_dialogue;

/// One system-side turn's latent assignment and labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    /// Exact one-hot assignment.
    pub sample: LatentSample,
    /// Label from [`rule_action_annotator`] on the turn's text.
    pub rule_action: String,
    pub gold_action: Option<String>,
    pub gold_domain: Option<String>,
}

/// Lexicons driving the rule-based action annotator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotatorLexicons {
    /// Known entity names (possibly multi-word).
    pub entity_names: Vec<String>,
    /// Tokens that close a dialogue.
    pub bye_tokens: Vec<String>,
    /// Minimum run of digits in one token to count as a detail (phone
    /// numbers and the like).
    pub digit_min_len: usize,
}

impl Default for AnnotatorLexicons {
    fn default() -> Self {
        Self {
            entity_names: Vec::new(),
            bye_tokens: ["bye", "goodbye"].iter().map(|s| s.to_string()).collect(),
            digit_min_len: 4,
        }
    }
}

/// First-match rule labeling of a system-side turn: the query marker →
/// QUERY, a long digit run → GIVE_DETAILS, a known entity name →
/// OFFER, a closing token → BYE, otherwise OTHER.
pub fn rule_action_annotator(tokens: &[String], lexicons: &AnnotatorLexicons) -> String {
    if tokens.first().map(String::as_str) == Some(QUERY_MARKER) {
        return "QUERY".to_string();
    }
    if tokens.iter().any(|t| {
        t.len() >= lexicons.digit_min_len && t.chars().all(|c| c.is_ascii_digit())
    }) {
        return "GIVE_DETAILS".to_string();
    }
    for name in &lexicons.entity_names {
        let needle: Vec<String> = name.split(' ').map(String::from).collect();
        if crate::metrics::contains_seq(tokens, &needle) {
            return "OFFER".to_string();
        }
    }
    if tokens.iter().any(|t| lexicons.bye_tokens.contains(t)) {
        return "BYE".to_string();
    }
    "OTHER".to_string()
}

/// Inference-mode latent assignment for every system-side turn of every
/// dialogue: the context follows the gold user turns, the latent is the
/// prior argmax. Deterministic.
pub fn collect_latents(
    model: &Model,
    vocab: &Vocab,
    corpus: &[Dialogue],
    lexicons: &AnnotatorLexicons,
) -> Vec<LatentRecord> {
    let mut records = Vec::new();
    for dialogue in corpus {
        let mut ctx_state = ContextState::zeros(model.config.ctx_dim);
        // Map exchanges back to the system turn indices they came from.
        let system_turns: Vec<usize> = dialogue
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role.is_system_side())
            .map(|(i, _)| i)
            .collect();
        for (ex_no, ex) in encode_dialogue(dialogue, vocab).iter().enumerate() {
            let mut g = Graph::new(&model.store);
            let ctx = model.ctx_inputs(&mut g, &ctx_state);
            let enc_u = model.encode_user(&mut g, &ex.user);
            let prior = model.prior_params(&mut g, ctx, enc_u.final_h);
            let sample = Model::argmax_latent(&prior.values(&g));
            let z = model.sample_inputs(&mut g, &sample);
            let z_feat = model.z_features(&mut g, &z);
            let new_ctx =
                model.context_update(&mut g, ctx, enc_u.final_h, z_feat, TurnDropout::default());
            ctx_state = model.ctx_values(&g, new_ctx);

            let turn_index = system_turns[ex_no];
            let turn = &dialogue.turns[turn_index];
            records.push(LatentRecord {
                dialogue_id: dialogue.id.clone(),
                turn_index,
                sample,
                rule_action: rule_action_annotator(&turn.tokens, lexicons),
                gold_action: turn.gold_action.clone(),
                gold_domain: None,
            });
        }
    }
    records
}

/// Clustering homogeneity: `1 − H(class|cluster)/H(class)`, with 1 by
/// convention when the classes carry no entropy.
pub fn homogeneity<C: Ord, L: Ord>(clusters: &[C], classes: &[L]) -> f64 {
    debug_assert_eq!(clusters.len(), classes.len());
    let n = clusters.len().min(classes.len());
    if n == 0 {
        return 1.0;
    }
    let h_class = entropy(&classes[..n]);
    if h_class == 0.0 {
        return 1.0;
    }
    let mut by_cluster: BTreeMap<&C, Vec<&L>> = BTreeMap::new();
    for i in 0..n {
        by_cluster.entry(&clusters[i]).or_default().push(&classes[i]);
    }
    let mut h_cond = 0.0;
    for members in by_cluster.values() {
        let weight = members.len() as f64 / n as f64;
        let mut counts: BTreeMap<&&L, usize> = BTreeMap::new();
        for l in members {
            *counts.entry(l).or_insert(0) += 1;
        }
        let m = members.len() as f64;
        let mut h = 0.0;
        for c in counts.values() {
            let p = *c as f64 / m;
            h -= p * fmath::ln(p);
        }
        h_cond += weight * h;
    }
    (1.0 - h_cond / h_class).clamp(0.0, 1.0)
}

/// Which label a tree predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeTarget {
    Action,
    Domain,
}

/// The label a record contributes under a target. Actions prefer the
/// gold annotation and fall back to the rule label; domains require
/// gold.
pub fn record_label(record: &LatentRecord, target: TreeTarget) -> Result<&str> {
    match target {
        TreeTarget::Action => Ok(record
            .gold_action
            .as_deref()
            .unwrap_or(&record.rule_action)),
        TreeTarget::Domain => record.gold_domain.as_deref().ok_or_else(|| {
            Error::Invalid(format!(
                "record {}#{} has no gold domain",
                record.dialogue_id, record.turn_index
            ))
        }),
    }
}

/// Binary decision tree over the n·K latent indicators.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        label: String,
        histogram: BTreeMap<String, usize>,
    },
    Split {
        /// Tested indicator: slot `slot` is assigned category
        /// `category`.
        slot: usize,
        category: usize,
        /// Subtree when the condition holds.
        yes: Box<TreeNode>,
        /// Subtree when it does not.
        no: Box<TreeNode>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecisionTree {
    pub root: TreeNode,
    pub n: usize,
    pub k: usize,
    pub target: TreeTarget,
    pub max_depth: usize,
    pub min_leaf: usize,
}

/// Gini impurity of a label histogram.
fn gini(counts: &BTreeMap<&str, usize>, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut sum_sq = 0.0;
    for c in counts.values() {
        let p = *c as f64 / total as f64;
        sum_sq += p * p;
    }
    1.0 - sum_sq
}

fn histogram<'a>(labels: &[&'a str]) -> BTreeMap<&'a str, usize> {
    let mut counts = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0) += 1;
    }
    counts
}

fn majority(counts: &BTreeMap<&str, usize>) -> String {
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(l, _)| l.to_string())
        .unwrap_or_default()
}

fn leaf(labels: &[&str]) -> TreeNode {
    let counts = histogram(labels);
    TreeNode::Leaf {
        label: majority(&counts),
        histogram: counts
            .iter()
            .map(|(l, c)| (l.to_string(), *c))
            .collect(),
    }
}

/// Exhaustive best split at one node: the (slot, category) indicator
/// minimizing the weighted Gini impurity of the two sides, with ties
/// broken toward the lowest (slot, category). `None` when no split
/// satisfies the leaf-size floor or improves on the node's impurity.
fn best_split(
    indices: &[usize],
    assignments: &[Vec<usize>],
    labels: &[&str],
    n: usize,
    k: usize,
    min_leaf: usize,
) -> Option<(usize, usize, f64)> {
    let node_labels: Vec<&str> = indices.iter().map(|&i| labels[i]).collect();
    let node_gini = gini(&histogram(&node_labels), node_labels.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for slot in 0..n {
        for category in 0..k {
            let (mut yes, mut no) = (Vec::new(), Vec::new());
            for &i in indices {
                if assignments[i][slot] == category {
                    yes.push(labels[i]);
                } else {
                    no.push(labels[i]);
                }
            }
            if yes.len() < min_leaf || no.len() < min_leaf {
                continue;
            }
            let total = yes.len() + no.len();
            let weighted = (yes.len() as f64 * gini(&histogram(&yes), yes.len())
                + no.len() as f64 * gini(&histogram(&no), no.len()))
                / total as f64;
            if weighted + 1e-12 < best.map_or(node_gini, |(_, _, g)| g) {
                best = Some((slot, category, weighted));
            }
        }
    }
    best
}

fn grow(
    indices: &[usize],
    assignments: &[Vec<usize>],
    labels: &[&str],
    n: usize,
    k: usize,
    depth: usize,
    max_depth: usize,
    min_leaf: usize,
) -> TreeNode {
    let node_labels: Vec<&str> = indices.iter().map(|&i| labels[i]).collect();
    let counts = histogram(&node_labels);
    if depth >= max_depth || counts.len() < 2 {
        return leaf(&node_labels);
    }
    let Some((slot, category, _)) = best_split(indices, assignments, labels, n, k, min_leaf)
    else {
        return leaf(&node_labels);
    };
    let (mut yes_idx, mut no_idx) = (Vec::new(), Vec::new());
    for &i in indices {
        if assignments[i][slot] == category {
            yes_idx.push(i);
        } else {
            no_idx.push(i);
        }
    }
    TreeNode::Split {
        slot,
        category,
        yes: Box::new(grow(&yes_idx, assignments, labels, n, k, depth + 1, max_depth, min_leaf)),
        no: Box::new(grow(&no_idx, assignments, labels, n, k, depth + 1, max_depth, min_leaf)),
    }
}

/// Fit a CART tree on latent records. Single-class inputs produce a
/// single leaf; empty inputs are an error.
pub fn fit_tree(
    records: &[LatentRecord],
    target: TreeTarget,
    max_depth: usize,
    min_leaf: usize,
) -> Result<DecisionTree> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot fit a tree on zero records".into()));
    }
    if min_leaf == 0 {
        return Err(Error::Config("min_leaf must be at least 1".into()));
    }
    let n = records[0].sample.slots.len();
    let k = records[0].sample.slots.first().map_or(0, Vec::len);
    let mut labels = Vec::with_capacity(records.len());
    let mut assignments = Vec::with_capacity(records.len());
    for r in records {
        if !r.sample.exact {
            return Err(Error::Invalid(format!(
                "record {}#{} holds a relaxed sample; trees need exact assignments",
                r.dialogue_id, r.turn_index
            )));
        }
        if r.sample.slots.len() != n || r.sample.slots.iter().any(|s| s.len() != k) {
            return Err(Error::Shape(format!(
                "record {}#{} disagrees with the first record's latent shape",
                r.dialogue_id, r.turn_index
            )));
        }
        labels.push(record_label(r, target)?);
        assignments.push(r.sample.indices());
    }
    let indices: Vec<usize> = (0..records.len()).collect();
    let root = grow(&indices, &assignments, &labels, n, k, 0, max_depth, min_leaf);
    Ok(DecisionTree {
        root,
        n,
        k,
        target,
        max_depth,
        min_leaf,
    })
}

/// Predict the label of one exact latent sample.
pub fn predict<'a>(tree: &'a DecisionTree, sample: &LatentSample) -> &'a str {
    let indices = sample.indices();
    let mut node = &tree.root;
    loop {
        match node {
            TreeNode::Leaf { label, .. } => return label,
            TreeNode::Split {
                slot,
                category,
                yes,
                no,
            } => {
                node = if indices.get(*slot) == Some(category) {
                    yes
                } else {
                    no
                };
            }
        }
    }
}

/// Accuracy of a fitted tree on held-out records.
pub fn tree_accuracy(tree: &DecisionTree, records: &[LatentRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot score a tree on zero records".into()));
    }
    let mut correct = 0usize;
    for r in records {
        if predict(tree, &r.sample) == record_label(r, tree.target)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Majority-class baseline accuracy on the same records.
pub fn majority_baseline(records: &[LatentRecord], target: TreeTarget) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot score a baseline on zero records".into()));
    }
    let labels: Vec<&str> = records
        .iter()
        .map(|r| record_label(r, target))
        .collect::<Result<_>>()?;
    let counts = histogram(&labels);
    let top = counts.values().max().copied().unwrap_or(0);
    Ok(top as f64 / labels.len() as f64)
}

/// Rendering formats for a fitted tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeFormat {
    Text,
    Dot,
}

fn render_text(node: &TreeNode, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match node {
        TreeNode::Leaf { label, histogram } => {
            out.push_str(&format!("{pad}leaf: {label} {histogram:?}\n"));
        }
        TreeNode::Split {
            slot,
            category,
            yes,
            no,
        } => {
            out.push_str(&format!("{pad}z[{slot}] == {category}?\n"));
            out.push_str(&format!("{pad}no:\n"));
            render_text(no, indent + 1, out);
            out.push_str(&format!("{pad}yes:\n"));
            render_text(yes, indent + 1, out);
        }
    }
}

fn render_dot(node: &TreeNode, id: &mut usize, out: &mut String) -> usize {
    let my_id = *id;
    *id += 1;
    match node {
        TreeNode::Leaf { label, histogram } => {
            let total: usize = histogram.values().sum();
            out.push_str(&format!(
                "  n{my_id} [shape=box, label=\"{label}\\n{total} records\"];\n"
            ));
        }
        TreeNode::Split {
            slot,
            category,
            yes,
            no,
        } => {
            out.push_str(&format!("  n{my_id} [label=\"z[{slot}] == {category}\"];\n"));
            // The false edge first, so the fulfilled condition renders
            // as the right child.
            let no_id = render_dot(no, id, out);
            let yes_id = render_dot(yes, id, out);
            out.push_str(&format!("  n{my_id} -> n{no_id} [label=\"no\"];\n"));
            out.push_str(&format!("  n{my_id} -> n{yes_id} [label=\"yes\"];\n"));
        }
    }
    my_id
}

/// Render a tree as indented text or GraphViz DOT (condition-fulfilled
/// branch on the right).
pub fn export_tree(tree: &DecisionTree, format: TreeFormat) -> String {
    match format {
        TreeFormat::Text => {
            let mut out = String::new();
            render_text(&tree.root, 0, &mut out);
            out
        }
        TreeFormat::Dot => {
            let mut out = String::from("digraph tree {\n");
            let mut id = 0;
            render_dot(&tree.root, &mut id, &mut out);
            out.push_str("}\n");
            out
        }
    }
}

/// A hand-written map from whole latent index vectors to actions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ManualMap {
    pub entries: BTreeMap<Vec<usize>, String>,
}

impl ManualMap {
    /// Check every entry against a latent shape.
    pub fn validate(&self, n: usize, k: usize) -> Result<()> {
        for indices in self.entries.keys() {
            if indices.len() != n {
                return Err(Error::Config(format!(
                    "manual map entry {indices:?} has {} slots, model has {n}",
                    indices.len()
                )));
            }
            if indices.iter().any(|&i| i >= k) {
                return Err(Error::Config(format!(
                    "manual map entry {indices:?} exceeds {k} categories"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of applying a manual map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManualMapReport {
    /// Correct / total; abstentions count as errors.
    pub accuracy: f64,
    pub correct: usize,
    pub abstained: usize,
    pub total: usize,
}

/// Score a manual latent→action map against records. Vectors absent
/// from the map abstain and count as errors.
pub fn apply_manual_map(map: &ManualMap, records: &[LatentRecord]) -> Result<ManualMapReport> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot apply a map to zero records".into()));
    }
    let n = records[0].sample.slots.len();
    let k = records[0].sample.slots.first().map_or(0, Vec::len);
    map.validate(n, k)?;
    let mut correct = 0usize;
    let mut abstained = 0usize;
    for r in records {
        match map.entries.get(&r.sample.indices()) {
            Some(action) => {
                if action == record_label(r, TreeTarget::Action)? {
                    correct += 1;
                }
            }
            None => abstained += 1,
        }
    }
    Ok(ManualMapReport {
        accuracy: correct as f64 / records.len() as f64,
        correct,
        abstained,
        total: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Role, TokenizerConfig, Turn};
    use crate::model::ModelConfig;
    use crate::rng;

    fn toks(text: &str) -> Vec<String> {
        crate::data::tokenize(text, &TokenizerConfig::default()).0
    }

    fn one_hot(indices: &[usize], k: usize) -> LatentSample {
        let slots = indices
            .iter()
            .map(|&i| {
                let mut v = alloc::vec![0.0; k];
                v[i] = 1.0;
                v
            })
            .collect();
        LatentSample { slots, exact: true }
    }

    fn record(id: &str, indices: &[usize], k: usize, action: &str) -> LatentRecord {
        LatentRecord {
            dialogue_id: id.to_string(),
            turn_index: 0,
            sample: one_hot(indices, k),
            rule_action: action.to_string(),
            gold_action: None,
            gold_domain: None,
        }
    }

    #[test]
    fn homogeneity_oracles() {
        let classes = ["A", "A", "B", "B"];
        assert_eq!(homogeneity(&[1, 1, 2, 2], &classes), 1.0);
        assert_eq!(homogeneity(&[7, 7, 9, 9], &classes), 1.0);
        assert_eq!(homogeneity(&[1, 1, 1, 1], &classes), 0.0);
        let h = homogeneity(&[1, 1, 1, 2], &classes);
        assert!((h - 0.3113).abs() < 1e-4, "got {h}");
        // Zero class entropy → 1 by convention.
        assert_eq!(homogeneity(&[1, 2, 3], &["A", "A", "A"]), 1.0);
    }

    #[test]
    fn homogeneity_is_invariant_to_cluster_relabeling() {
        let mut rng = rng::seeded(41);
        for _ in 0..20 {
            let n = 30;
            let clusters: Vec<usize> = (0..n).map(|_| rng::index(&mut rng, 4)).collect();
            let classes: Vec<usize> = (0..n).map(|_| rng::index(&mut rng, 3)).collect();
            let relabeled: Vec<usize> = clusters.iter().map(|c| 9 - c).collect();
            let a = homogeneity(&clusters, &classes);
            let b = homogeneity(&relabeled, &classes);
            assert!((a - b).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn annotator_first_match_rules() {
        let lex = AnnotatorLexicons {
            entity_names: alloc::vec!["luna".to_string(), "pizza express".to_string()],
            ..AnnotatorLexicons::default()
        };
        assert_eq!(rule_action_annotator(&toks("query italian moderate"), &lex), "QUERY");
        assert_eq!(rule_action_annotator(&toks("the phone number is 5551001"), &lex), "GIVE_DETAILS");
        assert_eq!(rule_action_annotator(&toks("luna serves italian food"), &lex), "OFFER");
        assert_eq!(rule_action_annotator(&toks("pizza express is nice"), &lex), "OFFER");
        assert_eq!(rule_action_annotator(&toks("thank you goodbye"), &lex), "BYE");
        assert_eq!(rule_action_annotator(&toks("how can i help"), &lex), "OTHER");
        assert_eq!(rule_action_annotator(&[], &lex), "OTHER");
        // Precedence: details beat the entity mention.
        assert_eq!(
            rule_action_annotator(&toks("luna is reachable at 5551001"), &lex),
            "GIVE_DETAILS"
        );
    }

    #[test]
    fn perfectly_separable_records_fit_exactly() {
        let mut records = Vec::new();
        for i in 0..30 {
            let slot0 = i % 3;
            let action = ["OFFER", "BYE", "QUERY"][slot0];
            records.push(record(&format!("d{i}"), &[slot0, i % 2], 3, action));
        }
        let tree = fit_tree(&records, TreeTarget::Action, 4, 1).unwrap();
        assert_eq!(tree_accuracy(&tree, &records).unwrap(), 1.0);
    }

    #[test]
    fn single_class_input_yields_single_leaf() {
        let records: Vec<LatentRecord> = (0..10)
            .map(|i| record(&format!("d{i}"), &[i % 3], 3, "OFFER"))
            .collect();
        let tree = fit_tree(&records, TreeTarget::Action, 4, 1).unwrap();
        assert!(matches!(tree.root, TreeNode::Leaf { .. }));
        assert_eq!(predict(&tree, &one_hot(&[2], 3)), "OFFER");
    }

    #[test]
    fn four_point_split_matches_brute_force_oracle() {
        // Labels: A A B B over assignments where only slot 1 separates
        // them cleanly.
        let records = alloc::vec![
            record("a", &[0, 0], 2, "A"),
            record("b", &[1, 0], 2, "A"),
            record("c", &[0, 1], 2, "B"),
            record("d", &[1, 1], 2, "B"),
        ];
        let tree = fit_tree(&records, TreeTarget::Action, 1, 1).unwrap();
        // Independent exhaustive check of every (slot, category) split.
        let mut best = (f64::INFINITY, (usize::MAX, usize::MAX));
        for slot in 0..2usize {
            for cat in 0..2usize {
                let yes: Vec<&str> = records
                    .iter()
                    .filter(|r| r.sample.indices()[slot] == cat)
                    .map(|r| r.rule_action.as_str())
                    .collect();
                let no: Vec<&str> = records
                    .iter()
                    .filter(|r| r.sample.indices()[slot] != cat)
                    .map(|r| r.rule_action.as_str())
                    .collect();
                if yes.is_empty() || no.is_empty() {
                    continue;
                }
                let g = |side: &[&str]| {
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    for l in side {
                        *counts.entry(l).or_insert(0) += 1;
                    }
                    let t = side.len() as f64;
                    1.0 - counts.values().map(|c| (*c as f64 / t) * (*c as f64 / t)).sum::<f64>()
                };
                let w = (yes.len() as f64 * g(&yes) + no.len() as f64 * g(&no)) / 4.0;
                if w < best.0 - 1e-12 {
                    best = (w, (slot, cat));
                }
            }
        }
        match &tree.root {
            TreeNode::Split { slot, category, .. } => {
                assert_eq!((*slot, *category), best.1);
                assert_eq!(best.1 .0, 1, "slot 1 is the separating feature");
            }
            TreeNode::Leaf { .. } => panic!("expected a split"),
        }
    }

    #[test]
    fn depth_and_leaf_floors_are_respected() {
        let mut rng = rng::seeded(42);
        let records: Vec<LatentRecord> = (0..200)
            .map(|i| {
                let indices = [rng::index(&mut rng, 4), rng::index(&mut rng, 4)];
                let action = ["A", "B", "C"][rng::index(&mut rng, 3)];
                record(&format!("d{i}"), &indices, 4, action)
            })
            .collect();
        let tree = fit_tree(&records, TreeTarget::Action, 3, 5).unwrap();
        fn check(node: &TreeNode, depth: usize, max_depth: usize, min_leaf: usize) {
            match node {
                TreeNode::Leaf { histogram, .. } => {
                    assert!(depth <= max_depth);
                    if depth > 0 {
                        assert!(histogram.values().sum::<usize>() >= min_leaf);
                    }
                }
                TreeNode::Split { yes, no, .. } => {
                    assert!(depth < max_depth);
                    check(yes, depth + 1, max_depth, min_leaf);
                    check(no, depth + 1, max_depth, min_leaf);
                }
            }
        }
        check(&tree.root, 0, 3, 5);
    }

    #[test]
    fn scoring_empty_heldout_set_is_an_error() {
        let records = alloc::vec![record("a", &[0], 2, "A"), record("b", &[1], 2, "B")];
        let tree = fit_tree(&records, TreeTarget::Action, 2, 1).unwrap();
        assert!(tree_accuracy(&tree, &[]).is_err());
        assert!(fit_tree(&[], TreeTarget::Action, 2, 1).is_err());
    }

    #[test]
    fn gold_actions_take_precedence_over_rule_labels() {
        let mut r = record("a", &[0], 2, "OTHER");
        r.gold_action = Some("GREET".to_string());
        assert_eq!(record_label(&r, TreeTarget::Action).unwrap(), "GREET");
        assert!(record_label(&r, TreeTarget::Domain).is_err());
    }

    #[test]
    fn exports_render_both_formats() {
        let records = alloc::vec![
            record("a", &[0, 0], 2, "A"),
            record("b", &[0, 1], 2, "B"),
            record("c", &[1, 0], 2, "A"),
            record("d", &[1, 1], 2, "B"),
        ];
        let tree = fit_tree(&records, TreeTarget::Action, 2, 1).unwrap();
        let text = export_tree(&tree, TreeFormat::Text);
        assert!(text.contains("z[1] == "));
        assert!(text.contains("leaf:"));
        let dot = export_tree(&tree, TreeFormat::Dot);
        assert!(dot.starts_with("digraph tree {"));
        assert!(dot.trim_end().ends_with('}'));
        // The false edge is emitted before the true edge so the
        // fulfilled condition sits on the right.
        let no_pos = dot.find("[label=\"no\"]").unwrap();
        let yes_pos = dot.find("[label=\"yes\"]").unwrap();
        assert!(no_pos < yes_pos);
    }

    #[test]
    fn manual_map_scores_and_validates() {
        let records: Vec<LatentRecord> = (0..10)
            .map(|i| {
                let idx = i % 2;
                record(&format!("d{i}"), &[idx], 2, ["A", "B"][idx])
            })
            .collect();
        let mut map = ManualMap::default();
        map.entries.insert(alloc::vec![0], "A".to_string());
        map.entries.insert(alloc::vec![1], "B".to_string());
        let full = apply_manual_map(&map, &records).unwrap();
        assert_eq!(full.accuracy, 1.0);
        assert_eq!(full.abstained, 0);

        let empty = apply_manual_map(&ManualMap::default(), &records).unwrap();
        assert_eq!(empty.accuracy, 0.0);
        assert_eq!(empty.abstained, 10);

        let mut partial = ManualMap::default();
        partial.entries.insert(alloc::vec![0], "A".to_string());
        let report = apply_manual_map(&partial, &records).unwrap();
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.abstained, 5);

        let mut bad = ManualMap::default();
        bad.entries.insert(alloc::vec![0, 1], "A".to_string());
        assert!(apply_manual_map(&bad, &records).is_err());
        let mut out_of_range = ManualMap::default();
        out_of_range.entries.insert(alloc::vec![5], "A".to_string());
        assert!(out_of_range.validate(1, 2).is_err());
    }

    #[test]
    fn collect_latents_covers_every_system_turn_deterministically() {
        let corpus = alloc::vec![Dialogue::new(
            "d0",
            alloc::vec![
                Turn::new(Role::User, toks("hello i want italian food")),
                Turn::new(Role::DbQuery, toks("query italian")),
                Turn::new(Role::DbResult, toks("luna , italian")),
                Turn::new(Role::System, toks("luna serves italian food")),
                Turn::new(Role::User, toks("thank you goodbye")),
                Turn::new(Role::System, toks("goodbye")),
            ],
        )];
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let mut config = ModelConfig::small(vocab.len(), 2, 3);
        config.embed_dim = 5;
        config.hidden_dim = 6;
        config.ctx_dim = 5;
        config.mlp_dim = 5;
        config.attn_dim = 4;
        config.latent.feature_dim = 4;
        let model = Model::new(config, 9).unwrap();
        let lex = AnnotatorLexicons {
            entity_names: alloc::vec!["luna".to_string()],
            ..AnnotatorLexicons::default()
        };
        let a = collect_latents(&model, &vocab, &corpus, &lex);
        let b = collect_latents(&model, &vocab, &corpus, &lex);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|r| r.sample.exact));
        assert_eq!(a[0].rule_action, "QUERY");
        assert_eq!(a[1].rule_action, "OFFER");
        assert_eq!(a[2].rule_action, "BYE");
        assert_eq!(a[0].turn_index, 1);
        assert_eq!(a[1].turn_index, 3);
        assert_eq!(a[2].turn_index, 5);
        let ia: Vec<_> = a.iter().map(|r| r.sample.indices()).collect();
        let ib: Vec<_> = b.iter().map(|r| r.sample.indices()).collect();
        assert_eq!(ia, ib);
    }
}
