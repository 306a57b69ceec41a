//! The latent-action dialogue architecture.
//!
//! Per turn, a user-side utterance (user turn or `db_result`) is encoded
//! by an LSTM; a prior network maps the running context state (and the
//! user encoding) to `n` K-way categorical latents, while a posterior
//! network additionally sees the encoded system-side utterance. During
//! training the latents are sampled with the Gumbel-Softmax relaxation
//! and the system decoder is initialized from the latent features, the
//! context state and the user encoding (optionally attending over the
//! user encoder states). A separate decoder reconstructs the user
//! utterance from its own encoding. The context LSTM then consumes the
//! user encoding and latent features. At inference the posterior is
//! never evaluated: latents are the argmax of the prior.
//!
//! All forward passes are built on [`graph::Graph`], so training and
//! inference share one implementation and checkpoints reproduce outputs
//! bit-exactly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::fmath;
use crate::graph::{self, Graph, NodeId, ParamId, ParamStore};
use crate::rng::{self, ChaCha8Rng};

/// Discrete latent layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Number of latent slots.
    pub n: usize,
    /// Categories per slot.
    pub k: usize,
    /// Output size of the latent feature map.
    pub feature_dim: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            n: 10,
            k: 20,
            feature_dim: 100,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Utterance encoder/decoder hidden size.
    pub hidden_dim: usize,
    /// Context recurrence hidden size.
    pub ctx_dim: usize,
    /// Hidden size of the prior/posterior feed-forward nets.
    pub mlp_dim: usize,
    /// Additive attention size.
    pub attn_dim: usize,
    pub latent: LatentConfig,
    /// Attend over user encoder states while decoding system turns.
    pub attention: bool,
    /// Condition the prior on the user encoding as well as the context
    /// state (`false`: context state only).
    pub prior_sees_user_enc: bool,
    /// Generation length cap.
    pub max_len: usize,
}

impl ModelConfig {
    /// Defaults for real-data scale (hidden 250, context 100, ten 20-way
    /// latents, dropout handled by the trainer).
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 100,
            hidden_dim: 250,
            ctx_dim: 100,
            mlp_dim: 100,
            attn_dim: 100,
            latent: LatentConfig::default(),
            attention: true,
            prior_sees_user_enc: true,
            max_len: 40,
        }
    }

    /// Small configuration for synthetic corpora and tests.
    pub fn small(vocab_size: usize, n: usize, k: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 24,
            hidden_dim: 48,
            ctx_dim: 32,
            mlp_dim: 32,
            attn_dim: 24,
            latent: LatentConfig {
                n,
                k,
                feature_dim: 24,
            },
            attention: true,
            prior_sees_user_enc: true,
            max_len: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent.n < 1 || self.latent.k < 2 {
            return Err(Error::Config(format!(
                "latent layout needs n >= 1 and K >= 2, got n={} K={}",
                self.latent.n, self.latent.k
            )));
        }
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("ctx_dim", self.ctx_dim),
            ("mlp_dim", self.mlp_dim),
            ("attn_dim", self.attn_dim),
            ("feature_dim", self.latent.feature_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn n_logits(&self) -> usize {
        self.latent.n * self.latent.k
    }

    fn prior_in(&self) -> usize {
        self.ctx_dim + if self.prior_sees_user_enc { self.hidden_dim } else { 0 }
    }

    /// Expected parameter names and shapes, in registration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e, h, c) = (self.vocab_size, self.embed_dim, self.hidden_dim, self.ctx_dim);
        let f = self.latent.feature_dim;
        let nk = self.n_logits();
        let m = self.mlp_dim;
        let a = self.attn_dim;
        let mut layout = vec![
            ("embed".to_string(), vec![v, e]),
            ("enc_u.w_ih".to_string(), vec![4 * h, e]),
            ("enc_u.w_hh".to_string(), vec![4 * h, h]),
            ("enc_u.b".to_string(), vec![4 * h]),
            ("enc_s.w_ih".to_string(), vec![4 * h, e]),
            ("enc_s.w_hh".to_string(), vec![4 * h, h]),
            ("enc_s.b".to_string(), vec![4 * h]),
            ("dec_u.w_init".to_string(), vec![h, h]),
            ("dec_u.b_init".to_string(), vec![h]),
            ("dec_u.w_ih".to_string(), vec![4 * h, e]),
            ("dec_u.w_hh".to_string(), vec![4 * h, h]),
            ("dec_u.b".to_string(), vec![4 * h]),
            ("dec_u.w_out".to_string(), vec![v, h]),
            ("dec_u.b_out".to_string(), vec![v]),
            ("dec_s.w_init".to_string(), vec![h, f + c + h]),
            ("dec_s.b_init".to_string(), vec![h]),
            ("dec_s.w_ih".to_string(), vec![4 * h, e]),
            ("dec_s.w_hh".to_string(), vec![4 * h, h]),
            ("dec_s.b".to_string(), vec![4 * h]),
            (
                "dec_s.w_out".to_string(),
                vec![v, if self.attention { 2 * h } else { h }],
            ),
            ("dec_s.b_out".to_string(), vec![v]),
            ("prior.w1".to_string(), vec![m, self.prior_in()]),
            ("prior.b1".to_string(), vec![m]),
            ("prior.w2".to_string(), vec![nk, m]),
            ("prior.b2".to_string(), vec![nk]),
            ("post.w1".to_string(), vec![m, c + 2 * h]),
            ("post.b1".to_string(), vec![m]),
            ("post.w2".to_string(), vec![nk, m]),
            ("post.b2".to_string(), vec![nk]),
            ("z_feat.w".to_string(), vec![f, nk]),
            ("z_feat.b".to_string(), vec![f]),
            ("ctx.w_ih".to_string(), vec![4 * c, h + f]),
            ("ctx.w_hh".to_string(), vec![4 * c, c]),
            ("ctx.b".to_string(), vec![4 * c]),
        ];
        if self.attention {
            layout.push(("attn.w_s".to_string(), vec![a, h]));
            layout.push(("attn.w_h".to_string(), vec![a, h]));
            layout.push(("attn.v".to_string(), vec![a]));
        }
        layout
    }
}

/// Categorical parameters for the `n` latent slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionParams {
    /// `n` rows of `K` logits.
    pub logits: Vec<Vec<f64>>,
}

impl DistributionParams {
    pub fn validate(&self) -> Result<()> {
        for row in &self.logits {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid("non-finite logits".into()));
            }
        }
        Ok(())
    }
}

/// A drawn latent assignment: `n` vectors on the K-simplex, either
/// relaxed (training) or exact one-hot (inference).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub slots: Vec<Vec<f64>>,
    pub exact: bool,
}

impl LatentSample {
    pub fn validate(&self) -> Result<()> {
        for (i, slot) in self.slots.iter().enumerate() {
            let sum: f64 = slot.iter().sum();
            if fmath::abs(sum - 1.0) > 1e-6 || slot.iter().any(|&x| x < 0.0) {
                return Err(Error::Invalid(format!(
                    "latent slot {i} is off the simplex (sum {sum})"
                )));
            }
            if self.exact {
                let ones = slot.iter().filter(|&&x| x == 1.0).count();
                let zeros = slot.iter().filter(|&&x| x == 0.0).count();
                if ones != 1 || zeros != slot.len() - 1 {
                    return Err(Error::Invalid(format!("latent slot {i} is not one-hot")));
                }
            }
        }
        Ok(())
    }

    /// Category index per slot (argmax for relaxed samples).
    pub fn indices(&self) -> Vec<usize> {
        self.slots.iter().map(|s| graph::argmax(s)).collect()
    }

    /// Single id for the joint assignment, mixing slot indices in base
    /// `K`.
    pub fn joint_id(&self, k: usize) -> u64 {
        let mut id = 0u64;
        for i in self.indices() {
            id = id * k as u64 + i as u64;
        }
        id
    }
}

/// Turn-level recurrence state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl ContextState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            h: vec![0.0; dim],
            c: vec![0.0; dim],
        }
    }
}

/// Graph handles for the context state.
#[derive(Clone, Copy, Debug)]
pub struct CtxNodes {
    pub h: NodeId,
    pub c: NodeId,
}

/// Graph handles for per-slot logits.
#[derive(Clone, Debug)]
pub struct DistNodes {
    pub slots: Vec<NodeId>,
}

impl DistNodes {
    pub fn values(&self, g: &Graph<'_>) -> DistributionParams {
        DistributionParams {
            logits: self.slots.iter().map(|&s| g.value(s).to_vec()).collect(),
        }
    }
}

/// Graph handles for a latent sample.
#[derive(Clone, Debug)]
pub struct SampleNodes {
    pub slots: Vec<NodeId>,
}

/// Encoder output: one state per input token plus the final state.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Vec<NodeId>,
    pub final_h: NodeId,
}

/// How to drive a decoder.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// Teacher-forced on the gold tokens; produces one logit vector per
    /// target position (gold tokens followed by end-of-sequence).
    Teacher(&'a [u32]),
    /// Greedy argmax decoding until end-of-sequence or `max_len`.
    Greedy { max_len: usize },
}

/// Decoder output.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// Per-position output logits.
    pub logits: Vec<NodeId>,
    /// Generated tokens (greedy mode; excludes the end marker).
    pub tokens: Vec<u32>,
    /// Greedy decoding hit `max_len` before the end marker.
    pub truncated: bool,
}

/// Inverted-dropout masks for one turn; `None` disables a site. Masks
/// cover the system decoder's context/user-encoding conditioning and the
/// context-recurrence input — never the latent features, which keeps the
/// latent path load-bearing.
#[derive(Clone, Copy, Debug, Default)]
pub struct TurnDropout {
    /// Mask over `ctx_dim` for the decoder-init context input.
    pub dec_ctx: Option<NodeId>,
    /// Mask over `hidden_dim` for the decoder-init user encoding.
    pub dec_enc: Option<NodeId>,
    /// Mask over `hidden_dim + feature_dim` for the context-update input.
    pub ctx_in: Option<NodeId>,
}

struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

struct DecIds {
    w_init: ParamId,
    b_init: ParamId,
    lstm: LstmIds,
    w_out: ParamId,
    b_out: ParamId,
}

struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct AttnIds {
    w_s: ParamId,
    w_h: ParamId,
    v: ParamId,
}

struct ParamIds {
    embed: ParamId,
    enc_u: LstmIds,
    enc_s: LstmIds,
    dec_u: DecIds,
    dec_s: DecIds,
    prior: MlpIds,
    post: MlpIds,
    z_w: ParamId,
    z_b: ParamId,
    ctx: LstmIds,
    attn: Option<AttnIds>,
}

/// Model parameters plus resolved handles.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    ids: ParamIds,
}

fn resolve_ids(config: &ModelConfig, store: &ParamStore) -> Result<ParamIds> {
    let find = |name: &str| {
        store
            .find(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))
    };
    let lstm = |prefix: &str| -> Result<LstmIds> {
        Ok(LstmIds {
            w_ih: find(&format!("{prefix}.w_ih"))?,
            w_hh: find(&format!("{prefix}.w_hh"))?,
            b: find(&format!("{prefix}.b"))?,
        })
    };
    let dec = |prefix: &str| -> Result<DecIds> {
        Ok(DecIds {
            w_init: find(&format!("{prefix}.w_init"))?,
            b_init: find(&format!("{prefix}.b_init"))?,
            lstm: lstm(prefix)?,
            w_out: find(&format!("{prefix}.w_out"))?,
            b_out: find(&format!("{prefix}.b_out"))?,
        })
    };
    let mlp = |prefix: &str| -> Result<MlpIds> {
        Ok(MlpIds {
            w1: find(&format!("{prefix}.w1"))?,
            b1: find(&format!("{prefix}.b1"))?,
            w2: find(&format!("{prefix}.w2"))?,
            b2: find(&format!("{prefix}.b2"))?,
        })
    };
    Ok(ParamIds {
        embed: find("embed")?,
        enc_u: lstm("enc_u")?,
        enc_s: lstm("enc_s")?,
        dec_u: dec("dec_u")?,
        dec_s: dec("dec_s")?,
        prior: mlp("prior")?,
        post: mlp("post")?,
        z_w: find("z_feat.w")?,
        z_b: find("z_feat.b")?,
        ctx: lstm("ctx")?,
        attn: if config.attention {
            Some(AttnIds {
                w_s: find("attn.w_s")?,
                w_h: find("attn.w_h")?,
                v: find("attn.v")?,
            })
        } else {
            None
        },
    })
}

impl Model {
    /// Fresh model with seeded initialization: matrices uniform in
    /// ±sqrt(6/(rows+cols)), biases zero except LSTM forget gates at 1,
    /// embeddings uniform in ±0.1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(seed, 0x1417);
        let mut store = ParamStore::new();
        for (name, shape) in config.param_layout() {
            match shape.len() {
                2 => {
                    let r = if name == "embed" {
                        0.1
                    } else {
                        fmath::sqrt(6.0 / (shape[0] + shape[1]) as f64)
                    };
                    store.add(&name, &shape, || rng::uniform(&mut rng, r));
                }
                1 => {
                    // LSTM bias layout is [input, forget, cell, output];
                    // forget gates start open.
                    let forget = name.ends_with(".b") && shape[0] % 4 == 0;
                    let h = shape[0] / 4;
                    let mut i = 0;
                    store.add(&name, &shape, || {
                        let v = if forget && (h..2 * h).contains(&i) { 1.0 } else { 0.0 };
                        i += 1;
                        v
                    });
                }
                _ => unreachable!("parameter shapes are vectors or matrices"),
            }
        }
        let ids = resolve_ids(&config, &store)?;
        Ok(Self { config, store, ids })
    }

    /// Rebuild from checkpointed parameters, validating the layout.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_layout();
        if store.specs().len() != expected.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, config expects {}",
                store.specs().len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))?;
            if store.spec(id).shape != *shape {
                return Err(Error::Shape(format!(
                    "parameter '{name}' has shape {:?}, config expects {shape:?}",
                    store.spec(id).shape
                )));
            }
        }
        let ids = resolve_ids(&config, &store)?;
        Ok(Self { config, store, ids })
    }

    fn embed(&self, g: &mut Graph<'_>, token: u32) -> NodeId {
        let row = (token as usize).min(self.config.vocab_size - 1);
        g.row(self.ids.embed, row)
    }

    fn lstm_step(
        &self,
        g: &mut Graph<'_>,
        ids: &LstmIds,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let dim = g.len(h);
        let wx = g.matvec(ids.w_ih, x);
        let wh = g.matvec(ids.w_hh, h);
        let b = g.param(ids.b);
        let gates = g.add_n(&[wx, wh, b]);
        let i_raw = g.slice(gates, 0, dim);
        let f_raw = g.slice(gates, dim, dim);
        let g_raw = g.slice(gates, 2 * dim, dim);
        let o_raw = g.slice(gates, 3 * dim, dim);
        let i = g.sigmoid(i_raw);
        let f = g.sigmoid(f_raw);
        let cell_in = g.tanh(g_raw);
        let o = g.sigmoid(o_raw);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cell_in);
        let c_new = g.add(fc, ig);
        let c_act = g.tanh(c_new);
        let h_new = g.mul(o, c_act);
        (h_new, c_new)
    }

    fn encode_with(&self, g: &mut Graph<'_>, ids: &LstmIds, tokens: &[u32]) -> Encoded {
        debug_assert!(!tokens.is_empty());
        let dim = self.config.hidden_dim;
        let mut h = g.zeros(dim);
        let mut c = g.zeros(dim);
        let mut states = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let x = self.embed(g, t);
            let (h2, c2) = self.lstm_step(g, ids, x, h, c);
            h = h2;
            c = c2;
            states.push(h);
        }
        Encoded { states, final_h: h }
    }

    /// Encode a user-side utterance (user turn or `db_result`).
    pub fn encode_user(&self, g: &mut Graph<'_>, tokens: &[u32]) -> Encoded {
        self.encode_with(g, &self.ids.enc_u, tokens)
    }

    /// Encode a system-side utterance for the posterior (training only).
    pub fn encode_system(&self, g: &mut Graph<'_>, tokens: &[u32]) -> Encoded {
        self.encode_with(g, &self.ids.enc_s, tokens)
    }

    fn mlp(&self, g: &mut Graph<'_>, ids: &MlpIds, input: NodeId) -> DistNodes {
        let w1 = g.matvec(ids.w1, input);
        let b1 = g.param(ids.b1);
        let pre = g.add(w1, b1);
        let hid = g.tanh(pre);
        let w2 = g.matvec(ids.w2, hid);
        let b2 = g.param(ids.b2);
        let logits = g.add(w2, b2);
        let k = self.config.latent.k;
        let slots = (0..self.config.latent.n)
            .map(|i| g.slice(logits, i * k, k))
            .collect();
        DistNodes { slots }
    }

    /// Prior latent logits from the context state (and user encoding).
    pub fn prior_params(&self, g: &mut Graph<'_>, ctx: CtxNodes, enc_u: NodeId) -> DistNodes {
        let input = if self.config.prior_sees_user_enc {
            g.concat(&[ctx.h, enc_u])
        } else {
            ctx.h
        };
        self.mlp(g, &self.ids.prior, input)
    }

    /// Posterior latent logits; additionally sees the encoded system
    /// utterance.
    pub fn posterior_params(
        &self,
        g: &mut Graph<'_>,
        ctx: CtxNodes,
        enc_u: NodeId,
        enc_s: NodeId,
    ) -> DistNodes {
        let input = g.concat(&[ctx.h, enc_u, enc_s]);
        self.mlp(g, &self.ids.post, input)
    }

    /// Relaxed sample per slot: softmax((logits + Gumbel noise)/τ).
    /// Differentiable with respect to the logits.
    pub fn gumbel_softmax_sample(
        &self,
        g: &mut Graph<'_>,
        dist: &DistNodes,
        tau: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleNodes> {
        if tau <= 0.0 {
            return Err(Error::Invalid(format!(
                "Gumbel-Softmax temperature must be positive, got {tau}"
            )));
        }
        let mut slots = Vec::with_capacity(dist.slots.len());
        for &logits in &dist.slots {
            let k = g.len(logits);
            let noise: Vec<f64> = (0..k).map(|_| rng::gumbel(rng)).collect();
            let noise = g.input(noise);
            let shifted = g.add(logits, noise);
            let scaled = g.scale(shifted, 1.0 / tau);
            slots.push(g.softmax(scaled));
        }
        Ok(SampleNodes { slots })
    }

    /// Exact one-hot sample at the per-slot argmax (ties: lowest index).
    pub fn argmax_latent(dist: &DistributionParams) -> LatentSample {
        let slots = dist
            .logits
            .iter()
            .map(|row| {
                let mut v = vec![0.0; row.len()];
                v[graph::argmax(row)] = 1.0;
                v
            })
            .collect();
        LatentSample { slots, exact: true }
    }

    /// Lift a plain sample into graph inputs (inference decode path).
    pub fn sample_inputs(&self, g: &mut Graph<'_>, sample: &LatentSample) -> SampleNodes {
        SampleNodes {
            slots: sample.slots.iter().map(|s| g.input(s.clone())).collect(),
        }
    }

    /// Latent feature map: linear in the concatenated slot vectors.
    pub fn z_features(&self, g: &mut Graph<'_>, z: &SampleNodes) -> NodeId {
        let cat = g.concat(&z.slots);
        let w = g.matvec(self.ids.z_w, cat);
        let b = g.param(self.ids.z_b);
        g.add(w, b)
    }

    fn run_decoder(
        &self,
        g: &mut Graph<'_>,
        ids: &DecIds,
        init_h: NodeId,
        attn_states: Option<&[NodeId]>,
        mode: DecodeMode<'_>,
    ) -> Decoded {
        let dim = self.config.hidden_dim;
        let mut h = init_h;
        let mut c = g.zeros(dim);
        // Cache the encoder-side attention projections once per turn.
        let attn_proj: Option<Vec<NodeId>> = match (attn_states, &self.ids.attn) {
            (Some(states), Some(attn)) => Some(
                states
                    .iter()
                    .map(|&s| g.matvec(attn.w_h, s))
                    .collect(),
            ),
            _ => None,
        };
        let mut logits_out = Vec::new();
        let mut tokens = Vec::new();
        let mut truncated = false;
        let mut prev = BOS;
        let steps = match mode {
            DecodeMode::Teacher(gold) => gold.len() + 1,
            DecodeMode::Greedy { max_len } => max_len,
        };
        for step in 0..steps {
            let x = self.embed(g, prev);
            let (h2, c2) = self.lstm_step(g, &ids.lstm, x, h, c);
            h = h2;
            c = c2;
            let features = match (&attn_proj, attn_states, &self.ids.attn) {
                (Some(proj), Some(states), Some(attn)) => {
                    let q = g.matvec(attn.w_s, h);
                    let mut scores = Vec::with_capacity(proj.len());
                    let v = g.param(attn.v);
                    for &p in proj {
                        let sum = g.add(q, p);
                        let act = g.tanh(sum);
                        scores.push(g.dot(v, act));
                    }
                    let score_vec = g.concat(&scores);
                    let alpha = g.softmax(score_vec);
                    let ctx_vec = g.weighted_sum(alpha, states);
                    g.concat(&[h, ctx_vec])
                }
                _ => h,
            };
            let wo = g.matvec(ids.w_out, features);
            let bo = g.param(ids.b_out);
            let logits = g.add(wo, bo);
            logits_out.push(logits);
            match mode {
                DecodeMode::Teacher(gold) => {
                    prev = gold.get(step).copied().unwrap_or(EOS);
                }
                DecodeMode::Greedy { .. } => {
                    let next = graph::argmax(g.value(logits)) as u32;
                    if next == EOS {
                        return Decoded {
                            logits: logits_out,
                            tokens,
                            truncated: false,
                        };
                    }
                    tokens.push(next);
                    prev = next;
                    truncated = step + 1 == steps;
                }
            }
        }
        Decoded {
            logits: logits_out,
            tokens,
            truncated,
        }
    }

    /// Reconstruction decoder of the user autoencoder.
    pub fn decode_user(&self, g: &mut Graph<'_>, enc_u: NodeId, mode: DecodeMode<'_>) -> Decoded {
        let w = g.matvec(self.ids.dec_u.w_init, enc_u);
        let b = g.param(self.ids.dec_u.b_init);
        let pre = g.add(w, b);
        let init = g.tanh(pre);
        self.run_decoder(g, &self.ids.dec_u, init, None, mode)
    }

    /// System response decoder, initialized from the latent features,
    /// the context state and the user encoding; attends over the user
    /// encoder states when attention is configured.
    pub fn decode_system(
        &self,
        g: &mut Graph<'_>,
        z_feat: NodeId,
        ctx: CtxNodes,
        enc_u: NodeId,
        user_states: &[NodeId],
        mode: DecodeMode<'_>,
        dropout: TurnDropout,
    ) -> Decoded {
        let ctx_h = match dropout.dec_ctx {
            Some(mask) => g.mul(ctx.h, mask),
            None => ctx.h,
        };
        let enc = match dropout.dec_enc {
            Some(mask) => g.mul(enc_u, mask),
            None => enc_u,
        };
        let cat = g.concat(&[z_feat, ctx_h, enc]);
        let w = g.matvec(self.ids.dec_s.w_init, cat);
        let b = g.param(self.ids.dec_s.b_init);
        let pre = g.add(w, b);
        let init = g.tanh(pre);
        let attn_states = self.config.attention.then_some(user_states);
        self.run_decoder(g, &self.ids.dec_s, init, attn_states, mode)
    }

    /// One step of the turn-level recurrence on `[enc_u, z_feat]`.
    pub fn context_update(
        &self,
        g: &mut Graph<'_>,
        ctx: CtxNodes,
        enc_u: NodeId,
        z_feat: NodeId,
        dropout: TurnDropout,
    ) -> CtxNodes {
        let mut input = g.concat(&[enc_u, z_feat]);
        if let Some(mask) = dropout.ctx_in {
            input = g.mul(input, mask);
        }
        let (h, c) = self.lstm_step(g, &self.ids.ctx, input, ctx.h, ctx.c);
        CtxNodes { h, c }
    }

    /// Lift a plain context state into graph inputs.
    pub fn ctx_inputs(&self, g: &mut Graph<'_>, state: &ContextState) -> CtxNodes {
        CtxNodes {
            h: g.input(state.h.clone()),
            c: g.input(state.c.clone()),
        }
    }

    /// Read a context state back out of the graph.
    pub fn ctx_values(&self, g: &Graph<'_>, ctx: CtxNodes) -> ContextState {
        ContextState {
            h: g.value(ctx.h).to_vec(),
            c: g.value(ctx.c).to_vec(),
        }
    }
}
