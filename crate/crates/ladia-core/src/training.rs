//! Joint optimization of user reconstruction and the system variational
//! bound.
//!
//! Per exchange, the loss is the user autoencoder's cross-entropy plus
//! the system decoder's cross-entropy under a posterior Gumbel-Softmax
//! sample, plus β times the KL divergence from the posterior to the
//! prior. Database pseudo-turns take part like ordinary turns: a
//! `db_query` is decoded as a system utterance (the model must learn to
//! emit queries) and a `db_result` is encoded as user input. β follows a
//! linear warmup, the Gumbel temperature an exponential decay to a
//! floor. Training is single-threaded and fully determined by the seed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dialogue, Vocab};
use crate::error::{Error, Result};
use crate::fmath;
use crate::graph::{self, Graph, NodeId};
use crate::model::{ContextState, CtxNodes, DistributionParams, Model, TurnDropout};
use crate::model::DecodeMode;
use crate::rng::{self, ChaCha8Rng};

/// Loss components of one exchange. The cross-entropy fields are
/// normalized by the exchange's full target token count (user and system
/// sides together), so `user_ce + system_ce` reads as nats per token.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// User reconstruction nats per exchange token.
    pub user_ce: f64,
    /// System decoding nats per exchange token.
    pub system_ce: f64,
    /// KL(posterior ‖ prior) in nats for the exchange.
    pub kl: f64,
    /// `user_ce + system_ce + β · kl`.
    pub total: f64,
    /// Target tokens backing the per-token normalization.
    pub tokens: usize,
}

/// Optimization settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Gumbel temperature: `max(floor, start · exp(−rate · step))`.
    pub tau_start: f64,
    pub tau_floor: f64,
    pub tau_rate: f64,
    /// KL weight rises linearly from 0 to `beta_end` over this many
    /// steps.
    pub kl_warmup: usize,
    pub beta_end: f64,
    /// Inverted-dropout probability on the decoder conditioning and the
    /// context-update input.
    pub dropout: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: Adam at 1e-3, batch 32, τ decaying 1.0 → 0.3, β warmup
    /// over the first fifth of training, dropout 0.3, clip 5.0.
    pub fn new(max_steps: usize) -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_steps,
            tau_start: 1.0,
            tau_floor: 0.3,
            tau_rate: 1e-3,
            kl_warmup: (max_steps / 5).max(1),
            beta_end: 1.0,
            dropout: 0.3,
            clip_norm: 5.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_floor <= 0.0 || self.tau_start < self.tau_floor {
            return Err(Error::Config(format!(
                "temperature schedule needs 0 < floor <= start, got start={} floor={}",
                self.tau_start, self.tau_floor
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size and max_steps must be positive".into()));
        }
        if self.lr <= 0.0 || self.clip_norm <= 0.0 || self.beta_end < 0.0 {
            return Err(Error::Config("lr, clip_norm must be positive; beta_end >= 0".into()));
        }
        Ok(())
    }

    /// τ at an optimizer step.
    pub fn temperature_schedule(&self, step: usize) -> f64 {
        let decayed = self.tau_start * fmath::exp(-self.tau_rate * step as f64);
        if decayed < self.tau_floor {
            self.tau_floor
        } else {
            decayed
        }
    }

    /// β at an optimizer step.
    pub fn kl_weight_schedule(&self, step: usize) -> f64 {
        if step >= self.kl_warmup {
            self.beta_end
        } else {
            self.beta_end * step as f64 / self.kl_warmup as f64
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub user_ce: f64,
    pub system_ce: f64,
    pub kl: f64,
    pub total: f64,
    pub tau: f64,
    pub beta: f64,
}

/// An exchange reduced to token ids.
#[derive(Clone, Debug)]
pub struct EncodedExchange {
    pub user: Vec<u32>,
    pub system: Vec<u32>,
}

/// Encode a dialogue's exchanges (`db_result` on the user side,
/// `db_query` on the system side).
pub fn encode_dialogue(dialogue: &Dialogue, vocab: &Vocab) -> Vec<EncodedExchange> {
    dialogue
        .exchanges()
        .iter()
        .map(|ex| EncodedExchange {
            user: vocab.encode(&ex.user.tokens),
            system: vocab.encode(&ex.system.tokens),
        })
        .collect()
}

/// KL(q ‖ p) in nats between the categorical distributions given by two
/// logit matrices, summed over latent slots.
pub fn kl_categorical(q_logits: &DistributionParams, p_logits: &DistributionParams) -> f64 {
    debug_assert_eq!(q_logits.logits.len(), p_logits.logits.len());
    let mut kl = 0.0;
    for (q_row, p_row) in q_logits.logits.iter().zip(&p_logits.logits) {
        let q = graph::softmax_vec(q_row);
        let q_logp = graph::log_softmax_vec(q_row);
        let p_logp = graph::log_softmax_vec(p_row);
        for i in 0..q.len() {
            kl += q[i] * (q_logp[i] - p_logp[i]);
        }
    }
    kl
}

/// Graph node for KL(q ‖ p) summed over slots; differentiable with
/// respect to both logit sets.
fn kl_node(g: &mut Graph<'_>, q_slots: &[NodeId], p_slots: &[NodeId]) -> NodeId {
    let mut per_slot = Vec::with_capacity(q_slots.len());
    for (&q, &p) in q_slots.iter().zip(p_slots) {
        let q_prob = g.softmax(q);
        let q_logp = g.log_softmax(q);
        let p_logp = g.log_softmax(p);
        let diff = g.sub(q_logp, p_logp);
        let prod = g.mul(q_prob, diff);
        per_slot.push(g.sum_vec(prod));
    }
    g.add_n(&per_slot)
}

/// Sum of per-position negative log-likelihoods for teacher-forced
/// logits against `gold ++ [EOS]`.
fn sequence_nll(g: &mut Graph<'_>, logits: &[NodeId], gold: &[u32]) -> NodeId {
    debug_assert_eq!(logits.len(), gold.len() + 1);
    let mut terms = Vec::with_capacity(logits.len());
    for (i, &l) in logits.iter().enumerate() {
        let target = gold
            .get(i)
            .copied()
            .unwrap_or(crate::data::EOS) as usize;
        let logp = g.log_softmax(l);
        terms.push(g.nll_pick(logp, target));
    }
    g.add_n(&terms)
}

/// Everything the trainer needs from one exchange's forward pass.
pub struct ExchangeNodes {
    /// Unnormalized reconstruction nats (user + system).
    pub nats: NodeId,
    /// KL(posterior ‖ prior) for the exchange.
    pub kl: NodeId,
    /// Per-exchange user/system split, as raw nats.
    pub user_nats: NodeId,
    pub system_nats: NodeId,
    /// Target token count (user + system, each plus end marker).
    pub tokens: usize,
    pub ctx: CtxNodes,
}

/// Build the training forward pass of one exchange: user autoencoding,
/// posterior sampling, system decoding, KL, and the context update. The
/// returned context nodes chain gradients across the dialogue.
pub fn exchange_loss(
    model: &Model,
    g: &mut Graph<'_>,
    ex: &EncodedExchange,
    ctx: CtxNodes,
    tau: f64,
    gumbel_rng: &mut ChaCha8Rng,
    dropout: TurnDropout,
) -> Result<ExchangeNodes> {
    if ex.user.is_empty() || ex.system.is_empty() {
        return Err(Error::Invalid("exchange with an empty side".into()));
    }
    let enc_u = model.encode_user(g, &ex.user);
    let user_dec = model.decode_user(g, enc_u.final_h, DecodeMode::Teacher(&ex.user));
    let user_nats = sequence_nll(g, &user_dec.logits, &ex.user);

    let enc_s = model.encode_system(g, &ex.system);
    let posterior = model.posterior_params(g, ctx, enc_u.final_h, enc_s.final_h);
    let prior = model.prior_params(g, ctx, enc_u.final_h);
    let kl = kl_node(g, &posterior.slots, &prior.slots);

    let z = model.gumbel_softmax_sample(g, &posterior, tau, gumbel_rng)?;
    let z_feat = model.z_features(g, &z);
    let sys_dec = model.decode_system(
        g,
        z_feat,
        ctx,
        enc_u.final_h,
        &enc_u.states,
        DecodeMode::Teacher(&ex.system),
        dropout,
    );
    let system_nats = sequence_nll(g, &sys_dec.logits, &ex.system);

    let nats = g.add(user_nats, system_nats);
    let new_ctx = model.context_update(g, ctx, enc_u.final_h, z_feat, dropout);
    Ok(ExchangeNodes {
        nats,
        kl,
        user_nats,
        system_nats,
        tokens: ex.user.len() + ex.system.len() + 2,
        ctx: new_ctx,
    })
}

/// Loss of a single exchange given a plain context state. Builds its own
/// graph; no dropout (that is the trainer's concern).
pub fn turn_loss(
    model: &Model,
    ex: &EncodedExchange,
    h_prev: &ContextState,
    tau: f64,
    beta: f64,
    gumbel_rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, ContextState)> {
    let mut g = Graph::new(&model.store);
    let ctx = model.ctx_inputs(&mut g, h_prev);
    let nodes = exchange_loss(model, &mut g, ex, ctx, tau, gumbel_rng, TurnDropout::default())?;
    let user_ce = g.scalar(nodes.user_nats) / nodes.tokens as f64;
    let system_ce = g.scalar(nodes.system_nats) / nodes.tokens as f64;
    let kl = g.scalar(nodes.kl);
    Ok((
        LossBreakdown {
            user_ce,
            system_ce,
            kl,
            total: user_ce + system_ce + beta * kl,
            tokens: nodes.tokens,
        },
        model.ctx_values(&g, nodes.ctx),
    ))
}

/// Gradient and loss sums of one dialogue; gradients accumulate into
/// `grad` unnormalized (the caller divides by the batch token count).
struct DialogueLoss {
    nats: f64,
    user_nats: f64,
    system_nats: f64,
    kl: f64,
    tokens: usize,
}

fn dialogue_backward(
    model: &Model,
    exchanges: &[EncodedExchange],
    tau: f64,
    beta: f64,
    dropout_p: f64,
    gumbel_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
    grad: &mut [f64],
) -> Result<DialogueLoss> {
    let mut g = Graph::new(&model.store);
    let mut ctx = model.ctx_inputs(&mut g, &ContextState::zeros(model.config.ctx_dim));
    let mut nats_nodes = Vec::new();
    let mut kl_nodes = Vec::new();
    let mut sums = DialogueLoss {
        nats: 0.0,
        user_nats: 0.0,
        system_nats: 0.0,
        kl: 0.0,
        tokens: 0,
    };
    for ex in exchanges {
        let dropout = if dropout_p > 0.0 {
            let mask = |g: &mut Graph<'_>, len: usize, rng: &mut ChaCha8Rng| {
                let keep = 1.0 / (1.0 - dropout_p);
                let v: Vec<f64> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(dropout_p) {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                g.input(v)
            };
            TurnDropout {
                dec_ctx: Some(mask(&mut g, model.config.ctx_dim, dropout_rng)),
                dec_enc: Some(mask(&mut g, model.config.hidden_dim, dropout_rng)),
                ctx_in: Some(mask(
                    &mut g,
                    model.config.hidden_dim + model.config.latent.feature_dim,
                    dropout_rng,
                )),
            }
        } else {
            TurnDropout::default()
        };
        let nodes = exchange_loss(model, &mut g, ex, ctx, tau, gumbel_rng, dropout)?;
        sums.nats += g.scalar(nodes.nats);
        sums.user_nats += g.scalar(nodes.user_nats);
        sums.system_nats += g.scalar(nodes.system_nats);
        sums.kl += g.scalar(nodes.kl);
        sums.tokens += nodes.tokens;
        nats_nodes.push(nodes.nats);
        kl_nodes.push(nodes.kl);
        ctx = nodes.ctx;
    }
    let nats_sum = g.add_n(&nats_nodes);
    let kl_sum = g.add_n(&kl_nodes);
    let weighted_kl = g.scale(kl_sum, beta);
    let root = g.add(nats_sum, weighted_kl);
    g.backward(root, grad);
    Ok(sums)
}

fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    let norm = fmath::sqrt(grad.iter().map(|x| x * x).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        for x in grad.iter_mut() {
            *x *= s;
        }
    }
}

/// Adam optimizer state.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - fmath::powf(self.beta1, self.t as f64);
        let bc2 = 1.0 - fmath::powf(self.beta2, self.t as f64);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (fmath::sqrt(v_hat) + self.eps);
        }
    }
}

/// Train in place. Dialogues are bucketed by exchange count, batches
/// reshuffled every epoch, updates applied with Adam under global-norm
/// clipping. Returns the per-step log. A non-finite loss aborts with a
/// divergence diagnostic.
pub fn train(
    model: &mut Model,
    corpus: &[Dialogue],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let encoded: Vec<Vec<EncodedExchange>> = corpus
        .iter()
        .map(|d| encode_dialogue(d, vocab))
        .filter(|e| !e.is_empty())
        .collect();
    if encoded.is_empty() {
        return Err(Error::Config("training corpus has no usable dialogues".into()));
    }
    let mut gumbel_rng = rng::derive(cfg.seed, 0x6A3B);
    let mut dropout_rng = rng::derive(cfg.seed, 0xD209);
    let mut shuffle_rng = rng::derive(cfg.seed, 0x54FF);
    let mut adam = Adam::new(cfg.lr, model.store.len());
    let mut grad = vec![0.0; model.store.len()];
    let mut log = Vec::with_capacity(cfg.max_steps);

    let mut step = 0;
    'training: loop {
        // Bucket by exchange count, with epoch-shuffled order inside and
        // across buckets.
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        rng::shuffle(&mut shuffle_rng, &mut order);
        order.sort_by_key(|&i| encoded[i].len());
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        rng::shuffle(&mut shuffle_rng, &mut batches);

        for batch in batches {
            let tau = cfg.temperature_schedule(step);
            let beta = cfg.kl_weight_schedule(step);
            grad.iter_mut().for_each(|x| *x = 0.0);
            let mut nats = 0.0;
            let mut user_nats = 0.0;
            let mut system_nats = 0.0;
            let mut kl = 0.0;
            let mut tokens = 0usize;
            let mut turns = 0usize;
            for &di in batch {
                let sums = dialogue_backward(
                    model,
                    &encoded[di],
                    tau,
                    beta,
                    cfg.dropout,
                    &mut gumbel_rng,
                    &mut dropout_rng,
                    &mut grad,
                )?;
                nats += sums.nats;
                user_nats += sums.user_nats;
                system_nats += sums.system_nats;
                kl += sums.kl;
                tokens += sums.tokens;
                turns += encoded[di].len();
            }
            let scale = 1.0 / tokens as f64;
            for x in grad.iter_mut() {
                *x *= scale;
            }
            clip_gradient(&mut grad, cfg.clip_norm);

            let record = StepRecord {
                step,
                user_ce: user_nats / tokens as f64,
                system_ce: system_nats / tokens as f64,
                kl: kl / turns as f64,
                total: (nats + beta * kl) / tokens as f64,
                tau,
                beta,
            };
            if !record.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "non-finite loss (user {:.4e}, system {:.4e}, kl {:.4e})",
                        record.user_ce, record.system_ce, record.kl
                    ),
                });
            }
            adam.apply(model.store.flat_mut(), &grad);
            log.push(record);
            step += 1;
            if step >= cfg.max_steps {
                break 'training;
            }
        }
    }
    Ok(log)
}
