//! InfoNCE and the intra-/inter-modality contrastive losses.
//!
//! Queries come from the online encoders through trainable heads. Keys come
//! from the momentum encoders through the same heads evaluated as constants,
//! so no gradient ever reaches the key path.

use m2curl_numerics::{Binding, NumericsError, Tape, Var};

use crate::error::{CoreError, Result};
use crate::repr::augment::{AugmentedPair, ViewBatch};
use crate::repr::config::ContrastiveConfig;
use crate::repr::model::{Head, Heads, RepresentationModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Tactile,
}

/// Inter-modality direction: `Vt` scores visual queries against tactile keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Vt,
    Tv,
}

/// Mean over rows of `−log softmax(q·kᵀ/τ)` at the diagonal.
///
/// `keys` must not require gradients.
pub fn info_nce(tape: &mut Tape, queries: Var, keys: Var, tau: f64) -> Result<Var> {
    let (qs, ks) = (tape.value(queries).shape().to_vec(), tape.value(keys).shape().to_vec());
    if qs.len() != 2 || qs != ks {
        return Err(CoreError::Numerics(NumericsError::Dimension(format!(
            "info_nce needs equal [B, d] queries and keys, got {qs:?} and {ks:?}"
        ))));
    }
    if qs[0] < 2 {
        return Err(CoreError::Config(format!("info_nce needs a batch of at least 2, got {}", qs[0])));
    }
    if !(tau > 0.0) {
        return Err(CoreError::Config(format!("temperature must be positive, got {tau}")));
    }
    if tape.requires_grad(keys) {
        return Err(CoreError::Contract("info_nce keys must be detached".into()));
    }
    let sim = tape.matmul_bt(queries, keys)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let logp = tape.log_softmax_rows(logits)?;
    let pos = tape.diagonal(logp)?;
    let mean = tape.mean(pos)?;
    Ok(tape.neg(mean)?)
}

/// Encoder outputs for one augmented batch.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    /// Online embeddings of the query view; these carry gradients.
    pub query_visual: Var,
    pub query_tactile: Var,
    /// Momentum embeddings of the key view; constants.
    pub key_visual: Var,
    pub key_tactile: Var,
}

fn images(tape: &mut Tape, v: &ViewBatch) -> Result<(Var, Var)> {
    Ok((tape.constant(v.visual.clone())?, tape.constant(v.tactile.clone())?))
}

/// Runs the online encoders on the query view and the momentum encoders on
/// the key view.
pub fn embed_views(tape: &mut Tape, model: &RepresentationModel, aug: &AugmentedPair) -> Result<Embeddings> {
    let (qv, qt) = images(tape, &aug.query)?;
    let (kv, kt) = images(tape, &aug.key)?;
    Ok(Embeddings {
        query_visual: model.online.visual.forward(tape, qv, Binding::Trainable)?,
        query_tactile: model.online.tactile.forward(tape, qt, Binding::Trainable)?,
        key_visual: model.momentum.visual.forward(tape, kv, Binding::Frozen)?,
        key_tactile: model.momentum.tactile.forward(tape, kt, Binding::Frozen)?,
    })
}

fn contrast(tape: &mut Tape, q_head: &Head, q: Var, k_head: &Head, k: Var, tau: f64) -> Result<Var> {
    let queries = q_head.apply(tape, q, Binding::Trainable)?;
    let keys = k_head.apply(tape, k, Binding::Frozen)?;
    let keys = tape.detach(keys)?;
    info_nce(tape, queries, keys, tau)
}

fn intra_from(tape: &mut Tape, q: &Heads, k: &Heads, e: &Embeddings, m: Modality, tau: f64) -> Result<Var> {
    match m {
        Modality::Visual => contrast(tape, &q.vv, e.query_visual, &k.vv, e.key_visual, tau),
        Modality::Tactile => contrast(tape, &q.tt, e.query_tactile, &k.tt, e.key_tactile, tau),
    }
}

fn inter_from(tape: &mut Tape, q: &Heads, k: &Heads, e: &Embeddings, d: Direction, tau: f64) -> Result<Var> {
    match d {
        Direction::Vt => contrast(tape, &q.vt, e.query_visual, &k.tv, e.key_tactile, tau),
        Direction::Tv => contrast(tape, &q.tv, e.query_tactile, &k.vt, e.key_visual, tau),
    }
}

/// Same-modality InfoNCE between the query and key views.
pub fn intra_loss(
    tape: &mut Tape,
    model: &RepresentationModel,
    aug: &AugmentedPair,
    modality: Modality,
    tau: f64,
) -> Result<Var> {
    let e = embed_views(tape, model, aug)?;
    intra_from(tape, &model.heads, &model.heads, &e, modality, tau)
}

/// Cross-modality InfoNCE; positives are the same sample in the other
/// modality.
pub fn inter_loss(
    tape: &mut Tape,
    model: &RepresentationModel,
    aug: &AugmentedPair,
    direction: Direction,
    tau: f64,
) -> Result<Var> {
    let e = embed_views(tape, model, aug)?;
    inter_from(tape, &model.heads, &model.heads, &e, direction, tau)
}

/// Component values of one combined-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub vv: f64,
    pub tt: f64,
    pub vt: f64,
    pub tv: f64,
    pub mm: f64,
    /// `λ·L` per component, in `vv, tt, vt, tv` order.
    pub weighted: [f64; 4],
}

impl LossComponents {
    pub fn metrics(&self) -> [(&'static str, f64); 5] {
        [
            ("loss_vv", self.vv),
            ("loss_tt", self.tt),
            ("loss_vt", self.vt),
            ("loss_tv", self.tv),
            ("loss_mm", self.mm),
        ]
    }
}

/// `L_MM = λ_vv·L_VV + λ_tt·L_TT + λ_vt·L_VT + λ_tv·L_TV` from precomputed
/// embeddings. Zero-weighted terms are evaluated for logging only and stay
/// out of the graph of the returned loss.
pub fn combined_loss_from(
    tape: &mut Tape,
    model: &RepresentationModel,
    e: &Embeddings,
    cfg: &ContrastiveConfig,
) -> Result<(Var, LossComponents)> {
    combined_loss_with_key_heads(tape, &model.heads, &model.heads, e, cfg)
}

/// As [`combined_loss_from`], with the heads used on the (detached) key path
/// supplied separately. Passing a snapshot of the query heads yields the same
/// value and gradients; finite-difference checks rely on this to hold keys
/// fixed while the query heads are perturbed.
pub fn combined_loss_with_key_heads(
    tape: &mut Tape,
    query_heads: &Heads,
    key_heads: &Heads,
    e: &Embeddings,
    cfg: &ContrastiveConfig,
) -> Result<(Var, LossComponents)> {
    let (q, k) = (query_heads, key_heads);
    let terms = [
        intra_from(tape, q, k, e, Modality::Visual, cfg.tau)?,
        intra_from(tape, q, k, e, Modality::Tactile, cfg.tau)?,
        inter_from(tape, q, k, e, Direction::Vt, cfg.tau)?,
        inter_from(tape, q, k, e, Direction::Tv, cfg.tau)?,
    ];
    let mut total: Option<Var> = None;
    let mut weighted = [0.0; 4];
    for (i, (&t, l)) in terms.iter().zip(cfg.lambdas()).enumerate() {
        if l == 0.0 {
            continue;
        }
        let w = tape.scale(t, l)?;
        weighted[i] = tape.item(w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, w)?,
            None => w,
        });
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(m2curl_numerics::Tensor::scalar(0.0))?,
    };
    let comps = LossComponents {
        vv: tape.item(terms[0])?,
        tt: tape.item(terms[1])?,
        vt: tape.item(terms[2])?,
        tv: tape.item(terms[3])?,
        mm: tape.item(total)?,
        weighted,
    };
    Ok((total, comps))
}

/// Embeds `aug` and evaluates the weighted combined loss.
pub fn combined_loss(
    tape: &mut Tape,
    model: &RepresentationModel,
    aug: &AugmentedPair,
    cfg: &ContrastiveConfig,
) -> Result<(Var, LossComponents)> {
    let e = embed_views(tape, model, aug)?;
    combined_loss_from(tape, model, &e, cfg)
}
