//! Policy/critic inputs: concatenated encoder embeddings or the state vector.

use m2curl_numerics::{Binding, Tape, Tensor, Var};
use m2curl_sim::Observation;

use crate::error::{CoreError, Result};
use crate::repr::{EncoderPair, ViewBatch};
use crate::rl::mode::Modalities;

/// Width of `[z_v ‖ z_t]` (or one of them) for the given modalities.
pub fn image_feature_dim(modalities: Modalities, embed_dim: usize) -> usize {
    embed_dim * (usize::from(modalities.uses_visual()) + usize::from(modalities.uses_tactile()))
}

/// Encodes the selected modalities of `views` and concatenates them.
pub fn encode_views(
    tape: &mut Tape,
    encoders: &EncoderPair,
    views: &ViewBatch,
    modalities: Modalities,
    binding: Binding,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    if modalities.uses_visual() {
        let x = tape.constant(views.visual.clone())?;
        parts.push(encoders.visual.forward(tape, x, binding)?);
    }
    if modalities.uses_tactile() {
        let x = tape.constant(views.tactile.clone())?;
        parts.push(encoders.tactile.forward(tape, x, binding)?);
    }
    join(tape, &parts)
}

/// Concatenates feature blocks, skipping the op for a single block.
pub fn join(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    match parts {
        [] => Err(CoreError::Config("no modality selected".into())),
        [one] => Ok(*one),
        many => Ok(tape.concat_cols(many)?),
    }
}

/// `[B, state_dim]` ground-truth states.
pub fn state_matrix<O: AsRef<Observation>>(batch: &[O]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = batch.iter().map(|o| o.as_ref().state.clone()).collect();
    Ok(Tensor::from_rows(&rows)?)
}
