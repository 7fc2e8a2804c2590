//! Contrastive representation learning over paired visual and tactile views.

mod augment;
mod config;
mod loss;
pub(crate) mod model;
mod retrieval;

pub use augment::{
    augment_pair, centre_views, random_offsets, views_at, AugmentedPair, Offset, ViewBatch, VisuoTactile,
};
pub use config::ContrastiveConfig;
pub use loss::{
    combined_loss, combined_loss_from, combined_loss_with_key_heads, embed_views, info_nce, inter_loss, intra_loss, Direction, Embeddings,
    LossComponents, Modality,
};
pub use model::{conv_stack_side, momentum_update, Encoder, EncoderPair, Head, Heads, RepresentationModel};
pub use retrieval::{retrieval_accuracy, ReprTrainer};
