//! Representation-only training and cross-modal retrieval evaluation.

use m2curl_numerics::{Adam, AdamConfig, Binding, Module, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::repr::augment::{augment_pair, centre_views, VisuoTactile};
use crate::repr::config::ContrastiveConfig;
use crate::repr::loss::{combined_loss, LossComponents};
use crate::repr::model::{momentum_update, RepresentationModel};

/// Trains a [`RepresentationModel`] on the combined loss alone.
#[derive(Debug, Clone)]
pub struct ReprTrainer {
    pub model: RepresentationModel,
    pub cfg: ContrastiveConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
}

impl ReprTrainer {
    pub fn new(cfg: ContrastiveConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RepresentationModel::new(&cfg, &mut rng)?;
        Ok(Self {
            model,
            cfg,
            optimizer: Adam::new(adam),
            rng,
        })
    }

    /// One gradient step on a freshly augmented batch, then the momentum
    /// update.
    pub fn step<T: VisuoTactile>(&mut self, batch: &[T]) -> Result<LossComponents> {
        let aug = augment_pair(batch, self.cfg.crop_size, &mut self.rng)?;
        let mut tape = Tape::new();
        let (loss, comps) = combined_loss(&mut tape, &self.model, &aug, &self.cfg)?;
        self.model.zero_grads();
        tape.grad_eval(loss, &mut [&mut self.model.online, &mut self.model.heads])?;
        self.optimizer.step(&mut self.model.online);
        self.optimizer.step(&mut self.model.heads);
        momentum_update(&mut self.model, self.cfg.alpha_ema)?;
        Ok(comps)
    }
}

/// Top-1 accuracy of matching visual query codes to tactile key codes
/// within consecutive batches of `batch` samples; a trailing partial batch
/// is dropped. Uses centre crops.
pub fn retrieval_accuracy<T: VisuoTactile>(model: &RepresentationModel, samples: &[T], batch: usize) -> Result<f64> {
    if batch < 2 || samples.len() < batch {
        return Err(CoreError::Config(format!(
            "retrieval needs batches of at least 2 and {batch} samples, got {}",
            samples.len()
        )));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in samples.chunks_exact(batch) {
        let views = centre_views(chunk, model.crop_size())?;
        let mut tape = Tape::new();
        let v = tape.constant(views.visual)?;
        let t = tape.constant(views.tactile)?;
        let zv = model.online.visual.forward(&mut tape, v, Binding::Frozen)?;
        let zt = model.momentum.tactile.forward(&mut tape, t, Binding::Frozen)?;
        let q = model.heads.vt.apply(&mut tape, zv, Binding::Frozen)?;
        let k = model.heads.tv.apply(&mut tape, zt, Binding::Frozen)?;
        let sim = tape.matmul_bt(q, k)?;
        let s = tape.value(sim);
        for i in 0..batch {
            let row = s.row(i);
            let best = (0..batch).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            hits += usize::from(best == i);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
