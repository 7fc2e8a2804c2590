//! Encoders, projection heads and the momentum-tracked representation model.

use m2curl_numerics::{blend_params, Binding, Conv2d, Linear, Module, Parameter, Tape, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::repr::config::ContrastiveConfig;

const CONV_CHANNELS: [usize; 2] = [8, 16];
const KERNEL: usize = 3;
const STRIDE: usize = 2;

fn conv_out(n: usize) -> Option<usize> {
    (n >= KERNEL).then(|| (n - KERNEL) / STRIDE + 1)
}

/// Spatial side after both conv layers, or `None` if the input is too small.
pub fn conv_stack_side(input: usize) -> Option<usize> {
    conv_out(input).and_then(conv_out)
}

/// Two strided valid convolutions with ReLU, then an affine map to the
/// embedding.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
    input_size: usize,
}

impl Encoder {
    pub fn new(name: &str, input_size: usize, embed_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let side = conv_stack_side(input_size)
            .ok_or_else(|| CoreError::Config(format!("encoder input {input_size} is smaller than the conv stack")))?;
        let [c1, c2] = CONV_CHANNELS;
        Ok(Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), 1, c1, KERNEL, STRIDE, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), c1, c2, KERNEL, STRIDE, rng),
            fc: Linear::new(&format!("{name}.fc"), c2 * side * side, embed_dim, rng),
            input_size,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn embed_dim(&self) -> usize {
        self.fc.fan_out()
    }

    /// `images` is `[B, 1, S, S]`; returns `[B, embed_dim]`.
    pub fn forward(&self, tape: &mut Tape, images: Var, binding: Binding) -> Result<Var> {
        let shape = tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(CoreError::Numerics(m2curl_numerics::NumericsError::Dimension(format!(
                "encoder expects [B, 1, {0}, {0}] images, got {shape:?}",
                self.input_size
            ))));
        }
        let h = self.conv1.forward(tape, images, binding)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h, binding)?;
        let h = tape.relu(h)?;
        let h = tape.flatten(h)?;
        Ok(self.fc.forward(tape, h, binding)?)
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.fc.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

/// Two-layer projection head producing unit-norm codes.
#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    pub fn new(name: &str, embed_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(&format!("{name}.hidden"), embed_dim, hidden, rng),
            out: Linear::new(&format!("{name}.out"), hidden, embed_dim, rng),
        }
    }

    /// Pre-normalisation projection.
    pub fn project(&self, tape: &mut Tape, z: Var, binding: Binding) -> Result<Var> {
        let h = self.hidden.forward(tape, z, binding)?;
        let h = tape.relu(h)?;
        Ok(self.out.forward(tape, h, binding)?)
    }

    /// Codes on the unit sphere, one row per sample.
    pub fn apply(&self, tape: &mut Tape, z: Var, binding: Binding) -> Result<Var> {
        let p = self.project(tape, z, binding)?;
        Ok(tape.l2_normalize_rows(p)?)
    }
}

impl Module for Head {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.hidden.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.hidden.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub visual: Encoder,
    pub tactile: Encoder,
}

impl EncoderPair {
    pub fn new(name: &str, input_size: usize, embed_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            visual: Encoder::new(&format!("{name}.visual"), input_size, embed_dim, rng)?,
            tactile: Encoder::new(&format!("{name}.tactile"), input_size, embed_dim, rng)?,
        })
    }
}

impl Module for EncoderPair {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.visual.visit(f);
        self.tactile.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.visual.visit_mut(f);
        self.tactile.visit_mut(f);
    }
}

/// The four projection heads: same-modality `vv`, `tt` and cross-modality
/// `vt`, `tv`.
#[derive(Debug, Clone)]
pub struct Heads {
    pub vv: Head,
    pub vt: Head,
    pub tt: Head,
    pub tv: Head,
}

impl Module for Heads {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.vv.visit(f);
        self.vt.visit(f);
        self.tt.visit(f);
        self.tv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.vv.visit_mut(f);
        self.vt.visit_mut(f);
        self.tt.visit_mut(f);
        self.tv.visit_mut(f);
    }
}

/// Online encoders, their momentum copies and the four heads.
#[derive(Debug, Clone)]
pub struct RepresentationModel {
    pub online: EncoderPair,
    pub momentum: EncoderPair,
    pub heads: Heads,
}

impl RepresentationModel {
    /// Momentum encoders start as exact copies of the online ones.
    pub fn new(cfg: &ContrastiveConfig, rng: &mut impl Rng) -> Result<Self> {
        let online = EncoderPair::new("online", cfg.crop_size, cfg.embed_dim, rng)?;
        let mut momentum = EncoderPair::new("momentum", cfg.crop_size, cfg.embed_dim, rng)?;
        m2curl_numerics::copy_params(&online, &mut momentum)?;
        let (d, h) = (cfg.embed_dim, cfg.head_hidden);
        let heads = Heads {
            vv: Head::new("head_vv", d, h, rng),
            vt: Head::new("head_vt", d, h, rng),
            tt: Head::new("head_tt", d, h, rng),
            tv: Head::new("head_tv", d, h, rng),
        };
        Ok(Self { online, momentum, heads })
    }

    pub fn embed_dim(&self) -> usize {
        self.online.visual.embed_dim()
    }

    pub fn crop_size(&self) -> usize {
        self.online.visual.input_size()
    }
}

impl Module for RepresentationModel {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.online.visit(f);
        self.momentum.visit(f);
        self.heads.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.online.visit_mut(f);
        self.momentum.visit_mut(f);
        self.heads.visit_mut(f);
    }
}

/// `θ_m ← α·θ_m + (1−α)·θ` for both modalities.
pub fn momentum_update(model: &mut RepresentationModel, alpha_ema: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha_ema) {
        return Err(CoreError::Config(format!("alpha_ema must lie in [0, 1], got {alpha_ema}")));
    }
    if alpha_ema == 1.0 {
        return Ok(());
    }
    if alpha_ema == 0.0 {
        m2curl_numerics::copy_params(&model.online, &mut model.momentum)?;
        return Ok(());
    }
    blend_params(&model.online, &mut model.momentum, alpha_ema)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_stack_sides() {
        assert_eq!(conv_stack_side(56), Some(13));
        assert_eq!(conv_stack_side(28), Some(6));
        assert_eq!(conv_stack_side(7), Some(1));
        assert_eq!(conv_stack_side(4), None);
    }

    #[test]
    fn momentum_mirrors_online_at_init() {
        let cfg = ContrastiveConfig {
            crop_size: 12,
            ..Default::default()
        };
        let m = RepresentationModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.online.shapes(), m.momentum.shapes());
        assert_eq!(m.online.flat_values(), m.momentum.flat_values());
    }
}
