//! Paired visual/tactile images that share a latent contact pose, for
//! representation-only evaluation.
//!
//! Each latent pose is a block position, the block face the pad presses, the
//! pad's offset along that face and the press depth. The visual image shows
//! the scene from above; the tactile image shows the imprint. Only the
//! relative pose is visible in both modalities.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::image::Image;
use crate::push::{PushConfig, PushState, PushWorld};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentPose {
    pub block: [f64; 2],
    /// 0: pad on the left of the block, 1: right, 2: below, 3: above.
    pub face: u8,
    /// Pad centre offset along the face, relative to the block centre.
    pub offset: f64,
    /// Press depth into the block, `(0, gel_depth]`.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub pose: LatentPose,
    pub visual: Image,
    pub tactile: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPairDataset {
    pub seed: u64,
    pub size: usize,
    pub pairs: Vec<PairSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    seed: u64,
}

/// Half-width of the block-position jitter around the arena centre, as a
/// fraction of the arena. The block position is invisible to touch, so it is
/// kept a modest nuisance factor.
const BLOCK_JITTER: f64 = 0.1;

fn pusher_for(pose: &LatentPose, hb: f64, hp: f64) -> [f64; 2] {
    let reach = hb + hp - pose.depth;
    let [bx, by] = pose.block;
    match pose.face {
        0 => [bx - reach, by + pose.offset],
        1 => [bx + reach, by + pose.offset],
        2 => [bx + pose.offset, by - reach],
        _ => [bx + pose.offset, by + reach],
    }
}

/// Samples `n` latent poses and renders each in both modalities.
pub fn make_latent_pair_dataset(n: usize, seed: u64, cfg: &PushConfig) -> Result<LatentPairDataset> {
    if n < 2 {
        return Err(SimError::Config(format!(
            "latent pair dataset needs at least 2 pairs for negatives, got {n}"
        )));
    }
    let world = PushWorld::new(*cfg)?;
    let (hb, hp, l) = (cfg.block_half_size, cfg.sensor.half_size, cfg.arena_size);
    let gel = cfg.sensor.gel_depth;
    let max_offset = hb + hp - 0.15 * hp;
    let spread = BLOCK_JITTER * l;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let pose = LatentPose {
            block: [
                rng.gen_range(0.5 * l - spread..=0.5 * l + spread),
                rng.gen_range(0.5 * l - spread..=0.5 * l + spread),
            ],
            face: rng.gen_range(0..4u8),
            offset: rng.gen_range(-max_offset..=max_offset),
            depth: rng.gen_range(0.2 * gel..=gel),
        };
        let state = PushState {
            pusher: pusher_for(&pose, hb, hp),
            block: pose.block,
            block_orientation: 0.0,
            waypoint_index: 0,
            waypoints: vec![pose.block],
            steps: 0,
        };
        pairs.push(PairSample {
            pose,
            visual: world.render_visual(&state, false),
            tactile: world.render_tactile(&state),
        });
    }
    Ok(LatentPairDataset {
        seed,
        size: cfg.image_size,
        pairs,
    })
}

impl LatentPairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// JSON header line, then `n` interleaved visual/tactile `u8` blocks.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            n: self.pairs.len(),
            height: self.size,
            width: self.size,
            seed: self.seed,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for p in &self.pairs {
            out.extend_from_slice(&p.visual.pixels);
            out.extend_from_slice(&p.tactile.pixels);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }
}

/// Image pairs read back from [`LatentPairDataset::to_bytes`]; poses are not
/// stored.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPairs {
    pub seed: u64,
    pub pairs: Vec<(Image, Image)>,
}

pub fn read_pairs(bytes: &[u8]) -> Result<StoredPairs> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SimError::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    let block = header.height * header.width;
    let body = &bytes[nl + 1..];
    if body.len() != 2 * block * header.n {
        return Err(SimError::Format(format!(
            "expected {} pixel bytes, found {}",
            2 * block * header.n,
            body.len()
        )));
    }
    let img = |chunk: &[u8]| Image {
        height: header.height,
        width: header.width,
        pixels: chunk.to_vec(),
    };
    let pairs = body
        .chunks_exact(2 * block)
        .map(|c| (img(&c[..block]), img(&c[block..])))
        .collect();
    Ok(StoredPairs {
        seed: header.seed,
        pairs,
    })
}

pub fn load_pairs(path: &Path) -> Result<StoredPairs> {
    read_pairs(&fs::read(path)?)
}
