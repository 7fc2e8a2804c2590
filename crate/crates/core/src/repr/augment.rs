//! Random-crop augmentation and normalisation into encoder-ready tensors.

use m2curl_numerics::Tensor;
use m2curl_sim::{Image, Observation, PairSample};
use rand::Rng;

use crate::error::{CoreError, Result};

/// Anything carrying a paired visual and tactile image.
pub trait VisuoTactile {
    fn visual(&self) -> &Image;
    fn tactile(&self) -> &Image;
}

impl VisuoTactile for Observation {
    fn visual(&self) -> &Image {
        &self.visual
    }
    fn tactile(&self) -> &Image {
        &self.tactile
    }
}

impl VisuoTactile for PairSample {
    fn visual(&self) -> &Image {
        &self.visual
    }
    fn tactile(&self) -> &Image {
        &self.tactile
    }
}

impl VisuoTactile for (Image, Image) {
    fn visual(&self) -> &Image {
        &self.0
    }
    fn tactile(&self) -> &Image {
        &self.1
    }
}

impl<T: VisuoTactile + ?Sized> VisuoTactile for &T {
    fn visual(&self) -> &Image {
        (**self).visual()
    }
    fn tactile(&self) -> &Image {
        (**self).tactile()
    }
}

impl<T: VisuoTactile + ?Sized> VisuoTactile for std::sync::Arc<T> {
    fn visual(&self) -> &Image {
        (**self).visual()
    }
    fn tactile(&self) -> &Image {
        (**self).tactile()
    }
}

/// `(row, col)` of a crop's top-left corner.
pub type Offset = [usize; 2];

/// One view of a batch: `[B, 1, S, S]` tensors with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub visual: Tensor,
    pub tactile: Tensor,
}

impl ViewBatch {
    pub fn batch_size(&self) -> usize {
        self.visual.shape()[0]
    }
}

/// Query and key views of a batch. Offsets per sample are ordered
/// query-visual, query-tactile, key-visual, key-tactile.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub query: ViewBatch,
    pub key: ViewBatch,
    pub crop_offsets: Vec<[Offset; 4]>,
}

fn check_crop(img: &Image, crop: usize) -> Result<()> {
    if crop == 0 || crop > img.height || crop > img.width {
        return Err(CoreError::Config(format!(
            "crop_size {crop} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    Ok(())
}

fn push_crop(img: &Image, [r0, c0]: Offset, crop: usize, out: &mut Vec<f64>) {
    for r in r0..r0 + crop {
        let row = &img.pixels[r * img.width + c0..r * img.width + c0 + crop];
        out.extend(row.iter().map(|&p| f64::from(p) / 255.0));
    }
}

fn draw_offset(img: &Image, crop: usize, rng: &mut impl Rng) -> Offset {
    [rng.gen_range(0..=img.height - crop), rng.gen_range(0..=img.width - crop)]
}

fn centre_offset(img: &Image, crop: usize) -> Offset {
    [(img.height - crop) / 2, (img.width - crop) / 2]
}

/// Crops every sample at the given `[visual, tactile]` offsets.
pub fn views_at<T: VisuoTactile>(batch: &[T], offsets: &[[Offset; 2]], crop: usize) -> Result<ViewBatch> {
    if batch.is_empty() {
        return Err(CoreError::Contract("cannot build views of an empty batch".into()));
    }
    if offsets.len() != batch.len() {
        return Err(CoreError::Contract(format!(
            "{} offsets for a batch of {}",
            offsets.len(),
            batch.len()
        )));
    }
    let mut vis = Vec::with_capacity(batch.len() * crop * crop);
    let mut tac = Vec::with_capacity(batch.len() * crop * crop);
    for (s, [ov, ot]) in batch.iter().zip(offsets) {
        for (img, o) in [(s.visual(), ov), (s.tactile(), ot)] {
            check_crop(img, crop)?;
            if o[0] + crop > img.height || o[1] + crop > img.width {
                return Err(CoreError::Contract(format!("crop offset {o:?} out of range")));
            }
        }
        push_crop(s.visual(), *ov, crop, &mut vis);
        push_crop(s.tactile(), *ot, crop, &mut tac);
    }
    let shape = [batch.len(), 1, crop, crop];
    Ok(ViewBatch {
        visual: Tensor::new(&shape, vis).map_err(CoreError::from)?,
        tactile: Tensor::new(&shape, tac).map_err(CoreError::from)?,
    })
}

/// Deterministic centre crops, used for acting and evaluation.
pub fn centre_views<T: VisuoTactile>(batch: &[T], crop: usize) -> Result<ViewBatch> {
    let mut offsets = Vec::with_capacity(batch.len());
    for s in batch {
        check_crop(s.visual(), crop)?;
        check_crop(s.tactile(), crop)?;
        offsets.push([centre_offset(s.visual(), crop), centre_offset(s.tactile(), crop)]);
    }
    views_at(batch, &offsets, crop)
}

/// Draws one independent random crop per modality per sample.
pub fn random_offsets<T: VisuoTactile>(batch: &[T], crop: usize, rng: &mut impl Rng) -> Result<Vec<[Offset; 2]>> {
    let mut offsets = Vec::with_capacity(batch.len());
    for s in batch {
        check_crop(s.visual(), crop)?;
        check_crop(s.tactile(), crop)?;
        let ov = draw_offset(s.visual(), crop, rng);
        let ot = draw_offset(s.tactile(), crop, rng);
        offsets.push([ov, ot]);
    }
    Ok(offsets)
}

/// Two independently cropped views of every sample, scaled to `[0, 1]`.
pub fn augment_pair<T: VisuoTactile>(batch: &[T], crop: usize, rng: &mut impl Rng) -> Result<AugmentedPair> {
    if batch.is_empty() {
        return Err(CoreError::Contract("cannot augment an empty batch".into()));
    }
    let mut crop_offsets = Vec::with_capacity(batch.len());
    for s in batch {
        check_crop(s.visual(), crop)?;
        check_crop(s.tactile(), crop)?;
        crop_offsets.push([
            draw_offset(s.visual(), crop, rng),
            draw_offset(s.tactile(), crop, rng),
            draw_offset(s.visual(), crop, rng),
            draw_offset(s.tactile(), crop, rng),
        ]);
    }
    let q: Vec<[Offset; 2]> = crop_offsets.iter().map(|o| [o[0], o[1]]).collect();
    let k: Vec<[Offset; 2]> = crop_offsets.iter().map(|o| [o[2], o[3]]).collect();
    Ok(AugmentedPair {
        query: views_at(batch, &q, crop)?,
        key: views_at(batch, &k, crop)?,
        crop_offsets,
    })
}
