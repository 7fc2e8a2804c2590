//! Tactile imprint rendering in the sensor pad's local frame.
//!
//! The pad is an axis-aligned square; the image covers the pad plus a margin
//! so the blurred imprint is never truncated. Intensity is the exact pixel
//! coverage of the contact region, weighted by normalised press depth and
//! Gaussian-blurred. Quantisation rounds up, so the image is all-zero exactly
//! when the contact region has zero area.

use serde::{Deserialize, Serialize};

use crate::image::{gaussian_blur, quantize_ceil, HalfPlane, Image, Rect, Viewport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Half side of the pad including its gel skin.
    pub half_size: f64,
    /// Gel thickness; press depth saturates here.
    pub gel_depth: f64,
    /// Image half-extent as a multiple of `half_size`.
    pub margin: f64,
    pub blur_sigma_px: f64,
    /// Peak pre-blur intensity at full depth and full coverage.
    pub peak: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            half_size: 0.075,
            gel_depth: 0.01,
            margin: 1.25,
            blur_sigma_px: 1.0,
            peak: 220.0,
        }
    }
}

impl SensorConfig {
    pub fn pad(&self, cx: f64, cy: f64) -> Rect {
        Rect::centered(cx, cy, self.half_size)
    }

    pub fn viewport(&self, cx: f64, cy: f64, size: usize) -> Viewport {
        Viewport {
            window: Rect::centered(cx, cy, self.half_size * self.margin),
            height: size,
            width: size,
        }
    }

    fn depth_weight(&self, depth: f64) -> f64 {
        self.peak * (0.5 + 0.5 * (depth / self.gel_depth).clamp(0.0, 1.0))
    }
}

/// What the pad is touching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Contact {
    None,
    /// Overlap with a rigid box; `region` is the overlap rectangle.
    Box { region: Rect, depth: f64 },
    /// The pad pressed against a flat surface bounded by `surface`.
    Surface { surface: HalfPlane, depth: f64 },
}

/// Renders the imprint of `contact` on a pad centred at `(cx, cy)`.
pub fn render_contact(sensor: &SensorConfig, cx: f64, cy: f64, contact: &Contact, size: usize) -> Image {
    let vp = sensor.viewport(cx, cy, size);
    let mut acc = vec![0.0; size * size];
    match contact {
        Contact::None => return Image::zeros(size, size),
        Contact::Box { region, depth } => {
            if region.area() <= 0.0 {
                return Image::zeros(size, size);
            }
            vp.splat_rect(region, sensor.depth_weight(*depth), &mut acc);
        }
        Contact::Surface { surface, depth } => {
            let pad = sensor.pad(cx, cy);
            vp.splat_rect_halfplane(&pad, surface, sensor.depth_weight(*depth), &mut acc);
        }
    }
    let blurred = gaussian_blur(&acc, size, size, sensor.blur_sigma_px);
    quantize_ceil(&blurred, size, size)
}
