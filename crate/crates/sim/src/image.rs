//! Grayscale images and the exact-coverage rasteriser both renderers use.

use serde::{Deserialize, Serialize};

/// 8-bit grayscale image, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn is_blank(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn total_intensity(&self) -> u64 {
        self.pixels.iter().map(|&p| u64::from(p)).sum()
    }

    /// Intensity-weighted centroid as `(col, row)` in pixel-centre units.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let total = self.total_intensity() as f64;
        if total == 0.0 {
            return None;
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let w = f64::from(self.get(r, c));
                cx += w * (c as f64 + 0.5);
                cy += w * (r as f64 + 0.5);
            }
        }
        Some((cx / total, cy / total))
    }
}

/// Axis-aligned rectangle in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn centered(cx: f64, cy: f64, half: f64) -> Self {
        Self {
            x0: cx - half,
            y0: cy - half,
            x1: cx + half,
            y1: cy + half,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        Rect {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        }
    }

    pub fn centroid(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x0, self.y0),
            (self.x1, self.y0),
            (self.x1, self.y1),
            (self.x0, self.y1),
        ]
    }
}

/// Half-plane `{p : n·p ≤ c}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub nx: f64,
    pub ny: f64,
    pub c: f64,
}

impl HalfPlane {
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        self.nx * x + self.ny * y - self.c
    }
}

/// Area of `rect ∩ half-plane`, by clipping the rectangle polygon.
pub fn rect_halfplane_area(rect: &Rect, hp: &HalfPlane) -> f64 {
    if rect.area() == 0.0 {
        return 0.0;
    }
    let corners = rect.corners();
    let mut poly: Vec<(f64, f64)> = Vec::with_capacity(6);
    for i in 0..4 {
        let a = corners[i];
        let b = corners[(i + 1) % 4];
        let da = hp.signed_distance(a.0, a.1);
        let db = hp.signed_distance(b.0, b.1);
        if da <= 0.0 {
            poly.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            poly.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice.abs()
}

/// Maps a world-space window onto a pixel grid. Row 0 is the window's top
/// (largest y).
#[derive(Debug, Clone, Copy)]
pub struct Viewport {
    pub window: Rect,
    pub height: usize,
    pub width: usize,
}

impl Viewport {
    pub fn pixel_rect(&self, row: usize, col: usize) -> Rect {
        let pw = self.window.width() / self.width as f64;
        let ph = self.window.height() / self.height as f64;
        let x0 = self.window.x0 + col as f64 * pw;
        let y1 = self.window.y1 - row as f64 * ph;
        Rect {
            x0,
            y0: y1 - ph,
            x1: x0 + pw,
            y1,
        }
    }

    pub fn pixel_area(&self) -> f64 {
        self.window.area() / (self.width * self.height) as f64
    }

    /// World point to fractional `(col, row)` pixel coordinates.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let col = (x - self.window.x0) / self.window.width() * self.width as f64;
        let row = (self.window.y1 - y) / self.window.height() * self.height as f64;
        (col, row)
    }

    /// Pixel index range possibly touched by `r`.
    fn span(&self, r: &Rect) -> Option<(usize, usize, usize, usize)> {
        let (c0, r1) = self.to_pixel(r.x0, r.y0);
        let (c1, r0) = self.to_pixel(r.x1, r.y1);
        let clamp_lo = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n);
        let clamp_hi = |v: f64, n: usize| (v.ceil().max(0.0) as usize).min(n);
        let (cs, ce) = (clamp_lo(c0, self.width), clamp_hi(c1, self.width));
        let (rs, re) = (clamp_lo(r0, self.height), clamp_hi(r1, self.height));
        (cs < ce && rs < re).then_some((rs, re, cs, ce))
    }

    /// Fractional coverage of each pixel by `r`, added into `acc` scaled by `weight`.
    pub fn splat_rect(&self, r: &Rect, weight: f64, acc: &mut [f64]) {
        let Some((rs, re, cs, ce)) = self.span(r) else { return };
        let pa = self.pixel_area();
        for row in rs..re {
            for col in cs..ce {
                let a = self.pixel_rect(row, col).intersect(r).area();
                if a > 0.0 {
                    acc[row * self.width + col] += weight * a / pa;
                }
            }
        }
    }

    /// Coverage of `rect ∩ half-plane` per pixel, scaled by `weight`.
    pub fn splat_rect_halfplane(&self, r: &Rect, hp: &HalfPlane, weight: f64, acc: &mut [f64]) {
        let Some((rs, re, cs, ce)) = self.span(r) else { return };
        let pa = self.pixel_area();
        for row in rs..re {
            for col in cs..ce {
                let cell = self.pixel_rect(row, col).intersect(r);
                let a = rect_halfplane_area(&cell, hp);
                if a > 0.0 {
                    acc[row * self.width + col] += weight * a / pa;
                }
            }
        }
    }

    /// Paints `value` over the layer `acc` wherever `r` covers a pixel
    /// (coverage-weighted "over" compositing).
    pub fn paint_rect(&self, r: &Rect, value: f64, acc: &mut [f64]) {
        let Some((rs, re, cs, ce)) = self.span(r) else { return };
        let pa = self.pixel_area();
        for row in rs..re {
            for col in cs..ce {
                let cov = (self.pixel_rect(row, col).intersect(r).area() / pa).min(1.0);
                if cov > 0.0 {
                    let p = &mut acc[row * self.width + col];
                    *p = *p * (1.0 - cov) + value * cov;
                }
            }
        }
    }

    pub fn paint_halfplane(&self, hp: &HalfPlane, value: f64, acc: &mut [f64]) {
        let pa = self.pixel_area();
        for row in 0..self.height {
            for col in 0..self.width {
                let cov = (rect_halfplane_area(&self.pixel_rect(row, col), hp) / pa).min(1.0);
                if cov > 0.0 {
                    let p = &mut acc[row * self.width + col];
                    *p = *p * (1.0 - cov) + value * cov;
                }
            }
        }
    }
}

/// Separable Gaussian blur with clamped support of `3σ`.
pub fn gaussian_blur(src: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; src.len()];
    for r in 0..height {
        for c in 0..width {
            let v = src[r * width + c];
            if v == 0.0 {
                continue;
            }
            for (ki, k) in kernel.iter().enumerate() {
                let cc = c as isize + ki as isize - radius;
                if cc >= 0 && (cc as usize) < width {
                    tmp[r * width + cc as usize] += v * k;
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..height {
        for c in 0..width {
            let v = tmp[r * width + c];
            if v == 0.0 {
                continue;
            }
            for (ki, k) in kernel.iter().enumerate() {
                let rr = r as isize + ki as isize - radius;
                if rr >= 0 && (rr as usize) < height {
                    out[rr as usize * width + c] += v * k;
                }
            }
        }
    }
    out
}

/// Rounds to the nearest level, clamped to `0..=255`.
pub fn quantize_round(values: &[f64], height: usize, width: usize) -> Image {
    Image {
        height,
        width,
        pixels: values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

/// Any strictly positive value maps to at least 1, so "nonzero" survives
/// quantisation.
pub fn quantize_ceil(values: &[f64], height: usize, width: usize) -> Image {
    Image {
        height,
        width,
        pixels: values
            .iter()
            .map(|&v| if v > 0.0 { v.ceil().clamp(1.0, 255.0) as u8 } else { 0 })
            .collect(),
    }
}
