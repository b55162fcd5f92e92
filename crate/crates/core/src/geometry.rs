//! Orthographic camera: pixel/ray sampling in local volumes and projection.
//!
//! Pixel coordinates are continuous; integer grid positions address pixel
//! corners, so iterating over pixel centers means sampling at `x + 0.5`.
//! Normalization maps `[0, S]` to `[-1, 1]` with `S = max(W, H)` on both
//! axes, preserving aspect by the longer side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
    pub frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPoint {
    pub position: [f64; 3],
    pub frame: usize,
}

/// A query pixel's K depth samples in the frame's local volume; all samples
/// share the pixel's normalized (x, y) and have strictly increasing z.
#[derive(Debug, Clone)]
pub struct SampleRay {
    pub origin: PixelCoord,
    pub xy_norm: [f64; 2],
    pub zs: Vec<f64>,
}

impl SampleRay {
    pub fn samples(&self) -> impl Iterator<Item = LocalPoint> + '_ {
        let frame = self.origin.frame;
        let xy = self.xy_norm;
        self.zs.iter().map(move |&z| LocalPoint {
            position: [xy[0], xy[1], z],
            frame,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub z_near: f64,
    pub z_far: f64,
    /// Stratified jitter of z samples; off by default for determinism.
    pub jitter: bool,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            z_near: 0.0,
            z_far: 2.0,
            jitter: false,
        }
    }
}

impl Camera {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    fn long_side(&self) -> f64 {
        self.width.max(self.height) as f64
    }

    pub fn normalize(&self, x: f64, y: f64) -> [f64; 2] {
        let s = self.long_side();
        [2.0 * x / s - 1.0, 2.0 * y / s - 1.0]
    }

    pub fn denormalize(&self, xn: f64, yn: f64) -> [f64; 2] {
        let s = self.long_side();
        [(xn + 1.0) * s / 2.0, (yn + 1.0) * s / 2.0]
    }

    /// Uniform z samples over `[z_near, z_far]`; endpoints included, K = 1
    /// falls back to the midpoint.
    pub fn z_samples(&self, k: usize) -> Vec<f64> {
        if k == 1 {
            return vec![0.5 * (self.z_near + self.z_far)];
        }
        let step = (self.z_far - self.z_near) / (k - 1) as f64;
        (0..k).map(|i| self.z_near + i as f64 * step).collect()
    }

    /// Stratified z samples: one uniform draw per bin.
    pub fn z_samples_jittered(&self, k: usize, uniforms: &[f64]) -> Vec<f64> {
        debug_assert_eq!(uniforms.len(), k);
        let bin = (self.z_far - self.z_near) / k as f64;
        (0..k)
            .map(|i| self.z_near + (i as f64 + uniforms[i]) * bin)
            .collect()
    }

    pub fn pixel_to_ray(&self, p: PixelCoord, k: usize) -> Result<SampleRay> {
        assert!(k >= 1, "K must be at least 1");
        if p.x < 0.0 || p.x >= self.width as f64 || p.y < 0.0 || p.y >= self.height as f64 {
            return Err(Error::PixelOutOfBounds {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(SampleRay {
            origin: p,
            xy_norm: self.normalize(p.x, p.y),
            zs: self.z_samples(k),
        })
    }

    /// Orthographic projection back to the image plane; z is dropped.
    /// Out-of-frame results are returned unclamped and flagged.
    pub fn project(&self, point: [f64; 3]) -> Projected {
        let [x, y] = self.denormalize(point[0], point[1]);
        Projected {
            x,
            y,
            in_frame: x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub in_frame: bool,
}

/// Continuous coordinates of a pixel center.
pub fn pixel_center(ix: usize, iy: usize, frame: usize) -> PixelCoord {
    PixelCoord {
        x: ix as f64 + 0.5,
        y: iy as f64 + 0.5,
        frame,
    }
}
