//! Differentiable Gaussian splatting of color and concept channels.

mod camera;
mod raster;

pub use camera::{Camera, CameraError};
pub use raster::{project_gaussian, render, GaussianGrads, Rasterizer, Splat2D, TILE};

use crate::image::{Image, Mask};

/// Low-pass term added to every projected covariance (pixel²).
pub const COV2D_BLUR: f64 = 0.3;
/// Upper bound on a single splat's alpha.
pub const ALPHA_MAX: f64 = 0.99;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RenderError {
    #[error("backward called without a matching forward pass")]
    MissingForwardState,
    #[error("gradient image is {got:?}, expected {expected:?}")]
    Shape {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Mask threshold: `𝓜_k = [M_k > tau]`.
    pub tau: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [1.0; 3],
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// RGB, 3 channels.
    pub color: Image,
    /// Concept contributions `M`, one channel per concept.
    pub concept: Image,
    /// Accumulated opacity `1 - Π(1 - α_i)`.
    pub alpha: Image,
    pub masks: Vec<Mask>,
    pub background_mask: Mask,
}

/// `𝓜_k = [M_k > tau]` per concept and the background as the complement of
/// their union.
pub fn threshold_masks(concept: &Image, tau: f64) -> (Vec<Mask>, Mask) {
    let (w, h, k) = (concept.width, concept.height, concept.channels);
    let mut masks = vec![Mask::new(w, h, false); k];
    let mut bg = Mask::new(w, h, true);
    for y in 0..h {
        for x in 0..w {
            for (c, &m) in concept.pixel(x, y).iter().enumerate() {
                if m > tau {
                    masks[c].set(x, y, true);
                    bg.set(x, y, false);
                }
            }
        }
    }
    (masks, bg)
}
