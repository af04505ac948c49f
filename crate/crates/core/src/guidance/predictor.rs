use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{GuidanceError, NoiseSchedule};
use crate::image::Image;
use crate::rca::{cross_attention, downsample_masks, rca_forward, AttentionWeights, Branch, ConceptSet, FeatureMap, RegionMasks};
use crate::scene::PromptEmbedding;

/// Text and region conditioning for one noise prediction.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// A single prompt over the whole image.
    Vanilla(&'a PromptEmbedding),
    /// Per-concept prompts and adapters over pixel-resolution masks.
    Regional {
        concepts: &'a ConceptSet,
        masks: &'a RegionMasks,
        branch: Branch,
    },
}

/// `ε̂(x_t, t, conditioning)`. Timestep 0 denotes the clean end of an
/// inversion chain.
pub trait NoisePredictor: Sync {
    fn predict(
        &self,
        x_t: &Image,
        t: usize,
        cond: &Conditioning,
        schedule: &NoiseSchedule,
    ) -> Result<Image, GuidanceError>;
}

/// Noise predictor whose implied clean image is a known target.
///
/// Each known prompt maps to a flat target color. Under prompt
/// conditioning, pixels in concept `i`'s mask take the color of `p_i`,
/// other pixels take `background`, and the prediction is
/// `(x_t − √ᾱ_t·x*)/√(1−ᾱ_t)`. Under the null prompt the oracle has no
/// opinion and predicts zero noise, i.e. it treats the current sample as
/// already clean.
#[derive(Debug, Clone)]
pub struct TargetOracle {
    pub targets: Vec<(PromptEmbedding, [f64; 3])>,
    pub background: [f64; 3],
    pub null: PromptEmbedding,
}

impl TargetOracle {
    pub fn new(targets: Vec<(PromptEmbedding, [f64; 3])>, background: [f64; 3], null: PromptEmbedding) -> Self {
        TargetOracle {
            targets,
            background,
            null,
        }
    }

    fn lookup(&self, prompt: &PromptEmbedding) -> [f64; 3] {
        self.targets
            .iter()
            .find(|(p, _)| p == prompt)
            .map_or(self.background, |(_, c)| *c)
    }

    /// The target image `x*` implied by a prompt-side conditioning, or
    /// `None` for the null side.
    pub fn target_image(&self, width: usize, height: usize, cond: &Conditioning) -> Option<Image> {
        match cond {
            Conditioning::Vanilla(p) if **p == self.null => None,
            Conditioning::Vanilla(p) => Some(Image::filled(width, height, &self.lookup(p))),
            Conditioning::Regional { branch: Branch::Null, .. } => None,
            Conditioning::Regional { concepts, masks, .. } => {
                let colors: Vec<[f64; 3]> = concepts.prompts.iter().map(|p| self.lookup(p)).collect();
                let mut img = Image::filled(width, height, &self.background);
                for y in 0..height {
                    for x in 0..width {
                        if let Some(i) = masks.concepts.iter().position(|m| m.get(x, y)) {
                            img.pixel_mut(x, y).copy_from_slice(&colors[i]);
                        }
                    }
                }
                Some(img)
            }
        }
    }
}

impl NoisePredictor for TargetOracle {
    fn predict(
        &self,
        x_t: &Image,
        t: usize,
        cond: &Conditioning,
        schedule: &NoiseSchedule,
    ) -> Result<Image, GuidanceError> {
        schedule.check(t)?;
        let Some(target) = self.target_image(x_t.width, x_t.height, cond) else {
            return Ok(Image::new(x_t.width, x_t.height, x_t.channels));
        };
        if t == 0 {
            return Err(GuidanceError::Timestep {
                t,
                min: 1,
                max: schedule.timesteps(),
            });
        }
        let a = schedule.alpha_bar(t);
        let mut out = x_t.clone();
        for (o, x_star) in out.data.iter_mut().zip(&target.data) {
            *o = (*o - a.sqrt() * x_star) / (1.0 - a).sqrt();
        }
        Ok(out)
    }
}

/// `ε̂ = A·x_t + Â[cell]·B`: per-pixel channel mixing plus a linear readout
/// of one cross-attention layer over a fixed feature map. Plain prompts use
/// standard cross-attention; regional conditioning uses regional concept
/// attention, so the text enters only through the attention output.
#[derive(Debug, Clone)]
pub struct AffinePredictor {
    /// `A`, 3×3.
    pub mix: Matrix3<f64>,
    /// `B`, `d × 3`.
    pub readout: DMatrix<f64>,
    pub weights: AttentionWeights,
    pub features: FeatureMap,
}

impl AffinePredictor {
    /// Small seeded `A` (entries N(0, 0.001²)), readout N(0, 0.1²/d),
    /// `feature_res × feature_res` cells.
    pub fn seeded(d: usize, d_text: usize, feature_res: usize, lora_scale: f64, seed: u64) -> Self {
        let features = FeatureMap::seeded(feature_res, feature_res, d, seed);
        let mix = FeatureMap::seeded(3, 1, 3, seed ^ 0x313).data * 1e-3;
        let readout = FeatureMap::seeded(d, 1, 3, seed ^ 0x8EAD).data * (0.1 / (d as f64).sqrt());
        AffinePredictor {
            mix: Matrix3::from_iterator(mix.iter().copied()),
            readout,
            weights: AttentionWeights::seeded(d, d_text, lora_scale, seed),
            features,
        }
    }

    /// Attention output for a conditioning, one row per feature cell.
    pub fn attention_output(&self, cond: &Conditioning) -> Result<DMatrix<f64>, GuidanceError> {
        Ok(match cond {
            Conditioning::Vanilla(p) => cross_attention(&self.features, p, &self.weights),
            Conditioning::Regional {
                concepts,
                masks,
                branch,
            } => {
                let cells = downsample_masks(&masks.concepts, self.features.width, self.features.height)?;
                rca_forward(&self.features, &cells, concepts, *branch, &self.weights)?
            }
        })
    }
}

impl NoisePredictor for AffinePredictor {
    fn predict(
        &self,
        x_t: &Image,
        t: usize,
        cond: &Conditioning,
        schedule: &NoiseSchedule,
    ) -> Result<Image, GuidanceError> {
        schedule.check(t)?;
        let (fw, fh) = (self.features.width, self.features.height);
        if x_t.channels != 3 || x_t.width % fw != 0 || x_t.height % fh != 0 {
            return Err(GuidanceError::Shape(format!(
                "latent {}x{}x{} does not tile the {fw}x{fh} feature grid",
                x_t.width, x_t.height, x_t.channels
            )));
        }
        let cell_bias = self.attention_output(cond)? * &self.readout;
        let (rx, ry) = (x_t.width / fw, x_t.height / fh);
        let mut out = Image::new(x_t.width, x_t.height, 3);
        for y in 0..x_t.height {
            for x in 0..x_t.width {
                let px = x_t.pixel(x, y);
                let v = self.mix * Vector3::new(px[0], px[1], px[2]);
                let cell = (y / ry) * fw + x / rx;
                let o = out.pixel_mut(x, y);
                for c in 0..3 {
                    o[c] = v[c] + cell_bias[(cell, c)];
                }
            }
        }
        Ok(out)
    }
}

/// Placeholder for a trained denoiser; predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct LearnedStub;

impl NoisePredictor for LearnedStub {
    fn predict(
        &self,
        x_t: &Image,
        t: usize,
        _cond: &Conditioning,
        schedule: &NoiseSchedule,
    ) -> Result<Image, GuidanceError> {
        schedule.check(t)?;
        Ok(Image::new(x_t.width, x_t.height, x_t.channels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{make_schedule, WeightFn};
    use crate::scene::{null_prompt_embedding, HashEmbedder, TextEmbedder};

    #[test]
    fn oracle_fixed_points() {
        let e = HashEmbedder::default();
        let p = e.embed("a red ball");
        let null = null_prompt_embedding(&e);
        let sched = make_schedule(1000, WeightFn::Constant).unwrap();
        let target = [0.8, 0.2, 0.1];
        let oracle = TargetOracle::new(vec![(p.clone(), target)], [1.0; 3], null.clone());
        let t = 250;
        let a = sched.alpha_bar(t);
        let x_t = Image::filled(4, 4, &target.map(|v| v * a.sqrt()));
        let eps = oracle.predict(&x_t, t, &Conditioning::Vanilla(&p), &sched).unwrap();
        assert!(eps.data.iter().all(|v| v.abs() < 1e-12));

        let black = TargetOracle::new(vec![(p.clone(), [0.0; 3])], [0.0; 3], null.clone());
        let e_img = Image::filled(4, 4, &[0.3, -1.2, 0.7]);
        let mut x_t = e_img.clone();
        x_t.data.iter_mut().for_each(|v| *v *= (1.0 - a).sqrt());
        let eps = black.predict(&x_t, t, &Conditioning::Vanilla(&p), &sched).unwrap();
        assert!(eps.max_abs_diff(&e_img) < 1e-12);

        let eps = oracle.predict(&x_t, t, &Conditioning::Vanilla(&null), &sched).unwrap();
        assert!(eps.data.iter().all(|&v| v == 0.0));
        assert!(oracle.predict(&x_t, 1001, &Conditioning::Vanilla(&p), &sched).is_err());
    }

    #[test]
    fn affine_with_zero_mix_is_constant_in_x() {
        let e = HashEmbedder::default();
        let p = e.embed("a box");
        let sched = make_schedule(100, WeightFn::Constant).unwrap();
        let mut pred = AffinePredictor::seeded(32, 32, 4, 1.0, 3);
        pred.mix = Matrix3::zeros();
        let cond = Conditioning::Vanilla(&p);
        let a = pred.predict(&Image::filled(8, 8, &[0.1, 0.2, 0.3]), 5, &cond, &sched).unwrap();
        let b = pred.predict(&Image::filled(8, 8, &[0.9, -0.4, 3.0]), 50, &cond, &sched).unwrap();
        assert_eq!(a, b);
        // Direct evaluation of b·embed(cond) for the first pixel.
        let attn = cross_attention(&pred.features, &p, &pred.weights);
        for c in 0..3 {
            let want: f64 = (0..32).map(|j| attn[(0, j)] * pred.readout[(j, c)]).sum();
            assert!((a.pixel(0, 0)[c] - want).abs() < 1e-12);
        }
        assert!(pred.predict(&Image::new(6, 8, 3), 5, &cond, &sched).is_err());
    }

    #[test]
    fn learned_stub_predicts_zero() {
        let e = HashEmbedder::default();
        let p = e.embed("x");
        let sched = make_schedule(10, WeightFn::Constant).unwrap();
        let out = LearnedStub
            .predict(&Image::filled(2, 2, &[1.0, 1.0, 1.0]), 3, &Conditioning::Vanilla(&p), &sched)
            .unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }
}
