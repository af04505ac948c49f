//! Noise schedule, noise predictors, DDIM inversion and the interval score
//! matching gradients (plain and concept-aware).
//!
//! Latents are images: there is no encoder, so the "latent" of a rendered
//! view is its RGB pixel array.

mod config;
mod predictor;
mod schedule;

pub use config::{GuidanceConfig, LearningRates, WeightFn};
pub use predictor::{AffinePredictor, Conditioning, LearnedStub, NoisePredictor, TargetOracle};
pub use schedule::{make_schedule, NoiseSchedule};

use crate::image::Image;
use crate::rca::{Branch, ConceptSet, RcaError, RegionMasks};
use crate::scene::PromptEmbedding;

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("schedule needs at least 2 timesteps, got {0}")]
    Schedule(usize),
    #[error("timestep {t} is outside [{min}, {max}]")]
    Timestep { t: usize, min: usize, max: usize },
    #[error("invalid inversion interval: {0}")]
    Interval(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Rca(#[from] RcaError),
}

/// DDIM inversion interval: `s = t - delta_t`, reached from the clean image
/// in steps of `delta_t / substeps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub delta_t: usize,
    pub substeps: usize,
}

impl Interval {
    pub fn from_config(config: &GuidanceConfig) -> Self {
        Interval {
            delta_t: config.delta_t,
            substeps: config.substeps,
        }
    }

    pub fn stride(&self) -> usize {
        self.delta_t / self.substeps
    }

    fn check(&self, t: usize, schedule: &NoiseSchedule) -> Result<usize, GuidanceError> {
        if self.delta_t == 0 || self.substeps == 0 || self.delta_t % self.substeps != 0 {
            return Err(GuidanceError::Interval(format!(
                "{} sub-steps must evenly divide delta_t = {} > 0",
                self.substeps, self.delta_t
            )));
        }
        if t > schedule.timesteps() {
            return Err(GuidanceError::Timestep {
                t,
                min: 1,
                max: schedule.timesteps(),
            });
        }
        if t < self.delta_t + 1 {
            return Err(GuidanceError::Interval(format!(
                "t - delta_t must be >= 1, got t = {t}, delta_t = {}",
                self.delta_t
            )));
        }
        let s = t - self.delta_t;
        if s % self.stride() != 0 {
            return Err(GuidanceError::Interval(format!(
                "s = {s} is not a multiple of the stride {}",
                self.stride()
            )));
        }
        Ok(s)
    }
}

fn axpby(a: f64, x: &Image, b: f64, y: &Image) -> Image {
    let mut out = x.clone();
    for (o, v) in out.data.iter_mut().zip(&y.data) {
        *o = a * *o + b * v;
    }
    out
}

/// One deterministic inversion step from `s` to `t` using the prediction
/// at `(x_s, s)`. Returns `(x_t, ε̂(x_s, s))`.
fn invert_step(
    x_s: &Image,
    s: usize,
    t: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
) -> Result<(Image, Image), GuidanceError> {
    let eps = predictor.predict(x_s, s, cond, schedule)?;
    let (ab_s, ab_t) = (schedule.alpha_bar(s), schedule.alpha_bar(t));
    // x̂_0 = x_s/√ᾱ_s − √(1−ᾱ_s)/√ᾱ_s · ε̂
    let x0 = axpby(1.0 / ab_s.sqrt(), x_s, -(1.0 - ab_s).sqrt() / ab_s.sqrt(), &eps);
    let x_t = axpby(ab_t.sqrt(), &x0, (1.0 - ab_t).sqrt(), &eps);
    Ok((x_t, eps))
}

/// Single inversion step `x_s → x_t`.
pub fn ddim_invert_step(
    x_s: &Image,
    s: usize,
    t: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
) -> Result<Image, GuidanceError> {
    if t > schedule.timesteps() || s > t {
        return Err(GuidanceError::Timestep {
            t,
            min: s,
            max: schedule.timesteps(),
        });
    }
    Ok(invert_step(x_s, s, t, predictor, cond, schedule)?.0)
}

/// Result of inverting a clean image to `(s, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub s: usize,
    pub x_s: Image,
    pub x_t: Image,
    /// The prediction at `(x_s, s)` used for the last step; this is also
    /// the second term of the interval score.
    pub eps_s: Image,
}

/// Chain of inversion steps `0 → stride → … → s → … → t` (ᾱ_0 = 1 at the
/// clean end).
pub fn ddim_invert(
    x_0: &Image,
    t: usize,
    interval: Interval,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
) -> Result<Inversion, GuidanceError> {
    let s = interval.check(t, schedule)?;
    let stride = interval.stride();
    let mut x = x_0.clone();
    let mut cur = 0;
    while cur < s {
        x = invert_step(&x, cur, cur + stride, predictor, cond, schedule)?.0;
        cur += stride;
    }
    let x_s = x;
    let mut eps_s = None;
    let mut x = x_s.clone();
    while cur < t {
        let (next, eps) = invert_step(&x, cur, cur + stride, predictor, cond, schedule)?;
        if cur == s {
            eps_s = Some(eps);
        }
        x = next;
        cur += stride;
    }
    Ok(Inversion {
        s,
        x_s,
        x_t: x,
        eps_s: eps_s.expect("t > s so the loop runs at least once"),
    })
}

/// Deterministic sampling chain `from → from − stride → … → 0`; each step
/// uses the prediction at its upper timestep. Inverse of [`ddim_invert`] up
/// to the predictor's variation between neighbouring timesteps.
pub fn ddim_sample(
    x_from: &Image,
    from: usize,
    stride: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
) -> Result<Image, GuidanceError> {
    schedule.check(from)?;
    if stride == 0 || from % stride != 0 {
        return Err(GuidanceError::Interval(format!(
            "stride {stride} must be positive and divide {from}"
        )));
    }
    let mut x = x_from.clone();
    let mut cur = from;
    while cur > 0 {
        x = invert_step(&x, cur, cur - stride, predictor, cond, schedule)?.0;
        cur -= stride;
    }
    Ok(x)
}

fn interval_score(
    x_t: &Image,
    t: usize,
    eps_s: &Image,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
) -> Result<Image, GuidanceError> {
    let eps_t = predictor.predict(x_t, t, cond, schedule)?;
    let w = schedule.weight(t);
    Ok(axpby(w, &eps_t, -w, eps_s))
}

/// Interval score matching: `w(t)·(ε̂(x_t; y, t) − ε̂(x_s; ∅, s))` with the
/// trajectory inverted under the null prompt.
pub fn ism_gradient(
    x: &Image,
    t: usize,
    interval: Interval,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    prompt: &PromptEmbedding,
    null: &PromptEmbedding,
) -> Result<Image, GuidanceError> {
    let inv = ddim_invert(x, t, interval, predictor, &Conditioning::Vanilla(null), schedule)?;
    interval_score(&inv.x_t, t, &inv.eps_s, predictor, &Conditioning::Vanilla(prompt), schedule)
}

/// Concept-aware interval score matching: both predictions go through
/// regional attention; inversion uses the null prompts with the concept
/// adapters still active.
pub fn cism_gradient(
    x: &Image,
    masks: &RegionMasks,
    concepts: &ConceptSet,
    t: usize,
    interval: Interval,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Image, GuidanceError> {
    if masks.k() != concepts.k() {
        return Err(RcaError::ConceptCount {
            masks: masks.k(),
            concepts: concepts.k(),
        }
        .into());
    }
    if masks.width() != x.width || masks.height() != x.height {
        return Err(GuidanceError::Shape(format!(
            "masks are {}x{}, image is {}x{}",
            masks.width(),
            masks.height(),
            x.width,
            x.height
        )));
    }
    let null = Conditioning::Regional {
        concepts,
        masks,
        branch: Branch::Null,
    };
    let inv = ddim_invert(x, t, interval, predictor, &null, schedule)?;
    let prompt = Conditioning::Regional {
        concepts,
        masks,
        branch: Branch::Prompt,
    };
    interval_score(&inv.x_t, t, &inv.eps_s, predictor, &prompt, schedule)
}
