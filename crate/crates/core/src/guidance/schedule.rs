use super::{GuidanceError, WeightFn};

/// Linear-β diffusion schedule. Index 0 is the clean image (`ᾱ_0 = 1`);
/// `1..=T` are the diffusion steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    pub weight: WeightFn,
}

/// β linearly spaced from 1e-4 to 0.02 over `T` steps, `ᾱ_t = Π_{i≤t}(1-β_i)`.
pub fn make_schedule(timesteps: usize, weight: WeightFn) -> Result<NoiseSchedule, GuidanceError> {
    if timesteps < 2 {
        return Err(GuidanceError::Schedule(timesteps));
    }
    let (lo, hi) = (1e-4, 0.02);
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for i in 0..timesteps {
        let beta = lo + (hi - lo) * i as f64 / (timesteps - 1) as f64;
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { alpha_bar, weight })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        match self.weight {
            WeightFn::Constant => 1.0,
            WeightFn::OneMinusAlphaBar => 1.0 - a,
            WeightFn::SignalNoise => (a * (1.0 - a)).sqrt(),
        }
    }

    pub fn check(&self, t: usize) -> Result<(), GuidanceError> {
        if t > self.timesteps() {
            return Err(GuidanceError::Timestep {
                t,
                min: 0,
                max: self.timesteps(),
            });
        }
        Ok(())
    }
}
