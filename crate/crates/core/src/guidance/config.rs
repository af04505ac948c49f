use serde::{Deserialize, Serialize};

/// Timestep weighting `w(t)` applied to score differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    #[default]
    Constant,
    /// `w(t) = 1 - ᾱ_t`
    OneMinusAlphaBar,
    /// `w(t) = sqrt(ᾱ_t (1 - ᾱ_t))`
    SignalNoise,
}

/// Per-parameter-group step sizes. The position rate is multiplied by the
/// scene extent at use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mu: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mu: 2e-4,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            mu: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            color: 0.0,
        }
    }
}

/// Stage-2 settings, read from the scene file's `[stage2]` table.
///
/// `delta_t` is in diffusion steps; `t_min`/`t_max` are fractions of
/// `timesteps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub tau: f64,
    pub lambda: f64,
    pub timesteps: usize,
    pub delta_t: usize,
    /// Inversion sub-steps per `delta_t` interval.
    pub substeps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub iters: usize,
    pub resolution: usize,
    pub weight: WeightFn,
    pub lr: LearningRates,
    pub momentum: f64,
    pub prune_every: usize,
    pub prune_opacity: f64,
    /// Record metrics every this many iterations.
    pub log_every: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            tau: 0.5,
            lambda: 1.0,
            timesteps: 1000,
            delta_t: 200,
            substeps: 10,
            t_min: 0.02,
            t_max: 0.5,
            iters: 500,
            resolution: 64,
            weight: WeightFn::Constant,
            lr: LearningRates::default(),
            momentum: 0.9,
            prune_every: 100,
            prune_opacity: 0.005,
            log_every: 10,
        }
    }
}

impl GuidanceConfig {
    /// Inversion sub-step size in diffusion steps.
    pub fn stride(&self) -> usize {
        self.delta_t / self.substeps.max(1)
    }

    /// Admissible `t` values: inside `[t_min·T, t_max·T]`, with
    /// `s = t - delta_t ≥ stride` a multiple of the stride.
    pub fn timestep_candidates(&self) -> Vec<usize> {
        let total = self.timesteps as f64;
        let lo = (self.t_min * total).ceil() as usize;
        let hi = (self.t_max * total).floor() as usize;
        let stride = self.stride();
        (lo..=hi.min(self.timesteps))
            .filter(|&t| t > self.delta_t && (t - self.delta_t) % stride == 0)
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.timesteps < 2 {
            return Err(format!("timesteps must be >= 2, got {}", self.timesteps));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("tau must lie in [0,1], got {}", self.tau));
        }
        if !self.lambda.is_finite() {
            return Err("lambda must be finite".into());
        }
        if self.delta_t == 0 || self.delta_t >= self.timesteps {
            return Err(format!(
                "delta_t must satisfy 0 < delta_t < T={}, got {}",
                self.timesteps, self.delta_t
            ));
        }
        if self.substeps == 0 || self.delta_t % self.substeps != 0 {
            return Err(format!(
                "substeps ({}) must divide delta_t ({})",
                self.substeps, self.delta_t
            ));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(format!(
                "need 0 < t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            ));
        }
        if self.timestep_candidates().is_empty() {
            return Err(format!(
                "no timestep t in [{}, {}]·T satisfies t - delta_t >= 1 on the inversion stride",
                self.t_min, self.t_max
            ));
        }
        if self.resolution < 16 || self.resolution % 16 != 0 || self.resolution > 512 {
            return Err(format!(
                "resolution must be a multiple of 16 in [16, 512], got {}",
                self.resolution
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        let lr = &self.lr;
        if [lr.mu, lr.log_scale, lr.rotation, lr.opacity, lr.color]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err("learning rates must be finite and non-negative".into());
        }
        Ok(())
    }
}
