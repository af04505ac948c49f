use crate::gaussians::GaussianCloud;
use crate::guidance::LearningRates;
use crate::render::GaussianGrads;

const PARAMS: usize = 14;

/// Per-group step sizes with first-moment smoothing:
/// `m ← β·m + (1−β)·g`, `θ ← θ − lr·m`. No second moment.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub lr: LearningRates,
    /// Multiplies the position rate.
    pub position_scale: f64,
    pub momentum: f64,
    moments: Vec<[f64; PARAMS]>,
}

impl Optimizer {
    pub fn new(lr: LearningRates, position_scale: f64, momentum: f64, n: usize) -> Self {
        Optimizer {
            lr,
            position_scale,
            momentum,
            moments: vec![[0.0; PARAMS]; n],
        }
    }

    fn rates(&self) -> [f64; PARAMS] {
        let mut r = [0.0; PARAMS];
        r[0..3].fill(self.lr.mu * self.position_scale);
        r[3..6].fill(self.lr.log_scale);
        r[6..10].fill(self.lr.rotation);
        r[10] = self.lr.opacity;
        r[11..14].fill(self.lr.color);
        r
    }

    /// Apply one update. Quaternions are renormalized and colors clamped to
    /// `[0, 1]` afterwards; labels are never touched.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &GaussianGrads) {
        assert_eq!(cloud.len(), self.moments.len(), "optimizer state out of sync with the cloud");
        assert_eq!(cloud.len(), grads.len(), "gradient count does not match the cloud");
        let rates = self.rates();
        let beta = self.momentum;
        for (i, g) in cloud.gaussians.iter_mut().enumerate() {
            let grad = grads.gaussian_entries(i);
            let m = &mut self.moments[i];
            for j in 0..PARAMS {
                m[j] = beta * m[j] + (1.0 - beta) * grad[j];
            }
            if rates.iter().all(|&r| r == 0.0) {
                continue;
            }
            for a in 0..3 {
                g.mu[a] -= rates[a] * m[a];
                g.log_scale[a] -= rates[3 + a] * m[3 + a];
                g.color[a] = (g.color[a] - rates[11 + a] * m[11 + a]).clamp(0.0, 1.0);
            }
            for a in 0..4 {
                g.rotation[a] -= rates[6 + a] * m[6 + a];
            }
            g.rotation /= g.rotation.norm();
            g.opacity_logit -= rates[10] * m[10];
        }
    }

    /// Drop the state of removed Gaussians.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.moments.retain(|_| *it.next().expect("keep mask matches state"));
    }
}

/// Remove Gaussians whose opacity is below `threshold`; returns the keep
/// mask.
pub fn prune(cloud: &mut GaussianCloud, threshold: f64) -> Vec<bool> {
    let keep: Vec<bool> = cloud.gaussians.iter().map(|g| g.opacity() >= threshold).collect();
    let mut it = keep.iter();
    cloud.gaussians.retain(|_| *it.next().expect("one flag per Gaussian"));
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Gaussian3D;
    use nalgebra::{Vector3, Vector4};

    fn cloud() -> GaussianCloud {
        let gs = (0..3)
            .map(|i| Gaussian3D::isotropic(Vector3::repeat(i as f64), 0.1, 0.1 + 0.3 * i as f64, [0.5; 3], i % 2))
            .collect();
        GaussianCloud::new(gs, 2).unwrap()
    }

    #[test]
    fn momentum_step_matches_hand_computation() {
        let mut c = cloud();
        let mut grads = GaussianGrads::zeros(3);
        grads.mu[0] = Vector3::new(1.0, 0.0, 0.0);
        grads.color[1] = [0.0, 2.0, 0.0];
        let lr = LearningRates {
            mu: 0.5,
            color: 0.1,
            ..LearningRates::zero()
        };
        let mut opt = Optimizer::new(lr, 2.0, 0.9, 3);
        opt.step(&mut c, &grads);
        // m = 0.1·g, step = lr·scale·m
        assert!((c.gaussians[0].mu.x - (0.0 - 0.5 * 2.0 * 0.1)).abs() < 1e-15);
        assert!((c.gaussians[1].color[1] - (0.5 - 0.1 * 0.2)).abs() < 1e-15);
        opt.step(&mut c, &grads);
        // m = 0.9·0.1 + 0.1 = 0.19
        assert!((c.gaussians[0].mu.x - (-0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn zero_rates_leave_cloud_unchanged() {
        let mut c = cloud();
        let before = c.clone();
        let mut grads = GaussianGrads::zeros(3);
        grads.opacity_logit = vec![1.0; 3];
        grads.rotation[2] = Vector4::new(0.0, 1.0, 0.0, 0.0);
        let mut opt = Optimizer::new(LearningRates::zero(), 1.0, 0.9, 3);
        opt.step(&mut c, &grads);
        assert_eq!(c, before);
    }

    #[test]
    fn labels_and_unit_quaternions_survive_steps() {
        let mut c = cloud();
        let mut grads = GaussianGrads::zeros(3);
        for i in 0..3 {
            grads.rotation[i] = Vector4::new(0.3, -1.0, 2.0, 0.5);
            grads.color[i] = [5.0, -5.0, 0.0];
        }
        let mut opt = Optimizer::new(LearningRates::default(), 1.0, 0.9, 3);
        for _ in 0..20 {
            opt.step(&mut c, &grads);
        }
        for (g, before) in c.gaussians.iter().zip(cloud().gaussians) {
            assert_eq!(g.label, before.label);
            assert!((g.rotation.norm() - 1.0).abs() < 1e-9);
            assert!(g.color.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn prune_drops_transparent_gaussians() {
        let mut c = cloud();
        c.gaussians[1].opacity_logit = -10.0;
        let keep = prune(&mut c, 0.005);
        assert_eq!(keep, vec![true, false, true]);
        assert_eq!(c.len(), 2);
        let mut opt = Optimizer::new(LearningRates::default(), 1.0, 0.9, 3);
        opt.retain(&keep);
        opt.step(&mut c, &GaussianGrads::zeros(2));
    }
}
