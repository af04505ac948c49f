//! Concept-labeled anisotropic 3D Gaussians.

use nalgebra::{Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::ply::{self, Encoding, PlyError, ScalarType};
use crate::pointcloud::PointCloud;

#[derive(Debug, thiserror::Error)]
pub enum GaussianError {
    #[error("cannot initialize Gaussians from an empty input")]
    Empty,
    #[error("concept id {id} is out of range for k = {k}")]
    Label { id: usize, k: usize },
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("malformed Gaussian PLY: {0}")]
    Malformed(String),
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    /// Degree-0 color coefficients, i.e. RGB.
    pub color: [f64; 3],
    /// Concept index; the one-hot label is `e_label`.
    pub label: usize,
}

impl Gaussian3D {
    pub fn isotropic(mu: Vector3<f64>, std: f64, opacity: f64, color: [f64; 3], label: usize) -> Self {
        Gaussian3D {
            mu,
            log_scale: Vector3::repeat(std.ln()),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: logit(opacity),
            color,
            label,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn label_one_hot(&self, k: usize) -> Vec<f64> {
        (0..k).map(|i| if i == self.label { 1.0 } else { 0.0 }).collect()
    }
}

/// `Σ = R · diag(exp(2·log_scale)) · Rᵀ`.
pub fn covariance(g: &Gaussian3D) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&g.log_scale.map(|l| (2.0 * l).exp()));
    r * s2 * r.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian3D>,
    pub k: usize,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian3D>, k: usize) -> Result<Self, GaussianError> {
        if let Some(g) = gaussians.iter().find(|g| g.label >= k) {
            return Err(GaussianError::Label { id: g.label, k });
        }
        Ok(GaussianCloud {
            gaussians,
            k,
            sh_degree: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Number of Gaussians per concept.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for g in &self.gaussians {
            counts[g.label] += 1;
        }
        counts
    }

    /// Sub-cloud holding only the Gaussians of one concept (same `k`).
    pub fn isolate(&self, concept: usize) -> GaussianCloud {
        GaussianCloud {
            gaussians: self.gaussians.iter().filter(|g| g.label == concept).copied().collect(),
            k: self.k,
            sh_degree: self.sh_degree,
        }
    }

    pub fn to_ply(&self, encoding: Encoding) -> Vec<u8> {
        let props = PLY_PROPS;
        let rows: Vec<Vec<f64>> = self
            .gaussians
            .iter()
            .map(|g| {
                vec![
                    g.mu.x,
                    g.mu.y,
                    g.mu.z,
                    g.color[0],
                    g.color[1],
                    g.color[2],
                    g.opacity_logit,
                    g.log_scale.x,
                    g.log_scale.y,
                    g.log_scale.z,
                    g.rotation[0],
                    g.rotation[1],
                    g.rotation[2],
                    g.rotation[3],
                    g.label as f64,
                ]
            })
            .collect();
        let comments = vec![
            format!("concept_count {}", self.k),
            format!("sh_degree {}", self.sh_degree),
        ];
        ply::write_vertices(encoding, &comments, &props, &rows)
    }

    /// Parse a Gaussian PLY written by [`GaussianCloud::to_ply`] (or any
    /// 3DGS-style file with the same property names). Returns warnings for
    /// defaults that had to be assumed.
    pub fn from_ply(bytes: &[u8]) -> Result<(GaussianCloud, Vec<String>), GaussianError> {
        let table = ply::read_vertices(bytes)?;
        let mut warnings = Vec::new();
        let col = |name: &str| table.require(name);
        let cols: Vec<usize> = PLY_PROPS[..14]
            .iter()
            .map(|(n, _)| col(n))
            .collect::<Result<_, _>>()?;
        let label_col = table.column("concept_label");
        if label_col.is_none() {
            warnings.push("no concept_label property; assigning every Gaussian to concept 0".to_string());
        }
        let labels: Vec<usize> = table
            .rows
            .iter()
            .map(|r| match label_col {
                Some(c) if r[c] < 0.0 || r[c].fract() != 0.0 => {
                    Err(GaussianError::Malformed(format!("concept_label {} is not a valid index", r[c])))
                }
                Some(c) => Ok(r[c] as usize),
                None => Ok(0),
            })
            .collect::<Result<_, _>>()?;
        let k = match table.comment_value("concept_count") {
            Some(v) => v
                .parse::<usize>()
                .map_err(|_| GaussianError::Malformed(format!("bad concept_count comment `{v}`")))?,
            None => labels.iter().copied().max().map_or(1, |m| m + 1),
        };
        if k == 0 {
            return Err(GaussianError::Malformed("concept_count must be positive".into()));
        }
        let gaussians = table
            .rows
            .iter()
            .zip(labels)
            .map(|(r, label)| {
                let v = |i: usize| r[cols[i]];
                Gaussian3D {
                    mu: Vector3::new(v(0), v(1), v(2)),
                    color: [v(3), v(4), v(5)],
                    opacity_logit: v(6),
                    log_scale: Vector3::new(v(7), v(8), v(9)),
                    rotation: Vector4::new(v(10), v(11), v(12), v(13)),
                    label,
                }
            })
            .collect();
        Ok((GaussianCloud::new(gaussians, k)?, warnings))
    }
}

const PLY_PROPS: [(&str, ScalarType); 15] = [
    ("x", ScalarType::F64),
    ("y", ScalarType::F64),
    ("z", ScalarType::F64),
    ("f_dc_0", ScalarType::F64),
    ("f_dc_1", ScalarType::F64),
    ("f_dc_2", ScalarType::F64),
    ("opacity_logit", ScalarType::F64),
    ("log_scale_0", ScalarType::F64),
    ("log_scale_1", ScalarType::F64),
    ("log_scale_2", ScalarType::F64),
    ("rot_0", ScalarType::F64),
    ("rot_1", ScalarType::F64),
    ("rot_2", ScalarType::F64),
    ("rot_3", ScalarType::F64),
    ("concept_label", ScalarType::U8),
];

#[derive(Debug, Clone, Copy)]
pub struct InitConfig {
    pub opacity: f64,
    /// Neighbors averaged for the initial isotropic scale.
    pub neighbors: usize,
    pub min_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            opacity: 0.1,
            neighbors: 3,
            min_std: 1e-4,
        }
    }
}

/// Mean distance from each point to its `n` nearest neighbors (brute force).
pub fn mean_neighbor_distance(points: &[Vector3<f64>], n: usize) -> Vec<f64> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = vec![f64::INFINITY; n];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[n - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                0.0
            } else {
                found.iter().map(|d| d.sqrt()).sum::<f64>() / found.len() as f64
            }
        })
        .collect()
}

/// One Gaussian per point: position and color from the point, one-hot label
/// from its cloud's concept id, isotropic scale from the mean distance to
/// the nearest neighbors, identity rotation, opacity 0.1.
pub fn init_from_pointclouds(
    placed: &[(PointCloud, usize)],
    k: usize,
    config: &InitConfig,
) -> Result<GaussianCloud, GaussianError> {
    if placed.is_empty() || placed.iter().all(|(c, _)| c.is_empty()) {
        return Err(GaussianError::Empty);
    }
    if let Some((_, id)) = placed.iter().find(|(_, id)| *id >= k) {
        return Err(GaussianError::Label { id: *id, k });
    }
    let positions: Vec<Vector3<f64>> = placed
        .iter()
        .flat_map(|(c, _)| c.points().iter().map(|p| p.position))
        .collect();
    let stds = mean_neighbor_distance(&positions, config.neighbors.max(1));
    let gaussians = placed
        .iter()
        .flat_map(|(c, id)| c.points().iter().map(move |p| (p, *id)))
        .zip(stds)
        .map(|((p, id), std)| Gaussian3D::isotropic(p.position, std.max(config.min_std), config.opacity, p.color, id))
        .collect();
    GaussianCloud::new(gaussians, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{CloudProvenance, ColoredPoint};
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn grid(h: f64, n: usize, offset: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    pts.push(ColoredPoint {
                        position: Vector3::new(i as f64, j as f64, k as f64) * h + Vector3::repeat(offset),
                        color: [0.1, 0.2, 0.3],
                    });
                }
            }
        }
        PointCloud::new(pts, CloudProvenance::File).unwrap()
    }

    #[test]
    fn identity_covariance() {
        let g = Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, [0.0; 3], 0);
        assert!((covariance(&g) - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn rotated_diagonal_covariance() {
        let half = std::f64::consts::FRAC_PI_4;
        let g = Gaussian3D {
            log_scale: Vector3::new(2f64.ln(), 0.0, 0.0),
            rotation: Vector4::new(half.cos(), 0.0, 0.0, half.sin()),
            ..Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, [0.0; 3], 0)
        };
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((covariance(&g) - expected).norm() < 1e-12);
    }

    fn arb_gaussian() -> impl Strategy<Value = Gaussian3D> {
        (
            prop::array::uniform3(-3.0f64..1.0),
            prop::array::uniform4(-1.0f64..1.0),
        )
            .prop_filter("non-zero quaternion", |(_, q)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|(ls, q)| Gaussian3D {
                mu: Vector3::zeros(),
                log_scale: Vector3::from(ls),
                rotation: Vector4::from(q).normalize(),
                opacity_logit: 0.0,
                color: [0.5; 3],
                label: 0,
            })
    }

    proptest! {
        #[test]
        fn covariance_is_spd(g in arb_gaussian()) {
            let c = covariance(&g);
            prop_assert!((c - c.transpose()).norm() <= 1e-12 * c.norm());
            let eig = SymmetricEigen::new(c);
            prop_assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
            // Eigenvalues are exactly the squared scales.
            let mut got: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = g.log_scale.iter().map(|l| (2.0 * l).exp()).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }
    }

    #[test]
    fn init_counts_and_labels() {
        let a = grid(0.1, 5, 0.0);
        let mut b_pts = a.points().to_vec();
        b_pts.truncate(100);
        let a = PointCloud::new(a.points()[..100].to_vec(), CloudProvenance::File).unwrap();
        let b = PointCloud::new(
            b_pts.iter().map(|p| ColoredPoint { position: p.position + Vector3::x(), ..*p }).collect(),
            CloudProvenance::File,
        )
        .unwrap();
        let cloud = init_from_pointclouds(&[(a, 0), (b, 1)], 2, &InitConfig::default()).unwrap();
        assert_eq!(cloud.len(), 200);
        assert_eq!(cloud.label_counts(), vec![100, 100]);
        for g in &cloud.gaussians {
            assert!((g.opacity() - 0.1).abs() < 1e-12);
            assert_eq!(g.rotation, Vector4::new(1.0, 0.0, 0.0, 0.0));
            assert_eq!(g.label_one_hot(2).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn single_cloud_labels_are_concept_zero() {
        let cloud = init_from_pointclouds(&[(grid(0.2, 4, 0.0), 0)], 3, &InitConfig::default()).unwrap();
        assert!(cloud.gaussians.iter().all(|g| g.label_one_hot(3) == vec![1.0, 0.0, 0.0]));
    }

    #[test]
    fn nearest_neighbor_scale_matches_grid_spacing() {
        let h = 0.05;
        let cloud = init_from_pointclouds(&[(grid(h, 6, 0.3), 0)], 1, &InitConfig::default()).unwrap();
        // Brute-force oracle: nearest neighbor distance of every grid point.
        let pts: Vec<Vector3<f64>> = cloud.gaussians.iter().map(|g| g.mu).collect();
        let oracle: f64 = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                pts.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / pts.len() as f64;
        assert!((oracle - h).abs() < 1e-12);
        let mean_std = cloud.gaussians.iter().map(|g| g.log_scale.x.exp()).sum::<f64>() / cloud.len() as f64;
        assert!((mean_std - oracle).abs() < 0.2 * oracle, "{mean_std} vs {oracle}");
    }

    #[test]
    fn init_errors() {
        assert!(matches!(
            init_from_pointclouds(&[], 1, &InitConfig::default()),
            Err(GaussianError::Empty)
        ));
        assert!(matches!(
            init_from_pointclouds(&[(grid(0.1, 4, 0.0), 2)], 2, &InitConfig::default()),
            Err(GaussianError::Label { id: 2, k: 2 })
        ));
    }

    fn sample_cloud() -> GaussianCloud {
        let mut rng = crate::seeded_rng(5, &[]);
        use rand::Rng;
        let gs = (0..50)
            .map(|i| Gaussian3D {
                mu: Vector3::new(rng.random(), rng.random(), rng.random()),
                log_scale: Vector3::new(rng.random_range(-4.0..-1.0), rng.random_range(-4.0..-1.0), -2.0),
                rotation: Vector4::new(rng.random(), rng.random(), rng.random(), 0.3).normalize(),
                opacity_logit: rng.random_range(-3.0..3.0),
                color: [rng.random(), rng.random(), 1.0 / 3.0],
                label: i % 3,
            })
            .collect();
        GaussianCloud::new(gs, 3).unwrap()
    }

    #[test]
    fn ply_roundtrip_binary_is_exact_and_ascii_close() {
        let cloud = sample_cloud();
        let (back, warnings) = GaussianCloud::from_ply(&cloud.to_ply(Encoding::BinaryLittleEndian)).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back, cloud);
        let (ascii, _) = GaussianCloud::from_ply(&cloud.to_ply(Encoding::Ascii)).unwrap();
        assert_eq!(ascii.k, 3);
        for (a, b) in ascii.gaussians.iter().zip(&cloud.gaussians) {
            assert_eq!(a.label, b.label);
            assert!((a.mu - b.mu).norm() < 1e-6);
            assert!((a.opacity_logit - b.opacity_logit).abs() < 1e-6);
            assert!((a.rotation - b.rotation).norm() < 1e-6);
        }
    }

    #[test]
    fn missing_label_defaults_to_zero_with_warning() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\nproperty float opacity_logit\n\
property float log_scale_0\nproperty float log_scale_1\nproperty float log_scale_2\nproperty float rot_0\n\
property float rot_1\nproperty float rot_2\nproperty float rot_3\nend_header\n\
0 0 0 0.5 0.5 0.5 0 -3 -3 -3 1 0 0 0\n";
        let (cloud, warnings) = GaussianCloud::from_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.gaussians[0].label, 0);
        assert_eq!(cloud.k, 1);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut cloud = sample_cloud();
        cloud.k = 2;
        cloud.gaussians[0].label = 5;
        let bytes = cloud.to_ply(Encoding::Ascii);
        assert!(matches!(
            GaussianCloud::from_ply(&bytes),
            Err(GaussianError::Label { id: 5, k: 2 })
        ));
    }
}
