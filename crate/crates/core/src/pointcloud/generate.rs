use std::path::PathBuf;
use std::process::Command;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CloudProvenance, ColoredPoint, PointCloud, PointCloudError};

/// Source of candidate point clouds for a shape prompt.
pub trait ShapeGenerator: Sync {
    fn generate(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<PointCloud>, PointCloudError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    /// Body ellipsoid with a head sphere.
    Figure,
}

const KEYWORDS: &[(ShapeKind, &[&str])] = &[
    (ShapeKind::Sphere, &["sphere", "ball", "globe", "orb", "planet", "apple", "balloon"]),
    (ShapeKind::Box, &["box", "cube", "crate", "block", "chest", "backpack", "table", "house", "dice"]),
    (ShapeKind::Cylinder, &["cylinder", "can", "cup", "mug", "pillar", "tower", "vase", "bottle", "barrel"]),
    (
        ShapeKind::Figure,
        &[
            "figure", "dog", "cat", "person", "man", "woman", "robot", "toy", "bear", "teddy",
            "animal", "bird", "horse", "monkey", "duck", "rabbit", "motorbike", "car",
        ],
    ),
];

const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.2, 0.7, 0.25]),
    ("blue", [0.15, 0.3, 0.85]),
    ("yellow", [0.92, 0.85, 0.2]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.55, 0.25, 0.7]),
    ("pink", [0.95, 0.6, 0.7]),
    ("white", [0.92, 0.92, 0.92]),
    ("black", [0.08, 0.08, 0.08]),
    ("gray", [0.5, 0.5, 0.5]),
    ("grey", [0.5, 0.5, 0.5]),
    ("brown", [0.5, 0.33, 0.18]),
];

fn words(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl ShapeKind {
    /// First primitive whose keyword appears in the prompt.
    pub fn from_prompt(prompt: &str) -> Option<ShapeKind> {
        words(prompt).find_map(|w| {
            let stems = [Some(w.as_str()), w.strip_suffix('s'), w.strip_suffix("es")];
            KEYWORDS
                .iter()
                .find(|(_, kws)| stems.iter().flatten().any(|s| s.len() > 2 && kws.contains(s)))
                .map(|(k, _)| *k)
        })
    }

    fn default_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Sphere => [0.7, 0.7, 0.75],
            ShapeKind::Box => [0.6, 0.5, 0.4],
            ShapeKind::Cylinder => [0.55, 0.6, 0.65],
            ShapeKind::Figure => [0.65, 0.55, 0.45],
        }
    }
}

fn prompt_color(prompt: &str) -> Option<[f64; 3]> {
    words(prompt).find_map(|w| COLORS.iter().find(|(n, _)| *n == w).map(|(_, c)| *c))
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Parametric primitives with seeded jitter. Every primitive fits in
/// `[-0.5, 0.5]^3` before jitter. Each candidate gets a random surface
/// defect (a missing cap of up to 40°), standing in for the distorted
/// candidates a text-to-3D model produces.
#[derive(Debug, Clone)]
pub struct ProceduralGenerator {
    pub points: usize,
    /// Maximum radial (surface-normal) displacement.
    pub jitter: f64,
    pub color_jitter: f64,
    pub max_defect_deg: f64,
    /// Reject prompts that match no primitive instead of defaulting to a
    /// sphere.
    pub strict: bool,
}

impl Default for ProceduralGenerator {
    fn default() -> Self {
        ProceduralGenerator {
            points: 512,
            jitter: 0.02,
            color_jitter: 0.03,
            max_defect_deg: 40.0,
            strict: false,
        }
    }
}

impl ProceduralGenerator {
    pub fn strict() -> Self {
        ProceduralGenerator {
            strict: true,
            ..Default::default()
        }
    }

    fn kind_for(&self, prompt: &str) -> Result<ShapeKind, PointCloudError> {
        match ShapeKind::from_prompt(prompt) {
            Some(k) => Ok(k),
            None if self.strict || prompt.trim().is_empty() => {
                Err(PointCloudError::UnknownPrompt(prompt.to_string()))
            }
            None => Ok(ShapeKind::Sphere),
        }
    }

    fn radial(&self, rng: &mut impl Rng) -> f64 {
        self.jitter * rng.random_range(-1.0..=1.0)
    }

    /// Surface samples and their outward normals.
    fn surface(&self, kind: ShapeKind, rng: &mut impl Rng) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let n = self.points;
        match kind {
            ShapeKind::Sphere => {
                // Antipodal pairs with shared jitter keep the centroid at the
                // origin.
                let mut out = Vec::with_capacity(n);
                for _ in 0..n / 2 {
                    let dir = unit_vector(rng);
                    let r = 0.5 + self.radial(rng);
                    out.push((dir * r, dir));
                    out.push((-dir * r, -dir));
                }
                out
            }
            ShapeKind::Box => (0..n)
                .map(|_| {
                    let axis = rng.random_range(0..3usize);
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let mut p = Vector3::new(
                        rng.random_range(-0.5..=0.5),
                        rng.random_range(-0.5..=0.5),
                        rng.random_range(-0.5..=0.5),
                    );
                    p[axis] = 0.5 * sign;
                    let mut normal = Vector3::zeros();
                    normal[axis] = sign;
                    (p + normal * self.radial(rng), normal)
                })
                .collect(),
            ShapeKind::Cylinder => (0..n)
                .map(|_| {
                    // Side area 2π·0.5·1 vs cap area 2·π·0.25.
                    if rng.random_bool(2.0 / 3.0) {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        let normal = Vector3::new(a.cos(), a.sin(), 0.0);
                        let z = rng.random_range(-0.5..=0.5);
                        (normal * (0.5 + self.radial(rng)) + Vector3::z() * z, normal)
                    } else {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        let r = 0.5 * rng.random_range(0.0f64..=1.0).sqrt();
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        let normal = Vector3::z() * sign;
                        (Vector3::new(r * a.cos(), r * a.sin(), 0.5 * sign) + normal * self.radial(rng), normal)
                    }
                })
                .collect(),
            ShapeKind::Figure => {
                // Body: ellipsoid radii (0.35, 0.2, 0.22) at z = -0.08.
                // Head: sphere radius 0.18 at (0.27, 0, 0.2).
                let body_n = n * 3 / 4;
                let body_r = Vector3::new(0.35, 0.2, 0.22);
                let body_c = Vector3::new(-0.05, 0.0, -0.08);
                let head_c = Vector3::new(0.27, 0.0, 0.2);
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let dir = unit_vector(rng);
                    if i < body_n {
                        let normal = dir.component_div(&body_r).normalize();
                        out.push((body_c + dir.component_mul(&body_r) + normal * self.radial(rng), normal));
                    } else {
                        out.push((head_c + dir * (0.18 + self.radial(rng)), dir));
                    }
                }
                out
            }
        }
    }

    fn candidate(&self, kind: ShapeKind, base_color: [f64; 3], seed: u64, index: usize) -> PointCloud {
        let mut rng = crate::seeded_rng(seed, &[0xC10D, index as u64]);
        let surface = self.surface(kind, &mut rng);
        let defect_axis = unit_vector(&mut rng);
        let defect = rng.random_range(0.0..=1.0) * self.max_defect_deg.to_radians();
        let cos_defect = defect.cos();
        let in_cap = |p: &Vector3<f64>| p.norm() > 0.0 && defect > 0.0 && p.normalize().dot(&defect_axis) > cos_defect;
        let mut points = Vec::with_capacity(surface.len());
        if kind == ShapeKind::Sphere {
            for pair in surface.chunks_exact(2) {
                if in_cap(&pair[0].0) || in_cap(&pair[1].0) {
                    continue;
                }
                let c = self.jitter_color(base_color, &mut rng);
                points.extend(pair.iter().map(|(p, _)| ColoredPoint { position: *p, color: c }));
            }
        } else {
            for (p, _) in &surface {
                if in_cap(p) {
                    continue;
                }
                let color = self.jitter_color(base_color, &mut rng);
                points.push(ColoredPoint { position: *p, color });
            }
        }
        PointCloud::new(points, CloudProvenance::Procedural).expect("primitives keep enough points")
    }

    fn jitter_color(&self, base: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
        base.map(|c| (c + self.color_jitter * rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0))
    }
}

impl ShapeGenerator for ProceduralGenerator {
    fn generate(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<PointCloud>, PointCloudError> {
        let kind = self.kind_for(prompt)?;
        let color = prompt_color(prompt).unwrap_or_else(|| kind.default_color());
        Ok((0..n).map(|i| self.candidate(kind, color, seed, i)).collect())
    }
}

/// Loads a user-supplied PLY cloud; every candidate is that cloud.
#[derive(Debug, Clone)]
pub struct FileGenerator {
    pub path: PathBuf,
}

impl ShapeGenerator for FileGenerator {
    fn generate(&self, _prompt: &str, n: usize, _seed: u64) -> Result<Vec<PointCloud>, PointCloudError> {
        let bytes = std::fs::read(&self.path)?;
        let cloud = PointCloud::from_ply(&bytes, CloudProvenance::File)?;
        Ok(vec![cloud; n])
    }
}

/// Runs an external text-to-3D command once per candidate. The command is
/// executed through `sh -c` with `SHAPE_PROMPT`, `SHAPE_SEED` and
/// `SHAPE_CANDIDATE` in its environment and must print a PLY file (point
/// cloud or mesh; mesh vertices become points) on stdout.
#[derive(Debug, Clone)]
pub struct ExternalGenerator {
    pub command: String,
}

impl ShapeGenerator for ExternalGenerator {
    fn generate(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<PointCloud>, PointCloudError> {
        (0..n)
            .map(|i| {
                let out = Command::new("sh")
                    .arg("-c")
                    .arg(&self.command)
                    .env("SHAPE_PROMPT", prompt)
                    .env("SHAPE_SEED", seed.to_string())
                    .env("SHAPE_CANDIDATE", i.to_string())
                    .output()
                    .map_err(|e| PointCloudError::External(format!("spawning `{}`: {e}", self.command)))?;
                if !out.status.success() {
                    return Err(PointCloudError::External(format!(
                        "`{}` exited with {}: {}",
                        self.command,
                        out.status,
                        String::from_utf8_lossy(&out.stderr).trim()
                    )));
                }
                PointCloud::from_ply(&out.stdout, CloudProvenance::External)
            })
            .collect()
    }
}
