//! Coarse per-concept point clouds: generation, selection, normalization
//! and placement into layout boxes.

mod generate;
mod select;

pub use generate::{ExternalGenerator, FileGenerator, ProceduralGenerator, ShapeGenerator, ShapeKind};
pub use select::{
    preview_radius, preview_silhouettes, select_pointcloud, selector_cameras, CandidateScorer, GeometricScorer,
};

use nalgebra::Vector3;

use crate::layout::PlacementTransform;
use crate::ply::{self, Encoding, PlyError, ScalarType};

/// Minimum number of points in a valid cloud.
pub const MIN_POINTS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum PointCloudError {
    #[error("point cloud has {0} points, need at least {MIN_POINTS}")]
    TooFewPoints(usize),
    #[error("point {index} has color channel outside [0,1]")]
    Color { index: usize },
    #[error("point cloud is degenerate (all points coincide)")]
    Degenerate,
    #[error("no shape primitive matches prompt `{0}`")]
    UnknownPrompt(String),
    #[error("external shape generator failed: {0}")]
    External(String),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudProvenance {
    Procedural,
    External,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<ColoredPoint>,
    pub provenance: CloudProvenance,
}

impl PointCloud {
    pub fn new(points: Vec<ColoredPoint>, provenance: CloudProvenance) -> Result<Self, PointCloudError> {
        if points.len() < MIN_POINTS {
            return Err(PointCloudError::TooFewPoints(points.len()));
        }
        if let Some(index) = points
            .iter()
            .position(|p| p.color.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(PointCloudError::Color { index });
        }
        Ok(PointCloud { points, provenance })
    }

    pub fn points(&self) -> &[ColoredPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(&p.position);
            hi = hi.sup(&p.position);
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().map(|p| p.position).sum::<Vector3<f64>>() / self.points.len() as f64
    }

    fn map_positions(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| ColoredPoint {
                    position: f(&p.position),
                    color: p.color,
                })
                .collect(),
            provenance: self.provenance,
        }
    }

    pub fn to_ply(&self, encoding: Encoding) -> Vec<u8> {
        let props = [
            ("x", ScalarType::F32),
            ("y", ScalarType::F32),
            ("z", ScalarType::F32),
            ("red", ScalarType::U8),
            ("green", ScalarType::U8),
            ("blue", ScalarType::U8),
        ];
        let rows: Vec<Vec<f64>> = self
            .points
            .iter()
            .map(|p| {
                let c = p.color.map(|v| (v * 255.0).round());
                vec![p.position.x, p.position.y, p.position.z, c[0], c[1], c[2]]
            })
            .collect();
        ply::write_vertices(encoding, &[], &props, &rows)
    }

    /// Read `x,y,z` and optional `red,green,blue` (8-bit or float) vertices.
    /// Other elements such as faces are ignored, so mesh files load as
    /// their vertex sets.
    pub fn from_ply(bytes: &[u8], provenance: CloudProvenance) -> Result<Self, PointCloudError> {
        let table = ply::read_vertices(bytes)?;
        let (x, y, z) = (table.require("x")?, table.require("y")?, table.require("z")?);
        let color_cols = ["red", "green", "blue"].map(|n| table.column(n));
        let color_scale = match table.type_of("red") {
            Some(ScalarType::F32 | ScalarType::F64) => 1.0,
            Some(ScalarType::U16) => 1.0 / 65535.0,
            _ => 1.0 / 255.0,
        };
        let points = table
            .rows
            .iter()
            .map(|r| ColoredPoint {
                position: Vector3::new(r[x], r[y], r[z]),
                color: match color_cols {
                    [Some(cr), Some(cg), Some(cb)] => {
                        [r[cr], r[cg], r[cb]].map(|v| (v * color_scale).clamp(0.0, 1.0))
                    }
                    _ => [0.5; 3],
                },
            })
            .collect();
        PointCloud::new(points, provenance)
    }
}

/// Center the axis-aligned bounding box at the origin and scale so that the
/// largest axis extent is exactly 1.
pub fn normalize_pointcloud(pcd: &PointCloud) -> Result<PointCloud, PointCloudError> {
    let (lo, hi) = pcd.aabb();
    let extent = (hi - lo).max();
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(PointCloudError::Degenerate);
    }
    let center = (lo + hi) / 2.0;
    Ok(pcd.map_positions(|p| (p - center) / extent))
}

/// `p ↦ s·p + t` for every point; colors are untouched.
pub fn place_pointcloud(pcd: &PointCloud, transform: &PlacementTransform) -> PointCloud {
    pcd.map_positions(|p| transform.apply(p))
}
