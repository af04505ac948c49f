//! Per-concept 3D bounding boxes and the placement transform derived from
//! them.
//!
//! Coordinates are z-up and right-handed; `(W, D, H)` run along `(x, y, z)`
//! and a box is anchored at its lowest-left corner `(X, Y, Z)`.

mod controller;

pub use controller::{
    generate_layout, FallbackController, FixtureController, HttpController, InContextExample,
    LayoutController, LayoutOptions, LayoutRequest, LayoutResponse, RequestConcept, ResponseBox,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::scene::{Bounds, SceneSpec};

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("layout controller transport error: {0}")]
    Transport(String),
    #[error("no recorded layout fixture for request {hash} in {dir}")]
    FixtureMissing { hash: String, dir: String },
    #[error("layout response violates schema: {0}")]
    Schema(String),
    #[error("layout still invalid after repair: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub d: f64,
    pub h: f64,
    pub concept_id: usize,
}

impl Bbox3D {
    /// From `[X, Y, Z, W, D, H]`.
    pub fn from_array(concept_id: usize, v: [f64; 6]) -> Self {
        Bbox3D {
            x: v[0],
            y: v[1],
            z: v[2],
            w: v[3],
            d: v[4],
            h: v[5],
            concept_id,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.w, self.d, self.h]
    }

    pub fn min_corner(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        Vector3::new(self.x + self.w, self.y + self.d, self.z + self.h)
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.x + self.w / 2.0, self.y + self.d / 2.0, self.z + self.h / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.w * self.d * self.h
    }

    /// Volume of the axis-aligned intersection with `other`.
    pub fn intersection_volume(&self, other: &Bbox3D) -> f64 {
        let (a0, a1) = (self.min_corner(), self.max_corner());
        let (b0, b1) = (other.min_corner(), other.max_corner());
        (0..3)
            .map(|i| (a1[i].min(b1[i]) - a0[i].max(b0[i])).max(0.0))
            .product()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let v = self.to_array().map(|c| c * factor);
        Bbox3D::from_array(self.concept_id, v)
    }

    /// Shrink and shift the box into `bounds`.
    pub fn clamped(&self, bounds: &Bounds) -> Self {
        let clamp_axis = |pos: f64, len: f64, limit: f64| {
            let len = len.min(limit);
            (pos.clamp(0.0, limit - len), len)
        };
        let (x, w) = clamp_axis(self.x, self.w, bounds.w);
        let (y, d) = clamp_axis(self.y, self.d, bounds.d);
        let (z, h) = clamp_axis(self.z, self.h, bounds.h);
        Bbox3D {
            x,
            y,
            z,
            w,
            d,
            h,
            concept_id: self.concept_id,
        }
    }
}

/// Uniform scale and translation that move a normalized concept cloud into
/// its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementTransform {
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl PlacementTransform {
    pub fn identity() -> Self {
        PlacementTransform {
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p * self.scale + self.translation
    }
}

/// `s = min(W_i/W, H_i/H)`, `t = box center`. Depth does not enter the scale.
pub fn bbox_transform(bbox: &Bbox3D, bounds: &Bounds) -> PlacementTransform {
    PlacementTransform {
        scale: (bbox.w / bounds.w).min(bbox.h / bounds.h),
        translation: bbox.center(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutProvenance {
    Llm,
    Fixture,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub boxes: Vec<Bbox3D>,
    pub provenance: LayoutProvenance,
}

impl LayoutPlan {
    pub fn bbox(&self, concept_id: usize) -> Option<&Bbox3D> {
        self.boxes.iter().find(|b| b.concept_id == concept_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout plans serialize")
    }
}

/// Deterministic layout: concepts in a row along x, each centered in an
/// equal slot of width `W/k`. Box width is the slot minus a 10% margin,
/// capped at `W/2`; depth `D/2`, height `H/2`, resting on `Z = 0`.
pub fn fallback_layout(scene: &SceneSpec) -> LayoutPlan {
    fallback_boxes(scene.k(), &scene.bounds)
}

pub(crate) fn fallback_boxes(k: usize, bounds: &Bounds) -> LayoutPlan {
    let slot = bounds.w / k as f64;
    let w = (0.9 * slot).min(0.5 * bounds.w);
    let d = 0.5 * bounds.d;
    let h = 0.5 * bounds.h;
    let boxes = (0..k)
        .map(|i| Bbox3D {
            x: i as f64 * slot + (slot - w) / 2.0,
            y: (bounds.d - d) / 2.0,
            z: 0.0,
            w,
            d,
            h,
            concept_id: i,
        })
        .collect();
    LayoutPlan {
        boxes,
        provenance: LayoutProvenance::Fallback,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutIssue {
    NonPositiveDimension { concept_id: usize, axis: char, value: f64 },
    OutOfBounds { concept_id: usize, axis: char, low: f64, high: f64, limit: f64 },
    MissingConcept { concept_id: usize },
    DuplicateConcept { concept_id: usize },
    UnknownConcept { concept_id: usize },
    /// Intersection volume as a fraction of the smaller box.
    Overlap { a: usize, b: usize, fraction: f64 },
    /// Depth does not enter the placement scale; a normalized cloud can
    /// reach past the box in y.
    DepthOverflow { concept_id: usize, placed_depth: f64, box_depth: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<LayoutIssue>,
    pub warnings: Vec<LayoutIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let errs: Vec<String> = self.errors.iter().map(|e| format!("{e:?}")).collect();
        write!(f, "{}", errs.join("; "))
    }
}

/// Check a plan for `k` concepts against the world bounds.
pub fn validate_layout(plan: &LayoutPlan, bounds: &Bounds, k: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = vec![0usize; k];
    for b in &plan.boxes {
        if b.concept_id >= k {
            report.errors.push(LayoutIssue::UnknownConcept { concept_id: b.concept_id });
        } else {
            seen[b.concept_id] += 1;
        }
        let axes = [('x', b.x, b.w, bounds.w), ('y', b.y, b.d, bounds.d), ('z', b.z, b.h, bounds.h)];
        for (axis, pos, len, limit) in axes {
            if !(len > 0.0) {
                report.errors.push(LayoutIssue::NonPositiveDimension {
                    concept_id: b.concept_id,
                    axis,
                    value: len,
                });
            }
            if !(pos >= 0.0 && pos + len <= limit) {
                report.errors.push(LayoutIssue::OutOfBounds {
                    concept_id: b.concept_id,
                    axis,
                    low: pos,
                    high: pos + len,
                    limit,
                });
            }
        }
        let placed_depth = bbox_transform(b, bounds).scale * reference_length(bounds);
        if b.w > 0.0 && b.h > 0.0 && placed_depth > b.d {
            report.warnings.push(LayoutIssue::DepthOverflow {
                concept_id: b.concept_id,
                placed_depth,
                box_depth: b.d,
            });
        }
    }
    for (id, &n) in seen.iter().enumerate() {
        match n {
            0 => report.errors.push(LayoutIssue::MissingConcept { concept_id: id }),
            1 => {}
            _ => report.errors.push(LayoutIssue::DuplicateConcept { concept_id: id }),
        }
    }
    for (i, a) in plan.boxes.iter().enumerate() {
        for b in &plan.boxes[i + 1..] {
            let inter = a.intersection_volume(b);
            if inter > 0.0 {
                let fraction = inter / a.volume().min(b.volume());
                report.warnings.push(LayoutIssue::Overlap {
                    a: a.concept_id,
                    b: b.concept_id,
                    fraction,
                });
            }
        }
    }
    report
}

/// World length that a normalized (unit-extent) cloud is stretched to
/// before the placement transform is applied. Equal to 1 for the unit cube.
pub fn reference_length(bounds: &Bounds) -> f64 {
    bounds.w.min(bounds.h)
}
