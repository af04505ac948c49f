use nalgebra::Vector3;
use rayon::prelude::*;

use super::{normalize_pointcloud, PointCloud};
use crate::image::Mask;
use crate::render::Camera;

/// The four fixed selector views: azimuth 0/90/180/270°, elevation 15°,
/// radius 2.2, looking at the origin.
pub fn selector_cameras(resolution: usize) -> Vec<Camera> {
    [0.0, 90.0, 180.0, 270.0]
        .iter()
        .map(|&az| {
            Camera::orbit(Vector3::zeros(), 2.2, az, 15.0, 49f64.to_radians(), resolution, resolution)
        })
        .collect()
}

/// Point-sprite silhouettes of the normalized cloud, one per view. Each
/// point covers the pixels within `radius_px` of its projection.
pub fn preview_silhouettes(cloud: &PointCloud, views: &[Camera], radius_px: f64) -> Vec<Mask> {
    let normalized = normalize_pointcloud(cloud).unwrap_or_else(|_| cloud.clone());
    views
        .iter()
        .map(|cam| {
            let mut mask = Mask::new(cam.width, cam.height, false);
            let r = radius_px.ceil() as i64;
            for p in normalized.points() {
                let pc = cam.world_to_camera(&p.position);
                if pc.z <= cam.near {
                    continue;
                }
                let uv = cam.project(&pc);
                let (cx, cy) = (uv.x.floor() as i64, uv.y.floor() as i64);
                for y in cy - r..=cy + r {
                    for x in cx - r..=cx + r {
                        if x < 0 || y < 0 || x >= cam.width as i64 || y >= cam.height as i64 {
                            continue;
                        }
                        let dx = x as f64 + 0.5 - uv.x;
                        let dy = y as f64 + 0.5 - uv.y;
                        if dx * dx + dy * dy <= radius_px * radius_px {
                            mask.set(x as usize, y as usize, true);
                        }
                    }
                }
            }
            mask
        })
        .collect()
}

/// Sprite radius that closes the gaps between surface samples of a
/// 512-point cloud at the given preview resolution.
pub fn preview_radius(resolution: usize) -> f64 {
    (resolution as f64 / 24.0).max(1.0)
}

/// Scores a candidate from its preview silhouettes; higher is better.
pub trait CandidateScorer: Sync {
    fn score(&self, silhouettes: &[Mask]) -> f64;
}

/// Mean over views of silhouette coverage (fraction of the image covered)
/// plus left-right symmetry (IoU of the silhouette with its mirror image).
#[derive(Debug, Clone, Copy)]
pub struct GeometricScorer {
    pub coverage_weight: f64,
    pub symmetry_weight: f64,
}

impl Default for GeometricScorer {
    fn default() -> Self {
        GeometricScorer {
            coverage_weight: 1.0,
            symmetry_weight: 0.5,
        }
    }
}

impl GeometricScorer {
    pub fn coverage(mask: &Mask) -> f64 {
        mask.count() as f64 / mask.data.len() as f64
    }

    pub fn symmetry(mask: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..mask.height {
            for x in 0..mask.width {
                let a = mask.get(x, y);
                let b = mask.get(mask.width - 1 - x, y);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl CandidateScorer for GeometricScorer {
    fn score(&self, silhouettes: &[Mask]) -> f64 {
        let n = silhouettes.len().max(1) as f64;
        silhouettes
            .iter()
            .map(|m| self.coverage_weight * Self::coverage(m) + self.symmetry_weight * Self::symmetry(m))
            .sum::<f64>()
            / n
    }
}

/// Render every candidate from the fixed views, score the previews, and
/// return the best candidate; ties go to the lowest index.
pub fn select_pointcloud(
    candidates: &[PointCloud],
    scorer: &dyn CandidateScorer,
    views: &[Camera],
) -> (usize, PointCloud) {
    assert!(!candidates.is_empty(), "select_pointcloud needs at least one candidate");
    assert!(!views.is_empty(), "select_pointcloud needs at least one view");
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|c| scorer.score(&preview_silhouettes(c, views, preview_radius(views[0].width))))
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    log::debug!("candidate scores {scores:?}, selected {best}");
    (best, candidates[best].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{CloudProvenance, ColoredPoint, ProceduralGenerator, ShapeGenerator};

    fn sliver() -> PointCloud {
        let pts = (0..200)
            .map(|i| ColoredPoint {
                position: Vector3::new(i as f64 / 199.0 - 0.5, 0.0, 0.001 * (i % 2) as f64),
                color: [0.5; 3],
            })
            .collect();
        PointCloud::new(pts, CloudProvenance::File).unwrap()
    }

    fn sphere() -> PointCloud {
        let g = ProceduralGenerator {
            max_defect_deg: 0.0,
            ..Default::default()
        };
        g.generate("a sphere", 1, 0).unwrap().remove(0)
    }

    #[test]
    fn full_sphere_beats_sliver() {
        let views = selector_cameras(64);
        let scorer = GeometricScorer::default();
        // Oracle: the scorer's own terms evaluated on each candidate.
        let oracle = |c: &PointCloud| {
            let masks = preview_silhouettes(c, &views, preview_radius(64));
            masks.iter().map(GeometricScorer::coverage).sum::<f64>() / masks.len() as f64
        };
        assert!(oracle(&sphere()) > 5.0 * oracle(&sliver()));
        let (idx, _) = select_pointcloud(&[sliver(), sphere()], &scorer, &views);
        assert_eq!(idx, 1);
    }

    #[test]
    fn single_and_tied_candidates() {
        let views = selector_cameras(32);
        let scorer = GeometricScorer::default();
        assert_eq!(select_pointcloud(&[sphere()], &scorer, &views).0, 0);
        assert_eq!(select_pointcloud(&[sphere(), sphere()], &scorer, &views).0, 0);
    }

    #[test]
    fn selection_is_permutation_covariant() {
        let views = selector_cameras(48);
        let scorer = GeometricScorer::default();
        let cands = ProceduralGenerator::default().generate("a dog", 4, 21).unwrap();
        let (best, _) = select_pointcloud(&cands, &scorer, &views);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<PointCloud> = perm.iter().map(|&i| cands[i].clone()).collect();
        let (pbest, _) = select_pointcloud(&permuted, &scorer, &views);
        assert_eq!(perm[pbest], best);
    }

    #[test]
    fn symmetry_of_centered_sphere_is_high() {
        let views = selector_cameras(64);
        let masks = preview_silhouettes(&sphere(), &views, preview_radius(64));
        for m in &masks {
            let s = GeometricScorer::symmetry(m);
            assert!(s > 0.85, "symmetry {s}");
        }
    }
}
