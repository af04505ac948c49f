#![allow(dead_code)]

use std::path::PathBuf;

use conceptsplat::gaussians::{Gaussian3D, GaussianCloud};
use conceptsplat::image::Image;
use conceptsplat::render::{project_gaussian, render, Camera, Rasterizer, RenderSettings};
use nalgebra::{Vector3, Vector4};
use rand::Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn camera(res: usize, azimuth: f64, elevation: f64) -> Camera {
    Camera::orbit(Vector3::zeros(), 2.2, azimuth, elevation, 49f64.to_radians(), res, res)
}

/// Random Gaussians well inside the frustum of [`camera`], with opacity
/// below the 0.99 clip.
pub fn random_cloud(seed: u64, n: usize, k: usize) -> GaussianCloud {
    let mut rng = conceptsplat::seeded_rng(seed, &[0xACC]);
    let gs = (0..n)
        .map(|i| Gaussian3D {
            mu: Vector3::new(
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
            ),
            log_scale: Vector3::new(
                rng.random_range(-2.8..-1.6),
                rng.random_range(-2.8..-1.6),
                rng.random_range(-2.8..-1.6),
            ),
            rotation: Vector4::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            opacity_logit: rng.random_range(-2.0..1.5),
            color: [rng.random(), rng.random(), rng.random()],
            label: i % k,
        })
        .collect();
    GaussianCloud::new(gs, k).unwrap()
}

pub fn random_image(seed: u64, w: usize, h: usize, lo: f64, hi: f64) -> Image {
    let mut rng = conceptsplat::seeded_rng(seed, &[0x1A6E]);
    let mut img = Image::new(w, h, 3);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    img
}

fn loss(cloud: &GaussianCloud, cam: &Camera, upstream: &Image, settings: &RenderSettings) -> f64 {
    let out = render(cloud, cam, settings);
    out.color.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
}

fn param_mut(g: &mut Gaussian3D, j: usize) -> &mut f64 {
    match j {
        0..=2 => &mut g.mu[j],
        3..=5 => &mut g.log_scale[j - 3],
        6..=9 => &mut g.rotation[j - 6],
        10 => &mut g.opacity_logit,
        _ => &mut g.color[j - 11],
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compare every analytic parameter gradient of `Σ upstream·color` with
/// central differences of step `h`; entries with `|analytic| ≤ floor` are
/// skipped.
pub fn finite_difference_check(
    cloud: &GaussianCloud,
    cam: &Camera,
    upstream: &Image,
    h: f64,
    floor: f64,
) -> FdReport {
    let settings = RenderSettings::default();
    let mut r = Rasterizer::new();
    r.forward(cloud, cam, &settings);
    let grads = r.backward(cloud, cam, upstream).unwrap();
    let mut report = FdReport::default();
    for i in 0..cloud.len() {
        let analytic = grads.gaussian_entries(i);
        for j in 0..14 {
            let a = analytic[j];
            if a.abs() <= floor {
                continue;
            }
            let mut plus = cloud.clone();
            *param_mut(&mut plus.gaussians[i], j) += h;
            let mut minus = cloud.clone();
            *param_mut(&mut minus.gaussians[i], j) -= h;
            let fd = (loss(&plus, cam, upstream, &settings) - loss(&minus, cam, upstream, &settings)) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst = Some((i, j, a, fd));
            }
        }
    }
    report
}

/// Smallest gap between consecutive camera depths of the visible Gaussians.
pub fn min_depth_gap(cloud: &GaussianCloud, cam: &Camera) -> f64 {
    let mut depths: Vec<f64> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, cam).map(|s| s.depth))
        .collect();
    depths.sort_by(f64::total_cmp);
    depths.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}
