use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{threshold_masks, Camera, RenderError, RenderOutput, RenderSettings, ALPHA_MAX, COV2D_BLUR};
use crate::gaussians::{covariance, Gaussian3D, GaussianCloud};
use crate::image::Image;

/// Tile edge in pixels.
pub const TILE: usize = 16;
/// Pixels where `½·dᵀΣ⁻¹d` exceeds this are skipped (`exp(-23) ≈ 1e-10`).
/// The cutoff is far enough out that the truncation is invisible to finite
/// differences; the 3σ rule only decides frustum culling.
const HALF_Q_CUT: f64 = 23.0;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian in the cloud.
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Regularized 2D covariance (pixel²).
    pub cov: Matrix2<f64>,
    /// Inverse of `cov`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub label: usize,
    /// Kernel support radius in pixels.
    pub radius: f64,
    p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    /// `J·W`.
    jw: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
}

/// EWA projection: `cov2d = J·W·Σ·Wᵀ·Jᵀ + 0.3·I` with `J` the Jacobian of
/// the perspective map at the Gaussian center. Returns `None` when the
/// center is outside the clip range or the 3σ footprint misses the image.
pub fn project_gaussian(g: &Gaussian3D, index: usize, cam: &Camera) -> Option<Splat2D> {
    let w = cam.rotation();
    let pc = w * (g.mu - cam.position);
    if pc.z <= cam.near || pc.z >= cam.far {
        return None;
    }
    let f = cam.focal();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let jac = Matrix2x3::new(f / z, 0.0, -f * x / (z * z), 0.0, f / z, -f * y / (z * z));
    let sigma = covariance(g);
    let jw = jac * w;
    let raw = jw * sigma * jw.transpose();
    let cov = (raw + raw.transpose()) * 0.5 + Matrix2::identity() * COV2D_BLUR;
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let lambda_max = 0.5 * (a + c) + ((0.5 * (a - c)).powi(2) + b * b).sqrt();
    let mean = cam.principal_point() + Vector2::new(f * x / z, f * y / z);
    let three_sd = 3.0 * lambda_max.sqrt();
    if mean.x + three_sd < 0.0
        || mean.x - three_sd > cam.width as f64
        || mean.y + three_sd < 0.0
        || mean.y - three_sd > cam.height as f64
    {
        return None;
    }
    Some(Splat2D {
        index,
        mean,
        cov,
        conic,
        depth: z,
        opacity: g.opacity(),
        color: g.color,
        label: g.label,
        radius: (2.0 * HALF_Q_CUT * lambda_max).sqrt(),
        p_cam: pc,
        jac,
        jw,
        sigma,
    })
}

/// Depth-sorted splats and per-tile lists of splat positions.
#[derive(Debug, Clone)]
struct Frame {
    splats: Vec<Splat2D>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    width: usize,
    height: usize,
}

impl Frame {
    fn build(cloud: &GaussianCloud, cam: &Camera) -> Frame {
        let mut splats: Vec<Splat2D> = cloud
            .gaussians
            .par_iter()
            .enumerate()
            .map(|(i, g)| project_gaussian(g, i, cam))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        let tiles_x = cam.width.div_ceil(TILE);
        let tiles_y = cam.height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let x0 = (s.mean.x - s.radius).floor().max(0.0);
            let y0 = (s.mean.y - s.radius).floor().max(0.0);
            let x1 = (s.mean.x + s.radius).floor().min(cam.width as f64 - 1.0);
            let y1 = (s.mean.y + s.radius).floor().min(cam.height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
                for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                    tiles[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Frame {
            splats,
            tiles,
            tiles_x,
            width: cam.width,
            height: cam.height,
        }
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (x0, y0) = (tx * TILE, ty * TILE);
        let (x1, y1) = ((x0 + TILE).min(self.width), (y0 + TILE).min(self.height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    /// Front-to-back walk over the splats covering pixel `(x, y)`; returns
    /// the final transmittance.
    fn composite(&self, list: &[u32], x: usize, y: usize, out: &mut Vec<Contribution>) -> f64 {
        out.clear();
        let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let mut trans = 1.0;
        for (slot, &pos) in list.iter().enumerate() {
            let s = &self.splats[pos as usize];
            let d = p - s.mean;
            let half_q = 0.5 * (s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y);
            if half_q > HALF_Q_CUT {
                continue;
            }
            let gauss = (-half_q).exp();
            let raw = s.opacity * gauss;
            let clipped = raw > ALPHA_MAX;
            let alpha = if clipped { ALPHA_MAX } else { raw };
            out.push(Contribution {
                slot,
                alpha,
                gauss,
                clipped,
                trans,
            });
            trans *= 1.0 - alpha;
        }
        trans
    }
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    clipped: bool,
    /// Transmittance in front of this splat.
    trans: f64,
}

/// Gradients of a scalar loss with respect to every Gaussian parameter.
/// The quaternion gradient is taken with respect to the stored
/// (unnormalized) quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub mu: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        GaussianGrads {
            mu: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// All 17 per-Gaussian entries in parameter order
    /// `mu, log_scale, rotation, opacity_logit, color`.
    pub fn gaussian_entries(&self, i: usize) -> [f64; 17] {
        let mut out = [0.0; 17];
        out[0..3].copy_from_slice(self.mu[i].as_slice());
        out[3..6].copy_from_slice(self.log_scale[i].as_slice());
        out[6..10].copy_from_slice(self.rotation[i].as_slice());
        out[10] = self.opacity_logit[i];
        out[11..14].copy_from_slice(&self.color[i]);
        out
    }

    pub fn is_finite(&self) -> bool {
        (0..self.len()).all(|i| self.gaussian_entries(i)[..14].iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.len())
            .flat_map(|i| self.gaussian_entries(i)[..14].to_vec())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    /// With respect to the opacity value σ (not its logit).
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardState {
    cloud: GaussianCloud,
    camera: Camera,
    settings: RenderSettings,
    frame: Frame,
}

/// Forward renderer that retains what the backward pass needs.
#[derive(Debug, Default)]
pub struct Rasterizer {
    state: Option<ForwardState>,
}

/// Stateless forward render.
pub fn render(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> RenderOutput {
    forward_frame(&Frame::build(cloud, cam), cloud.k, settings)
}

fn forward_frame(frame: &Frame, k: usize, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (frame.width, frame.height);
    let per_tile: Vec<Vec<(usize, usize, [f64; 3], f64, Vec<f64>)>> = (0..frame.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &frame.tiles[tile];
            let mut buf = Vec::new();
            frame
                .tile_pixels(tile)
                .map(|(x, y)| {
                    let trans = frame.composite(list, x, y, &mut buf);
                    let mut color = settings.background.map(|b| b * trans);
                    let mut concept = vec![0.0; k];
                    for c in &buf {
                        let s = &frame.splats[list[c.slot] as usize];
                        let weight = c.alpha * c.trans;
                        for ch in 0..3 {
                            color[ch] += s.color[ch] * weight;
                        }
                        concept[s.label] += weight;
                    }
                    (x, y, color, 1.0 - trans, concept)
                })
                .collect()
        })
        .collect();
    let mut color = Image::new(w, h, 3);
    let mut concept = Image::new(w, h, k);
    let mut alpha = Image::new(w, h, 1);
    for (x, y, c, a, m) in per_tile.into_iter().flatten() {
        color.pixel_mut(x, y).copy_from_slice(&c);
        concept.pixel_mut(x, y).copy_from_slice(&m);
        alpha.pixel_mut(x, y)[0] = a;
    }
    let (masks, background_mask) = threshold_masks(&concept, settings.tau);
    RenderOutput {
        color,
        concept,
        alpha,
        masks,
        background_mask,
    }
}

impl Rasterizer {
    pub fn new() -> Self {
        Rasterizer { state: None }
    }

    pub fn forward(&mut self, cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> RenderOutput {
        let frame = Frame::build(cloud, cam);
        let out = forward_frame(&frame, cloud.k, settings);
        self.state = Some(ForwardState {
            cloud: cloud.clone(),
            camera: *cam,
            settings: *settings,
            frame,
        });
        out
    }

    pub fn clear(&mut self) {
        self.state = None;
    }

    /// Exact gradients of `Σ_pixels ⟨grad_color, C⟩` for the last forward
    /// pass. `cloud` and `cam` must be the ones that pass rendered.
    pub fn backward(&self, cloud: &GaussianCloud, cam: &Camera, grad_color: &Image) -> Result<GaussianGrads, RenderError> {
        let state = match &self.state {
            Some(s) if s.camera == *cam && s.cloud == *cloud => s,
            _ => return Err(RenderError::MissingForwardState),
        };
        let expected = (cam.width, cam.height, 3);
        let got = (grad_color.width, grad_color.height, grad_color.channels);
        if got != expected {
            return Err(RenderError::Shape { got, expected });
        }
        let frame = &state.frame;
        let bg = state.settings.background;

        let per_tile: Vec<Vec<SplatGrad>> = (0..frame.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &frame.tiles[tile];
                let mut grads = vec![SplatGrad::default(); list.len()];
                let mut buf = Vec::new();
                for (x, y) in frame.tile_pixels(tile) {
                    let g = grad_color.pixel(x, y);
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let trans = frame.composite(list, x, y, &mut buf);
                    // Suffix sum of ⟨g, c_j⟩·α_j·T_j behind the current splat, plus background.
                    let mut behind = (g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]) * trans;
                    for c in buf.iter().rev() {
                        let s = &frame.splats[list[c.slot] as usize];
                        let gc = g[0] * s.color[0] + g[1] * s.color[1] + g[2] * s.color[2];
                        let d_alpha = c.trans * gc - behind / (1.0 - c.alpha);
                        let weight = c.alpha * c.trans;
                        behind += gc * weight;
                        let sg = &mut grads[c.slot];
                        for ch in 0..3 {
                            sg.color[ch] += g[ch] * weight;
                        }
                        if c.clipped {
                            continue;
                        }
                        sg.opacity += d_alpha * c.gauss;
                        let d_gauss = d_alpha * s.opacity;
                        let d = p - s.mean;
                        sg.mean += (s.conic * d) * (d_gauss * c.gauss);
                        sg.conic += (d * d.transpose()) * (-0.5 * d_gauss * c.gauss);
                    }
                }
                grads
            })
            .collect();

        // Fixed tile order keeps the reduction deterministic.
        let mut splat_grads = vec![SplatGrad::default(); frame.splats.len()];
        for (tile, grads) in per_tile.iter().enumerate() {
            for (slot, sg) in grads.iter().enumerate() {
                splat_grads[frame.tiles[tile][slot] as usize].add(sg);
            }
        }

        let w = cam.rotation();
        let f = cam.focal();
        let chained: Vec<(usize, Vector3<f64>, Vector3<f64>, Vector4<f64>, f64, [f64; 3])> = frame
            .splats
            .par_iter()
            .zip(splat_grads.par_iter())
            .map(|(s, sg)| {
                let g = &cloud.gaussians[s.index];
                let (d_mu, d_ls, d_q) = chain_geometry(s, sg, g, &w, f);
                let d_logit = sg.opacity * s.opacity * (1.0 - s.opacity);
                (s.index, d_mu, d_ls, d_q, d_logit, sg.color)
            })
            .collect();
        let mut out = GaussianGrads::zeros(cloud.len());
        for (i, d_mu, d_ls, d_q, d_logit, d_c) in chained {
            out.mu[i] = d_mu;
            out.log_scale[i] = d_ls;
            out.rotation[i] = d_q;
            out.opacity_logit[i] = d_logit;
            out.color[i] = d_c;
        }
        Ok(out)
    }
}

/// Chain rule from (mean2d, conic) back to (mu, log_scale, quaternion).
fn chain_geometry(
    s: &Splat2D,
    sg: &SplatGrad,
    g: &Gaussian3D,
    w: &Matrix3<f64>,
    f: f64,
) -> (Vector3<f64>, Vector3<f64>, Vector4<f64>) {
    // conic = cov⁻¹
    let d_cov = -(s.conic * sg.conic * s.conic);
    // cov = (J W) Σ (J W)ᵀ + blur
    let d_sigma = s.jw.transpose() * d_cov * s.jw;
    let d_jw = d_cov * s.jw * s.sigma * 2.0;
    let d_jac = d_jw * w.transpose();

    let (x, y, z) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
    let (z2, z3) = (z * z, z * z * z);
    let mut d_pc = s.jac.transpose() * sg.mean;
    d_pc.x += d_jac[(0, 2)] * (-f / z2);
    d_pc.y += d_jac[(1, 2)] * (-f / z2);
    d_pc.z += (d_jac[(0, 0)] + d_jac[(1, 1)]) * (-f / z2)
        + d_jac[(0, 2)] * (2.0 * f * x / z3)
        + d_jac[(1, 2)] * (2.0 * f * y / z3);
    let d_mu = w.transpose() * d_pc;

    // Σ = M Mᵀ with M = R·diag(s)
    let r = g.rotation_matrix();
    let scale = g.log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&scale);
    let d_m = d_sigma * m * 2.0;
    let d_scale = (r.transpose() * d_m).diagonal();
    let d_ls = d_scale.component_mul(&scale);
    let d_r = d_m * Matrix3::from_diagonal(&scale);

    let norm = g.rotation.norm();
    let q = g.rotation / norm;
    let d_qhat = quat_matrix_grad(&q, &d_r);
    let d_q = (d_qhat - q * q.dot(&d_qhat)) / norm;
    (d_mu, d_ls, d_q)
}

/// Gradient of `⟨G, R(q)⟩` with respect to the quaternion `(w, x, y, z)`.
fn quat_matrix_grad(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gm = |r: usize, c: usize| g[(r, c)];
    Vector4::new(
        2.0 * (-z * gm(0, 1) + y * gm(0, 2) + z * gm(1, 0) - x * gm(1, 2) - y * gm(2, 0) + x * gm(2, 1)),
        2.0 * (y * gm(0, 1) + z * gm(0, 2) + y * gm(1, 0) - 2.0 * x * gm(1, 1) - w * gm(1, 2) + z * gm(2, 0)
            + w * gm(2, 1)
            - 2.0 * x * gm(2, 2)),
        2.0 * (-2.0 * y * gm(0, 0) + x * gm(0, 1) + w * gm(0, 2) + x * gm(1, 0) + z * gm(1, 2) - w * gm(2, 0)
            + z * gm(2, 1)
            - 2.0 * y * gm(2, 2)),
        2.0 * (-2.0 * z * gm(0, 0) - w * gm(0, 1) + x * gm(0, 2) + w * gm(1, 0) - 2.0 * z * gm(1, 1)
            + y * gm(1, 2)
            + x * gm(2, 0)
            + y * gm(2, 1)),
    )
}
