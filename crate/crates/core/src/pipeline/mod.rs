//! Two-stage orchestration: layout, point clouds and labeled Gaussians,
//! then concept-aware score distillation.

mod optimizer;
mod output;

pub use optimizer::{prune, Optimizer};
pub use output::{generate, write_metrics_csv, GenerateOptions, RunManifest};

use std::path::PathBuf;

use nalgebra::Vector3;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, UnitBall};
use serde::Serialize;

use crate::gaussians::{init_from_pointclouds, GaussianCloud, GaussianError, InitConfig};
use crate::guidance::{
    cism_gradient, make_schedule, AffinePredictor, GuidanceConfig, GuidanceError, Interval, NoisePredictor,
    TargetOracle,
};
use crate::image::Image;
use crate::layout::{
    bbox_transform, generate_layout, FallbackController, FixtureController, HttpController, LayoutController,
    LayoutError, LayoutOptions, LayoutPlan,
};
use crate::pointcloud::{
    normalize_pointcloud, place_pointcloud, select_pointcloud, selector_cameras, CloudProvenance, ColoredPoint,
    ExternalGenerator, FileGenerator, GeometricScorer, PointCloud, PointCloudError, ProceduralGenerator,
    ShapeGenerator,
};
use crate::rca::{ConceptLoRA, ConceptSet, RegionMasks};
use crate::render::{render, Camera, Rasterizer, RenderError, RenderOutput, RenderSettings};
use crate::scene::{null_prompt_embedding, Bounds, HashEmbedder, SceneError, SceneSpec, TextEmbedder};

/// Orbit radius for guidance and preview cameras, in units of the scene
/// extent.
pub const CAMERA_RADIUS: f64 = 2.2;
pub const CAMERA_FOV_DEG: f64 = 49.0;
/// Elevation of turntable and metric views.
pub const TURNTABLE_ELEVATION_DEG: f64 = 15.0;
/// Rank of the concept adapters.
pub const ADAPTER_RANK: usize = 4;
/// Side of the attention feature grid.
pub const FEATURE_RES: usize = 16;

/// Target colors used when a concept does not set one.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.45, 0.85],
    [0.25, 0.7, 0.3],
    [0.9, 0.75, 0.2],
    [0.6, 0.3, 0.75],
    [0.95, 0.5, 0.15],
    [0.3, 0.75, 0.8],
    [0.8, 0.4, 0.6],
];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("concept {concept}: {source}")]
    PointCloud {
        concept: usize,
        #[source]
        source: PointCloudError,
    },
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("cloud has k = {cloud}, scene has k = {scene}")]
    ConceptCount { cloud: usize, scene: usize },
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayoutSource {
    Fallback,
    /// Recorded responses under this directory.
    Fixture(PathBuf),
    /// Live endpoint; responses are optionally recorded as fixtures.
    Llm { url: String, record_dir: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeSource {
    Procedural,
    File(PathBuf),
    External(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Layout boxes and per-concept point clouds.
    Layout,
    /// Ablation: skip layout and shapes; every concept starts as random
    /// points in one ball around the scene center.
    RandomSphere,
}

#[derive(Debug, Clone)]
pub struct Stage1Options {
    pub layout: LayoutSource,
    pub shapes: ShapeSource,
    pub candidates: usize,
    pub points: usize,
    pub init: InitMode,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            layout: LayoutSource::Fallback,
            shapes: ShapeSource::Procedural,
            candidates: 4,
            points: 512,
            init: InitMode::Layout,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub cloud: GaussianCloud,
    /// `None` when the layout stage is disabled.
    pub layout: Option<LayoutPlan>,
    /// Index of the selected candidate per concept.
    pub selected: Vec<usize>,
    /// Placed point cloud per concept.
    pub placed: Vec<PointCloud>,
}

fn concept_seed(scene_seed: u64, concept: usize) -> u64 {
    crate::seeded_rng(scene_seed, &[0x5EED_C0, concept as u64]).next_u64()
}

/// Layout, per-concept candidate generation and selection, normalization,
/// placement and labeled Gaussian initialization.
pub fn run_stage1(scene: &SceneSpec, options: &Stage1Options) -> Result<Stage1Output, PipelineError> {
    scene.validate()?;
    let k = scene.k();
    if options.init == InitMode::RandomSphere {
        let placed: Vec<PointCloud> = (0..k)
            .map(|i| random_ball(&scene.bounds, options.points, concept_seed(scene.seed, i)))
            .collect();
        let pairs: Vec<(PointCloud, usize)> = placed.iter().cloned().zip(0..k).collect();
        let cloud = init_from_pointclouds(&pairs, k, &InitConfig::default())?;
        return Ok(Stage1Output {
            cloud,
            layout: None,
            selected: vec![0; k],
            placed,
        });
    }

    let controller: Box<dyn LayoutController> = match &options.layout {
        LayoutSource::Fallback => Box::new(FallbackController),
        LayoutSource::Fixture(dir) => Box::new(FixtureController::new(dir.clone())),
        LayoutSource::Llm { url, record_dir } => {
            let mut c = HttpController::new(url.clone());
            c.record_dir = record_dir.clone();
            Box::new(c)
        }
    };
    // Recorded fixtures must exist: falling back silently would hide a
    // stale fixture store.
    let layout_options = LayoutOptions {
        fallback_on_transport_error: !matches!(options.layout, LayoutSource::Fixture(_)),
    };
    let layout = generate_layout(scene, controller.as_ref(), layout_options)?;

    let generator: Box<dyn ShapeGenerator> = match &options.shapes {
        ShapeSource::Procedural => Box::new(ProceduralGenerator {
            points: options.points,
            ..Default::default()
        }),
        ShapeSource::File(path) => Box::new(FileGenerator { path: path.clone() }),
        ShapeSource::External(command) => Box::new(ExternalGenerator {
            command: command.clone(),
        }),
    };
    let views = selector_cameras(64);
    let scorer = GeometricScorer::default();
    let mut selected = Vec::with_capacity(k);
    let mut placed = Vec::with_capacity(k);
    for concept in 0..k {
        let spec = scene.concept(concept).expect("validated scene has contiguous ids");
        let prompt = if spec.shape_prompt.trim().is_empty() {
            &spec.class_prompt
        } else {
            &spec.shape_prompt
        };
        let wrap = |source| PipelineError::PointCloud { concept, source };
        let candidates = generator
            .generate(prompt, options.candidates.max(1), concept_seed(scene.seed, concept))
            .map_err(wrap)?;
        let (index, best) = select_pointcloud(&candidates, &scorer, &views);
        let normalized = normalize_pointcloud(&best).map_err(wrap)?;
        let bbox = layout.bbox(concept).expect("validated layout covers every concept");
        placed.push(place_pointcloud(&normalized, &bbox_transform(bbox, &scene.bounds)));
        selected.push(index);
    }
    let pairs: Vec<(PointCloud, usize)> = placed.iter().cloned().zip(0..k).collect();
    let cloud = init_from_pointclouds(&pairs, k, &InitConfig::default())?;
    Ok(Stage1Output {
        cloud,
        layout: Some(layout),
        selected,
        placed,
    })
}

fn random_ball(bounds: &Bounds, n: usize, seed: u64) -> PointCloud {
    let mut rng = crate::seeded_rng(seed, &[0xBA11]);
    let radius = 0.5 * bounds.w.min(bounds.d).min(bounds.h);
    let center = bounds.center();
    let points = (0..n.max(crate::pointcloud::MIN_POINTS))
        .map(|_| {
            let v: [f64; 3] = UnitBall.sample(&mut rng);
            ColoredPoint {
                position: center + Vector3::from(v) * radius,
                color: [0.5; 3],
            }
        })
        .collect();
    PointCloud::new(points, CloudProvenance::Procedural).expect("enough points with valid colors")
}

/// Guidance camera for one iteration: azimuth U[-180°, 180°), elevation
/// U[-10°, 45°], looking at the scene center. Deterministic in
/// `(seed, iteration)`.
pub fn sample_camera(seed: u64, iteration: usize, bounds: &Bounds, resolution: usize) -> Camera {
    let mut rng = crate::seeded_rng(seed, &[0xCA3E, iteration as u64]);
    let azimuth = rng.random_range(-180.0..180.0);
    let elevation = rng.random_range(-10.0..=45.0);
    orbit_camera(bounds, azimuth, elevation, resolution)
}

fn orbit_camera(bounds: &Bounds, azimuth: f64, elevation: f64, resolution: usize) -> Camera {
    Camera::orbit(
        bounds.center(),
        CAMERA_RADIUS * bounds.extent(),
        azimuth,
        elevation,
        CAMERA_FOV_DEG.to_radians(),
        resolution,
        resolution,
    )
}

/// `n` views evenly spaced in azimuth starting at 0°, elevation 15°.
pub fn turntable_cameras(bounds: &Bounds, n: usize, resolution: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| orbit_camera(bounds, 360.0 * i as f64 / n as f64, TURNTABLE_ELEVATION_DEG, resolution))
        .collect()
}

/// Evaluation preset: `n` views evenly spaced over azimuth [-45°, 45°].
pub fn eval_cameras(bounds: &Bounds, n: usize, resolution: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let az = if n == 1 { 0.0 } else { -45.0 + 90.0 * i as f64 / (n - 1) as f64 };
            orbit_camera(bounds, az, TURNTABLE_ELEVATION_DEG, resolution)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TurntableFrame {
    pub azimuth: f64,
    pub joint: RenderOutput,
    /// Render of each concept's Gaussians alone.
    pub isolated: Vec<RenderOutput>,
}

pub fn render_turntable(
    cloud: &GaussianCloud,
    bounds: &Bounds,
    n: usize,
    resolution: usize,
    settings: &RenderSettings,
) -> Vec<TurntableFrame> {
    let isolated: Vec<GaussianCloud> = (0..cloud.k).map(|i| cloud.isolate(i)).collect();
    turntable_cameras(bounds, n, resolution)
        .iter()
        .enumerate()
        .map(|(i, cam)| TurntableFrame {
            azimuth: 360.0 * i as f64 / n as f64,
            joint: render(cloud, cam, settings),
            isolated: isolated.iter().map(|c| render(c, cam, settings)).collect(),
        })
        .collect()
}

/// Prompt embeddings and adapters for every concept, in id order.
pub fn concept_set(scene: &SceneSpec, embedder: &dyn TextEmbedder) -> ConceptSet {
    let mut concepts: Vec<_> = scene.concepts.iter().collect();
    concepts.sort_by_key(|c| c.id);
    ConceptSet {
        prompts: concepts.iter().map(|c| embedder.embed(&c.concept_prompt)).collect(),
        adapters: concepts
            .iter()
            .map(|c| ConceptLoRA::new(embedder.dim(), embedder.dim(), ADAPTER_RANK, c.adapter_seed))
            .collect(),
        background: embedder.embed(&scene.global_prompt),
        null: null_prompt_embedding(embedder),
    }
}

/// Per-concept target colors in id order.
pub fn target_colors(scene: &SceneSpec) -> Vec<[f64; 3]> {
    (0..scene.k())
        .map(|i| {
            scene
                .concept(i)
                .and_then(|c| c.target_color)
                .unwrap_or(PALETTE[i % PALETTE.len()])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Target,
    Affine,
}

pub fn build_predictor(
    kind: PredictorKind,
    scene: &SceneSpec,
    concepts: &ConceptSet,
    settings: &RenderSettings,
) -> Box<dyn NoisePredictor> {
    match kind {
        PredictorKind::Target => Box::new(TargetOracle::new(
            concepts.prompts.iter().cloned().zip(target_colors(scene)).collect(),
            settings.background,
            concepts.null.clone(),
        )),
        PredictorKind::Affine => Box::new(AffinePredictor::seeded(
            concepts.null.dim(),
            concepts.null.dim(),
            FEATURE_RES,
            scene.stage2.lambda,
            scene.seed,
        )),
    }
}

/// Masked error of one concept: mean squared per-channel error over its
/// mask pixels, pooled over views. `NaN` when the concept covers no pixel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub masked_l2: Vec<f64>,
    pub masked_psnr: Vec<f64>,
}

pub fn masked_metrics(
    cloud: &GaussianCloud,
    views: &[Camera],
    targets: &[[f64; 3]],
    settings: &RenderSettings,
) -> (Vec<f64>, Vec<f64>) {
    let k = targets.len();
    let mut sq = vec![0.0; k];
    let mut count = vec![0usize; k];
    for cam in views {
        let out = render(cloud, cam, settings);
        for (c, mask) in out.masks.iter().enumerate().take(k) {
            for y in 0..mask.height {
                for x in 0..mask.width {
                    if mask.get(x, y) {
                        let px = out.color.pixel(x, y);
                        sq[c] += (0..3).map(|ch| (px[ch] - targets[c][ch]).powi(2)).sum::<f64>();
                        count[c] += 3;
                    }
                }
            }
        }
    }
    let l2: Vec<f64> = sq
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();
    let psnr = l2.iter().map(|&m| 10.0 * (1.0 / m).log10()).collect();
    (l2, psnr)
}

#[derive(Debug, Clone)]
pub struct Stage2Options {
    pub config: GuidanceConfig,
    pub seed: u64,
    pub settings: RenderSettings,
    pub metric_views: Vec<Camera>,
    pub targets: Vec<[f64; 3]>,
}

impl Stage2Options {
    /// Scene settings, 8 metric views around the turntable orbit.
    pub fn for_scene(scene: &SceneSpec) -> Self {
        let settings = RenderSettings {
            tau: scene.stage2.tau,
            ..Default::default()
        };
        Stage2Options {
            config: scene.stage2.clone(),
            seed: scene.seed,
            settings,
            metric_views: turntable_cameras(&scene.bounds, 8, scene.stage2.resolution),
            targets: target_colors(scene),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub cloud: GaussianCloud,
    pub metrics: Vec<MetricRow>,
    pub pruned: usize,
}

/// Concept-aware score distillation: per iteration sample a camera, render
/// color and masks, compute the interval score through regional attention,
/// backpropagate it through the rasterizer and take one optimizer step.
pub fn run_stage2(
    cloud: &GaussianCloud,
    scene: &SceneSpec,
    concepts: &ConceptSet,
    predictor: &dyn NoisePredictor,
    options: &Stage2Options,
) -> Result<Stage2Output, PipelineError> {
    if cloud.k != scene.k() || concepts.k() != scene.k() {
        return Err(PipelineError::ConceptCount {
            cloud: cloud.k,
            scene: scene.k(),
        });
    }
    let cfg = &options.config;
    cfg.validate().map_err(|message| SceneError::Field {
        line: 0,
        field: "stage2".into(),
        message,
    })?;
    let schedule = make_schedule(cfg.timesteps, cfg.weight)?;
    let interval = Interval::from_config(cfg);
    let candidates = cfg.timestep_candidates();
    if candidates.is_empty() && cfg.iters > 0 {
        return Err(GuidanceError::Interval("no admissible timestep in [t_min, t_max]".into()).into());
    }

    let mut cloud = cloud.clone();
    let mut opt = Optimizer::new(cfg.lr, scene.bounds.extent(), cfg.momentum, cloud.len());
    let mut raster = Rasterizer::new();
    let mut metrics = Vec::new();
    let mut pruned = 0;
    let record = |cloud: &GaussianCloud, iteration: usize, metrics: &mut Vec<MetricRow>| {
        let (masked_l2, masked_psnr) = masked_metrics(cloud, &options.metric_views, &options.targets, &options.settings);
        metrics.push(MetricRow {
            iteration,
            masked_l2,
            masked_psnr,
        });
    };
    record(&cloud, 0, &mut metrics);

    for it in 0..cfg.iters {
        let cam = sample_camera(options.seed, it, &scene.bounds, cfg.resolution);
        let out = raster.forward(&cloud, &cam, &options.settings);
        let masks = RegionMasks {
            concepts: out.masks,
            background: out.background_mask,
        };
        let mut rng = crate::seeded_rng(options.seed, &[0x7157, it as u64]);
        let t = candidates[rng.random_range(0..candidates.len())];
        let grad = cism_gradient(&out.color, &masks, concepts, t, interval, predictor, &schedule)?;
        if !grad.is_finite() {
            return Err(PipelineError::NonFinite {
                what: "pixel gradient",
                iteration: it,
            });
        }
        let grads = raster.backward(&cloud, &cam, &grad)?;
        if !grads.is_finite() {
            return Err(PipelineError::NonFinite {
                what: "parameter gradient",
                iteration: it,
            });
        }
        opt.step(&mut cloud, &grads);
        if cfg.prune_every > 0 && (it + 1) % cfg.prune_every == 0 {
            let keep = prune(&mut cloud, cfg.prune_opacity);
            pruned += keep.iter().filter(|&&k| !k).count();
            opt.retain(&keep);
        }
        let done = it + 1;
        if done == cfg.iters || (cfg.log_every > 0 && done % cfg.log_every == 0) {
            record(&cloud, done, &mut metrics);
        }
        log::debug!("iteration {done}: t = {t}, {} Gaussians", cloud.len());
    }
    Ok(Stage2Output { cloud, metrics, pruned })
}

/// The default text embedder used by the pipeline.
pub fn default_embedder() -> HashEmbedder {
    HashEmbedder::default()
}

/// Gray placeholder image used when a render is requested for an empty
/// view list.
pub fn blank(resolution: usize) -> Image {
    Image::filled(resolution, resolution, &[0.5; 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::parse_scene_spec;

    pub(crate) const TWO_CONCEPTS: &str = r#"
version = 1
global_prompt = "a red sphere next to a blue box"
seed = 7

[[concepts]]
id = 0
concept_prompt = "a C0 sphere"
shape_prompt = "a sphere"
target_color = [0.8, 0.2, 0.2]

[[concepts]]
id = 1
concept_prompt = "a C1 box"
shape_prompt = "a box"
target_color = [0.2, 0.3, 0.8]

[stage2]
iters = 20
"#;

    fn scene() -> SceneSpec {
        parse_scene_spec(TWO_CONCEPTS).unwrap()
    }

    #[test]
    fn stage1_places_each_concept_inside_its_box() {
        let s = scene();
        let out = run_stage1(&s, &Stage1Options::default()).unwrap();
        assert_eq!(out.cloud.label_counts().len(), 2);
        assert!(out.cloud.label_counts().iter().all(|&n| n > 0));
        let layout = out.layout.unwrap();
        for g in &out.cloud.gaussians {
            let b = layout.bbox(g.label).unwrap();
            assert!(g.mu.x >= b.x - 1e-12 && g.mu.x <= b.x + b.w + 1e-12);
            assert!(g.mu.z >= b.z - 1e-12 && g.mu.z <= b.z + b.h + 1e-12);
        }
    }

    #[test]
    fn stage1_is_deterministic() {
        let s = scene();
        let a = run_stage1(&s, &Stage1Options::default()).unwrap();
        let b = run_stage1(&s, &Stage1Options::default()).unwrap();
        assert_eq!(
            a.cloud.to_ply(crate::ply::Encoding::BinaryLittleEndian),
            b.cloud.to_ply(crate::ply::Encoding::BinaryLittleEndian)
        );
    }

    #[test]
    fn camera_sampling() {
        let b = Bounds::default();
        assert_eq!(sample_camera(3, 0, &b, 32), sample_camera(3, 0, &b, 32));
        let mut min_az = f64::INFINITY;
        let mut max_az = f64::NEG_INFINITY;
        for i in 0..1000 {
            let c = sample_camera(3, i, &b, 32);
            let off = (c.position - c.look_at) / (CAMERA_RADIUS * b.extent());
            let el = off.z.asin().to_degrees();
            assert!((-10.0 - 1e-9..=45.0 + 1e-9).contains(&el));
            let az = off.x.atan2(-off.y).to_degrees();
            min_az = min_az.min(az);
            max_az = max_az.max(az);
            assert_eq!(c.look_at, b.center());
        }
        assert!(min_az < -170.0 && max_az > 170.0);
    }

    #[test]
    fn zero_iterations_and_zero_rates() {
        let s = scene();
        let cloud = run_stage1(&s, &Stage1Options::default()).unwrap().cloud;
        let concepts = concept_set(&s, &default_embedder());
        let mut opts = Stage2Options::for_scene(&s);
        let pred = build_predictor(PredictorKind::Target, &s, &concepts, &opts.settings);
        opts.config.iters = 0;
        let out = run_stage2(&cloud, &s, &concepts, pred.as_ref(), &opts).unwrap();
        assert_eq!(out.cloud, cloud);
        assert_eq!(out.metrics.len(), 1);

        opts.config.iters = 5;
        opts.config.log_every = 1;
        opts.config.lr = crate::guidance::LearningRates::zero();
        let out = run_stage2(&cloud, &s, &concepts, pred.as_ref(), &opts).unwrap();
        assert_eq!(out.cloud, cloud);
        assert_eq!(out.metrics.len(), 6);
        for row in &out.metrics {
            assert_eq!(row.masked_l2, out.metrics[0].masked_l2);
        }
    }

    #[test]
    fn turntable_isolation() {
        let s = scene();
        let cloud = run_stage1(&s, &Stage1Options::default()).unwrap().cloud;
        let frames = render_turntable(&cloud, &s.bounds, 4, 32, &RenderSettings::default());
        assert_eq!(frames.len(), 4);
        assert_eq!(
            frames.iter().map(|f| f.azimuth).collect::<Vec<_>>(),
            vec![0.0, 90.0, 180.0, 270.0]
        );
        for f in &frames {
            for (i, iso) in f.isolated.iter().enumerate() {
                for p in 0..iso.alpha.pixels() {
                    for j in 0..2 {
                        let m = iso.concept.data[p * 2 + j];
                        if j != i {
                            assert_eq!(m, 0.0);
                        } else {
                            // Removing the other concept can only reveal more of this one.
                            assert!(m >= f.joint.concept.data[p * 2 + j] - 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn k_mismatch_is_rejected() {
        let s = scene();
        let cloud = GaussianCloud::new(vec![], 3).unwrap();
        let concepts = concept_set(&s, &default_embedder());
        let opts = Stage2Options::for_scene(&s);
        let pred = build_predictor(PredictorKind::Target, &s, &concepts, &opts.settings);
        assert!(matches!(
            run_stage2(&cloud, &s, &concepts, pred.as_ref(), &opts),
            Err(PipelineError::ConceptCount { .. })
        ));
    }
}
