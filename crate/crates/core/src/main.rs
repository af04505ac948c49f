use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use conceptsplat::gaussians::GaussianCloud;
use conceptsplat::layout::{validate_layout, LayoutController, LayoutRequest};
use conceptsplat::pipeline::{
    generate, render_turntable, GenerateOptions, InitMode, LayoutSource, PredictorKind, ShapeSource, Stage1Options,
};
use conceptsplat::render::RenderSettings;
use conceptsplat::scene::{load_scene_spec, Bounds};

#[derive(Parser)]
#[command(name = "conceptsplat", version, about = "Multi-concept text-to-3D with concept-labeled Gaussians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Llm,
    Fixture,
    Fallback,
}

#[derive(Subcommand)]
enum Command {
    /// Run layout, initialization and guided refinement; write all artifacts.
    Generate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "fallback")]
        layout: LayoutArg,
        /// Directory of recorded layout responses.
        #[arg(long, default_value = "fixtures/layout")]
        fixtures: PathBuf,
        /// Layout endpoint for `--layout llm`.
        #[arg(long, env = "CONCEPTSPLAT_LLM_URL")]
        llm_url: Option<String>,
        /// Record live layout responses into the fixture directory.
        #[arg(long)]
        record: bool,
        /// `procedural`, `file:<path>` or `external:<command>`.
        #[arg(long, default_value = "procedural")]
        shape_source: String,
        #[arg(long, value_enum, default_value = "target")]
        predictor: PredictorArg,
        /// Skip the layout stage and start every concept from a shared random ball.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        delta_t: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        t_min: Option<f64>,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 8)]
        turntable: usize,
    },
    /// Render a turntable of a Gaussian PLY.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long, default_value_t = 8)]
        turntable: usize,
        #[arg(long, default_value = "renders")]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
    },
    /// Parse and check a scene file, and its fixture layout if one exists.
    Validate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "fixtures/layout")]
        fixtures: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Target,
    Affine,
}

fn parse_shape_source(s: &str) -> Result<ShapeSource> {
    if s == "procedural" {
        Ok(ShapeSource::Procedural)
    } else if let Some(path) = s.strip_prefix("file:") {
        Ok(ShapeSource::File(path.into()))
    } else if let Some(cmd) = s.strip_prefix("external:") {
        Ok(ShapeSource::External(cmd.into()))
    } else {
        bail!("unknown shape source `{s}` (expected procedural, file:<path> or external:<command>)")
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate {
            scene,
            out,
            layout,
            fixtures,
            llm_url,
            record,
            shape_source,
            predictor,
            random_init,
            seed,
            iters,
            delta_t,
            tau,
            lambda,
            t_min,
            t_max,
            resolution,
            turntable,
        } => {
            let mut spec = load_scene_spec(&scene)?;
            if let Some(v) = seed {
                spec.seed = v;
            }
            let cfg = &mut spec.stage2;
            if let Some(v) = iters {
                cfg.iters = v;
            }
            if let Some(v) = delta_t {
                cfg.delta_t = v;
            }
            if let Some(v) = tau {
                cfg.tau = v;
            }
            if let Some(v) = lambda {
                cfg.lambda = v;
            }
            if let Some(v) = t_min {
                cfg.t_min = v;
            }
            if let Some(v) = t_max {
                cfg.t_max = v;
            }
            if let Some(v) = resolution {
                cfg.resolution = v;
            }
            spec.validate()?;
            let layout = match layout {
                LayoutArg::Fallback => LayoutSource::Fallback,
                LayoutArg::Fixture => LayoutSource::Fixture(fixtures),
                LayoutArg::Llm => LayoutSource::Llm {
                    url: llm_url.context("--layout llm needs --llm-url or CONCEPTSPLAT_LLM_URL")?,
                    record_dir: record.then_some(fixtures),
                },
            };
            let options = GenerateOptions {
                stage1: Stage1Options {
                    layout,
                    shapes: parse_shape_source(&shape_source)?,
                    init: if random_init { InitMode::RandomSphere } else { InitMode::Layout },
                    ..Default::default()
                },
                predictor: match predictor {
                    PredictorArg::Target => PredictorKind::Target,
                    PredictorArg::Affine => PredictorKind::Affine,
                },
                turntable,
            };
            let manifest = generate(&spec, &out, &options)?;
            if let Some(last) = manifest.metrics.last() {
                for (c, (l2, psnr)) in last.masked_l2.iter().zip(&last.masked_psnr).enumerate() {
                    log::info!("concept {c}: masked L2 {l2:.5}, PSNR {psnr:.2} dB");
                }
            }
            log::info!("wrote {} files to {}", manifest.outputs.len(), out.display());
        }
        Command::Render {
            ply,
            turntable,
            out,
            resolution,
        } => {
            if turntable == 0 {
                bail!("--turntable must be at least 1");
            }
            let bytes = std::fs::read(&ply).with_context(|| format!("reading {}", ply.display()))?;
            let (cloud, warnings) = GaussianCloud::from_ply(&bytes)?;
            for w in warnings {
                log::warn!("{w}");
            }
            let bounds = Bounds::default();
            std::fs::create_dir_all(&out)?;
            let frames = render_turntable(&cloud, &bounds, turntable, resolution, &RenderSettings::default());
            for (v, frame) in frames.iter().enumerate() {
                frame.joint.color.save_png(&out.join(format!("view_{v:03}.png")))?;
                for (c, mask) in frame.joint.masks.iter().enumerate() {
                    mask.to_image().save_png(&out.join(format!("view_{v:03}_mask_c{c}.png")))?;
                }
                for (c, iso) in frame.isolated.iter().enumerate() {
                    iso.color.save_png(&out.join(format!("view_{v:03}_concept_c{c}.png")))?;
                }
            }
            log::info!("rendered {turntable} views of {} Gaussians to {}", cloud.len(), out.display());
        }
        Command::Validate { scene, fixtures } => {
            let spec = load_scene_spec(&scene)?;
            println!("scene ok: {} concepts, hash {}", spec.k(), spec.content_hash());
            let controller = conceptsplat::layout::FixtureController::new(&fixtures);
            let request = LayoutRequest::for_scene(&spec);
            match controller.propose(&request) {
                Ok(response) => {
                    let plan = conceptsplat::layout::LayoutPlan {
                        boxes: response.into_boxes(spec.k())?,
                        provenance: controller.provenance(),
                    };
                    let report = validate_layout(&plan, &spec.bounds, spec.k());
                    let status = if report.is_empty() { "ok".to_string() } else { report.to_string() };
                    println!("fixture layout {}: {status}", request.hash());
                    if !report.is_valid() {
                        bail!("fixture layout is invalid");
                    }
                }
                Err(e) => println!("no fixture layout: {e}"),
            }
        }
    }
    Ok(())
}
