use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::{
    build_predictor, concept_set, default_embedder, render_turntable, run_stage1, run_stage2, InitMode, MetricRow,
    PipelineError, PredictorKind, Stage1Options, Stage2Options,
};
use crate::gaussians::GaussianCloud;
use crate::layout::LayoutProvenance;
use crate::ply::Encoding;
use crate::render::RenderSettings;
use crate::scene::{Bounds, SceneSpec};

/// Number of preview views written after stage 1.
const PREVIEW_VIEWS: usize = 4;

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub stage1: Stage1Options,
    pub predictor: PredictorKind,
    /// Turntable views written after stage 2.
    pub turntable: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            stage1: Stage1Options::default(),
            predictor: PredictorKind::Target,
            turntable: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub scene_hash: String,
    pub seed: u64,
    pub k: usize,
    /// `None` when the layout stage is disabled.
    pub layout_provenance: Option<LayoutProvenance>,
    pub init: InitMode,
    pub predictor: PredictorKind,
    pub selected_candidates: Vec<usize>,
    pub gaussians_stage1: usize,
    pub gaussians_final: usize,
    pub pruned: usize,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub metrics: Vec<MetricRow>,
    pub timings: Timings,
}

impl RunManifest {
    /// Serialized manifest with timings zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> String {
        let mut m = self.clone();
        m.timings = Timings {
            stage1_s: 0.0,
            stage2_s: 0.0,
            total_s: 0.0,
        };
        serde_json::to_string_pretty(&m).expect("manifest serializes")
    }
}

/// `iteration, l2_c0.., psnr_c0..` with one row per recorded iteration.
pub fn write_metrics_csv(rows: &[MetricRow], k: usize, path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend((0..k).map(|i| format!("l2_c{i}")));
    header.extend((0..k).map(|i| format!("psnr_c{i}")));
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.iteration.to_string()];
        rec.extend(row.masked_l2.iter().map(f64::to_string));
        rec.extend(row.masked_psnr.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Tracks written files so that a failed run leaves nothing behind.
struct Outputs {
    root: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn err(&self, rel: &str, e: impl std::fmt::Display) -> PipelineError {
        PipelineError::Output {
            path: self.path(rel).display().to_string(),
            message: e.to_string(),
        }
    }

    fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<(), PipelineError> {
        self.mkdirs(rel)?;
        fs::write(self.path(rel), data).map_err(|e| self.err(rel, e))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn png(&mut self, rel: &str, img: &crate::image::Image) -> Result<(), PipelineError> {
        self.mkdirs(rel)?;
        img.save_png(&self.path(rel)).map_err(|e| self.err(rel, e))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn mkdirs(&self, rel: &str) -> Result<(), PipelineError> {
        if let Some(parent) = self.path(rel).parent() {
            fs::create_dir_all(parent).map_err(|e| self.err(rel, e))?;
        }
        Ok(())
    }

    fn rollback(&self) {
        for rel in &self.written {
            let _ = fs::remove_file(self.path(rel));
        }
        let _ = fs::remove_dir(self.path("renders/stage1"));
        let _ = fs::remove_dir(self.path("renders"));
    }

    /// Color, per-concept masks and isolated renders for each view.
    fn turntable(
        &mut self,
        prefix: &str,
        cloud: &GaussianCloud,
        bounds: &Bounds,
        n: usize,
        resolution: usize,
        settings: &RenderSettings,
    ) -> Result<(), PipelineError> {
        for (v, frame) in render_turntable(cloud, bounds, n, resolution, settings).iter().enumerate() {
            self.png(&format!("{prefix}view_{v:03}.png"), &frame.joint.color)?;
            for (c, mask) in frame.joint.masks.iter().enumerate() {
                self.png(&format!("{prefix}view_{v:03}_mask_c{c}.png"), &mask.to_image())?;
            }
            for (c, iso) in frame.isolated.iter().enumerate() {
                self.png(&format!("{prefix}view_{v:03}_concept_c{c}.png"), &iso.color)?;
            }
        }
        Ok(())
    }
}

/// Run both stages and write every artifact under `out`. On failure the
/// files written so far are removed.
pub fn generate(scene: &SceneSpec, out: &Path, options: &GenerateOptions) -> Result<RunManifest, PipelineError> {
    let mut outputs = Outputs {
        root: out.to_path_buf(),
        written: Vec::new(),
    };
    let result = generate_into(scene, &mut outputs, options);
    if result.is_err() {
        outputs.rollback();
    }
    result
}

fn generate_into(
    scene: &SceneSpec,
    outputs: &mut Outputs,
    options: &GenerateOptions,
) -> Result<RunManifest, PipelineError> {
    let started = Instant::now();
    let stage1 = run_stage1(scene, &options.stage1)?;
    let stage2_options = Stage2Options::for_scene(scene);
    let settings = stage2_options.settings;
    let resolution = scene.stage2.resolution;

    outputs.bytes("cloud_stage1.ply", &stage1.cloud.to_ply(Encoding::BinaryLittleEndian))?;
    if let Some(layout) = &stage1.layout {
        outputs.bytes("layout.json", layout.to_json().as_bytes())?;
    }
    outputs.turntable("renders/stage1/", &stage1.cloud, &scene.bounds, PREVIEW_VIEWS, resolution, &settings)?;
    let stage1_s = started.elapsed().as_secs_f64();

    let stage2_started = Instant::now();
    let concepts = concept_set(scene, &default_embedder());
    let predictor = build_predictor(options.predictor, scene, &concepts, &settings);
    let stage2 = run_stage2(&stage1.cloud, scene, &concepts, predictor.as_ref(), &stage2_options)?;
    outputs.bytes("cloud_final.ply", &stage2.cloud.to_ply(Encoding::BinaryLittleEndian))?;
    let csv_path = outputs.path("metrics.csv");
    write_metrics_csv(&stage2.metrics, scene.k(), &csv_path).map_err(|e| outputs.err("metrics.csv", e))?;
    outputs.written.push("metrics.csv".into());
    outputs.turntable("renders/", &stage2.cloud, &scene.bounds, options.turntable, resolution, &settings)?;
    let stage2_s = stage2_started.elapsed().as_secs_f64();

    let mut listed = outputs.written.clone();
    listed.push("manifest.json".into());
    let manifest = RunManifest {
        scene_hash: scene.content_hash(),
        seed: scene.seed,
        k: scene.k(),
        layout_provenance: stage1.layout.as_ref().map(|l| l.provenance),
        init: options.stage1.init,
        predictor: options.predictor,
        selected_candidates: stage1.selected,
        gaussians_stage1: stage1.cloud.len(),
        gaussians_final: stage2.cloud.len(),
        pruned: stage2.pruned,
        outputs: listed,
        metrics: stage2.metrics,
        timings: Timings {
            stage1_s,
            stage2_s,
            total_s: started.elapsed().as_secs_f64(),
        },
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    outputs.bytes("manifest.json", json.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::parse_scene_spec;

    #[test]
    fn every_listed_output_exists() {
        let scene = parse_scene_spec(&super::super::tests::TWO_CONCEPTS.replace("iters = 20", "iters = 3")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = GenerateOptions {
            turntable: 2,
            ..Default::default()
        };
        let m = generate(&scene, dir.path(), &opts).unwrap();
        for rel in &m.outputs {
            assert!(dir.path().join(rel).is_file(), "{rel} missing");
        }
        // 2 views × (color + 2 masks + 2 isolated)
        assert_eq!(m.outputs.iter().filter(|p| p.starts_with("renders/view_")).count(), 10);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("iteration,l2_c0,l2_c1,psnr_c0,psnr_c1\n"));
        assert_eq!(csv.lines().count(), 1 + m.metrics.len());
    }

    #[test]
    fn failed_run_leaves_no_files() {
        let scene = parse_scene_spec(&super::super::tests::TWO_CONCEPTS).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = GenerateOptions {
            stage1: Stage1Options {
                layout: super::super::LayoutSource::Fixture(dir.path().join("no-such-fixtures")),
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(generate(&scene, &dir.path().join("out"), &opts).is_err());
        assert!(!dir.path().join("out").join("cloud_stage1.ply").exists());
    }
}
