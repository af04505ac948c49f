//! Layout controllers: the HTTP client for an LLM endpoint, a replaying
//! fixture store keyed by request hash, and the deterministic fallback.
//!
//! Request body (JSON, `POST`):
//!
//! ```json
//! { "instruction": "...",
//!   "examples": [ { "case": "...", "prompt": "...", "concepts": [...], "response": { "boxes": [...] } } ],
//!   "prompt": "A C0 dog sitting next to a C1 cat",
//!   "concepts": [ { "id": 0, "class_prompt": "a dog" } ],
//!   "bounds": { "w": 1.0, "d": 1.0, "h": 1.0 } }
//! ```
//!
//! Response body (JSON, strict):
//!
//! ```json
//! { "boxes": [ { "concept_id": 0, "bbox": [X, Y, Z, W, D, H] } ] }
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    fallback_layout, validate_layout, Bbox3D, LayoutError, LayoutPlan, LayoutProvenance,
};
use crate::scene::{Bounds, SceneSpec};

const INSTRUCTION: &str = "You place objects in a 3D scene. The world is an axis-aligned box \
with width W along x, depth D along y and height H along z (z is up). For every listed \
concept return one bounding box [X, Y, Z, W_i, D_i, H_i] where (X, Y, Z) is the lowest-left \
corner. Boxes must lie inside the world, objects rest on the ground (Z = 0) unless the prompt \
says otherwise, and relative sizes and positions must follow the prompt. Answer with JSON \
only: {\"boxes\": [{\"concept_id\": <id>, \"bbox\": [X, Y, Z, W_i, D_i, H_i]}]}.";

const IN_CONTEXT: [&str; 3] = [
    include_str!("../../assets/in_context/multiple_subjects.json"),
    include_str!("../../assets/in_context/property_change.json"),
    include_str!("../../assets/in_context/interaction.json"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestConcept {
    pub id: usize,
    pub class_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InContextExample {
    pub case: String,
    pub prompt: String,
    pub concepts: Vec<RequestConcept>,
    pub response: LayoutResponse,
}

impl InContextExample {
    /// The three shipped examples: multiple subjects, property change and
    /// interaction.
    pub fn builtin() -> Vec<InContextExample> {
        IN_CONTEXT
            .iter()
            .map(|s| serde_json::from_str(s).expect("builtin in-context examples are valid"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutRequest {
    pub instruction: String,
    pub examples: Vec<InContextExample>,
    pub prompt: String,
    pub concepts: Vec<RequestConcept>,
    pub bounds: Bounds,
}

impl LayoutRequest {
    pub fn for_scene(scene: &SceneSpec) -> Self {
        LayoutRequest {
            instruction: INSTRUCTION.to_string(),
            examples: InContextExample::builtin(),
            prompt: scene.global_prompt.clone(),
            concepts: scene
                .concepts
                .iter()
                .map(|c| RequestConcept {
                    id: c.id,
                    class_prompt: c.class_prompt.clone(),
                })
                .collect(),
            bounds: scene.bounds,
        }
    }

    pub fn body(&self) -> String {
        serde_json::to_string(self).expect("requests serialize")
    }

    /// Hex SHA-256 of the request body; the fixture store key.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.body().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseBox {
    pub concept_id: usize,
    pub bbox: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutResponse {
    pub boxes: Vec<ResponseBox>,
}

impl LayoutResponse {
    pub fn parse(body: &str) -> Result<Self, LayoutError> {
        serde_json::from_str(body).map_err(|e| LayoutError::Schema(e.to_string()))
    }

    /// Schema-level checks: finite values, positive dimensions and exactly
    /// one box per concept id in `0..k`.
    pub fn into_boxes(self, k: usize) -> Result<Vec<Bbox3D>, LayoutError> {
        let mut seen = vec![false; k];
        let mut boxes = Vec::with_capacity(k);
        for rb in self.boxes {
            if rb.concept_id >= k {
                return Err(LayoutError::Schema(format!("unknown concept id {}", rb.concept_id)));
            }
            if std::mem::replace(&mut seen[rb.concept_id], true) {
                return Err(LayoutError::Schema(format!("duplicate box for concept {}", rb.concept_id)));
            }
            if rb.bbox.iter().any(|v| !v.is_finite()) {
                return Err(LayoutError::Schema(format!("non-finite value in box {}", rb.concept_id)));
            }
            if let Some((name, v)) = ["W", "D", "H"]
                .iter()
                .zip(&rb.bbox[3..])
                .find(|(_, v)| **v <= 0.0)
            {
                return Err(LayoutError::Schema(format!(
                    "box {} has non-positive {name}_i = {v}",
                    rb.concept_id
                )));
            }
            boxes.push(Bbox3D::from_array(rb.concept_id, rb.bbox));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(LayoutError::Schema(format!("no box for concept {missing}")));
        }
        boxes.sort_by_key(|b| b.concept_id);
        Ok(boxes)
    }
}

pub trait LayoutController {
    fn provenance(&self) -> LayoutProvenance;
    fn propose(&self, request: &LayoutRequest) -> Result<LayoutResponse, LayoutError>;
}

/// Produces the deterministic fallback plan as if it were a response.
pub struct FallbackController;

impl LayoutController for FallbackController {
    fn provenance(&self) -> LayoutProvenance {
        LayoutProvenance::Fallback
    }

    fn propose(&self, request: &LayoutRequest) -> Result<LayoutResponse, LayoutError> {
        let plan = super::fallback_boxes(request.concepts.len(), &request.bounds);
        Ok(LayoutResponse {
            boxes: plan
                .boxes
                .iter()
                .map(|b| ResponseBox {
                    concept_id: b.concept_id,
                    bbox: b.to_array(),
                })
                .collect(),
        })
    }
}

/// Replays responses recorded under `<dir>/<request-hash>.json`.
pub struct FixtureController {
    pub dir: PathBuf,
}

impl FixtureController {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureController { dir: dir.into() }
    }

    pub fn path_for(&self, request: &LayoutRequest) -> PathBuf {
        fixture_path(&self.dir, request)
    }
}

fn fixture_path(dir: &Path, request: &LayoutRequest) -> PathBuf {
    dir.join(format!("{}.json", request.hash()))
}

impl LayoutController for FixtureController {
    fn provenance(&self) -> LayoutProvenance {
        LayoutProvenance::Fixture
    }

    fn propose(&self, request: &LayoutRequest) -> Result<LayoutResponse, LayoutError> {
        let path = self.path_for(request);
        let body = std::fs::read_to_string(&path).map_err(|_| LayoutError::FixtureMissing {
            hash: request.hash(),
            dir: self.dir.display().to_string(),
        })?;
        LayoutResponse::parse(&body)
    }
}

/// Posts the request to an LLM-backed endpoint. The API key, if any, is
/// read from the environment variable `api_key_env` and sent as a bearer
/// token. With `record_dir` set, raw response bodies are stored as fixtures.
pub struct HttpController {
    pub url: String,
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub record_dir: Option<PathBuf>,
}

impl HttpController {
    pub fn new(url: impl Into<String>) -> Self {
        HttpController {
            url: url.into(),
            api_key_env: Some("LAYOUT_API_KEY".into()),
            timeout: Duration::from_secs(60),
            record_dir: None,
        }
    }
}

impl LayoutController for HttpController {
    fn provenance(&self) -> LayoutProvenance {
        LayoutProvenance::Llm
    }

    fn propose(&self, request: &LayoutRequest) -> Result<LayoutResponse, LayoutError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut call = agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = self
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
        {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send(request.body())
            .map_err(|e| LayoutError::Transport(e.to_string()))?;
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LayoutError::Transport(e.to_string()))?;
        let parsed = LayoutResponse::parse(&body)?;
        if let Some(dir) = &self.record_dir {
            std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(fixture_path(dir, request), &body))
                .map_err(|e| LayoutError::Transport(format!("recording fixture: {e}")))?;
        }
        Ok(parsed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayoutOptions {
    /// Use the fallback layout when the controller cannot be reached.
    pub fallback_on_transport_error: bool,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        LayoutOptions {
            fallback_on_transport_error: true,
        }
    }
}

/// Query the controller, check the response, and repair containment
/// violations once by clamping boxes into the world bounds.
pub fn generate_layout(
    scene: &SceneSpec,
    controller: &dyn LayoutController,
    options: LayoutOptions,
) -> Result<LayoutPlan, LayoutError> {
    let request = LayoutRequest::for_scene(scene);
    let response = match controller.propose(&request) {
        Ok(r) => r,
        Err(e @ (LayoutError::Transport(_) | LayoutError::FixtureMissing { .. })) => {
            if options.fallback_on_transport_error {
                log::warn!("layout controller unavailable ({e}); using fallback layout");
                return Ok(fallback_layout(scene));
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let k = scene.k();
    let mut plan = LayoutPlan {
        boxes: response.into_boxes(k)?,
        provenance: controller.provenance(),
    };
    let report = validate_layout(&plan, &scene.bounds, k);
    if report.is_valid() {
        return Ok(plan);
    }
    log::warn!("layout invalid ({report}); clamping boxes into bounds");
    plan.boxes = plan.boxes.iter().map(|b| b.clamped(&scene.bounds)).collect();
    let report = validate_layout(&plan, &scene.bounds, k);
    if report.is_valid() {
        Ok(plan)
    } else {
        Err(LayoutError::Invalid(report.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::parse_scene_spec;

    fn two_concepts() -> SceneSpec {
        parse_scene_spec(
            r#"version = 1
global_prompt = "A C0 dog next to a C1 cat"
[[concepts]]
id = 0
class_prompt = "a dog"
concept_prompt = "A C0 dog next to a cat"
[[concepts]]
id = 1
class_prompt = "a cat"
concept_prompt = "A C1 cat"
"#,
        )
        .unwrap()
    }

    struct Canned(&'static str);

    impl LayoutController for Canned {
        fn provenance(&self) -> LayoutProvenance {
            LayoutProvenance::Llm
        }
        fn propose(&self, _: &LayoutRequest) -> Result<LayoutResponse, LayoutError> {
            LayoutResponse::parse(self.0)
        }
    }

    struct Down;

    impl LayoutController for Down {
        fn provenance(&self) -> LayoutProvenance {
            LayoutProvenance::Llm
        }
        fn propose(&self, _: &LayoutRequest) -> Result<LayoutResponse, LayoutError> {
            Err(LayoutError::Transport("connection refused".into()))
        }
    }

    #[test]
    fn builtin_examples_cover_three_cases() {
        let ex = InContextExample::builtin();
        let cases: Vec<&str> = ex.iter().map(|e| e.case.as_str()).collect();
        assert_eq!(cases, ["multiple_subjects", "property_change", "interaction"]);
        for e in &ex {
            assert_eq!(e.response.boxes.len(), e.concepts.len());
        }
    }

    #[test]
    fn request_hash_is_stable_and_prompt_sensitive() {
        let s = two_concepts();
        let a = LayoutRequest::for_scene(&s);
        assert_eq!(a.hash(), LayoutRequest::for_scene(&s).hash());
        let mut other = s.clone();
        other.global_prompt.push('!');
        assert_ne!(a.hash(), LayoutRequest::for_scene(&other).hash());
    }

    #[test]
    fn negative_width_is_schema_violation() {
        let c = Canned(r#"{"boxes":[{"concept_id":0,"bbox":[0,0,0,-0.1,0.5,0.5]},{"concept_id":1,"bbox":[0.5,0,0,0.4,0.5,0.5]}]}"#);
        let err = generate_layout(&two_concepts(), &c, LayoutOptions::default()).unwrap_err();
        assert!(matches!(err, LayoutError::Schema(_)), "{err}");
    }

    #[test]
    fn missing_box_and_extra_fields_are_schema_violations() {
        let missing = Canned(r#"{"boxes":[{"concept_id":0,"bbox":[0,0,0,0.1,0.5,0.5]}]}"#);
        assert!(matches!(
            generate_layout(&two_concepts(), &missing, LayoutOptions::default()),
            Err(LayoutError::Schema(_))
        ));
        let extra = Canned(r#"{"boxes":[], "note": "hi"}"#);
        assert!(matches!(
            generate_layout(&two_concepts(), &extra, LayoutOptions::default()),
            Err(LayoutError::Schema(_))
        ));
    }

    #[test]
    fn overhanging_boxes_are_clamped_once() {
        let c = Canned(r#"{"boxes":[{"concept_id":0,"bbox":[-0.1,0.2,0,0.5,0.5,0.5]},{"concept_id":1,"bbox":[0.7,0.2,0,0.5,0.5,0.5]}]}"#);
        let plan = generate_layout(&two_concepts(), &c, LayoutOptions::default()).unwrap();
        assert_eq!(plan.boxes[0].x, 0.0);
        assert_eq!(plan.boxes[1].x, 0.5);
        assert_eq!(plan.provenance, LayoutProvenance::Llm);
    }

    #[test]
    fn transport_errors_fall_back_when_allowed() {
        let s = two_concepts();
        let plan = generate_layout(&s, &Down, LayoutOptions::default()).unwrap();
        assert_eq!(plan, fallback_layout(&s));
        let strict = LayoutOptions {
            fallback_on_transport_error: false,
        };
        assert!(matches!(generate_layout(&s, &Down, strict), Err(LayoutError::Transport(_))));
    }

    #[test]
    fn fallback_controller_matches_fallback_rule() {
        let s = two_concepts();
        let plan = generate_layout(&s, &FallbackController, LayoutOptions::default()).unwrap();
        assert_eq!(plan, fallback_layout(&s));
    }
}
