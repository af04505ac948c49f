//! Scene files: the concepts, prompts, world bounds and stage-2 settings that
//! drive a run.
//!
//! Scene files are TOML with an explicit `version` field:
//!
//! ```toml
//! version = 1
//! global_prompt = "A C0 dog sitting next to a C1 cat"
//! seed = 0
//!
//! [bounds]
//! w = 1.0
//! d = 1.0
//! h = 1.0
//!
//! [[concepts]]
//! id = 0
//! class_prompt = "a dog"
//! concept_prompt = "A C0 dog sitting next to a cat"
//! shape_prompt = "a dog"
//!
//! [stage2]
//! tau = 0.5
//! lambda = 1.0
//! delta_t = 200
//! iters = 500
//! resolution = 64
//! ```
//!
//! Everything except `version`, `global_prompt` and `concepts` has a default.

mod embedding;

pub use embedding::{HashEmbedder, PromptEmbedding, TextEmbedder, BOS_TOKEN, EOS_TOKEN};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::guidance::GuidanceConfig;

/// Scene file format version understood by this build.
pub const SCENE_VERSION: u32 = 1;
/// Upper limit on concepts per scene.
pub const MAX_CONCEPTS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("scene parse error: {0}")]
    Syntax(String),
    #[error("line {line}: {field}: {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unsupported scene version {0} (expected {SCENE_VERSION})")]
    Version(u32),
    #[error("line {line}: duplicate concept id {id}")]
    DuplicateConceptId { id: usize, line: usize },
    #[error("scene must declare between 1 and {MAX_CONCEPTS} concepts, found {0}")]
    ConceptCount(usize),
    #[error("cannot read scene file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Extent of the world box along x (width), y (depth) and z (height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub w: f64,
    pub d: f64,
    pub h: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            w: 1.0,
            d: 1.0,
            h: 1.0,
        }
    }
}

impl Bounds {
    pub fn new(w: f64, d: f64, h: f64) -> Self {
        Bounds { w, d, h }
    }

    pub fn center(&self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.w / 2.0, self.d / 2.0, self.h / 2.0)
    }

    /// Longest side, used to scale position learning rates.
    pub fn extent(&self) -> f64 {
        self.w.max(self.d).max(self.h)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Bounds::new(self.w * factor, self.d * factor, self.h * factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: usize,
    pub class_prompt: String,
    /// Decomposed prompt carrying the concept token, e.g. `"A C1 motorbike"`.
    pub concept_prompt: String,
    /// Prompt handed to the shape generator.
    pub shape_prompt: String,
    pub adapter_seed: u64,
    /// Target color used by the target-oracle noise predictor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_color: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub version: u32,
    pub global_prompt: String,
    pub seed: u64,
    pub bounds: Bounds,
    pub concepts: Vec<ConceptSpec>,
    pub stage2: GuidanceConfig,
}

impl SceneSpec {
    /// Number of concepts `k`.
    pub fn k(&self) -> usize {
        self.concepts.len()
    }

    pub fn concept(&self, id: usize) -> Option<&ConceptSpec> {
        self.concepts.iter().find(|c| c.id == id)
    }

    /// Serialize back to the scene file format. `parse_scene_spec` of the
    /// result yields `self` again.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec is always representable as TOML")
    }

    /// Stable content hash (hex SHA-256 of the canonical serialization).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every invariant a parsed spec guarantees.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.version != SCENE_VERSION {
            return Err(SceneError::Version(self.version));
        }
        let k = self.concepts.len();
        if k == 0 || k > MAX_CONCEPTS {
            return Err(SceneError::ConceptCount(k));
        }
        for (name, v) in [("bounds.w", self.bounds.w), ("bounds.d", self.bounds.d), ("bounds.h", self.bounds.h)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be a positive length, got {v}")));
            }
        }
        let mut seen = vec![false; k];
        for (i, c) in self.concepts.iter().enumerate() {
            if c.id >= k {
                return Err(invalid(
                    format!("concepts[{i}].id"),
                    format!("concept ids must be contiguous 0..{}, got {}", k - 1, c.id),
                ));
            }
            if seen[c.id] {
                return Err(SceneError::DuplicateConceptId { id: c.id, line: 0 });
            }
            seen[c.id] = true;
            if c.concept_prompt.trim().is_empty() {
                return Err(invalid(format!("concepts[{i}].concept_prompt"), "must not be empty"));
            }
            if let Some(rgb) = c.target_color {
                if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(invalid(format!("concepts[{i}].target_color"), "channels must lie in [0,1]"));
                }
            }
        }
        self.stage2
            .validate()
            .map_err(|message| invalid("stage2", message))?;
        Ok(())
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

// Deserialization goes through a raw mirror so that concept ids keep their
// source spans for diagnostics and optional fields receive defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    version: u32,
    global_prompt: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    bounds: Bounds,
    #[serde(default)]
    concepts: Vec<RawConcept>,
    #[serde(default)]
    stage2: GuidanceConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConcept {
    id: toml::Spanned<usize>,
    #[serde(default)]
    class_prompt: String,
    concept_prompt: String,
    #[serde(default)]
    shape_prompt: Option<String>,
    #[serde(default)]
    adapter_seed: Option<u64>,
    #[serde(default)]
    target_color: Option<[f64; 3]>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parse and validate a scene file.
pub fn parse_scene_spec(text: &str) -> Result<SceneSpec, SceneError> {
    let raw: RawScene = toml::from_str(text).map_err(|e| match e.span() {
        Some(span) => SceneError::Field {
            line: line_of(text, span.start),
            field: "scene".into(),
            message: e.message().to_string(),
        },
        None => SceneError::Syntax(e.to_string()),
    })?;
    if raw.version != SCENE_VERSION {
        return Err(SceneError::Version(raw.version));
    }
    let k = raw.concepts.len();
    if k == 0 || k > MAX_CONCEPTS {
        return Err(SceneError::ConceptCount(k));
    }
    let mut first_line: BTreeMap<usize, usize> = BTreeMap::new();
    let mut concepts = Vec::with_capacity(k);
    for rc in raw.concepts {
        let id = *rc.id.get_ref();
        let line = line_of(text, rc.id.span().start);
        if first_line.insert(id, line).is_some() {
            return Err(SceneError::DuplicateConceptId { id, line });
        }
        if id >= k {
            return Err(SceneError::Field {
                line,
                field: "concepts.id".into(),
                message: format!("concept ids must be contiguous 0..{}, got {id}", k - 1),
            });
        }
        let shape_prompt = rc.shape_prompt.unwrap_or_else(|| rc.class_prompt.clone());
        concepts.push(ConceptSpec {
            id,
            class_prompt: rc.class_prompt,
            concept_prompt: rc.concept_prompt,
            shape_prompt,
            adapter_seed: rc.adapter_seed.unwrap_or(id as u64),
            target_color: rc.target_color,
        });
    }
    concepts.sort_by_key(|c| c.id);
    let spec = SceneSpec {
        version: raw.version,
        global_prompt: raw.global_prompt,
        seed: raw.seed,
        bounds: raw.bounds,
        concepts,
        stage2: raw.stage2,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene_spec(&text)
}

/// Embedding of the null prompt: `<BOS>` followed by `<EOS>` up to the
/// embedder's maximum token length.
pub fn null_prompt_embedding(embedder: &dyn TextEmbedder) -> PromptEmbedding {
    let len = embedder.max_tokens();
    let mut tokens = Vec::with_capacity(len);
    tokens.push(BOS_TOKEN.to_string());
    tokens.resize(len, EOS_TOKEN.to_string());
    embedder.embed_tokens(&tokens)
}
