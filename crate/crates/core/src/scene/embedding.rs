use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// A prompt encoded as `L × d_text` token embeddings (one row per token).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding(DMatrix<f64>);

impl PromptEmbedding {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        PromptEmbedding(matrix)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

pub trait TextEmbedder: Send + Sync {
    /// Maximum token length `L`.
    fn max_tokens(&self) -> usize;
    /// Embedding width `d_text`.
    fn dim(&self) -> usize;
    /// Embed an already tokenized, padded sequence of exactly `L` tokens.
    fn embed_tokens(&self, tokens: &[String]) -> PromptEmbedding;

    fn tokenize(&self, prompt: &str) -> Vec<String> {
        let len = self.max_tokens();
        let mut tokens = vec![BOS_TOKEN.to_string()];
        tokens.extend(
            prompt
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase)
                .take(len.saturating_sub(2)),
        );
        tokens.resize(len, EOS_TOKEN.to_string());
        tokens
    }

    fn embed(&self, prompt: &str) -> PromptEmbedding {
        self.embed_tokens(&self.tokenize(prompt))
    }
}

/// Deterministic stand-in for a pretrained text encoder: every token string
/// hashes to a fixed pseudo-random vector, plus a fixed vector per position.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub seed: u64,
    pub dim: usize,
    pub max_tokens: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            seed: 0,
            dim: 32,
            max_tokens: 16,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl HashEmbedder {
    fn vector(&self, stream: u64, key: u64, scale: f64) -> Vec<f64> {
        let mut rng = crate::seeded_rng(self.seed, &[stream, key]);
        let norm = scale / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * norm
            })
            .collect()
    }
}

impl TextEmbedder for HashEmbedder {
    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_tokens(&self, tokens: &[String]) -> PromptEmbedding {
        assert_eq!(tokens.len(), self.max_tokens, "token sequence must be padded to L");
        let mut m = DMatrix::zeros(self.max_tokens, self.dim);
        for (row, token) in tokens.iter().enumerate() {
            let tok = self.vector(1, fnv1a(token.as_bytes()), 1.0);
            let pos = self.vector(2, row as u64, 0.1);
            for c in 0..self.dim {
                m[(row, c)] = tok[c] + pos[c];
            }
        }
        PromptEmbedding(m)
    }
}
