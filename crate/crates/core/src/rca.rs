//! Regional concept attention: masked per-concept cross-attention with
//! low-rank concept adapters, aggregated into one feature map.
//!
//! Row convention throughout: features are `n × d` (one row per cell),
//! prompts are `L × d_text` (one row per token), so
//! `Q_i = (𝓜_i ⊙ F)·W_q`, `K_i = p_i·(W_k + λψ_i^k)`, `V_i = p_i·(W_v + λψ_i^v)`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::image::Mask;
use crate::scene::PromptEmbedding;

const ADAPTER_MAGIC: &[u8; 4] = b"CLRA";
const ADAPTER_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RcaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mask of {from_w}x{from_h} cannot be pooled to {to_w}x{to_h} (ratio must be an integer)")]
    Ratio {
        from_w: usize,
        from_h: usize,
        to_w: usize,
        to_h: usize,
    },
    #[error("concept count mismatch: masks carry {masks}, concept set carries {concepts}")]
    ConceptCount { masks: usize, concepts: usize },
    #[error("bad adapter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Image features at attention resolution, one row per cell (row-major
/// over `h × w`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: DMatrix<f64>,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn new(data: DMatrix<f64>, height: usize, width: usize) -> Result<Self, RcaError> {
        if data.nrows() != height * width || data.ncols() == 0 {
            return Err(RcaError::Dimension(format!(
                "feature matrix is {}x{}, expected {} rows and d > 0",
                data.nrows(),
                data.ncols(),
                height * width
            )));
        }
        Ok(FeatureMap { data, height, width })
    }

    /// Seeded Gaussian features with unit-variance entries.
    pub fn seeded(height: usize, width: usize, d: usize, seed: u64) -> Self {
        let data = gaussian_matrix(height * width, d, 1.0, seed, 0xFEA7);
        FeatureMap { data, height, width }
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = crate::seeded_rng(seed, &[stream]);
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

/// Low-rank concept adapter: `ψ^k = A_k·B_k`, `ψ^v = A_v·B_v`, each
/// `d_text × d` with rank at most `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLoRA {
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub a_v: DMatrix<f64>,
    pub b_v: DMatrix<f64>,
}

impl ConceptLoRA {
    /// `A` factors drawn from N(0, 0.02²), `B` factors zero, so a fresh
    /// adapter is a no-op.
    pub fn new(d_text: usize, d: usize, rank: usize, seed: u64) -> Self {
        ConceptLoRA {
            a_k: gaussian_matrix(d_text, rank, 0.02, seed, 0xA0),
            b_k: DMatrix::zeros(rank, d),
            a_v: gaussian_matrix(d_text, rank, 0.02, seed, 0xA1),
            b_v: DMatrix::zeros(rank, d),
        }
    }

    pub fn d_text(&self) -> usize {
        self.a_k.nrows()
    }

    pub fn d(&self) -> usize {
        self.b_k.ncols()
    }

    pub fn rank(&self) -> usize {
        self.a_k.ncols()
    }

    pub fn psi_k(&self) -> DMatrix<f64> {
        &self.a_k * &self.b_k
    }

    pub fn psi_v(&self) -> DMatrix<f64> {
        &self.a_v * &self.b_v
    }

    /// Binary container: `b"CLRA"`, then little-endian `u32` version,
    /// `d_text`, `d`, `r`, then `A_k (d_text×r)`, `B_k (r×d)`,
    /// `A_v (d_text×r)`, `B_v (r×d)` as row-major little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ADAPTER_MAGIC);
        for v in [ADAPTER_VERSION, self.d_text() as u32, self.d() as u32, self.rank() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in [&self.a_k, &self.b_k, &self.a_v, &self.b_v] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RcaError> {
        let mut cursor = bytes;
        let mut magic = [0u8; 4];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| RcaError::Format("truncated header".into()))?;
        if &magic != ADAPTER_MAGIC {
            return Err(RcaError::Format("bad magic".into()));
        }
        let mut header = [0u32; 4];
        for h in &mut header {
            let mut b = [0u8; 4];
            cursor
                .read_exact(&mut b)
                .map_err(|_| RcaError::Format("truncated header".into()))?;
            *h = u32::from_le_bytes(b);
        }
        let [version, d_text, d, r] = header.map(|v| v as usize);
        if version != ADAPTER_VERSION as usize {
            return Err(RcaError::Format(format!("unsupported version {version}")));
        }
        let expected = 8 * 2 * (d_text * r + r * d);
        if cursor.len() != expected {
            return Err(RcaError::Format(format!(
                "payload is {} bytes, expected {expected}",
                cursor.len()
            )));
        }
        let mut read = |rows: usize, cols: usize| {
            DMatrix::from_row_iterator(
                rows,
                cols,
                (0..rows * cols).map(|_| {
                    let (head, tail) = cursor.split_at(8);
                    cursor = tail;
                    f64::from_le_bytes(head.try_into().expect("8 bytes"))
                }),
            )
        };
        let a_k = read(d_text, r);
        let b_k = read(r, d);
        let a_v = read(d_text, r);
        let b_v = read(r, d);
        Ok(ConceptLoRA { a_k, b_k, a_v, b_v })
    }

    pub fn save(&self, path: &Path) -> Result<(), RcaError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RcaError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Shared projection weights of the cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    /// LoRA scale λ.
    pub lora_scale: f64,
}

impl AttentionWeights {
    /// Entries drawn from N(0, 1/fan_in).
    pub fn seeded(d: usize, d_text: usize, lora_scale: f64, seed: u64) -> Self {
        AttentionWeights {
            w_q: gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), seed, 0x51),
            w_k: gaussian_matrix(d_text, d, 1.0 / (d_text as f64).sqrt(), seed, 0x52),
            w_v: gaussian_matrix(d_text, d, 1.0 / (d_text as f64).sqrt(), seed, 0x53),
            lora_scale,
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_text(&self) -> usize {
        self.w_k.nrows()
    }
}

/// Concept masks and background mask at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub concepts: Vec<Mask>,
    pub background: Mask,
}

impl RegionMasks {
    /// Background is the complement of the union of `concepts`.
    pub fn from_concepts(concepts: Vec<Mask>, width: usize, height: usize) -> Self {
        let mut background = Mask::new(width, height, true);
        for m in &concepts {
            for (b, &c) in background.data.iter_mut().zip(&m.data) {
                *b &= !c;
            }
        }
        RegionMasks { concepts, background }
    }

    pub fn k(&self) -> usize {
        self.concepts.len()
    }

    pub fn width(&self) -> usize {
        self.background.width
    }

    pub fn height(&self) -> usize {
        self.background.height
    }
}

/// Max-pool each concept mask to `(width, height)`: a cell belongs to a
/// concept if any pixel it covers does. The background is recomputed as the
/// complement of the pooled union.
pub fn downsample_masks(masks: &[Mask], width: usize, height: usize) -> Result<RegionMasks, RcaError> {
    let (src_w, src_h) = match masks.first() {
        Some(m) => (m.width, m.height),
        None => return Ok(RegionMasks::from_concepts(vec![], width, height)),
    };
    if width == 0 || height == 0 || src_w % width != 0 || src_h % height != 0 {
        return Err(RcaError::Ratio {
            from_w: src_w,
            from_h: src_h,
            to_w: width,
            to_h: height,
        });
    }
    if masks.iter().any(|m| m.width != src_w || m.height != src_h) {
        return Err(RcaError::Dimension("concept masks differ in size".into()));
    }
    let (rx, ry) = (src_w / width, src_h / height);
    let pooled = masks
        .iter()
        .map(|m| {
            let mut out = Mask::new(width, height, false);
            for y in 0..src_h {
                for x in 0..src_w {
                    if m.get(x, y) {
                        out.set(x / rx, y / ry, true);
                    }
                }
            }
            out
        })
        .collect();
    Ok(RegionMasks::from_concepts(pooled, width, height))
}

fn masked_rows(f: &DMatrix<f64>, mask: &Mask) -> DMatrix<f64> {
    let mut out = f.clone();
    for (r, &keep) in mask.data.iter().enumerate() {
        if !keep {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

/// `Q_i = (𝓜_i ⊙ F)·W_q` for every concept, and `Q_bg` with `𝓜_bg`.
pub fn concept_queries(
    features: &FeatureMap,
    regions: &RegionMasks,
    weights: &AttentionWeights,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>), RcaError> {
    if regions.width() * regions.height() != features.data.nrows() {
        return Err(RcaError::Dimension(format!(
            "masks are {}x{}, features have {} rows",
            regions.width(),
            regions.height(),
            features.data.nrows()
        )));
    }
    if features.dim() != weights.w_q.nrows() {
        return Err(RcaError::Dimension(format!(
            "feature width {} does not match W_q ({} rows)",
            features.dim(),
            weights.w_q.nrows()
        )));
    }
    let q = regions
        .concepts
        .iter()
        .map(|m| masked_rows(&features.data, m) * &weights.w_q)
        .collect();
    let q_bg = masked_rows(&features.data, &regions.background) * &weights.w_q;
    Ok((q, q_bg))
}

/// `K = p·(W_k + λψ^k)`, `V = p·(W_v + λψ^v)`; without an adapter the plain
/// projections are used.
pub fn concept_keys_values(
    prompt: &PromptEmbedding,
    adapter: Option<&ConceptLoRA>,
    weights: &AttentionWeights,
) -> Result<(DMatrix<f64>, DMatrix<f64>), RcaError> {
    let p = prompt.matrix();
    if p.ncols() != weights.d_text() {
        return Err(RcaError::Dimension(format!(
            "prompt width {} does not match d_text {}",
            p.ncols(),
            weights.d_text()
        )));
    }
    match adapter {
        None => Ok((p * &weights.w_k, p * &weights.w_v)),
        Some(a) => {
            if a.d_text() != weights.d_text() || a.d() != weights.d() {
                return Err(RcaError::Dimension(format!(
                    "adapter is {}x{}, weights are {}x{}",
                    a.d_text(),
                    a.d(),
                    weights.d_text(),
                    weights.d()
                )));
            }
            let wk = &weights.w_k + a.psi_k() * weights.lora_scale;
            let wv = &weights.w_v + a.psi_v() * weights.lora_scale;
            Ok((p * wk, p * wv))
        }
    }
}

/// `softmax(Q·Kᵀ/√d)·V` with a row-wise, max-shifted softmax.
pub fn attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q * k.transpose() * scale;
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits * v
}

/// Standard single-prompt cross-attention.
pub fn cross_attention(features: &FeatureMap, prompt: &PromptEmbedding, weights: &AttentionWeights) -> DMatrix<f64> {
    let p = prompt.matrix();
    attention(&(&features.data * &weights.w_q), &(p * &weights.w_k), &(p * &weights.w_v))
}

/// Per-concept prompts and adapters, the background prompt and the null
/// prompt used for the unconditional branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSet {
    pub prompts: Vec<PromptEmbedding>,
    pub adapters: Vec<ConceptLoRA>,
    pub background: PromptEmbedding,
    pub null: PromptEmbedding,
}

/// Which text conditioning feeds the keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Concept prompts `P` and the background prompt.
    Prompt,
    /// The null prompt everywhere; adapters stay active.
    Null,
}

impl ConceptSet {
    pub fn k(&self) -> usize {
        self.prompts.len()
    }

    fn prompt(&self, i: usize, branch: Branch) -> &PromptEmbedding {
        match branch {
            Branch::Prompt => &self.prompts[i],
            Branch::Null => &self.null,
        }
    }

    fn background_prompt(&self, branch: Branch) -> &PromptEmbedding {
        match branch {
            Branch::Prompt => &self.background,
            Branch::Null => &self.null,
        }
    }
}

/// `Â = 𝓜_bg⊙A_bg + Σ_i 𝓜_i⊙A_i`. Each output row sums only the branches
/// whose mask covers it, so rows outside concept `j`'s region never read
/// `A_j`.
pub fn rca_forward(
    features: &FeatureMap,
    regions: &RegionMasks,
    concepts: &ConceptSet,
    branch: Branch,
    weights: &AttentionWeights,
) -> Result<DMatrix<f64>, RcaError> {
    if regions.k() != concepts.k() || concepts.adapters.len() != concepts.k() {
        return Err(RcaError::ConceptCount {
            masks: regions.k(),
            concepts: concepts.k(),
        });
    }
    let (queries, q_bg) = concept_queries(features, regions, weights)?;
    let per_concept: Vec<DMatrix<f64>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let (k, v) = concept_keys_values(concepts.prompt(i, branch), Some(&concepts.adapters[i]), weights)?;
            Ok(attention(q, &k, &v))
        })
        .collect::<Result<_, RcaError>>()?;
    let (k_bg, v_bg) = concept_keys_values(concepts.background_prompt(branch), None, weights)?;
    let a_bg = attention(&q_bg, &k_bg, &v_bg);

    let mut out = DMatrix::zeros(features.data.nrows(), weights.d());
    for r in 0..out.nrows() {
        if regions.background.data[r] {
            let row = a_bg.row(r);
            out.row_mut(r).zip_apply(&row, |o, a| *o += a);
        }
        for (m, a) in regions.concepts.iter().zip(&per_concept) {
            if m.data[r] {
                let row = a.row(r);
                out.row_mut(r).zip_apply(&row, |o, v| *o += v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn prompt(seed: u64, l: usize, d_text: usize) -> PromptEmbedding {
        PromptEmbedding::new(gaussian_matrix(l, d_text, 0.3, seed, 0xBEEF))
    }

    fn random_mask(seed: u64, w: usize, h: usize, p: f64) -> Mask {
        let mut rng = crate::seeded_rng(seed, &[0x3A5C]);
        let mut m = Mask::new(w, h, false);
        for v in &mut m.data {
            *v = rng.random_bool(p);
        }
        m
    }

    fn nonzero_adapter(seed: u64) -> ConceptLoRA {
        let mut a = ConceptLoRA::new(8, 6, 2, seed);
        a.b_k = gaussian_matrix(2, 6, 0.5, seed, 1);
        a.b_v = gaussian_matrix(2, 6, 0.5, seed, 2);
        a
    }

    /// Independent dense oracle: explicit loops, no max shift.
    fn dense_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let d = q.ncols() as f64;
        let mut out = DMatrix::zeros(q.nrows(), v.ncols());
        for i in 0..q.nrows() {
            let scores: Vec<f64> = (0..k.nrows())
                .map(|j| ((0..q.ncols()).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / d.sqrt()).exp())
                .collect();
            let z: f64 = scores.iter().sum();
            for c in 0..v.ncols() {
                out[(i, c)] = (0..k.nrows()).map(|j| scores[j] / z * v[(j, c)]).sum();
            }
        }
        out
    }

    #[test]
    fn downsample_examples() {
        let full = Mask::new(16, 16, true);
        let r = downsample_masks(&[full], 4, 4).unwrap();
        assert!(r.concepts[0].data.iter().all(|&b| b));
        assert!(r.background.data.iter().all(|&b| !b));
        let mut one = Mask::new(4, 4, false);
        one.set(3, 1, true);
        let r = downsample_masks(&[one], 2, 2).unwrap();
        assert_eq!(r.concepts[0].data, vec![false, true, false, false]);
        assert!(matches!(
            downsample_masks(&[Mask::new(10, 10, false)], 4, 4),
            Err(RcaError::Ratio { .. })
        ));
    }

    proptest! {
        #[test]
        fn pooled_union_contains_pooled_of_union(seed in 0u64..10_000) {
            let a = random_mask(seed, 16, 16, 0.1);
            let b = random_mask(seed + 1, 16, 16, 0.1);
            let pooled = downsample_masks(&[a.clone(), b.clone()], 4, 4).unwrap();
            let mut union = Mask::new(16, 16, false);
            for i in 0..union.data.len() {
                union.data[i] = a.data[i] || b.data[i];
            }
            let pooled_union = downsample_masks(&[union], 4, 4).unwrap();
            for i in 0..16 {
                let lhs = pooled.concepts[0].data[i] || pooled.concepts[1].data[i];
                prop_assert!(!pooled_union.concepts[0].data[i] || lhs);
                prop_assert_eq!(pooled.background.data[i], !lhs);
            }
        }
    }

    #[test]
    fn query_examples() {
        let w = AttentionWeights::seeded(6, 8, 1.0, 1);
        let f = FeatureMap::seeded(2, 2, 6, 2);
        let full = RegionMasks::from_concepts(vec![Mask::new(2, 2, true)], 2, 2);
        let (q, q_bg) = concept_queries(&f, &full, &w).unwrap();
        assert_eq!(q[0], &f.data * &w.w_q);
        assert!(q_bg.iter().all(|&v| v == 0.0));
        let half = RegionMasks::from_concepts(vec![random_mask(4, 2, 2, 0.5)], 2, 2);
        let (q, q_bg) = concept_queries(&f, &half, &w).unwrap();
        assert!((&q[0] + q_bg - &f.data * &w.w_q).abs().max() < 1e-12);
    }

    #[test]
    fn key_value_examples() {
        let mut w = AttentionWeights::seeded(6, 8, 0.0, 1);
        let p = prompt(3, 5, 8);
        let a = nonzero_adapter(7);
        let (k0, v0) = concept_keys_values(&p, Some(&a), &w).unwrap();
        assert_eq!(k0, p.matrix() * &w.w_k);
        assert_eq!(v0, p.matrix() * &w.w_v);
        w.lora_scale = 3.0;
        let zero = ConceptLoRA::new(8, 6, 2, 9);
        let (kz, _) = concept_keys_values(&p, Some(&zero), &w).unwrap();
        assert_eq!(kz, p.matrix() * &w.w_k);
        // Rank-1 adapter with known factors against the dense expansion.
        w.lora_scale = 1.0;
        let mut r1 = ConceptLoRA::new(8, 6, 1, 0);
        r1.a_k = DMatrix::from_fn(8, 1, |i, _| (i + 1) as f64 * 0.1);
        r1.b_k = DMatrix::from_fn(1, 6, |_, j| 1.0 - j as f64 * 0.2);
        let (k1, _) = concept_keys_values(&p, Some(&r1), &w).unwrap();
        let mut dense = w.w_k.clone();
        for i in 0..8 {
            for j in 0..6 {
                dense[(i, j)] += (i + 1) as f64 * 0.1 * (1.0 - j as f64 * 0.2);
            }
        }
        assert!((k1 - p.matrix() * dense).abs().max() < 1e-12);
    }

    #[test]
    fn attention_examples() {
        let q = gaussian_matrix(4, 8, 1.0, 1, 0);
        let k1 = gaussian_matrix(1, 8, 1.0, 2, 0);
        let v1 = gaussian_matrix(1, 3, 1.0, 3, 0);
        let a = attention(&q, &k1, &v1);
        for r in 0..4 {
            assert!((a.row(r) - v1.row(0)).abs().max() < 1e-15);
        }
        let k = gaussian_matrix(5, 8, 1.0, 4, 0);
        let v = gaussian_matrix(5, 3, 1.0, 5, 0);
        let a0 = attention(&DMatrix::zeros(4, 8), &k, &v);
        let mean = v.row_mean();
        for r in 0..4 {
            assert!((a0.row(r) - &mean).abs().max() < 1e-12);
        }
        let a = attention(&q, &k, &v);
        assert!((a - dense_attention(&q, &k, &v)).abs().max() < 1e-6);
    }

    fn set(k: usize) -> ConceptSet {
        ConceptSet {
            prompts: (0..k).map(|i| prompt(10 + i as u64, 5, 8)).collect(),
            adapters: (0..k).map(|i| nonzero_adapter(20 + i as u64)).collect(),
            background: prompt(30, 5, 8),
            null: prompt(31, 5, 8),
        }
    }

    #[test]
    fn reduction_to_vanilla_cross_attention() {
        let w = AttentionWeights::seeded(6, 8, 0.0, 1);
        let f = FeatureMap::seeded(4, 4, 6, 2);
        let mut s = set(1);
        s.background = s.prompts[0].clone();
        let regions = RegionMasks::from_concepts(vec![Mask::new(4, 4, true)], 4, 4);
        let rca = rca_forward(&f, &regions, &s, Branch::Prompt, &w).unwrap();
        let vanilla = cross_attention(&f, &s.prompts[0], &w);
        assert!((rca - vanilla).abs().max() < 1e-6);
    }

    #[test]
    fn empty_masks_give_background_attention() {
        let w = AttentionWeights::seeded(6, 8, 1.0, 1);
        let f = FeatureMap::seeded(4, 4, 6, 2);
        let s = set(2);
        let regions = RegionMasks::from_concepts(vec![Mask::new(4, 4, false); 2], 4, 4);
        let rca = rca_forward(&f, &regions, &s, Branch::Prompt, &w).unwrap();
        assert_eq!(rca, cross_attention(&f, &s.background, &w));
    }

    #[test]
    fn disjoint_regions_are_independent() {
        let w = AttentionWeights::seeded(6, 8, 1.0, 1);
        let f = FeatureMap::seeded(4, 4, 6, 2);
        let mut left = Mask::new(4, 4, false);
        let mut right = Mask::new(4, 4, false);
        for y in 0..4 {
            left.set(0, y, true);
            right.set(3, y, true);
        }
        let regions = RegionMasks::from_concepts(vec![left.clone(), right], 4, 4);
        let s = set(2);
        let base = rca_forward(&f, &regions, &s, Branch::Prompt, &w).unwrap();
        let mut perturbed = s.clone();
        perturbed.prompts[1] = prompt(99, 5, 8);
        perturbed.adapters[1] = nonzero_adapter(98);
        let other = rca_forward(&f, &regions, &perturbed, Branch::Prompt, &w).unwrap();
        let mut changed = false;
        for r in 0..16 {
            if left.data[r] {
                assert_eq!(base.row(r), other.row(r));
            } else if base.row(r) != other.row(r) {
                changed = true;
            }
        }
        assert!(changed);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let q = gaussian_matrix(6, 8, 3.0, 1, 0);
        let k = gaussian_matrix(5, 8, 3.0, 2, 0);
        // With V = I the attention output is the softmax matrix itself.
        let p = attention(&q, &k, &DMatrix::identity(5, 5));
        for r in 0..6 {
            assert!((p.row(r).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adapter_container_roundtrip() {
        let a = nonzero_adapter(5);
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"CLRA");
        assert_eq!(bytes.len(), 4 + 16 + 8 * 2 * (8 * 2 + 2 * 6));
        assert_eq!(ConceptLoRA::from_bytes(&bytes).unwrap(), a);
        assert!(ConceptLoRA::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.lora");
        a.save(&path).unwrap();
        assert_eq!(ConceptLoRA::load(&path).unwrap(), a);
    }

    #[test]
    fn concept_count_mismatch_is_an_error() {
        let w = AttentionWeights::seeded(6, 8, 1.0, 1);
        let f = FeatureMap::seeded(4, 4, 6, 2);
        let regions = RegionMasks::from_concepts(vec![Mask::new(4, 4, false)], 4, 4);
        assert!(matches!(
            rca_forward(&f, &regions, &set(2), Branch::Prompt, &w),
            Err(RcaError::ConceptCount { masks: 1, concepts: 2 })
        ));
    }
}
