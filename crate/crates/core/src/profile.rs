//! One-time importance profiling.
//!
//! A head's similarity is the mean token-wise cosine between its V input and
//! its attention output, mapped from [-1, 1] to [0, 1]. Importance is the
//! complement. KV groups average the similarities of their consecutive query
//! heads before taking the complement; layers use the same pipeline on the
//! residual stream entering and leaving the layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{CacheSet, DEFAULT_SINKS};
use crate::error::{Error, Result};
use crate::io::model_checksum;
use crate::model::{Model, ProbeCapture};
use crate::stats::spearman;
use crate::tensor::Matrix;

pub const PROFILE_FORMAT: &str = "bklv-profile-1";
pub const MIN_PROMPT_LEN: usize = 32;
const ZERO_NORM: f64 = 1e-12;

/// Cosine of each row pair; a row with norm below 1e-12 counts as unchanged (1).
pub fn token_cosine_similarities(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cosine of {:?} against {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Shape("cosine over zero tokens".into()));
    }
    Ok(a.iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| {
            let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
            for (p, q) in x.iter().zip(y) {
                let (p, q) = (f64::from(*p), f64::from(*q));
                dot += p * q;
                nx += p * p;
                ny += q * q;
            }
            if nx.sqrt() < ZERO_NORM || ny.sqrt() < ZERO_NORM {
                1.0
            } else {
                (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// `(mean cosine + 1) / 2`.
pub fn normalized_mean_similarity(cosines: &[f64]) -> f64 {
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    (mean + 1.0) / 2.0
}

pub fn head_similarity(v_in: &Matrix, attn_out: &Matrix) -> Result<f64> {
    Ok(normalized_mean_similarity(&token_cosine_similarities(
        v_in, attn_out,
    )?))
}

pub fn head_importance(similarity: f64) -> f64 {
    1.0 - similarity
}

pub fn layer_similarity(layer_in: &Matrix, layer_out: &Matrix) -> Result<f64> {
    head_similarity(layer_in, layer_out)
}

/// `1 - mean(similarities)` over each run of `group_size` consecutive heads.
pub fn group_kv_importance(head_sims: &[Vec<f64>], group_size: usize) -> Result<Vec<Vec<f64>>> {
    head_sims
        .iter()
        .enumerate()
        .map(|(l, row)| {
            if group_size == 0 || row.len() % group_size != 0 {
                return Err(Error::Shape(format!(
                    "layer {l}: {} heads not divisible into groups of {group_size}",
                    row.len()
                )));
            }
            Ok(row
                .chunks(group_size)
                .map(|g| 1.0 - g.iter().sum::<f64>() / group_size as f64)
                .collect())
        })
        .collect()
}

/// Per-token cosine similarities of one prompt, `[layer][token][q_head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenHeatmap {
    pub prompt_id: String,
    pub layers: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub format: String,
    pub model_id: String,
    pub prompt_ids: Vec<String>,
    pub group_size: usize,
    /// layer × q_head, in [0, 1].
    pub head_similarity: Vec<Vec<f64>>,
    /// layer × kv_group, in [0, 1].
    pub kv_importance: Vec<Vec<f64>>,
    pub layer_similarity: Vec<f64>,
    pub layer_importance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_similarity: Option<Vec<TokenHeatmap>>,
}

impl ImportanceProfile {
    pub fn num_layers(&self) -> usize {
        self.head_similarity.len()
    }

    /// Indices of the `k` most and least important heads of `layer`.
    pub fn extreme_heads(&self, layer: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
        let row = &self.head_similarity[layer];
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let k = k.min(row.len());
        let most = idx[..k].to_vec();
        let least = idx[idx.len() - k..].iter().rev().copied().collect();
        (most, least)
    }
}

#[derive(Debug, Clone)]
pub struct ProfileOptions {
    pub min_prompt_len: usize,
    pub keep_token_heatmaps: bool,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            min_prompt_len: MIN_PROMPT_LEN,
            keep_token_heatmaps: false,
        }
    }
}

pub fn prompt_id(tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

struct PromptStats {
    head_sims: Vec<Vec<f64>>,
    layer_sims: Vec<f64>,
    heatmap: Option<Vec<Vec<Vec<f64>>>>,
}

fn prompt_stats(probes: &ProbeCapture, keep_heatmap: bool) -> Result<PromptStats> {
    let mut head_sims = Vec::with_capacity(probes.heads.len());
    let mut heatmap = keep_heatmap.then(Vec::new);
    for layer in &probes.heads {
        let cos: Vec<Vec<f64>> = layer
            .iter()
            .map(|h| token_cosine_similarities(&h.v_in, &h.output))
            .collect::<Result<_>>()?;
        head_sims.push(cos.iter().map(|c| normalized_mean_similarity(c)).collect());
        if let Some(hm) = heatmap.as_mut() {
            let tokens = cos.first().map_or(0, Vec::len);
            hm.push(
                (0..tokens)
                    .map(|t| cos.iter().map(|c| c[t]).collect())
                    .collect(),
            );
        }
    }
    let layer_sims = probes
        .layers
        .iter()
        .map(|lp| layer_similarity(&lp.input, &lp.output))
        .collect::<Result<_>>()?;
    Ok(PromptStats {
        head_sims,
        layer_sims,
        heatmap,
    })
}

pub fn profile_model(model: &Model, prompts: &[Vec<u32>]) -> Result<ImportanceProfile> {
    profile_model_with(model, prompts, &ProfileOptions::default())
}

/// Profiles every prompt on fresh full-size caches and averages the
/// per-head similarities across prompts (unweighted).
pub fn profile_model_with(
    model: &Model,
    prompts: &[Vec<u32>],
    opts: &ProfileOptions,
) -> Result<ImportanceProfile> {
    if prompts.is_empty() {
        return Err(Error::Input("no profiling prompts".into()));
    }
    if let Some((i, p)) = prompts
        .iter()
        .enumerate()
        .find(|(_, p)| p.len() < opts.min_prompt_len.max(1))
    {
        return Err(Error::Input(format!(
            "prompt {i} has {} tokens; profiling needs at least {}",
            p.len(),
            opts.min_prompt_len.max(1)
        )));
    }
    let cfg = model.config();
    let per_prompt: Vec<PromptStats> = prompts
        .par_iter()
        .map(|p| {
            let budget = cfg.max_context.max(p.len());
            let mut caches = CacheSet::uniform(cfg, DEFAULT_SINKS.min(budget - 1), budget)?;
            let out = model.forward_chunk(p, &mut caches, true)?;
            prompt_stats(&out.probes.expect("capture requested"), opts.keep_token_heatmaps)
        })
        .collect::<Result<_>>()?;

    let n = per_prompt.len() as f64;
    let mut head_similarity = vec![vec![0.0; cfg.num_q_heads]; cfg.num_layers];
    let mut layer_similarity = vec![0.0; cfg.num_layers];
    for s in &per_prompt {
        for (acc, row) in head_similarity.iter_mut().zip(&s.head_sims) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for (a, v) in layer_similarity.iter_mut().zip(&s.layer_sims) {
            *a += v;
        }
    }
    head_similarity
        .iter_mut()
        .flatten()
        .chain(layer_similarity.iter_mut())
        .for_each(|v| *v /= n);

    let kv_importance = group_kv_importance(&head_similarity, cfg.group_size())?;
    let layer_importance = layer_similarity.iter().map(|s| head_importance(*s)).collect();
    let prompt_ids: Vec<String> = prompts.iter().map(|p| prompt_id(p)).collect();
    let per_token_similarity = opts.keep_token_heatmaps.then(|| {
        per_prompt
            .into_iter()
            .zip(&prompt_ids)
            .map(|(s, id)| TokenHeatmap {
                prompt_id: id.clone(),
                layers: s.heatmap.unwrap_or_default(),
            })
            .collect()
    });

    Ok(ImportanceProfile {
        format: PROFILE_FORMAT.to_string(),
        model_id: model_checksum(model),
        prompt_ids,
        group_size: cfg.group_size(),
        head_similarity,
        kv_importance,
        layer_similarity,
        layer_importance,
        per_token_similarity,
    })
}

/// Per-layer Spearman correlation of head similarities; a layer with no
/// rank variance on either side reports 0.
pub fn rank_correlation(a: &ImportanceProfile, b: &ImportanceProfile) -> Result<Vec<f64>> {
    if a.head_similarity.len() != b.head_similarity.len()
        || a
            .head_similarity
            .iter()
            .zip(&b.head_similarity)
            .any(|(x, y)| x.len() != y.len())
    {
        return Err(Error::Shape(
            "profiles have different layer/head dimensions".into(),
        ));
    }
    Ok(a.head_similarity
        .iter()
        .zip(&b.head_similarity)
        .map(|(x, y)| spearman(x, y).unwrap_or(0.0))
        .collect())
}
