//! Perplexity under budgeted caches, the (t, r) grid search, and the
//! sliding-window layer sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{build_plan, split_equal, AllocParams, AllocationPlan, Strategy};
use crate::cache::{build_cache_set, CacheSet};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::profile::ImportanceProfile;
use crate::stats::spearman;

pub const SEARCH_FORMAT: &str = "bklv-search-1";
pub const SWEEP_FORMAT: &str = "bklv-sweep-1";
pub const DEFAULT_WINDOW: usize = 5;

/// `-log softmax(logits)[target]`, computed in `f64`.
pub fn token_nll(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    max + sum.ln() - logits[target as usize] as f64
}

/// Mean teacher-forced NLL of `tokens[1..]`, streaming the chunk through
/// `caches` so every prediction sees the cache as a decoder would.
pub fn chunk_nll(model: &Model, tokens: &[u32], caches: &mut CacheSet) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 tokens for a loss, got {}",
            tokens.len()
        )));
    }
    let logits = model.forward_stream(tokens, caches)?;
    let total: f64 = tokens[1..]
        .iter()
        .enumerate()
        .map(|(i, &t)| token_nll(logits.row(i), t))
        .sum();
    Ok(total / (tokens.len() - 1) as f64)
}

/// Consecutive non-overlapping chunks; a trailing partial chunk is dropped.
pub fn corpus_chunks(corpus: &[u32], context_len: usize) -> Result<Vec<&[u32]>> {
    if context_len < 2 {
        return Err(Error::Input("context_len must be at least 2".into()));
    }
    if corpus.len() < context_len {
        return Err(Error::Input(format!(
            "corpus has {} tokens but one chunk needs context_len = {context_len}; \
             evaluation text must be at least as long as the context being evaluated",
            corpus.len()
        )));
    }
    Ok(corpus.chunks_exact(context_len).collect())
}

fn check_context(config: &ModelConfig, context_len: usize) -> Result<()> {
    if context_len > config.max_context {
        return Err(Error::Input(format!(
            "context_len {context_len} exceeds max_context {}",
            config.max_context
        )));
    }
    Ok(())
}

/// Per-chunk losses with caches reset between chunks.
pub fn chunk_losses(
    model: &Model,
    corpus: &[u32],
    context_len: usize,
    caches: &mut CacheSet,
) -> Result<Vec<f64>> {
    check_context(model.config(), context_len)?;
    corpus_chunks(corpus, context_len)?
        .into_iter()
        .map(|chunk| {
            caches.reset();
            let loss = chunk_nll(model, chunk, caches);
            caches.reset();
            loss
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean chunk NLL under `plan`; perplexity is `exp` of this.
pub fn chunked_perplexity(
    model: &Model,
    corpus: &[u32],
    context_len: usize,
    plan: &AllocationPlan,
) -> Result<f64> {
    let mut caches = build_cache_set(plan, model.config())?;
    Ok(mean(&chunk_losses(model, corpus, context_len, &mut caches)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub t: f64,
    pub r: f64,
    /// Mean chunk NLL; absent when the configuration is infeasible.
    pub avg_loss: Option<f64>,
    pub perplexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub format: String,
    pub compression: f64,
    pub sinks: usize,
    pub layer_t: f64,
    pub layer_r: f64,
    pub chunks_evaluated: usize,
    pub tokens_per_chunk: usize,
    pub grid: Vec<GridPoint>,
    pub best: Option<(f64, f64)>,
    pub best_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub context_len: usize,
    pub compression: f64,
    pub grid: Vec<(f64, f64)>,
    pub layer_t: f64,
    pub layer_r: f64,
    pub sinks: usize,
    /// Worker cap; `None` uses the global pool.
    pub threads: Option<usize>,
}

/// Similarity thresholds 0.50..=0.95 by 0.05 crossed with reductions
/// 0.1..=0.9 by 0.1, thresholds varying fastest.
pub fn default_grid() -> Vec<(f64, f64)> {
    let ts: Vec<f64> = (10..=19).map(|i| i as f64 * 0.05).collect();
    let rs: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();
    cross_grid(&ts, &rs)
}

/// Row-major over `rs`: every `t` for the first `r`, then the next `r`.
pub fn cross_grid(ts: &[f64], rs: &[f64]) -> Vec<(f64, f64)> {
    rs.iter()
        .flat_map(|&r| ts.iter().map(move |&t| (t, r)))
        .collect()
}

pub(crate) fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Evaluates the BaKlaVa plan at every grid point. Infeasible points are
/// recorded rather than aborting; the best point is the first minimum in
/// grid order.
pub fn parameter_search(
    model: &Model,
    profile: &ImportanceProfile,
    corpus: &[u32],
    cfg: &SearchConfig,
) -> Result<SearchReport> {
    if cfg.grid.is_empty() {
        return Err(Error::Input("empty parameter grid".into()));
    }
    check_context(model.config(), cfg.context_len)?;
    let chunks = corpus_chunks(corpus, cfg.context_len)?.len();
    let eval = |&(t, r): &(f64, f64)| -> Result<GridPoint> {
        let params = AllocParams {
            t,
            r,
            layer_t: cfg.layer_t,
            layer_r: cfg.layer_r,
        };
        let plan = build_plan(
            Some(profile),
            model.config(),
            Strategy::Baklava,
            cfg.compression,
            params,
            cfg.sinks,
        );
        match plan {
            Ok(plan) => {
                let loss = chunked_perplexity(model, corpus, cfg.context_len, &plan)?;
                Ok(GridPoint {
                    t,
                    r,
                    avg_loss: Some(loss),
                    perplexity: Some(loss.exp()),
                    infeasible: None,
                })
            }
            Err(e @ (Error::Allocation(_) | Error::Validation(_) | Error::Input(_) | Error::Plan(_))) => {
                Ok(GridPoint {
                    t,
                    r,
                    avg_loss: None,
                    perplexity: None,
                    infeasible: Some(e.to_string()),
                })
            }
            Err(e) => Err(e),
        }
    };
    let grid: Vec<GridPoint> =
        with_threads(cfg.threads, || cfg.grid.par_iter().map(eval).collect::<Result<_>>())??;

    let mut best: Option<&GridPoint> = None;
    for p in &grid {
        if let Some(l) = p.avg_loss {
            if best.is_none_or(|b| l < b.avg_loss.expect("feasible")) {
                best = Some(p);
            }
        }
    }
    Ok(SearchReport {
        format: SEARCH_FORMAT.to_string(),
        compression: cfg.compression,
        sinks: cfg.sinks,
        layer_t: cfg.layer_t,
        layer_r: cfg.layer_r,
        chunks_evaluated: chunks,
        tokens_per_chunk: cfg.context_len,
        best: best.map(|b| (b.t, b.r)),
        best_loss: best.and_then(|b| b.avg_loss),
        grid,
    })
}

/// Plain-text perplexity grid: one row per reduction, one column per threshold.
pub fn heatmap_text(report: &SearchReport) -> String {
    let mut ts: Vec<f64> = Vec::new();
    let mut rs: Vec<f64> = Vec::new();
    for p in &report.grid {
        if !ts.contains(&p.t) {
            ts.push(p.t);
        }
        if !rs.contains(&p.r) {
            rs.push(p.r);
        }
    }
    let mut out = format!(
        "perplexity at compression {} (rows: reduction r, columns: similarity threshold t)\n{:>8}",
        report.compression, "r \\ t"
    );
    for t in &ts {
        out.push_str(&format!(" {t:>9.3}"));
    }
    out.push('\n');
    for r in &rs {
        out.push_str(&format!("{r:>8.3}"));
        for t in &ts {
            let cell = report
                .grid
                .iter()
                .find(|p| p.t == *t && p.r == *r)
                .and_then(|p| p.perplexity);
            match cell {
                Some(v) => out.push_str(&format!(" {v:>9.4}")),
                None => out.push_str(&format!(" {:>9}", "-")),
            }
        }
        out.push('\n');
    }
    if let (Some((t, r)), Some(l)) = (report.best, report.best_loss) {
        out.push_str(&format!("best: t={t} r={r} perplexity={:.4}\n", l.exp()));
    }
    out
}

/// Layers `[max(0, c - w/2), min(last, c + w/2)]` for window centre `c`.
pub fn window_bounds(center: usize, window: usize, num_layers: usize) -> (usize, usize) {
    let half = window / 2;
    (center.saturating_sub(half), (center + half).min(num_layers - 1))
}

fn check_window(window: usize) -> Result<()> {
    if window.is_multiple_of(2) {
        return Err(Error::Input(format!("window {window} must be a positive odd number")));
    }
    Ok(())
}

/// Budgets compressing only layers `first..=last`; all others stay full.
pub fn window_budgets(
    config: &ModelConfig,
    first: usize,
    last: usize,
    compression: f64,
    sinks: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(compression > 0.0 && compression <= 1.0) {
        return Err(Error::Allocation(format!(
            "compression ratio {compression} outside (0, 1]"
        )));
    }
    let layer_total =
        (compression * (config.num_kv_heads * config.max_context) as f64).round() as usize;
    let reduced = split_equal(layer_total, config.num_kv_heads);
    if let Some(g) = reduced.iter().position(|&b| b < sinks + 1) {
        return Err(Error::Allocation(format!(
            "compression {compression} leaves group {g} below the floor of {}",
            sinks + 1
        )));
    }
    Ok((0..config.num_layers)
        .map(|l| {
            if (first..=last).contains(&l) {
                reduced.clone()
            } else {
                vec![config.max_context; config.num_kv_heads]
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Spearman of layer importance against sweep perplexity over all layers.
    pub full: f64,
    pub full_degenerate: bool,
    /// Same, excluding `trimmed_layers` layers at each end.
    pub trimmed: f64,
    pub trimmed_degenerate: bool,
    pub trimmed_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format: String,
    pub window: usize,
    pub compression: f64,
    pub sinks: usize,
    pub tokens_per_chunk: usize,
    /// Compressed layer range per centre, inclusive.
    pub windows: Vec<(usize, usize)>,
    /// Chunked perplexity per centre layer (higher means more damage).
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn layer_sweep(
    model: &Model,
    corpus: &[u32],
    context_len: usize,
    window: usize,
    compression: f64,
    sinks: usize,
    threads: Option<usize>,
) -> Result<SweepReport> {
    let cfg = model.config();
    check_window(window)?;
    check_context(cfg, context_len)?;
    corpus_chunks(corpus, context_len)?;
    let windows: Vec<(usize, usize)> = (0..cfg.num_layers)
        .map(|c| window_bounds(c, window, cfg.num_layers))
        .collect();
    let scores = with_threads(threads, || {
        windows
            .par_iter()
            .map(|&(lo, hi)| {
                let budgets = window_budgets(cfg, lo, hi, compression, sinks)?;
                let mut caches = CacheSet::with_budgets(cfg, sinks, &budgets)?;
                Ok(mean(&chunk_losses(model, corpus, context_len, &mut caches)?).exp())
            })
            .collect::<Result<Vec<f64>>>()
    })??;
    Ok(SweepReport {
        format: SWEEP_FORMAT.to_string(),
        window,
        compression,
        sinks,
        tokens_per_chunk: context_len,
        windows,
        scores,
        correlation: None,
    })
}

/// Rank agreement between the layer heuristic and the sweep: a layer whose
/// compression raises perplexity more should carry higher importance.
pub fn heuristic_vs_empirical(
    profile: &ImportanceProfile,
    sweep: &SweepReport,
) -> Result<CorrelationReport> {
    let imp = &profile.layer_importance;
    if imp.len() != sweep.scores.len() {
        return Err(Error::Shape(format!(
            "{} layer importances against {} sweep scores",
            imp.len(),
            sweep.scores.len()
        )));
    }
    let full = spearman(imp, &sweep.scores);
    let trim = sweep.window / 2;
    let trimmed = if imp.len() > 2 * trim {
        let range = trim..imp.len() - trim;
        spearman(&imp[range.clone()], &sweep.scores[range])
    } else {
        None
    };
    Ok(CorrelationReport {
        full: full.unwrap_or(0.0),
        full_degenerate: full.is_none(),
        trimmed: trimmed.unwrap_or(0.0),
        trimmed_degenerate: trimmed.is_none(),
        trimmed_layers: trim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let nll = token_nll(&[0.0; 257], 42);
        assert!((nll - 257f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chunking_drops_partial_tail() {
        let c: Vec<u32> = (0..10).collect();
        let ch = corpus_chunks(&c, 4).unwrap();
        assert_eq!(ch.len(), 2);
        assert_eq!(ch[1], &[4, 5, 6, 7]);
        assert!(corpus_chunks(&c, 11).is_err());
        assert!(corpus_chunks(&c, 1).is_err());
    }

    #[test]
    fn window_clamping() {
        assert_eq!(window_bounds(0, 3, 4), (0, 1));
        assert_eq!(window_bounds(3, 3, 4), (2, 3));
        assert_eq!(window_bounds(1, 5, 4), (0, 3));
        assert_eq!(window_bounds(2, 1, 4), (2, 2));
        assert_eq!(window_bounds(1, 5, 4), (0, 3));
        assert!(check_window(2).is_err());
        assert!(check_window(0).is_err());
        assert!(check_window(5).is_ok());
    }

    #[test]
    fn window_budgets_leave_other_layers_full() {
        let c = ModelConfig::default();
        let b = window_budgets(&c, 1, 2, 0.25, 4).unwrap();
        assert_eq!(b[0], vec![512; 4]);
        assert_eq!(b[1], vec![128; 4]);
        assert_eq!(b[2], vec![128; 4]);
        assert_eq!(b[3], vec![512; 4]);
    }

    #[test]
    fn grid_layout() {
        let g = default_grid();
        assert_eq!(g.len(), 90);
        assert_eq!(g[0], (0.5, 0.1));
        assert!((g[1].0 - 0.55).abs() < 1e-12);
        assert_eq!(cross_grid(&[1.0, 2.0], &[0.5]), vec![(1.0, 0.5), (2.0, 0.5)]);
    }
}
