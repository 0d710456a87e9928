//! Budgeted KV stores, one per (layer, KV group).
//!
//! Eviction keeps the first `sinks` absolute positions forever and otherwise
//! drops the oldest token, one at a time, until the store fits its budget.

use serde::{Deserialize, Serialize};

use crate::alloc::AllocationPlan;
use crate::attention::masked_attention;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_SINKS: usize = 4;

#[derive(Debug, Clone)]
pub struct BudgetedCache {
    budget: usize,
    sinks: usize,
    keys: Matrix,
    values: Matrix,
    positions: Vec<usize>,
    total_seen: usize,
}

impl BudgetedCache {
    pub fn new(budget: usize, sinks: usize, head_dim: usize) -> Self {
        Self {
            budget,
            sinks,
            keys: Matrix::zeros(0, head_dim),
            values: Matrix::zeros(0, head_dim),
            positions: Vec::new(),
            total_seen: 0,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn sinks(&self) -> usize {
        self.sinks
    }

    pub fn retained(&self) -> usize {
        self.positions.len()
    }

    pub fn total_seen(&self) -> usize {
        self.total_seen
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Tokens that can still be appended before anything is evicted.
    pub fn free_capacity(&self) -> usize {
        self.budget.saturating_sub(self.retained())
    }

    pub fn append_and_evict(
        &mut self,
        k_new: &Matrix,
        v_new: &Matrix,
        positions: &[usize],
    ) -> Result<()> {
        if k_new.rows() != v_new.rows() || k_new.rows() != positions.len() {
            return Err(Error::Shape(format!(
                "append of {} key rows, {} value rows, {} positions",
                k_new.rows(),
                v_new.rows(),
                positions.len()
            )));
        }
        if k_new.cols() != self.keys.cols() || v_new.cols() != self.values.cols() {
            return Err(Error::Shape(format!(
                "append rows are {} wide, cache holds {}",
                k_new.cols(),
                self.keys.cols()
            )));
        }
        if let Some((i, &p)) = positions
            .iter()
            .enumerate()
            .find(|(i, &p)| p != self.total_seen + i)
        {
            return Err(Error::Input(format!(
                "position {p} at offset {i} does not continue from {}",
                self.total_seen
            )));
        }
        self.keys.extend_rows(k_new)?;
        self.values.extend_rows(v_new)?;
        self.positions.extend_from_slice(positions);
        self.total_seen += positions.len();
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        let excess = self.retained().saturating_sub(self.budget);
        if excess == 0 {
            return;
        }
        // Oldest non-sinks sit directly after the retained sink prefix.
        let start = self.sinks.min(self.budget.saturating_sub(1));
        let end = start + excess;
        self.keys.drain_rows(start, end);
        self.values.drain_rows(start, end);
        self.positions.drain(start..end);
    }

    /// Attention of `queries` over the retained tokens only.
    pub fn attend(&self, queries: &Matrix, query_pos: &[usize]) -> Result<Matrix> {
        if self.positions.is_empty() {
            return Err(Error::Input("attention over an empty cache".into()));
        }
        masked_attention(queries, query_pos, &self.keys, &self.values, &self.positions)
    }

    /// Attention over `[K'; K_new]` and `[V'; V_new]`: the retained tokens
    /// followed by tokens not yet appended.
    pub fn attend_with_pending(
        &self,
        queries: &Matrix,
        query_pos: &[usize],
        k_new: &Matrix,
        v_new: &Matrix,
        new_pos: &[usize],
    ) -> Result<Matrix> {
        if self.positions.is_empty() && new_pos.is_empty() {
            return Err(Error::Input(
                "attention with an empty cache and no new tokens".into(),
            ));
        }
        let (k, v, pos) = self.context_with(k_new, v_new, new_pos)?;
        masked_attention(queries, query_pos, &k, &v, &pos)
    }

    /// The retained keys, values and positions with `new` rows appended,
    /// without touching the cache.
    pub fn context_with(
        &self,
        k_new: &Matrix,
        v_new: &Matrix,
        new_pos: &[usize],
    ) -> Result<(Matrix, Matrix, Vec<usize>)> {
        let mut k = self.keys.clone();
        k.extend_rows(k_new)?;
        let mut v = self.values.clone();
        v.extend_rows(v_new)?;
        let mut pos = self.positions.clone();
        pos.extend_from_slice(new_pos);
        Ok((k, v, pos))
    }

    pub fn reset(&mut self) {
        self.keys.clear();
        self.values.clear();
        self.positions.clear();
        self.total_seen = 0;
    }
}

/// All caches of a model, indexed by (layer, kv_group).
#[derive(Debug, Clone)]
pub struct CacheSet {
    config: ModelConfig,
    sinks: usize,
    caches: Vec<BudgetedCache>,
}

impl CacheSet {
    /// Build empty caches from an explicit layer × group budget matrix.
    pub fn with_budgets(config: &ModelConfig, sinks: usize, budgets: &[Vec<usize>]) -> Result<Self> {
        if budgets.len() != config.num_layers {
            return Err(Error::Config(format!(
                "budget matrix has {} layers, model has {}",
                budgets.len(),
                config.num_layers
            )));
        }
        let floor = sinks + 1;
        let mut caches = Vec::with_capacity(config.num_caches());
        for (l, row) in budgets.iter().enumerate() {
            if row.len() != config.num_kv_heads {
                return Err(Error::Config(format!(
                    "layer {l} has {} budgets, model has {} KV groups",
                    row.len(),
                    config.num_kv_heads
                )));
            }
            for (g, &b) in row.iter().enumerate() {
                if b < floor {
                    return Err(Error::Plan(format!(
                        "(layer {l}, group {g}) budget {b} below floor {floor}"
                    )));
                }
                caches.push(BudgetedCache::new(b, sinks, config.head_dim));
            }
        }
        Ok(Self {
            config: config.clone(),
            sinks,
            caches,
        })
    }

    /// Every cache holds the full context window.
    pub fn full(config: &ModelConfig, sinks: usize) -> Result<Self> {
        Self::uniform(config, sinks, config.max_context)
    }

    pub fn uniform(config: &ModelConfig, sinks: usize, budget: usize) -> Result<Self> {
        let budgets = vec![vec![budget; config.num_kv_heads]; config.num_layers];
        Self::with_budgets(config, sinks, &budgets)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sinks(&self) -> usize {
        self.sinks
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn num_groups(&self) -> usize {
        self.config.num_kv_heads
    }

    pub fn get(&self, layer: usize, group: usize) -> &BudgetedCache {
        &self.caches[layer * self.config.num_kv_heads + group]
    }

    pub fn get_mut(&mut self, layer: usize, group: usize) -> &mut BudgetedCache {
        &mut self.caches[layer * self.config.num_kv_heads + group]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BudgetedCache> {
        self.caches.iter()
    }

    pub fn budgets(&self) -> Vec<Vec<usize>> {
        self.caches
            .chunks(self.config.num_kv_heads)
            .map(|row| row.iter().map(BudgetedCache::budget).collect())
            .collect()
    }

    pub fn total_seen(&self) -> usize {
        self.caches.first().map_or(0, BudgetedCache::total_seen)
    }

    /// Smallest free capacity across caches.
    pub fn min_free_capacity(&self) -> usize {
        self.caches
            .iter()
            .map(BudgetedCache::free_capacity)
            .min()
            .unwrap_or(0)
    }

    pub fn total_capacity(&self) -> usize {
        self.caches.iter().map(BudgetedCache::budget).sum()
    }

    pub fn reset(&mut self) {
        self.caches.iter_mut().for_each(BudgetedCache::reset);
    }

    pub fn memory_report(&self, bytes_per_element: usize) -> MemoryReport {
        MemoryReport::from_budgets(&self.config, &self.budgets(), bytes_per_element)
    }
}

/// Empty caches sized by `plan`.
pub fn build_cache_set(plan: &AllocationPlan, config: &ModelConfig) -> Result<CacheSet> {
    CacheSet::with_budgets(config, plan.sinks, &plan.budgets)
}

/// Byte accounting for a budget matrix: `2 × budget × head_dim × bytes`
/// per cache (keys and values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub bytes_per_element: usize,
    pub per_cache_bytes: Vec<Vec<u64>>,
    pub total_bytes: u64,
    pub total_budget_tokens: u64,
    pub full_context_tokens: u64,
    pub achieved_compression: f64,
}

impl MemoryReport {
    fn from_budgets(config: &ModelConfig, budgets: &[Vec<usize>], bytes_per_element: usize) -> Self {
        let per_token = 2 * config.head_dim as u64 * bytes_per_element as u64;
        let per_cache_bytes: Vec<Vec<u64>> = budgets
            .iter()
            .map(|row| row.iter().map(|&b| b as u64 * per_token).collect())
            .collect();
        let total_bytes = per_cache_bytes.iter().flatten().sum();
        let total_budget_tokens: u64 = budgets.iter().flatten().map(|&b| b as u64).sum();
        let full_context_tokens = (config.num_caches() * config.max_context) as u64;
        Self {
            bytes_per_element,
            per_cache_bytes,
            total_bytes,
            total_budget_tokens,
            full_context_tokens,
            achieved_compression: total_budget_tokens as f64 / full_context_tokens as f64,
        }
    }

    /// Report for a plan without materialising caches.
    pub fn for_plan(plan: &AllocationPlan, config: &ModelConfig, bytes_per_element: usize) -> Result<Self> {
        if plan.budgets.len() != config.num_layers
            || plan.budgets.iter().any(|r| r.len() != config.num_kv_heads)
        {
            return Err(Error::Config(format!(
                "plan dimensions do not match {} layers x {} KV groups",
                config.num_layers, config.num_kv_heads
            )));
        }
        Ok(Self::from_budgets(config, &plan.budgets, bytes_per_element))
    }
}
