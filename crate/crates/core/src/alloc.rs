//! Per-cache token budgets: uniform, layer-wise, and head-wise (BaKlaVa).
//!
//! Thresholds are given in the similarity domain (`t`, `layer_t`) and
//! converted to importance thresholds as `1 - t` before selection, so a
//! cache is a donor when its similarity exceeds `t`. Reductions (`r`,
//! `layer_r`) are fractions of each donor's current budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result, Violation};
use crate::profile::ImportanceProfile;

pub const PLAN_FORMAT: &str = "bklv-plan-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Layerwise,
    Baklava,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::Layerwise => "layerwise",
            Strategy::Baklava => "baklava",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "layerwise" => Ok(Strategy::Layerwise),
            "baklava" => Ok(Strategy::Baklava),
            other => Err(Error::Input(format!(
                "unknown strategy `{other}` (expected uniform, layerwise or baklava)"
            ))),
        }
    }
}

/// Threshold/reduction pairs for the head stage and the layer stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocParams {
    pub t: f64,
    pub r: f64,
    pub layer_t: f64,
    pub layer_r: f64,
}

impl Default for AllocParams {
    fn default() -> Self {
        Self {
            t: 0.5,
            r: 0.0,
            layer_t: 0.5,
            layer_r: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub format: String,
    pub strategy: Strategy,
    pub compression: f64,
    pub achieved_compression: f64,
    pub sinks: usize,
    pub max_context: usize,
    pub params: AllocParams,
    /// layer × kv_group token budgets.
    pub budgets: Vec<Vec<usize>>,
}

impl AllocationPlan {
    fn new(
        config: &ModelConfig,
        strategy: Strategy,
        compression: f64,
        sinks: usize,
        params: AllocParams,
        budgets: Vec<Vec<usize>>,
    ) -> Self {
        let total: usize = budgets.iter().flatten().sum();
        Self {
            format: PLAN_FORMAT.to_string(),
            strategy,
            compression,
            achieved_compression: total as f64 / (config.num_caches() * config.max_context) as f64,
            sinks,
            max_context: config.max_context,
            params,
            budgets,
        }
    }

    pub fn total_budget(&self) -> usize {
        self.budgets.iter().flatten().sum()
    }

    pub fn layer_totals(&self) -> Vec<usize> {
        self.budgets.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Largest-remainder apportionment of `total` by fractional `quotas`.
///
/// Every entry gets the floor of its quota; the leftover units go to the
/// largest fractional parts, lower index first on ties.
pub fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = quotas.iter().map(|q| q.max(0.0).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Equal shares of `total` over `parts`; the remainder goes to the lowest indices.
pub fn split_equal(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

fn check_compression(compression: f64) -> Result<()> {
    if !(compression > 0.0 && compression <= 1.0) {
        return Err(Error::Allocation(format!(
            "compression ratio {compression} outside (0, 1]"
        )));
    }
    Ok(())
}

/// `round(compression × layers × groups × max_context)`.
pub fn global_total(config: &ModelConfig, compression: f64) -> usize {
    (compression * (config.num_caches() * config.max_context) as f64).round() as usize
}

fn uniform_layer_totals(config: &ModelConfig, compression: f64, sinks: usize) -> Result<Vec<usize>> {
    check_compression(compression)?;
    let totals = split_equal(global_total(config, compression), config.num_layers);
    let layer_floor = config.num_kv_heads * (sinks + 1);
    if let Some((l, t)) = totals.iter().enumerate().find(|(_, t)| **t < layer_floor) {
        return Err(Error::Allocation(format!(
            "compression {compression} leaves layer {l} with {t} tokens, below the floor of {} per cache",
            sinks + 1
        )));
    }
    Ok(totals)
}

fn split_layers(config: &ModelConfig, totals: &[usize]) -> Vec<Vec<usize>> {
    totals
        .iter()
        .map(|&t| split_equal(t, config.num_kv_heads))
        .collect()
}

/// Uniform budgets at `compression` with no floor check, for reporting
/// which caches a too-small ratio would starve.
pub fn uniform_budgets_unchecked(config: &ModelConfig, compression: f64) -> Vec<Vec<usize>> {
    let totals = split_equal(global_total(config, compression), config.num_layers);
    split_layers(config, &totals)
}

pub fn uniform_plan(config: &ModelConfig, compression: f64, sinks: usize) -> Result<AllocationPlan> {
    let totals = uniform_layer_totals(config, compression, sinks)?;
    Ok(AllocationPlan::new(
        config,
        Strategy::Uniform,
        compression,
        sinks,
        AllocParams::default(),
        split_layers(config, &totals),
    ))
}

/// Shrink low-importance budgets and hand the freed tokens to the most
/// important caches.
///
/// Donors are `{i : importance_i < t_importance}`. If every cache is a donor
/// nothing changes. Each donor loses `floor(r × budget)` tokens, never going
/// below `floor`; the freed total is split equally (remainder to lower
/// indices) over the `min(n, m - n)` most important non-donors, ties going to
/// the lower index.
pub fn reallocate_caches(
    budgets: &[usize],
    importances: &[f64],
    t_importance: f64,
    r: f64,
    floor: usize,
) -> Result<Vec<usize>> {
    let m = budgets.len();
    if m == 0 || importances.len() != m {
        return Err(Error::Input(format!(
            "{} budgets against {} importances",
            m,
            importances.len()
        )));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Input(format!("reduction {r} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&t_importance) {
        return Err(Error::Input(format!(
            "importance threshold {t_importance} outside [0, 1]"
        )));
    }
    let donors: Vec<usize> = (0..m).filter(|&i| importances[i] < t_importance).collect();
    let n = donors.len();
    if n == 0 || n > m - 1 {
        return Ok(budgets.to_vec());
    }
    let mut out = budgets.to_vec();
    let mut freed = 0;
    for &i in &donors {
        let cut = ((r * budgets[i] as f64).floor() as usize).min(budgets[i].saturating_sub(floor));
        out[i] -= cut;
        freed += cut;
    }
    let k = n.min(m - n);
    let mut recipients: Vec<usize> = (0..m).filter(|i| !donors.contains(i)).collect();
    recipients.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    recipients.truncate(k);
    recipients.sort_unstable();
    for (i, share) in recipients.iter().zip(split_equal(freed, k)) {
        out[*i] += share;
    }
    Ok(out)
}

/// Per-layer token totals: uniform totals at `compression`, then one
/// reallocation pass over layer importances. `layer_t` is an importance
/// threshold here.
pub fn layer_budget_scaling(
    layer_importances: &[f64],
    compression: f64,
    layer_t: f64,
    layer_r: f64,
    config: &ModelConfig,
    sinks: usize,
) -> Result<Vec<usize>> {
    if layer_importances.len() != config.num_layers {
        return Err(Error::Input(format!(
            "{} layer importances for {} layers",
            layer_importances.len(),
            config.num_layers
        )));
    }
    let totals = uniform_layer_totals(config, compression, sinks)?;
    let layer_floor = config.num_kv_heads * (sinks + 1);
    let scaled = reallocate_caches(&totals, layer_importances, layer_t, layer_r, layer_floor)?;
    if let Some(l) = scaled.iter().position(|&t| t < layer_floor) {
        return Err(Error::Allocation(format!(
            "layer {l} total {} below floor {layer_floor}",
            scaled[l]
        )));
    }
    Ok(scaled)
}

fn check_profile(profile: &ImportanceProfile, config: &ModelConfig) -> Result<()> {
    let ok = profile.kv_importance.len() == config.num_layers
        && profile
            .kv_importance
            .iter()
            .all(|r| r.len() == config.num_kv_heads)
        && profile.layer_importance.len() == config.num_layers;
    if !ok {
        return Err(Error::Config(format!(
            "profile dimensions do not match {} layers x {} KV groups",
            config.num_layers, config.num_kv_heads
        )));
    }
    Ok(())
}

fn similarity_to_importance(t: f64, name: &str) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("{name} {t} outside [0, 1]")));
    }
    Ok(1.0 - t)
}

/// Plan for `strategy`. Layer-wise and BaKlaVa first fix per-layer totals
/// from layer importances, split each equally across its KV groups, and
/// BaKlaVa then reallocates within each layer by KV importance.
pub fn build_plan(
    profile: Option<&ImportanceProfile>,
    config: &ModelConfig,
    strategy: Strategy,
    compression: f64,
    params: AllocParams,
    sinks: usize,
) -> Result<AllocationPlan> {
    if strategy == Strategy::Uniform {
        let mut plan = uniform_plan(config, compression, sinks)?;
        plan.params = params;
        return Ok(plan);
    }
    let profile = profile.ok_or_else(|| {
        Error::Input(format!("strategy {strategy} needs an importance profile"))
    })?;
    check_profile(profile, config)?;
    let totals = layer_budget_scaling(
        &profile.layer_importance,
        compression,
        similarity_to_importance(params.layer_t, "layer_t")?,
        params.layer_r,
        config,
        sinks,
    )?;
    let mut budgets = split_layers(config, &totals);
    if strategy == Strategy::Baklava {
        let t_imp = similarity_to_importance(params.t, "t")?;
        for (row, imp) in budgets.iter_mut().zip(&profile.kv_importance) {
            *row = reallocate_caches(row, imp, t_imp, params.r, sinks + 1)?;
        }
    }
    let plan = AllocationPlan::new(config, strategy, compression, sinks, params, budgets);
    validate_plan(&plan, config).map_err(Error::Validation)?;
    Ok(plan)
}

/// All problems with `plan` for `config`.
pub fn validate_plan(plan: &AllocationPlan, config: &ModelConfig) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if !(plan.compression > 0.0 && plan.compression <= 1.0) {
        v.push(Violation::Compression {
            value: plan.compression,
        });
    }
    if plan.budgets.len() != config.num_layers
        || plan.budgets.iter().any(|r| r.len() != config.num_kv_heads)
    {
        v.push(Violation::Dimensions {
            expected_layers: config.num_layers,
            expected_groups: config.num_kv_heads,
            found_layers: plan.budgets.len(),
            found_groups: plan.budgets.iter().map(Vec::len).collect(),
        });
    }
    let floor = plan.sinks + 1;
    for (l, row) in plan.budgets.iter().enumerate() {
        for (g, &b) in row.iter().enumerate() {
            if b < floor {
                v.push(Violation::BelowFloor {
                    layer: l,
                    group: g,
                    budget: b,
                    floor,
                });
            }
        }
    }
    if plan.compression.is_finite() {
        let expected = global_total(config, plan.compression);
        let found = plan.total_budget();
        if expected != found {
            v.push(Violation::Total { expected, found });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
