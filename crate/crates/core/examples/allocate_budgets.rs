//! Budget matrices for each strategy from a hand-written profile, their
//! memory footprint, and what validation reports for a broken plan.
//!
//! ```text
//! cargo run -p baklava --example allocate_budgets -- [compression]
//! ```

use anyhow::Result;
use baklava::alloc::{build_plan, reallocate_caches, validate_plan, AllocParams, Strategy};
use baklava::cache::{MemoryReport, DEFAULT_SINKS};
use baklava::profile::{ImportanceProfile, PROFILE_FORMAT};
use baklava::ModelConfig;

fn main() -> Result<()> {
    let compression: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.4);
    let cfg = ModelConfig::default();

    println!(
        "single reallocation pass: {:?}",
        reallocate_caches(&[100, 100, 100], &[0.1, 0.5, 0.9], 0.3, 0.1, DEFAULT_SINKS + 1)?
    );

    let kv = vec![
        vec![0.12, 0.30, 0.55, 0.20],
        vec![0.40, 0.41, 0.05, 0.70],
        vec![0.25, 0.25, 0.25, 0.60],
        vec![0.10, 0.15, 0.35, 0.45],
    ];
    let layers = vec![0.35, 0.20, 0.10, 0.05];
    let profile = ImportanceProfile {
        format: PROFILE_FORMAT.into(),
        model_id: "hand-written".into(),
        prompt_ids: vec![],
        group_size: cfg.group_size(),
        head_similarity: kv
            .iter()
            .map(|r| r.iter().flat_map(|i| [1.0 - i, 1.0 - i]).collect())
            .collect(),
        kv_importance: kv,
        layer_similarity: layers.iter().map(|i| 1.0 - i).collect(),
        layer_importance: layers,
        per_token_similarity: None,
    };
    let params = AllocParams {
        t: 0.75,
        r: 0.3,
        layer_t: 0.8,
        layer_r: 0.2,
    };
    for s in [Strategy::Uniform, Strategy::Layerwise, Strategy::Baklava] {
        let plan = build_plan(Some(&profile), &cfg, s, compression, params, DEFAULT_SINKS)?;
        let mem = MemoryReport::for_plan(&plan, &cfg, 2)?;
        println!("{s:>9}: {:?}  {} bytes, achieved {:.4}", plan.budgets, mem.total_bytes, mem.achieved_compression);
    }

    let mut broken = build_plan(Some(&profile), &cfg, Strategy::Baklava, compression, params, DEFAULT_SINKS)?;
    broken.budgets[2][1] = 2;
    if let Err(violations) = validate_plan(&broken, &cfg) {
        for v in violations {
            println!("violation: {v}");
        }
    }
    Ok(())
}
