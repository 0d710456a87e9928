//! Uniform vs layer-wise vs BaKlaVa on the bundled corpus.
//!
//! Profiles a seeded toy model on the bundled prompts, grid-searches the
//! head-stage (t, r) at each compression ratio, and prints the perplexity of
//! each strategy side by side.
//!
//! ```text
//! cargo run --release -p baklava --example compare_strategies -- [seed] [compression...]
//! ```

use std::path::Path;

use anyhow::Result;
use baklava::alloc::{build_plan, uniform_plan, AllocParams, Strategy};
use baklava::cache::DEFAULT_SINKS;
use baklava::io::{encode_text, Corpus};
use baklava::model::init_model;
use baklava::profile::profile_model;
use baklava::search::{chunked_perplexity, cross_grid, parameter_search, SearchConfig};
use baklava::ModelConfig;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let ratios: Vec<f64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    } else {
        vec![0.3, 0.5]
    };

    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let model = init_model(&ModelConfig::default().with_seed(seed))?;
    let prompts = vec![
        encode_text(&std::fs::read(data.join("prompt_text.txt"))?),
        encode_text(&std::fs::read(data.join("prompt_code.rs.txt"))?),
    ];
    let profile = profile_model(&model, &prompts)?;
    let corpus = Corpus::from_files(&[data.join("corpus.txt")])?;
    let context_len = model.config().max_context;

    println!("seed {seed}, {} corpus tokens, context {context_len}", corpus.len());
    for (l, row) in profile.kv_importance.iter().enumerate() {
        println!(
            "layer {l}: kv importance {:?} layer importance {:.4}",
            row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            profile.layer_importance[l]
        );
    }

    let ts = [0.75, 0.8, 0.825, 0.85, 0.9];
    let rs = [0.1, 0.3, 0.5];
    for &c in &ratios {
        let uniform = uniform_plan(model.config(), c, DEFAULT_SINKS)?;
        let u = chunked_perplexity(&model, &corpus.token_ids, context_len, &uniform)?;
        let layerwise = build_plan(
            Some(&profile),
            model.config(),
            Strategy::Layerwise,
            c,
            AllocParams {
                layer_t: 0.85,
                layer_r: 0.2,
                ..AllocParams::default()
            },
            DEFAULT_SINKS,
        )?;
        let lw = chunked_perplexity(&model, &corpus.token_ids, context_len, &layerwise)?;
        let report = parameter_search(
            &model,
            &profile,
            &corpus.token_ids,
            &SearchConfig {
                context_len,
                compression: c,
                grid: cross_grid(&ts, &rs),
                layer_t: 0.5,
                layer_r: 0.0,
                sinks: DEFAULT_SINKS,
                threads: None,
            },
        )?;
        let b = report.best_loss.unwrap_or(f64::NAN);
        println!(
            "compression {c}: uniform {:.5}  layerwise {:.5}  baklava {:.5} at (t, r) = {:?}  baklava<=uniform: {}",
            u.exp(),
            lw.exp(),
            b.exp(),
            report.best.unwrap_or((f64::NAN, f64::NAN)),
            b <= u
        );
    }
    Ok(())
}
