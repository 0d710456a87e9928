//! Compress a sliding window of layers at a time and compare the damage
//! with the profiled layer importance.
//!
//! ```text
//! cargo run --release -p baklava --example layer_sweep -- [seed] [window] [compression]
//! ```

use std::path::Path;

use anyhow::Result;
use baklava::cache::DEFAULT_SINKS;
use baklava::io::{encode_text, Corpus};
use baklava::model::init_model;
use baklava::profile::profile_model;
use baklava::search::{heuristic_vs_empirical, layer_sweep};
use baklava::ModelConfig;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let window: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let compression: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0.1);

    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let model = init_model(&ModelConfig::default().with_seed(seed))?;
    let prompts = vec![
        encode_text(&std::fs::read(data.join("prompt_text.txt"))?),
        encode_text(&std::fs::read(data.join("prompt_code.rs.txt"))?),
    ];
    let profile = profile_model(&model, &prompts)?;
    let corpus = Corpus::from_files(&[data.join("corpus.txt")])?;
    let mut report = layer_sweep(&model, &corpus.token_ids[..1024], 512, window, compression, DEFAULT_SINKS, None)?;
    report.correlation = Some(heuristic_vs_empirical(&profile, &report)?);

    for (l, (score, (lo, hi))) in report.scores.iter().zip(&report.windows).enumerate() {
        println!(
            "centre {l}: layers {lo}..={hi} compressed, perplexity {score:.5}, layer importance {:.4}",
            profile.layer_importance[l]
        );
    }
    println!("{:?}", report.correlation.expect("set above"));
    Ok(())
}
