//! (t, r) grid search at one compression ratio with a text heatmap.
//!
//! ```text
//! cargo run --release -p baklava --example parameter_search -- [seed] [compression]
//! ```

use std::path::Path;

use anyhow::Result;
use baklava::cache::DEFAULT_SINKS;
use baklava::io::{encode_text, Corpus};
use baklava::model::init_model;
use baklava::profile::profile_model;
use baklava::search::{cross_grid, heatmap_text, parameter_search, SearchConfig};
use baklava::ModelConfig;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let compression: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0.3);

    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let model = init_model(&ModelConfig::default().with_seed(seed))?;
    let prompts = vec![
        encode_text(&std::fs::read(data.join("prompt_text.txt"))?),
        encode_text(&std::fs::read(data.join("prompt_code.rs.txt"))?),
    ];
    let profile = profile_model(&model, &prompts)?;
    let corpus = Corpus::from_files(&[data.join("corpus.txt")])?;
    // Two 256-token chunks keep this quick on one core.
    let report = parameter_search(
        &model,
        &profile,
        &corpus.token_ids[..512],
        &SearchConfig {
            context_len: 256,
            compression,
            grid: cross_grid(&[0.7, 0.75, 0.8, 0.85, 0.9], &[0.1, 0.3, 0.5]),
            layer_t: 0.5,
            layer_r: 0.0,
            sinks: DEFAULT_SINKS,
            threads: None,
        },
    )?;
    print!("{}", heatmap_text(&report));
    Ok(())
}
