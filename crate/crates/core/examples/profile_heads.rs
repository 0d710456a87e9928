//! Head, KV-group and layer importance on the bundled prompts, the most and
//! least important heads per layer, and the cross-prompt rank agreement.
//!
//! ```text
//! cargo run --release -p baklava --example profile_heads -- [seed]
//! ```

use std::path::Path;

use anyhow::Result;
use baklava::io::encode_text;
use baklava::model::init_model;
use baklava::profile::{profile_model, profile_model_with, rank_correlation, ProfileOptions};
use baklava::ModelConfig;

fn main() -> Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let text = encode_text(&std::fs::read(data.join("prompt_text.txt"))?);
    let code = encode_text(&std::fs::read(data.join("prompt_code.rs.txt"))?);
    let model = init_model(&ModelConfig::default().with_seed(seed))?;

    let opts = ProfileOptions {
        keep_token_heatmaps: true,
        ..ProfileOptions::default()
    };
    let profile = profile_model_with(&model, &[text.clone(), code.clone()], &opts)?;
    for l in 0..profile.num_layers() {
        let (most, least) = profile.extreme_heads(l, 2);
        println!(
            "layer {l}: importance {:.4}, kv {:?}, most important heads {most:?}, least {least:?}",
            profile.layer_importance[l],
            profile.kv_importance[l].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
    }

    // Mean per-token similarity of layer 0 across the text prompt.
    let map = &profile.per_token_similarity.as_ref().expect("requested")[0];
    let row_means: Vec<f64> = map.layers[0]
        .iter()
        .map(|heads| heads.iter().sum::<f64>() / heads.len() as f64)
        .collect();
    let stride = (row_means.len() / 8).max(1);
    println!(
        "layer 0 token cosine (every {stride}th token): {:?}",
        row_means.iter().step_by(stride).map(|v| format!("{v:.2}")).collect::<Vec<_>>()
    );

    let a = profile_model(&model, &[text])?;
    let b = profile_model(&model, &[code])?;
    println!("per-layer Spearman between prompts: {:?}", rank_correlation(&a, &b)?);
    Ok(())
}
