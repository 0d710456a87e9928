//! Seeded model, weight-file round trip, and greedy decoding under a full
//! cache versus a compressed uniform plan.
//!
//! ```text
//! cargo run --release -p baklava --example init_and_generate -- [seed] [compression]
//! ```

use anyhow::Result;
use baklava::alloc::uniform_plan;
use baklava::cache::{build_cache_set, CacheSet, DEFAULT_SINKS};
use baklava::io::{encode_text, load_model, save_model};
use baklava::model::init_model;
use baklava::ModelConfig;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let compression: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0.05);

    let model = init_model(&ModelConfig::default().with_seed(seed))?;
    let dir = std::env::temp_dir().join(format!("bklv-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("toy.bklv");
    save_model(&model, &path)?;
    let model = load_model(&path)?;
    println!("saved and reloaded {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let prompt = encode_text(b"The quick brown fox jumps over the lazy dog. ");
    let mut full = CacheSet::full(model.config(), DEFAULT_SINKS)?;
    let a = model.greedy_generate(&prompt, 48, &mut full)?;

    let plan = uniform_plan(model.config(), compression, DEFAULT_SINKS)?;
    let mut small = build_cache_set(&plan, model.config())?;
    let b = model.greedy_generate(&prompt, 48, &mut small)?;

    // Random weights produce arbitrary bytes, so show token ids.
    println!("full cache  ({} bytes): {:?}", full.memory_report(2).total_bytes, &a[..16]);
    println!("budget {:>3}  ({} bytes): {:?}", plan.budgets[0][0], small.memory_report(2).total_bytes, &b[..16]);
    let same = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    println!("outputs agree on the first {same} of 48 tokens");
    std::fs::remove_dir_all(dir)?;
    Ok(())
}
