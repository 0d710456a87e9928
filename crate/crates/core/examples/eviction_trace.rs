//! Step-by-step view of sink + sliding-window eviction in one cache.
//!
//! ```text
//! cargo run -p baklava --example eviction_trace -- [budget] [sinks] [tokens]
//! ```

use anyhow::Result;
use baklava::cache::BudgetedCache;
use baklava::tensor::Matrix;

fn main() -> Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;
    let budget = args.first().copied().unwrap_or(8);
    let sinks = args.get(1).copied().unwrap_or(2);
    let tokens = args.get(2).copied().unwrap_or(12);

    let mut cache = BudgetedCache::new(budget, sinks, 2);
    println!("budget {budget}, sinks {sinks}");
    for p in 0..tokens {
        let row = Matrix::from_rows(&[vec![p as f32, 1.0]])?;
        cache.append_and_evict(&row, &row, &[p])?;
        println!("after token {p:>2}: retained {:?}", cache.positions());
    }

    // A query that prefers recent keys: weights over what survived.
    let q = Matrix::from_rows(&[vec![0.5, 0.0]])?;
    let out = cache.attend(&q, &[tokens])?;
    println!("attention output for a recency-seeking query: {:?}", out.row(0));
    Ok(())
}
