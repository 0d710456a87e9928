//! Budgeted per-head KV-cache allocation on a small grouped-query decoder.
//!
//! The pipeline is: profile head and layer importance once
//! ([`profile::profile_model`]), turn importances and a compression ratio
//! into per-(layer, KV group) token budgets ([`alloc::build_plan`]), run the
//! model under those budgets with sink + sliding-window eviction
//! ([`cache::CacheSet`]), and pick allocation parameters by chunked
//! perplexity ([`search::parameter_search`]).
//!
//! ```no_run
//! use baklava::prelude::*;
//!
//! let model = init_model(&ModelConfig::default().with_seed(7))?;
//! let prompt = encode_text(b"The cache keeps the first few tokens forever.");
//! let plan = uniform_plan(model.config(), 0.5, DEFAULT_SINKS)?;
//! let mut caches = build_cache_set(&plan, model.config())?;
//! let out = model.greedy_generate(&prompt, 16, &mut caches)?;
//! println!("{}", decode_tokens(&out));
//! # Ok::<(), baklava::Error>(())
//! ```

pub mod alloc;
pub mod attention;
pub mod cache;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod profile;
pub mod search;
pub mod stats;
pub mod tensor;

pub use config::ModelConfig;
pub use error::{Error, Result, Violation};

pub mod prelude {
    pub use crate::alloc::{
        build_plan, reallocate_caches, uniform_plan, validate_plan, AllocParams, AllocationPlan,
        Strategy,
    };
    pub use crate::cache::{build_cache_set, BudgetedCache, CacheSet, MemoryReport, DEFAULT_SINKS};
    pub use crate::config::{ModelConfig, BOS};
    pub use crate::io::{decode_tokens, encode_text, load_model, save_model, Corpus};
    pub use crate::model::{init_model, Model};
    pub use crate::profile::{profile_model, ImportanceProfile};
    pub use crate::search::{chunked_perplexity, parameter_search, SearchConfig};
    pub use crate::tensor::Matrix;
    pub use crate::{Error, Result};
}
