//! Pre-norm grouped-query decoder with rotary positions.
//!
//! Weights are drawn from `Normal(0, 0.02)` using a ChaCha8 stream seeded
//! from `ModelConfig::seed`, in the canonical tensor order: embedding, then
//! per layer `wq, wk, wv, wo, w_in, w_out`. Normalisation gains start at 1
//! and consume no random draws. The output projection is tied to the
//! embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{masked_attention, Rope};
use crate::cache::CacheSet;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{add_in_place, linear, rms_norm, silu, Matrix};

pub const INIT_STD: f32 = 0.02;
pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// (num_q_heads·head_dim) × d_model
    pub wq: Matrix,
    /// (num_kv_heads·head_dim) × d_model
    pub wk: Matrix,
    pub wv: Matrix,
    /// d_model × d_model
    pub wo: Matrix,
    /// d_ff × d_model
    pub w_in: Matrix,
    /// d_model × d_ff
    pub w_out: Matrix,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// vocab_size × d_model, also used as the output projection.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

impl Weights {
    /// Every tensor in canonical file order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embedding.as_slice()];
        for l in &self.layers {
            out.extend([
                l.wq.as_slice(),
                l.wk.as_slice(),
                l.wv.as_slice(),
                l.wo.as_slice(),
                l.w_in.as_slice(),
                l.w_out.as_slice(),
                &l.norm1,
                &l.norm2,
            ]);
        }
        out.push(&self.final_norm);
        out
    }
}

/// Shapes of every tensor in canonical order, as (rows, cols); vectors are (1, n).
pub fn tensor_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
    let d = config.d_model;
    let mut out = vec![(config.vocab_size, d)];
    for _ in 0..config.num_layers {
        out.extend([
            (config.num_q_heads * config.head_dim, d),
            (config.kv_dim(), d),
            (config.kv_dim(), d),
            (d, d),
            (config.d_ff, d),
            (d, config.d_ff),
            (1, d),
            (1, d),
        ]);
    }
    out.push((1, d));
    out
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    rope: Rope,
}

/// Seeded random initialisation.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized")
    };
    let d = config.d_model;
    let embedding = draw(config.vocab_size, d);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: draw(config.num_q_heads * config.head_dim, d),
            wk: draw(config.kv_dim(), d),
            wv: draw(config.kv_dim(), d),
            wo: draw(d, d),
            w_in: draw(config.d_ff, d),
            w_out: draw(d, config.d_ff),
            norm1: vec![1.0; d],
            norm2: vec![1.0; d],
        })
        .collect();
    Model::from_weights(
        config.clone(),
        Weights {
            embedding,
            layers,
            final_norm: vec![1.0; d],
        },
    )
}

/// Activations captured during a forward pass, for exactly the new tokens.
#[derive(Debug, Clone)]
pub struct ProbeCapture {
    /// Indexed `[layer][q_head]`.
    pub heads: Vec<Vec<HeadProbe>>,
    pub layers: Vec<LayerProbe>,
}

#[derive(Debug, Clone)]
pub struct HeadProbe {
    /// The head's V rows for the new tokens (shared within a KV group).
    pub v_in: Matrix,
    /// `softmax(QKᵀ/√d)V` for the new tokens.
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub input: Matrix,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// tokens × vocab
    pub logits: Matrix,
    pub probes: Option<ProbeCapture>,
}

impl Model {
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let shapes = tensor_shapes(&config);
        let tensors = weights.tensors();
        if weights.layers.len() != config.num_layers || tensors.len() != shapes.len() {
            return Err(Error::Config(format!(
                "weights have {} layers, config has {}",
                weights.layers.len(),
                config.num_layers
            )));
        }
        let actual = std::iter::once(weights.embedding.shape())
            .chain(weights.layers.iter().flat_map(|l| {
                [
                    l.wq.shape(),
                    l.wk.shape(),
                    l.wv.shape(),
                    l.wo.shape(),
                    l.w_in.shape(),
                    l.w_out.shape(),
                    (1, l.norm1.len()),
                    (1, l.norm2.len()),
                ]
            }))
            .chain(std::iter::once((1, weights.final_norm.len())));
        for (i, (want, got)) in shapes.iter().zip(actual).enumerate() {
            if *want != got {
                return Err(Error::Config(format!(
                    "tensor {i} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        if let Some(i) = tensors.iter().position(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!("tensor {i} has non-finite entries")));
        }
        let rope = Rope::new(config.head_dim, config.rope_theta);
        Ok(Self {
            config,
            weights,
            rope,
        })
    }

    /// All-zero weights: every logit is 0, so the next-token distribution is uniform.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let z = |(r, c): (usize, usize)| Matrix::zeros(r, c);
        let d = config.d_model;
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: z((config.num_q_heads * config.head_dim, d)),
                wk: z((config.kv_dim(), d)),
                wv: z((config.kv_dim(), d)),
                wo: z((d, d)),
                w_in: z((config.d_ff, d)),
                w_out: z((d, config.d_ff)),
                norm1: vec![0.0; d],
                norm2: vec![0.0; d],
            })
            .collect();
        let weights = Weights {
            embedding: z((config.vocab_size, d)),
            layers,
            final_norm: vec![0.0; d],
        };
        Self::from_weights(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn check_caches(&self, caches: &CacheSet) -> Result<()> {
        let c = caches.config();
        if c.num_layers != self.config.num_layers
            || c.num_kv_heads != self.config.num_kv_heads
            || c.head_dim != self.config.head_dim
        {
            return Err(Error::Config(format!(
                "cache set is {}x{} (head_dim {}), model is {}x{} (head_dim {})",
                c.num_layers,
                c.num_kv_heads,
                c.head_dim,
                self.config.num_layers,
                self.config.num_kv_heads,
                self.config.head_dim
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut x = Matrix::zeros(tokens.len(), self.config.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Input(format!(
                    "token id {t} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            x.row_mut(i)
                .copy_from_slice(self.weights.embedding.row(t as usize));
        }
        Ok(x)
    }

    /// Runs `tokens` at positions continuing from the caches, appending
    /// their keys and values afterwards (evicting as budgets require).
    ///
    /// Each query attends to the already-retained tokens plus the causally
    /// visible new tokens.
    pub fn forward_chunk(
        &self,
        tokens: &[u32],
        caches: &mut CacheSet,
        capture: bool,
    ) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token chunk".into()));
        }
        self.check_caches(caches)?;
        let cfg = &self.config;
        let hd = cfg.head_dim;
        let gs = cfg.group_size();
        let start = caches.total_seen();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();

        let mut x = self.embed(tokens)?;
        let mut probes = capture.then(|| ProbeCapture {
            heads: Vec::with_capacity(cfg.num_layers),
            layers: Vec::with_capacity(cfg.num_layers),
        });

        for (l, lw) in self.weights.layers.iter().enumerate() {
            let layer_in = capture.then(|| x.clone());
            let xn = rms_norm(&x, &lw.norm1, NORM_EPS);
            let mut q = linear(&xn, &lw.wq);
            let mut k = linear(&xn, &lw.wk);
            let v = linear(&xn, &lw.wv);
            for (i, &p) in positions.iter().enumerate() {
                for h in q.row_mut(i).chunks_exact_mut(hd) {
                    self.rope.apply(h, p);
                }
                for h in k.row_mut(i).chunks_exact_mut(hd) {
                    self.rope.apply(h, p);
                }
            }

            let mut attn = Matrix::zeros(tokens.len(), cfg.d_model);
            let mut head_probes = Vec::new();
            for g in 0..cfg.num_kv_heads {
                let kg = k.column_block(g * hd, hd);
                let vg = v.column_block(g * hd, hd);
                let cache = caches.get_mut(l, g);
                let (ck, cv, cpos) = cache.context_with(&kg, &vg, &positions)?;
                for h in g * gs..(g + 1) * gs {
                    let qh = q.column_block(h * hd, hd);
                    let out = masked_attention(&qh, &positions, &ck, &cv, &cpos)?;
                    attn.set_column_block(h * hd, &out);
                    if capture {
                        head_probes.push(HeadProbe {
                            v_in: vg.clone(),
                            output: out,
                        });
                    }
                }
                cache.append_and_evict(&kg, &vg, &positions)?;
            }

            add_in_place(&mut x, &linear(&attn, &lw.wo));
            let hn = rms_norm(&x, &lw.norm2, NORM_EPS);
            let mut hidden = linear(&hn, &lw.w_in);
            hidden.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
            add_in_place(&mut x, &linear(&hidden, &lw.w_out));

            if let Some(p) = probes.as_mut() {
                p.heads.push(head_probes);
                p.layers.push(LayerProbe {
                    input: layer_in.expect("captured"),
                    output: x.clone(),
                });
            }
        }

        let xn = rms_norm(&x, &self.weights.final_norm, NORM_EPS);
        let logits = linear(&xn, &self.weights.embedding);
        Ok(ForwardOutput { logits, probes })
    }

    /// Logits for every token, fed so that no cache evicts in the middle of
    /// a chunk: each piece is at most the smallest free capacity (minimum 1).
    /// With budgets that never fill this is a single chunk; once full it is
    /// token-by-token decoding.
    pub fn forward_stream(&self, tokens: &[u32], caches: &mut CacheSet) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut logits = Matrix::zeros(0, self.config.vocab_size);
        let mut i = 0;
        while i < tokens.len() {
            let n = caches.min_free_capacity().max(1).min(tokens.len() - i);
            let out = self.forward_chunk(&tokens[i..i + n], caches, false)?;
            logits.extend_rows(&out.logits)?;
            i += n;
        }
        Ok(logits)
    }

    /// Greedy decoding: `steps` tokens, each the argmax (lowest id on ties)
    /// of the final-position logits.
    pub fn greedy_generate(
        &self,
        prompt: &[u32],
        steps: usize,
        caches: &mut CacheSet,
    ) -> Result<Vec<u32>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let logits = self.forward_stream(prompt, caches)?;
        let mut next = argmax(logits.row(logits.rows() - 1));
        let mut out = Vec::with_capacity(steps);
        out.push(next);
        while out.len() < steps {
            let step = self.forward_chunk(&[next], caches, false)?;
            next = argmax(step.logits.row(0));
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            d_model: 32,
            d_ff: 64,
            vocab_size: 257,
            max_context: 64,
            rope_theta: 10_000.0,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&tiny()).unwrap();
        let b = init_model(&tiny()).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = init_model(&tiny().with_seed(4)).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, -1.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let m = init_model(&tiny()).unwrap();
        let mut caches = CacheSet::full(m.config(), 4).unwrap();
        assert!(matches!(
            m.forward_chunk(&[300], &mut caches, false),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn rejects_mismatched_caches() {
        let m = init_model(&tiny()).unwrap();
        let mut caches = CacheSet::full(&ModelConfig::default(), 4).unwrap();
        assert!(matches!(
            m.forward_chunk(&[1], &mut caches, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn capture_rows_match_chunk_length() {
        let m = init_model(&tiny()).unwrap();
        let mut caches = CacheSet::full(m.config(), 4).unwrap();
        let out = m.forward_chunk(&[256, 72, 105, 33, 10], &mut caches, true).unwrap();
        let p = out.probes.unwrap();
        assert_eq!(p.heads.len(), 2);
        for layer in &p.heads {
            assert_eq!(layer.len(), 4);
            for h in layer {
                assert_eq!(h.v_in.shape(), (5, 8));
                assert_eq!(h.output.shape(), (5, 8));
            }
        }
        for lp in &p.layers {
            assert_eq!(lp.input.shape(), (5, 32));
            assert_eq!(lp.output.shape(), (5, 32));
        }
    }

    #[test]
    fn stream_matches_single_chunk_when_budgets_are_large() {
        let m = init_model(&tiny()).unwrap();
        let toks: Vec<u32> = (0..40).map(|i| (i * 7 % 256) as u32).collect();
        let mut a = CacheSet::full(m.config(), 4).unwrap();
        let mut b = CacheSet::full(m.config(), 4).unwrap();
        let one = m.forward_chunk(&toks, &mut a, false).unwrap().logits;
        let streamed = m.forward_stream(&toks, &mut b).unwrap();
        assert_eq!(one, streamed);
    }

    #[test]
    fn zero_steps_generate_nothing() {
        let m = init_model(&tiny()).unwrap();
        let mut caches = CacheSet::full(m.config(), 4).unwrap();
        assert!(m.greedy_generate(&[256], 0, &mut caches).unwrap().is_empty());
        assert_eq!(caches.total_seen(), 0);
    }
}
