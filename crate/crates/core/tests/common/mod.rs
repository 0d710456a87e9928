//! Independent oracles shared by the integration suites.
//!
//! Everything here recomputes from the raw weights in `f64` with its own
//! rotary, attention and normalisation code; none of it calls the crate's
//! forward path.

#![allow(dead_code)]

use std::path::PathBuf;

use baklava::model::Model;
use baklava::tensor::Matrix;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn corpus_tokens() -> Vec<u32> {
    let bytes = std::fs::read(data_dir().join("corpus.txt")).unwrap();
    std::iter::once(256)
        .chain(bytes.iter().map(|&b| b as u32))
        .collect()
}

pub fn prompt(name: &str) -> Vec<u32> {
    let bytes = std::fs::read(data_dir().join(name)).unwrap();
    std::iter::once(256)
        .chain(bytes.iter().map(|&b| b as u32))
        .collect()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn rmsnorm(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * *g as f64).collect()
}

fn rotate(x: &mut [f64], pos: usize, theta: f64) {
    let d = x.len();
    for i in 0..d / 2 {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (pos as f64 * freq).sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

/// Dense softmax attention of one query over explicit key/value rows.
pub fn dense_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in e.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / z * x;
        }
    }
    out
}

/// Full causal recomputation with no cache: logits for every position.
pub fn reference_logits(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let w = model.weights();
    let hd = cfg.head_dim;
    let gs = cfg.num_q_heads / cfg.num_kv_heads;
    let emb = rows(&w.embedding);
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| emb[t as usize].clone()).collect();
    for lw in &w.layers {
        let (wq, wk, wv, wo) = (rows(&lw.wq), rows(&lw.wk), rows(&lw.wv), rows(&lw.wo));
        let (w_in, w_out) = (rows(&lw.w_in), rows(&lw.w_out));
        let xn: Vec<Vec<f64>> = x.iter().map(|r| rmsnorm(r, &lw.norm1)).collect();
        let mut q: Vec<Vec<f64>> = xn.iter().map(|r| matvec(&wq, r)).collect();
        let mut k: Vec<Vec<f64>> = xn.iter().map(|r| matvec(&wk, r)).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|r| matvec(&wv, r)).collect();
        for (p, (qr, kr)) in q.iter_mut().zip(k.iter_mut()).enumerate() {
            for h in qr.chunks_mut(hd) {
                rotate(h, p, cfg.rope_theta);
            }
            for h in kr.chunks_mut(hd) {
                rotate(h, p, cfg.rope_theta);
            }
        }
        for i in 0..tokens.len() {
            let mut attn = Vec::with_capacity(cfg.d_model);
            for h in 0..cfg.num_q_heads {
                let g = h / gs;
                let keys: Vec<Vec<f64>> = (0..=i).map(|j| k[j][g * hd..(g + 1) * hd].to_vec()).collect();
                let vals: Vec<Vec<f64>> = (0..=i).map(|j| v[j][g * hd..(g + 1) * hd].to_vec()).collect();
                attn.extend(dense_attention(&q[i][h * hd..(h + 1) * hd], &keys, &vals));
            }
            let o = matvec(&wo, &attn);
            for (a, b) in x[i].iter_mut().zip(o) {
                *a += b;
            }
        }
        for xi in x.iter_mut() {
            let hn = rmsnorm(xi, &lw.norm2);
            let hidden: Vec<f64> = matvec(&w_in, &hn)
                .into_iter()
                .map(|z| z / (1.0 + (-z).exp()))
                .collect();
            for (a, b) in xi.iter_mut().zip(matvec(&w_out, &hidden)) {
                *a += b;
            }
        }
    }
    x.iter()
        .map(|r| matvec(&emb, &rmsnorm(r, &w.final_norm)))
        .collect()
}

pub fn argmax_f64(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding by full recomputation each step.
pub fn reference_generate(model: &Model, prompt: &[u32], steps: usize) -> Vec<u32> {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..steps {
        let logits = reference_logits(model, &ctx);
        let next = argmax_f64(logits.last().unwrap());
        out.push(next);
        ctx.push(next);
    }
    out
}

/// Teacher-forced mean NLL of `tokens[1..]` with no cache.
pub fn reference_nll(model: &Model, tokens: &[u32]) -> f64 {
    let logits = reference_logits(model, tokens);
    let mut total = 0.0;
    for i in 0..tokens.len() - 1 {
        let row = &logits[i];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[tokens[i + 1] as usize];
    }
    total / (tokens.len() - 1) as f64
}

/// `max |a - b| / max |b|` over all entries.
pub fn max_relative_error(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (ra, rb) in a.iter_rows().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            num = num.max((*x as f64 - y).abs());
            den = den.max(y.abs());
        }
    }
    num / den
}

/// Straight-line transcription of the head reallocation rule, written
/// without sharing code with the crate.
pub fn reallocation_trace(budgets: &[usize], imp: &[f64], t: f64, r: f64, floor: usize) -> Vec<usize> {
    let m = budgets.len();
    let mut low = Vec::new();
    for i in 0..m {
        if imp[i] < t {
            low.push(i);
        }
    }
    if low.len() > m - 1 || low.is_empty() {
        return budgets.to_vec();
    }
    let mut out = budgets.to_vec();
    let mut freed = 0usize;
    for &i in &low {
        let mut cut = (r * budgets[i] as f64).floor() as usize;
        if budgets[i] - cut < floor {
            cut = budgets[i].saturating_sub(floor);
        }
        out[i] -= cut;
        freed += cut;
    }
    let n = low.len();
    let k = n.min(m - n);
    // pick the k highest-importance non-donors one by one
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..m {
            if low.contains(&i) || chosen.contains(&i) {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if imp[i] > imp[b] => best = Some(i),
                _ => {}
            }
        }
        chosen.push(best.unwrap());
    }
    chosen.sort();
    let share = freed / k;
    let mut extra = freed % k;
    for &i in &chosen {
        out[i] += share;
        if extra > 0 {
            out[i] += 1;
            extra -= 1;
        }
    }
    out
}

/// `1 - 6 Σd² / (n(n² - 1))`, valid when neither input has ties.
pub fn textbook_spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |xs: &[f64]| -> Vec<f64> {
        xs.iter()
            .map(|x| 1.0 + xs.iter().filter(|y| *y < x).count() as f64)
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Cosine via the direct formula.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
