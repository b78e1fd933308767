//! Independent reference computations for the acceptance and CLI suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aerovit_core::adapter::AdapterConfig;
use aerovit_core::model::ModelConfig;
use aerovit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Golden-section search for the maximiser of a unimodal `f` on `[lo, hi]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, rel_tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > rel_tol * (lo + hi) / 2.0 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    (lo + hi) / 2.0
}

/// O(N²) symmetric InfoNCE straight from the definition.
pub fn info_nce_brute(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let unit = |t: &Tensor, i: usize| -> Vec<f64> {
        let row = &t.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter().map(|v| v / norm).collect()
    };
    let ua: Vec<Vec<f64>> = (0..n).map(|i| unit(a, i)).collect();
    let ub: Vec<Vec<f64>> = (0..n).map(|i| unit(b, i)).collect();
    let sim = |i: usize, j: usize| ua[i].iter().zip(&ub[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| sim(j, i).exp()).sum();
        total += 2.0 * sim(i, i) - row.ln() - col.ln();
    }
    -total / (2 * n) as f64
}

/// Frozen backbone and trainable adapter totals, layer by layer.
pub fn closed_form_counts(cfg: &ModelConfig, adapters: &AdapterConfig) -> (usize, usize) {
    let p2 = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    let c0 = cfg.embed_dim;
    let k2 = cfg.fe_kernel * cfg.fe_kernel;
    let (mut backbone, mut adapter) = (p2 * c0 + 2 * c0, 0);
    let mut grid = cfg.image_size / cfg.patch_size;
    let n = cfg.depths.len();
    for s in 0..n {
        if s > 0 {
            grid /= 2;
        }
        let c = c0 << s;
        let w = cfg.window.min(grid);
        let hidden = c * cfg.mlp_ratio;
        let block = 2 * c
            + c * k2
            + 3 * c * c
            + 3 * c
            + (2 * w - 1) * (2 * w - 1) * cfg.heads[s]
            + c * c
            + c
            + 2 * c
            + c * hidden
            + hidden
            + hidden * c
            + c;
        backbone += cfg.depths[s] * block;
        if s + 1 < n {
            backbone += 8 * c + 8 * c * c;
        }
        let r = adapters.bottleneck_width.unwrap_or(c / adapters.bottleneck_factor);
        let ak = adapters.conv_kernel * adapters.conv_kernel;
        let msa = if adapters.msa { 2 * c * r + r + c } else { 0 };
        let ffn = if adapters.ffn { 2 * c * r + r + r * ak + c } else { 0 };
        adapter += cfg.depths[s] * (msa + ffn);
    }
    backbone += 2 * (c0 << (n - 1));
    (backbone, adapter)
}

/// Small two-stage model on 16×16 inputs, quick enough for CLI round trips.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        in_channels: 3,
        patch_size: 4,
        embed_dim: 8,
        depths: vec![2, 1],
        heads: vec![2, 2],
        window: 2,
        fe_kernel: 3,
        channel_groups: 2,
        mlp_ratio: 2,
        ln_eps: 1e-5,
    }
}

pub fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_aerovit")
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(binary())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

/// Every regular file below `root`, as sorted relative paths.
pub fn files_under(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
