#![allow(dead_code)]

use aerovit_core::adapter::AdapterConfig;
use aerovit_core::model::params::{ParamStore, Session};
use aerovit_core::model::ModelConfig;
use aerovit_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Single-stage, single-block model on a 16×16 image (4×4 tokens).
pub fn one_block() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        in_channels: 3,
        patch_size: 4,
        embed_dim: 8,
        depths: vec![1],
        heads: vec![2],
        window: 4,
        fe_kernel: 3,
        channel_groups: 2,
        mlp_ratio: 2,
        ln_eps: 1e-5,
    }
}

/// Two stages: a plain and a shifted block, a merge, then one more block.
pub fn two_stage() -> ModelConfig {
    ModelConfig {
        depths: vec![2, 1],
        heads: vec![2, 2],
        window: 2,
        ..one_block()
    }
}

pub fn small_adapters() -> AdapterConfig {
    AdapterConfig {
        bottleneck_factor: 4,
        bottleneck_width: None,
        conv_kernel: 3,
        msa: true,
        ffn: true,
    }
}

/// Replace every parameter with O(1) random values so that zero-initialised
/// biases and tables carry gradient signal.
pub fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

/// Leaf tensors for `names` in order, ready for `check_gradients`.
pub fn param_inputs(store: &ParamStore, names: &[String]) -> Vec<Tensor> {
    names.iter().map(|n| store.get(n).unwrap().value.clone()).collect()
}

/// Session over `store` with `names[i]` bound to `vars[i]`.
pub fn bound_session<'a>(g: &'a mut Graph, store: &'a ParamStore, names: &[String], vars: &[Var]) -> Session<'a> {
    let mut s = Session::new(g, store);
    for (n, &v) in names.iter().zip(vars) {
        s.bind(n.clone(), v);
    }
    s
}

pub fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    aerovit_core::gradcheck::probe(g, v)
}
