//! Hierarchical windowed-attention backbone with depthwise frequency
//! enhancement ahead of attention and optional bottleneck adapters.
//!
//! Block structure, for tokens `z` on a square grid:
//!
//! ```text
//! h  = LN1(z)
//! z' = z + WinAttn(h + DWConv(h)) [+ AdapterMSA(h)]
//! out = z' + MLP(LN2(z')) [+ AdapterFFN(LN2(z'))]
//! ```
//!
//! Blocks alternate plain and cyclically shifted windows. Stages are joined
//! by 2×2 patch merging.

pub mod attention;
pub mod params;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_ffn, adapter_msa, AdapterConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

use self::attention::{window_attention, AttentionShape};
use self::params::{Init, ParamGroup, ParamSpec, ParamStore, Session};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Blocks per stage; one entry per stage.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Window side in tokens.
    pub window: usize,
    /// Depthwise kernel size of the enhancement conv.
    pub fe_kernel: usize,
    pub channel_groups: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Resolved per-stage geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub index: usize,
    pub channels: usize,
    pub grid: usize,
    pub depth: usize,
    pub heads: usize,
    /// Effective window: the configured one, clipped to the grid.
    pub window: usize,
    /// Shift used by the odd blocks; 0 when a single window covers the grid.
    pub shift: usize,
}

impl StageSpec {
    pub fn block_shift(&self, block: usize) -> usize {
        if block % 2 == 1 {
            self.shift
        } else {
            0
        }
    }
}

impl ModelConfig {
    /// 64×64 input, patch 4, 32 channels, depths [2,2,2,2], window 4.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            heads: vec![2, 4, 8, 8],
            window: 4,
            fe_kernel: 7,
            channel_groups: 4,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }

    /// Base-scale layout at 224 input; meant for parameter counting only.
    pub fn base_dry() -> Self {
        ModelConfig {
            image_size: 224,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            window: 7,
            fe_kernel: 7,
            channel_groups: 4,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn stages(&self) -> Result<Vec<StageSpec>> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depths.is_empty() || self.depths.len() > 4 || self.depths.len() != self.heads.len() {
            return bad(format!(
                "need 1-4 stages with matching depths/heads, got {:?} / {:?}",
                self.depths, self.heads
            ));
        }
        if self.fe_kernel % 2 == 0 {
            return bad(format!("fe_kernel must be odd, got {}", self.fe_kernel));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return bad("zero-sized model dimension".into());
        }
        if !(self.ln_eps >= 0.0) {
            return bad(format!("ln_eps must be >= 0, got {}", self.ln_eps));
        }
        let mut grid = self.grid();
        let mut out = Vec::with_capacity(self.depths.len());
        for (s, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            if s > 0 {
                if grid % 2 != 0 {
                    return bad(format!("stage {s}: cannot merge an odd {grid}x{grid} grid"));
                }
                grid /= 2;
            }
            let channels = self.embed_dim << s;
            if depth == 0 || heads == 0 || channels % heads != 0 {
                return bad(format!("stage {s}: {channels} channels, {heads} heads, depth {depth}"));
            }
            if channels % self.channel_groups.max(1) != 0 || self.channel_groups == 0 {
                return bad(format!(
                    "stage {s}: {channels} channels not divisible into {} groups",
                    self.channel_groups
                ));
            }
            let (window, shift) = if grid <= self.window {
                (grid, 0)
            } else {
                (self.window, self.window / 2)
            };
            if grid % window != 0 {
                return bad(format!("stage {s}: grid {grid} not divisible by window {window}"));
            }
            out.push(StageSpec {
                index: s,
                channels,
                grid,
                depth,
                heads,
                window,
                shift,
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages().map(|_| ())
    }

    pub fn final_channels(&self) -> usize {
        self.embed_dim << (self.depths.len().saturating_sub(1))
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn block_prefix(stage: usize, block: usize) -> String {
        format!("stages.{stage}.blocks.{block}.")
    }

    /// Every backbone parameter: embedding, blocks, merges, final norm.
    pub fn backbone_param_specs(&self) -> Result<Vec<ParamSpec>> {
        let stages = self.stages()?;
        let bb = ParamGroup::Backbone;
        let tn = Init::TruncNormal(INIT_STD);
        let c0 = self.embed_dim;
        let mut specs = vec![
            ParamSpec::new("embed.proj.weight", [self.patch_dim(), c0], tn, bb),
            ParamSpec::new("embed.proj.bias", [c0], Init::Zeros, bb),
            ParamSpec::new("embed.mask_token", [c0], tn, bb),
        ];
        let k = self.fe_kernel;
        for st in &stages {
            let c = st.channels;
            let hidden = c * self.mlp_ratio;
            let span = 2 * st.window - 1;
            for b in 0..st.depth {
                let p = Self::block_prefix(st.index, b);
                specs.extend([
                    ParamSpec::new(format!("{p}norm1.weight"), [c], Init::Ones, bb),
                    ParamSpec::new(format!("{p}norm1.bias"), [c], Init::Zeros, bb),
                    ParamSpec::new(format!("{p}fe.kernel"), [c, k, k], tn, bb),
                    ParamSpec::new(format!("{p}attn.qkv.weight"), [c, 3 * c], tn, bb),
                    ParamSpec::new(format!("{p}attn.qkv.bias"), [3 * c], Init::Zeros, bb),
                    ParamSpec::new(format!("{p}attn.rel_bias"), [span * span, st.heads], Init::Zeros, bb),
                    ParamSpec::new(format!("{p}attn.proj.weight"), [c, c], tn, bb),
                    ParamSpec::new(format!("{p}attn.proj.bias"), [c], Init::Zeros, bb),
                    ParamSpec::new(format!("{p}norm2.weight"), [c], Init::Ones, bb),
                    ParamSpec::new(format!("{p}norm2.bias"), [c], Init::Zeros, bb),
                    ParamSpec::new(format!("{p}mlp.fc1.weight"), [c, hidden], tn, bb),
                    ParamSpec::new(format!("{p}mlp.fc1.bias"), [hidden], Init::Zeros, bb),
                    ParamSpec::new(format!("{p}mlp.fc2.weight"), [hidden, c], tn, bb),
                    ParamSpec::new(format!("{p}mlp.fc2.bias"), [c], Init::Zeros, bb),
                ]);
            }
            if st.index + 1 < stages.len() {
                let p = format!("stages.{}.merge.", st.index);
                specs.extend([
                    ParamSpec::new(format!("{p}norm.weight"), [4 * c], Init::Ones, bb),
                    ParamSpec::new(format!("{p}norm.bias"), [4 * c], Init::Zeros, bb),
                    ParamSpec::new(format!("{p}reduction.weight"), [4 * c, 2 * c], tn, bb),
                ]);
            }
        }
        let cl = self.final_channels();
        specs.push(ParamSpec::new("norm.weight", [cl], Init::Ones, bb));
        specs.push(ParamSpec::new("norm.bias", [cl], Init::Zeros, bb));
        Ok(specs)
    }
}

/// `[grid², C]` tokens to `[C, grid, grid]` planes.
pub(crate) fn tokens_to_planes(s: &mut Session<'_>, x: Var, grid: usize) -> Result<Var> {
    let shape = s.graph.shape(x).to_vec();
    let (t, c) = match shape.as_slice() {
        [t, c] if *t == grid * grid => (*t, *c),
        _ => return Err(Error::shape("tokens_to_planes", &shape, &[grid * grid])),
    };
    let idx: Vec<usize> = (0..c).flat_map(|ch| (0..t).map(move |tok| tok * c + ch)).collect();
    s.graph.gather(x, idx, &[c, grid, grid])
}

/// Inverse of [`tokens_to_planes`].
pub(crate) fn planes_to_tokens(s: &mut Session<'_>, x: Var, grid: usize, channels: usize) -> Result<Var> {
    let t = grid * grid;
    let idx: Vec<usize> = (0..t).flat_map(|tok| (0..channels).map(move |ch| ch * t + tok)).collect();
    s.graph.gather(x, idx, &[t, channels])
}

/// Pixel offsets of every (token, patch feature) pair, tokens row-major,
/// features ordered (channel, row, column).
fn patch_index(channels: usize, size: usize, patch: usize) -> Vec<usize> {
    let grid = size / patch;
    let mut idx = Vec::with_capacity(channels * size * size);
    for gi in 0..grid {
        for gj in 0..grid {
            for c in 0..channels {
                for a in 0..patch {
                    for b in 0..patch {
                        idx.push((c * size + gi * patch + a) * size + gj * patch + b);
                    }
                }
            }
        }
    }
    idx
}

/// Non-overlapping patches of `img[C,H,W]`, flattened and linearly projected
/// to `[tokens, embed_dim]`.
pub fn patch_embed(s: &mut Session<'_>, img: Var, cfg: &ModelConfig) -> Result<Var> {
    let expected = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if s.graph.shape(img) != expected {
        return Err(Error::shape("patch_embed", s.graph.shape(img), &expected));
    }
    if cfg.patch_size == 0 || cfg.image_size % cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "image size {} not divisible by patch size {}",
            cfg.image_size, cfg.patch_size
        )));
    }
    let tokens = cfg.grid() * cfg.grid();
    let idx = patch_index(cfg.in_channels, cfg.image_size, cfg.patch_size);
    let patches = s.graph.gather(img, idx, &[tokens, cfg.patch_dim()])?;
    let w = s.param("embed.proj.weight")?;
    let b = s.param("embed.proj.bias")?;
    s.graph.linear(patches, w, Some(b))
}

/// Replace masked tokens with the learned mask embedding.
pub fn apply_token_mask(s: &mut Session<'_>, z: Var, mask: &[bool]) -> Result<Var> {
    let (t, c) = (s.graph.shape(z)[0], s.graph.shape(z)[1]);
    if mask.len() != t {
        return Err(Error::shape("apply_token_mask", &[t], &[mask.len()]));
    }
    let keep = Tensor::from_fn([t, c], |i| if mask[i / c] { 0.0 } else { 1.0 });
    let take = Tensor::from_fn([t, c], |i| if mask[i / c] { 1.0 } else { 0.0 });
    let keep = s.graph.constant(keep);
    let take = s.graph.constant(take);
    let token = s.param("embed.mask_token")?;
    let tiled = s.graph.gather(token, (0..t * c).map(|i| i % c).collect::<Vec<_>>(), &[t, c])?;
    let kept = s.graph.mul(z, keep)?;
    let filled = s.graph.mul(tiled, take)?;
    s.graph.add(kept, filled)
}

/// Depthwise `k×k` convolution over the token grid, applied per contiguous
/// channel group and concatenated, plus a residual: `z + Concat(DWConv(zᵍ))`.
pub fn fe_enhance(s: &mut Session<'_>, z: Var, grid: usize, kernel_name: &str, groups: usize) -> Result<Var> {
    let shape = s.graph.shape(z).to_vec();
    let (t, c) = match shape.as_slice() {
        [t, c] => (*t, *c),
        _ => return Err(Error::shape("fe_enhance", &shape, &[grid * grid])),
    };
    if t != grid * grid {
        return Err(Error::shape("fe_enhance", &shape, &[grid * grid, c]));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels not divisible into {groups} groups")));
    }
    let kernel = s.param(kernel_name)?;
    let k = s.graph.shape(kernel)[1];
    let planes = tokens_to_planes(s, z, grid)?;
    let per = c / groups;
    let mut outs = Vec::with_capacity(groups);
    for gi in 0..groups {
        let xg = s.graph.slice(planes, 0, gi * per, per)?;
        let kg = s.graph.slice(kernel, 0, gi * per, per)?;
        outs.push(s.graph.depthwise_conv2d(xg, kg, (k - 1) / 2)?);
    }
    let fz = s.graph.concat(&outs, 0)?;
    let fz = planes_to_tokens(s, fz, grid, c)?;
    s.graph.add(z, fz)
}

fn layer_norm(s: &mut Session<'_>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let w = s.param(&format!("{prefix}weight"))?;
    let b = s.param(&format!("{prefix}bias"))?;
    s.graph.layernorm(x, w, b, eps)
}

fn mlp(s: &mut Session<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w1 = s.param(&format!("{prefix}fc1.weight"))?;
    let b1 = s.param(&format!("{prefix}fc1.bias"))?;
    let w2 = s.param(&format!("{prefix}fc2.weight"))?;
    let b2 = s.param(&format!("{prefix}fc2.bias"))?;
    let h = s.graph.linear(x, w1, Some(b1))?;
    let h = s.graph.gelu(h);
    s.graph.linear(h, w2, Some(b2))
}

/// Everything a block needs besides its parameter prefix.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext<'c> {
    pub attention: AttentionShape,
    pub channel_groups: usize,
    pub ln_eps: f64,
    pub adapters: Option<&'c AdapterConfig>,
}

/// Result of one block: new tokens plus the attention probabilities.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub tokens: Var,
    pub attn_probs: Var,
}

pub fn ringmo_block(s: &mut Session<'_>, z: Var, prefix: &str, ctx: BlockContext<'_>) -> Result<BlockOutput> {
    let grid = ctx.attention.grid;
    let h = layer_norm(s, z, &format!("{prefix}norm1."), ctx.ln_eps)?;
    let enhanced = fe_enhance(s, h, grid, &format!("{prefix}fe.kernel"), ctx.channel_groups)?;
    let attn = window_attention(s, enhanced, ctx.attention, &format!("{prefix}attn."))?;
    let mut branch = attn.output;
    if ctx.adapters.map_or(false, |a| a.msa) {
        let extra = adapter_msa(s, h, &format!("{prefix}adapter.msa."))?;
        branch = s.graph.add(branch, extra)?;
    }
    let z = s.graph.add(z, branch)?;

    let h2 = layer_norm(s, z, &format!("{prefix}norm2."), ctx.ln_eps)?;
    let mut branch = mlp(s, h2, &format!("{prefix}mlp."))?;
    if ctx.adapters.map_or(false, |a| a.ffn) {
        let extra = adapter_ffn(s, h2, grid, &format!("{prefix}adapter.ffn."))?;
        branch = s.graph.add(branch, extra)?;
    }
    let tokens = s.graph.add(z, branch)?;
    Ok(BlockOutput {
        tokens,
        attn_probs: attn.probs,
    })
}

/// 2×2 neighbourhood concatenation (`4C`), layer norm, projection to `2C`.
pub fn patch_merge(s: &mut Session<'_>, z: Var, grid: usize, prefix: &str, eps: f64) -> Result<Var> {
    let shape = s.graph.shape(z).to_vec();
    let c = match shape.as_slice() {
        [t, c] if *t == grid * grid => *c,
        _ => return Err(Error::shape("patch_merge", &shape, &[grid * grid])),
    };
    if grid % 2 != 0 {
        return Err(Error::Config(format!("cannot merge an odd {grid}x{grid} grid")));
    }
    let half = grid / 2;
    let mut idx = Vec::with_capacity(grid * grid * c);
    for i in 0..half {
        for j in 0..half {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let tok = (2 * i + di) * grid + 2 * j + dj;
                idx.extend(tok * c..(tok + 1) * c);
            }
        }
    }
    let cat = s.graph.gather(z, idx, &[half * half, 4 * c])?;
    let normed = layer_norm(s, cat, &format!("{prefix}norm."), eps)?;
    let w = s.param(&format!("{prefix}reduction.weight"))?;
    s.graph.matmul(normed, w)
}

#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    pub tokens: Var,
    pub grid: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub stages: Vec<StageOutput>,
    /// Mean of the final-normed last-stage tokens, `[1, C]`; only when every
    /// stage ran.
    pub pooled: Option<Var>,
    pub attn_probs: Vec<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    /// Token-level mask; masked tokens take the mask embedding.
    pub token_mask: Option<&'a [bool]>,
    /// Stop after this many stages.
    pub max_stages: Option<usize>,
}

/// Backbone configuration plus optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub adapters: Option<AdapterConfig>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config,
            adapters: None,
        })
    }

    pub fn with_adapters(mut self, adapters: AdapterConfig) -> Result<Self> {
        adapters.validate(&self.config)?;
        self.adapters = Some(adapters);
        Ok(self)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::from_specs(&self.config.backbone_param_specs()?, rng);
        if let Some(a) = &self.adapters {
            store.extend_from_specs(&a.param_specs(&self.config)?, rng);
        }
        Ok(store)
    }

    /// Add freshly initialised adapter parameters to an existing store.
    pub fn attach_adapters<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, adapters: AdapterConfig, rng: &mut R) -> Result<()> {
        adapters.validate(&self.config)?;
        store.extend_from_specs(&adapters.param_specs(&self.config)?, rng);
        self.adapters = Some(adapters);
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_>, img: Var, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let stages = cfg.stages()?;
        let run = opts.max_stages.unwrap_or(stages.len()).min(stages.len());
        let mut z = patch_embed(s, img, cfg)?;
        if let Some(mask) = opts.token_mask {
            z = apply_token_mask(s, z, mask)?;
        }
        let mut outputs = Vec::with_capacity(run);
        let mut probs = Vec::new();
        for st in stages.iter().take(run) {
            if st.index > 0 {
                let prev = stages[st.index - 1];
                z = patch_merge(s, z, prev.grid, &format!("stages.{}.merge.", prev.index), cfg.ln_eps)?;
            }
            for b in 0..st.depth {
                let ctx = BlockContext {
                    attention: AttentionShape {
                        grid: st.grid,
                        channels: st.channels,
                        heads: st.heads,
                        window: st.window,
                        shift: st.block_shift(b),
                    },
                    channel_groups: cfg.channel_groups,
                    ln_eps: cfg.ln_eps,
                    adapters: self.adapters.as_ref(),
                };
                let out = ringmo_block(s, z, &ModelConfig::block_prefix(st.index, b), ctx)?;
                z = out.tokens;
                probs.push(out.attn_probs);
            }
            outputs.push(StageOutput {
                tokens: z,
                grid: st.grid,
                channels: st.channels,
            });
        }
        let pooled = if run == stages.len() {
            let normed = layer_norm(s, z, "norm.", cfg.ln_eps)?;
            let t = s.graph.shape(normed)[0];
            let summed = s.graph.sum_axis(normed, 0)?;
            let mean = s.graph.scale(summed, 1.0 / t as f64);
            Some(s.graph.reshape(mean, &[1, cfg.final_channels()])?)
        } else {
            None
        };
        Ok(ForwardOutput {
            stages: outputs,
            pooled,
            attn_probs: probs,
        })
    }
}

/// Reassemble per-token patch predictions `[tokens, C·p²]` into an image
/// `[C, H, W]`; inverse of the patch flattening in [`patch_embed`].
pub fn unpatchify(s: &mut Session<'_>, x: Var, channels: usize, size: usize, patch: usize) -> Result<Var> {
    let fwd = patch_index(channels, size, patch);
    let mut inv = vec![0usize; fwd.len()];
    for (slot, &pix) in fwd.iter().enumerate() {
        inv[pix] = slot;
    }
    s.graph.gather(x, Rc::<[usize]>::from(inv), &[channels, size, size])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_stage_geometry() {
        let st = ModelConfig::toy().stages().unwrap();
        let grids: Vec<usize> = st.iter().map(|s| s.grid).collect();
        assert_eq!(grids, vec![16, 8, 4, 2]);
        let tokens: Vec<usize> = grids.iter().map(|g| g * g).collect();
        assert_eq!(tokens, vec![256, 64, 16, 4]);
        assert_eq!(st[0].shift, 2);
        assert_eq!((st[2].window, st[2].shift), (4, 0));
        assert_eq!((st[3].window, st[3].shift), (2, 0));
        assert_eq!(st[3].channels, 256);
    }

    #[test]
    fn config_errors() {
        let mut c = ModelConfig::toy();
        c.image_size = 62;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.heads[1] = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.fe_kernel = 6;
        assert!(c.validate().is_err());
        assert!(ModelConfig::base_dry().validate().is_ok());
    }

    #[test]
    fn patch_embed_counts_and_zero_image() {
        let cfg = ModelConfig::toy();
        let model = Model::new(cfg.clone()).unwrap();
        let mut store = model.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.get_mut("embed.proj.bias").unwrap().value = Tensor::from_fn([32], |i| i as f64);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let img = s.graph.constant(Tensor::zeros([3, 64, 64]));
        let z = patch_embed(&mut s, img, &cfg).unwrap();
        assert_eq!(s.graph.shape(z), &[256, 32]);
        for row in s.graph.value(z).data().chunks(32) {
            assert!(row.iter().enumerate().all(|(i, &v)| v == i as f64));
        }
    }

    #[test]
    fn unpatchify_inverts_patch_layout() {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 2,
            ..ModelConfig::toy()
        };
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let img = Tensor::from_fn([3, 8, 8], |i| i as f64);
        let x = s.graph.constant(img.clone());
        let idx = patch_index(3, 8, 2);
        let p = s.graph.gather(x, idx, &[16, 12]).unwrap();
        let back = unpatchify(&mut s, p, 3, 8, 2).unwrap();
        assert_eq!(s.graph.value(back), &img);
        let _ = cfg;
    }

    #[test]
    fn merge_shapes() {
        let mut store = ParamStore::new();
        store.insert("m.norm.weight", Tensor::ones([128]), ParamGroup::Backbone);
        store.insert("m.norm.bias", Tensor::zeros([128]), ParamGroup::Backbone);
        store.insert("m.reduction.weight", Tensor::ones([128, 64]), ParamGroup::Backbone);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let z = s.graph.constant(Tensor::from_fn([64, 32], |i| (i as f64).sin()));
        let m = patch_merge(&mut s, z, 8, "m.", 1e-5).unwrap();
        assert_eq!(s.graph.shape(m), &[16, 64]);
        let odd = s.graph.constant(Tensor::zeros([9, 32]));
        assert!(patch_merge(&mut s, odd, 3, "m.", 1e-5).is_err());
    }
}
