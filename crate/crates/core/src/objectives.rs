//! Masked-image reconstruction and contrastive pre-training objectives.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::params::{Init, ParamGroup, ParamSpec, Session};
use crate::model::{unpatchify, ModelConfig, INIT_STD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Mask unit side in pixels.
    pub unit: usize,
    pub ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { unit: 8, ratio: 0.6 }
    }
}

/// Unit-aligned square mask over an image, row-major over units.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub image_size: usize,
    pub unit: usize,
    pub ratio: f64,
    pub units: Vec<bool>,
}

impl MaskSpec {
    pub fn units_per_side(&self) -> usize {
        self.image_size / self.unit
    }

    pub fn masked_units(&self) -> usize {
        self.units.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_units() as f64 / self.units.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.masked_units() == 0
    }

    pub fn pixel_masked(&self, y: usize, x: usize) -> bool {
        self.units[(y / self.unit) * self.units_per_side() + x / self.unit]
    }

    /// Per-token mask for a token grid with `patch`-pixel tokens.
    pub fn token_mask(&self, patch: usize) -> Result<Vec<bool>> {
        if patch == 0 || self.unit % patch != 0 {
            return Err(Error::Config(format!(
                "mask unit {} is not a multiple of patch size {patch}",
                self.unit
            )));
        }
        let grid = self.image_size / patch;
        Ok((0..grid * grid)
            .map(|t| self.pixel_masked((t / grid) * patch, (t % grid) * patch))
            .collect())
    }

    /// Flat `[C, H, W]` offsets of every masked pixel in every channel.
    pub fn masked_offsets(&self, channels: usize) -> Vec<usize> {
        let s = self.image_size;
        let mut out = Vec::new();
        for c in 0..channels {
            for y in 0..s {
                for x in 0..s {
                    if self.pixel_masked(y, x) {
                        out.push((c * s + y) * s + x);
                    }
                }
            }
        }
        out
    }
}

/// `round(ratio · units)` units chosen uniformly without replacement.
pub fn make_mask<R: Rng + ?Sized>(image_size: usize, unit: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if unit == 0 || image_size == 0 || image_size % unit != 0 {
        return Err(Error::Config(format!(
            "image size {image_size} not divisible by mask unit {unit}"
        )));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let side = image_size / unit;
    let total = side * side;
    let count = (ratio * total as f64).round() as usize;
    let mut units = vec![false; total];
    for i in index::sample(rng, total, count) {
        units[i] = true;
    }
    Ok(MaskSpec {
        image_size,
        unit,
        ratio,
        units,
    })
}

/// Mean absolute error over the masked pixels of `pred` and `target`
/// (both `[C, H, W]`).
pub fn mim_loss(g: &mut Graph, pred: Var, target: Var, mask: &MaskSpec) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(target) {
        return Err(Error::shape("mim_loss", &shape, g.shape(target)));
    }
    match shape.as_slice() {
        [_, h, w] if *h == mask.image_size && *w == mask.image_size => {}
        _ => return Err(Error::shape("mim_loss", &shape, &[mask.image_size, mask.image_size])),
    }
    if mask.is_empty() {
        return Err(Error::Contract("mim_loss over an empty mask is undefined".into()));
    }
    let idx: std::rc::Rc<[usize]> = mask.masked_offsets(shape[0]).into();
    let n = idx.len();
    let p = g.gather(pred, idx.clone(), &[n])?;
    let t = g.gather(target, idx, &[n])?;
    g.l1_loss(p, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Weight of the contrastive term in the joint loss.
    pub weight: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.2,
            proj_hidden: 256,
            proj_dim: 64,
            weight: 1.0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::Config("projection sizes must be positive".into()));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::Config(format!("contrastive weight must be >= 0, got {}", self.weight)));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE over `[N, D]` feature pairs; row `i` of `a` and `b` is
/// the positive pair, every other row a negative.
pub fn info_nce(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if shape.len() != 2 || shape != g.shape(b) {
        return Err(Error::shape("info_nce", &shape, g.shape(b)));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Contract(format!("info_nce needs at least 2 pairs, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
    }
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let bt = g.transpose(bn)?;
    let sim = g.matmul(an, bt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let logits_t = g.transpose(logits)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let mut total = None;
    for l in [logits, logits_t] {
        let ls = g.log_softmax_lastdim(l)?;
        let d = g.gather(ls, diag.clone(), &[n])?;
        let s = g.sum(d);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("two directions");
    Ok(g.scale(total, -1.0 / (2 * n) as f64))
}

/// Fraction of rows of `a` whose most similar row of `b` (cosine) is its own
/// partner.
pub fn retrieval_top1(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, d) = match a.shape() {
        [n, d] if a.shape() == b.shape() => (*n, *d),
        _ => return Err(Error::shape("retrieval_top1", a.shape(), b.shape())),
    };
    let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut hits = 0;
    for i in 0..n {
        let ra = &a.data()[i * d..(i + 1) * d];
        let na = norm(ra);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in 0..n {
            let rb = &b.data()[j * d..(j + 1) * d];
            let cos = ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>() / (na * norm(rb));
            if cos > best.0 {
                best = (cos, j);
            }
        }
        hits += usize::from(best.1 == i);
    }
    Ok(hits as f64 / n as f64)
}

/// Parameters of the reconstruction and projection heads.
pub fn head_param_specs(model: &ModelConfig, contrast: &ContrastConfig) -> Result<Vec<ParamSpec>> {
    let stages = model.stages()?;
    let c1 = stages[0].channels;
    let cl = model.final_channels();
    let out = model.patch_dim();
    let (h, d) = (contrast.proj_hidden, contrast.proj_dim);
    let tn = Init::TruncNormal(INIT_STD);
    let head = ParamGroup::Head;
    Ok(vec![
        ParamSpec::new("head.recon.weight", [c1, out], tn, head),
        ParamSpec::new("head.recon.bias", [out], Init::Zeros, head),
        ParamSpec::new("head.proj.fc1.weight", [cl, h], tn, head),
        ParamSpec::new("head.proj.fc1.bias", [h], Init::Zeros, head),
        ParamSpec::new("head.proj.bn.weight", [h], Init::Ones, head),
        ParamSpec::new("head.proj.bn.bias", [h], Init::Zeros, head),
        ParamSpec::new("head.proj.fc2.weight", [h, d], tn, head),
        ParamSpec::new("head.proj.fc2.bias", [d], Init::Zeros, head),
    ])
}

/// Linear per-token prediction of patch pixels from stage-1 tokens,
/// reassembled into a `[C, H, W]` image.
pub fn reconstruction_head(s: &mut Session<'_>, feats: Var, cfg: &ModelConfig) -> Result<Var> {
    let grid = cfg.grid();
    let w = s.param("head.recon.weight")?;
    let b = s.param("head.recon.bias")?;
    let c1 = s.graph.shape(w)[0];
    if s.graph.shape(feats) != [grid * grid, c1] {
        return Err(Error::shape("reconstruction_head", s.graph.shape(feats), &[grid * grid, c1]));
    }
    let y = s.graph.linear(feats, w, Some(b))?;
    unpatchify(s, y, cfg.in_channels, cfg.image_size, cfg.patch_size)
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Two-layer MLP projector on `[N, C]` pooled features. The hidden layer is
/// normalised per feature over the batch before the activation, which keeps
/// a feature shared by every sample from swamping the differences between
/// them.
pub fn projection_head(s: &mut Session<'_>, pooled: Var) -> Result<Var> {
    let w1 = s.param("head.proj.fc1.weight")?;
    let b1 = s.param("head.proj.fc1.bias")?;
    let gamma = s.param("head.proj.bn.weight")?;
    let beta = s.param("head.proj.bn.bias")?;
    let w2 = s.param("head.proj.fc2.weight")?;
    let b2 = s.param("head.proj.fc2.bias")?;
    let h = s.graph.linear(pooled, w1, Some(b1))?;
    let h = batch_norm(s.graph, h, gamma, beta)?;
    let h = s.graph.gelu(h);
    s.graph.linear(h, w2, Some(b2))
}

/// Per-column standardisation of `[N, H]` with batch statistics, then a
/// per-column affine map.
pub fn batch_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (n, h) = match shape.as_slice() {
        [n, h] => (*n, *h),
        _ => return Err(Error::shape("batch_norm", &shape, &[0, 0])),
    };
    let xt = g.transpose(x)?;
    let ones = g.constant(Tensor::ones([n]));
    let zeros = g.constant(Tensor::zeros([n]));
    let normed = g.layernorm(xt, ones, zeros, BATCH_NORM_EPS)?;
    let normed = g.transpose(normed)?;
    let tiled = |g: &mut Graph, v: Var| g.gather(v, (0..n * h).map(|i| i % h).collect::<Vec<_>>(), &[n, h]);
    let gamma = tiled(g, gamma)?;
    let scaled = g.mul(normed, gamma)?;
    g.add_row(scaled, beta)
}
