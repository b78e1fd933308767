//! Bottleneck adapters that run beside the attention and MLP sublayers of a
//! frozen backbone.
//!
//! The attention-side adapter is `Up(GELU(Down(x)))`; the MLP-side adapter
//! adds a depthwise convolution over the token grid at bottleneck width,
//! `Up(GELU(Conv(GELU(Down(x)))))`. `Up` starts at zero so attaching fresh
//! adapters leaves the network output unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::params::{Init, ParamGroup, ParamSpec, ParamStore, Session};
use crate::model::{tokens_to_planes, planes_to_tokens, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Bottleneck width is `channels / bottleneck_factor` ...
    pub bottleneck_factor: usize,
    /// ... unless a fixed width is given.
    pub bottleneck_width: Option<usize>,
    pub conv_kernel: usize,
    /// Adapter parallel to attention.
    pub msa: bool,
    /// Adapter (with conv) parallel to the MLP.
    pub ffn: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            bottleneck_factor: 16,
            bottleneck_width: None,
            conv_kernel: 7,
            msa: true,
            ffn: true,
        }
    }
}

impl AdapterConfig {
    pub fn disabled() -> Self {
        AdapterConfig {
            msa: false,
            ffn: false,
            ..Self::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.msa || self.ffn
    }

    pub fn bottleneck(&self, channels: usize) -> Result<usize> {
        match self.bottleneck_width {
            Some(0) => Err(Error::Config("bottleneck_width must be positive".into())),
            Some(w) => Ok(w),
            None => {
                if self.bottleneck_factor == 0 || channels % self.bottleneck_factor != 0 {
                    return Err(Error::Config(format!(
                        "{channels} channels not divisible by bottleneck factor {}",
                        self.bottleneck_factor
                    )));
                }
                Ok(channels / self.bottleneck_factor)
            }
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "adapter conv kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        for stage in model.stages()? {
            self.bottleneck(stage.channels)?;
        }
        Ok(())
    }

    /// Parameter layout for every block of `model`.
    pub fn param_specs(&self, model: &ModelConfig) -> Result<Vec<ParamSpec>> {
        self.validate(model)?;
        let mut specs = Vec::new();
        for stage in model.stages()? {
            let c = stage.channels;
            let r = self.bottleneck(c)?;
            for b in 0..stage.depth {
                let prefix = format!("{}adapter.", ModelConfig::block_prefix(stage.index, b));
                let mut bottleneck = |kind: &str, conv: bool| {
                    let p = format!("{prefix}{kind}.");
                    specs.push(ParamSpec::new(format!("{p}down.weight"), [c, r], Init::TruncNormal(0.02), ParamGroup::Adapter));
                    specs.push(ParamSpec::new(format!("{p}down.bias"), [r], Init::Zeros, ParamGroup::Adapter));
                    if conv {
                        let k = self.conv_kernel;
                        specs.push(ParamSpec::new(format!("{p}conv.kernel"), [r, k, k], Init::Delta, ParamGroup::Adapter));
                    }
                    specs.push(ParamSpec::new(format!("{p}up.weight"), [r, c], Init::Zeros, ParamGroup::Adapter));
                    specs.push(ParamSpec::new(format!("{p}up.bias"), [c], Init::Zeros, ParamGroup::Adapter));
                };
                if self.msa {
                    bottleneck("msa", false);
                }
                if self.ffn {
                    bottleneck("ffn", true);
                }
            }
        }
        Ok(specs)
    }
}

/// Attention-side adapter on `x[tokens, C]`; parameters under `{prefix}`.
pub fn adapter_msa(s: &mut Session<'_>, x: Var, prefix: &str) -> Result<Var> {
    let down_w = s.param(&format!("{prefix}down.weight"))?;
    let down_b = s.param(&format!("{prefix}down.bias"))?;
    let up_w = s.param(&format!("{prefix}up.weight"))?;
    let up_b = s.param(&format!("{prefix}up.bias"))?;
    let h = s.graph.linear(x, down_w, Some(down_b))?;
    let h = s.graph.gelu(h);
    s.graph.linear(h, up_w, Some(up_b))
}

/// MLP-side adapter on `x[grid², C]` with a depthwise conv at bottleneck width.
pub fn adapter_ffn(s: &mut Session<'_>, x: Var, grid: usize, prefix: &str) -> Result<Var> {
    let tokens = s.graph.shape(x)[0];
    if tokens != grid * grid {
        return Err(Error::shape("adapter_ffn", s.graph.shape(x), &[grid * grid]));
    }
    let down_w = s.param(&format!("{prefix}down.weight"))?;
    let down_b = s.param(&format!("{prefix}down.bias"))?;
    let kernel = s.param(&format!("{prefix}conv.kernel"))?;
    let up_w = s.param(&format!("{prefix}up.weight"))?;
    let up_b = s.param(&format!("{prefix}up.bias"))?;
    let h = s.graph.linear(x, down_w, Some(down_b))?;
    let h = s.graph.gelu(h);
    let r = s.graph.shape(h)[1];
    let k = s.graph.shape(kernel)[1];
    let planes = tokens_to_planes(s, h, grid)?;
    let conv = s.graph.depthwise_conv2d(planes, kernel, (k - 1) / 2)?;
    let h = planes_to_tokens(s, conv, grid, r)?;
    let h = s.graph.gelu(h);
    s.graph.linear(h, up_w, Some(up_b))
}

/// Freeze everything except adapter parameters.
pub fn freeze_backbone(store: &mut ParamStore) -> Result<()> {
    if !store.has_group(ParamGroup::Adapter) {
        return Err(Error::Contract("freeze_backbone needs adapters attached".into()));
    }
    store.set_trainable_groups(&[ParamGroup::Adapter]);
    Ok(())
}

/// Parameter totals of a backbone (heads excluded) with adapters attached
/// and the backbone frozen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub ratio: f64,
}

/// Enumerate the parameter layout (without allocating it) and split it into
/// frozen backbone and trainable adapter entries.
pub fn count_params(model: &ModelConfig, adapters: &AdapterConfig) -> Result<ParamReport> {
    let frozen: usize = model.backbone_param_specs()?.iter().map(ParamSpec::numel).sum();
    let trainable: usize = adapters.param_specs(model)?.iter().map(ParamSpec::numel).sum();
    let total = frozen + trainable;
    Ok(ParamReport {
        total,
        trainable,
        frozen,
        ratio: trainable as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(c: usize, r: usize, k: usize, conv_init: Init) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = vec![
            ParamSpec::new("a.down.weight", [c, r], Init::TruncNormal(0.5), ParamGroup::Adapter),
            ParamSpec::new("a.down.bias", [r], Init::TruncNormal(0.5), ParamGroup::Adapter),
            ParamSpec::new("a.conv.kernel", [r, k, k], conv_init, ParamGroup::Adapter),
            ParamSpec::new("a.up.weight", [r, c], Init::Zeros, ParamGroup::Adapter),
            ParamSpec::new("a.up.bias", [c], Init::Zeros, ParamGroup::Adapter),
        ];
        ParamStore::from_specs(&specs, &mut rng)
    }

    #[test]
    fn zero_up_gives_exact_zero() {
        let store = store_for(32, 2, 7, Init::TruncNormal(0.3));
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let x = s.graph.constant(Tensor::from_fn([16, 32], |i| (i as f64 * 0.37).sin()));
        let y = adapter_msa(&mut s, x, "a.").unwrap();
        assert_eq!(s.graph.shape(y), &[16, 32]);
        assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
        let y = adapter_ffn(&mut s, x, 4, "a.").unwrap();
        assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_conv_reduces_to_double_gelu() {
        let mut store = store_for(8, 2, 3, Init::Delta);
        store.get_mut("a.up.weight").unwrap().value = Tensor::from_fn([2, 8], |i| 0.1 * i as f64 - 0.5);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let x = s.graph.constant(Tensor::from_fn([9, 8], |i| (i as f64 * 0.71).cos()));
        let with_conv = adapter_ffn(&mut s, x, 3, "a.").unwrap();

        let dw = s.param("a.down.weight").unwrap();
        let db = s.param("a.down.bias").unwrap();
        let uw = s.param("a.up.weight").unwrap();
        let ub = s.param("a.up.bias").unwrap();
        let h = s.graph.linear(x, dw, Some(db)).unwrap();
        let h = s.graph.gelu(h);
        let h = s.graph.gelu(h);
        let reference = s.graph.linear(h, uw, Some(ub)).unwrap();
        assert!(s.graph.value(with_conv).max_abs_diff(s.graph.value(reference)) < 1e-15);
    }

    #[test]
    fn bottleneck_rules() {
        let cfg = AdapterConfig::default();
        assert_eq!(cfg.bottleneck(32).unwrap(), 2);
        assert!(cfg.bottleneck(40).is_err());
        let fixed = AdapterConfig {
            bottleneck_width: Some(3),
            ..cfg
        };
        assert_eq!(fixed.bottleneck(40).unwrap(), 3);
    }

    #[test]
    fn freeze_needs_adapters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones([2]), ParamGroup::Backbone);
        assert!(matches!(freeze_backbone(&mut store), Err(Error::Contract(_))));
        store.insert("a", Tensor::ones([2]), ParamGroup::Adapter);
        freeze_backbone(&mut store).unwrap();
        assert!(!store.get("w").unwrap().trainable);
        assert!(store.get("a").unwrap().trainable);
    }

    #[test]
    fn disabled_adapters_have_no_trainable_params() {
        let report = count_params(&ModelConfig::toy(), &AdapterConfig::disabled()).unwrap();
        assert_eq!(report.trainable, 0);
        assert_eq!(report.ratio, 0.0);
    }
}
