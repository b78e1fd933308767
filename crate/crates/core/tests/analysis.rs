mod common;

use aerovit_core::adapter::{count_params, AdapterConfig};
use aerovit_core::freq::{low_freq_ratio, power_spectrum};
use aerovit_core::model::ModelConfig;
use aerovit_core::plot::{plot_log, LineChart, Series};
use aerovit_core::synth::{synth_dataset, ViewKind};
use aerovit_core::trainer::{Stage, StepMetrics};
use aerovit_core::Image;
use proptest::prelude::*;
use std::f64::consts::PI;

/// Parameter totals written out per layer.
fn closed_form_counts(cfg: &ModelConfig, adapters: &AdapterConfig) -> (usize, usize) {
    let p2 = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    let c0 = cfg.embed_dim;
    let k2 = cfg.fe_kernel * cfg.fe_kernel;
    let mut backbone = p2 * c0 + c0 + c0;
    let mut adapter = 0;
    let mut grid = cfg.image_size / cfg.patch_size;
    let n = cfg.depths.len();
    for s in 0..n {
        if s > 0 {
            grid /= 2;
        }
        let c = c0 * (1 << s);
        let w = cfg.window.min(grid);
        let hidden = c * cfg.mlp_ratio;
        let block = 2 * c // norm1
            + c * k2 // enhancement kernel
            + 3 * c * c + 3 * c // qkv
            + (2 * w - 1) * (2 * w - 1) * cfg.heads[s] // relative bias table
            + c * c + c // output projection
            + 2 * c // norm2
            + c * hidden + hidden + hidden * c + c; // mlp
        backbone += cfg.depths[s] * block;
        if s + 1 < n {
            backbone += 2 * 4 * c + 4 * c * 2 * c;
        }
        let r = adapters.bottleneck_width.unwrap_or(c / adapters.bottleneck_factor);
        let msa = if adapters.msa { c * r + r + r * c + c } else { 0 };
        let ak = adapters.conv_kernel * adapters.conv_kernel;
        let ffn = if adapters.ffn { c * r + r + r * ak + r * c + c } else { 0 };
        adapter += cfg.depths[s] * (msa + ffn);
    }
    backbone += 2 * c0 * (1 << (n - 1));
    (backbone, adapter)
}

#[test]
fn base_configuration_counts() {
    let cfg = ModelConfig::base_dry();
    let adapters = AdapterConfig::default();
    let report = count_params(&cfg, &adapters).unwrap();
    let (frozen, trainable) = closed_form_counts(&cfg, &adapters);
    assert_eq!((report.frozen, report.trainable), (frozen, trainable));
    assert_eq!(report.total, frozen + trainable);
    assert!((report.ratio - trainable as f64 / (frozen + trainable) as f64).abs() < 1e-15);
}

fn model_configs() -> impl Strategy<Value = ModelConfig> {
    (1usize..5, 1usize..4, prop::sample::select(vec![1usize, 3, 5, 7]), 1usize..4, prop::sample::select(vec![2usize, 4, 7]))
        .prop_map(|(stages, depth, k, mlp, window)| {
            let grid = window << (stages - 1);
            ModelConfig {
                image_size: grid * 2,
                in_channels: 3,
                patch_size: 2,
                embed_dim: 16,
                depths: vec![depth; stages],
                heads: vec![2; stages],
                window,
                fe_kernel: k,
                channel_groups: 4,
                mlp_ratio: mlp,
                ln_eps: 1e-5,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parameter_counts_match_closed_form(
        cfg in model_configs(),
        factor in prop::sample::select(vec![2usize, 4, 8, 16]),
        width in prop::option::of(1usize..9),
        msa in any::<bool>(),
        ffn in any::<bool>(),
        kernel in prop::sample::select(vec![1usize, 3, 7]),
    ) {
        let adapters = AdapterConfig { bottleneck_factor: factor, bottleneck_width: width, conv_kernel: kernel, msa, ffn };
        let report = count_params(&cfg, &adapters).unwrap();
        prop_assert_eq!((report.frozen, report.trainable), closed_form_counts(&cfg, &adapters));
        let materialised = aerovit_core::model::Model::new(cfg.clone()).unwrap().with_adapters(adapters).unwrap()
            .init_params(&mut common::rng(0)).unwrap();
        prop_assert_eq!(materialised.numel(), report.total);
    }

    #[test]
    fn power_spectrum_matches_naive_dft(h in 2usize..7, w in 2usize..7, seed in 0u64..1000) {
        let plane = common::uniform(&[h, w], -1.0, 1.0, seed);
        let p = plane.data();
        let power = power_spectrum(p, h, w).unwrap();
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += p[y * w + x] * a.cos();
                        im += p[y * w + x] * a.sin();
                    }
                }
                prop_assert!((power[u * w + v] - (re * re + im * im)).abs() < 1e-9);
            }
        }
        // Parseval.
        let energy: f64 = p.iter().map(|x| x * x).sum();
        prop_assert!((power.iter().sum::<f64>() - (h * w) as f64 * energy).abs() < 1e-9 * energy.max(1.0) * (h * w) as f64);
    }

    #[test]
    fn single_tone_lands_on_one_side_of_the_radius(n in prop::sample::select(vec![8usize, 16, 32]), f in 1usize..4, r in 0.05f64..1.0) {
        let img = Image::from_fn(1, n, n, |_, _, x| (2.0 * PI * (f * x) as f64 / n as f64).cos());
        let radius = (f as f64 / n as f64) / 0.5f64.hypot(0.5);
        let got = low_freq_ratio(&img, r, false).unwrap();
        let want = if radius <= r { 1.0 } else { 0.0 };
        prop_assume!((radius - r).abs() > 1e-9);
        prop_assert!((got - want).abs() < 1e-9, "ratio {got}, tone radius {radius}, r {r}");
    }
}

#[test]
fn oblique_views_carry_less_low_frequency_energy() {
    let mean = |view| {
        let imgs = synth_dataset(16, 64, view, 7).unwrap();
        imgs.iter().map(|i| low_freq_ratio(i, 0.1, true).unwrap()).sum::<f64>() / imgs.len() as f64
    };
    let (vertical, oblique) = (mean(ViewKind::Vertical), mean(ViewKind::Oblique));
    assert!(oblique < vertical, "oblique {oblique} vs vertical {vertical}");
}

#[test]
fn synthetic_data_is_reproducible_and_in_range() {
    let a = synth_dataset(4, 32, ViewKind::Mixed, 11).unwrap();
    assert_eq!(a, synth_dataset(4, 32, ViewKind::Mixed, 11).unwrap());
    assert_ne!(a, synth_dataset(4, 32, ViewKind::Mixed, 12).unwrap());
    assert!(a.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn charts_are_well_formed_svg() {
    let chart = LineChart {
        title: "loss <&> \"quoted\"".into(),
        x_label: "step".into(),
        y_label: "value".into(),
        series: vec![
            Series {
                name: "a".into(),
                points: (0..50).map(|i| (i as f64, (i as f64 * 0.1).exp())).collect(),
            },
            Series {
                name: "b".into(),
                points: vec![(3.0, f64::NAN), (4.0, 1.0)],
            },
        ],
    };
    let svg = chart.to_svg();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
    assert!(doc.descendants().any(|n| n.text() == Some("loss <&> \"quoted\"")));
}

#[test]
fn plotting_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("metrics.jsonl");
    let lines: Vec<String> = (1..=5)
        .map(|s| {
            serde_json::to_string(&StepMetrics {
                stage: Stage::Joint,
                step: s,
                lr: 1e-3 / s as f64,
                loss: 2.0 - 0.1 * s as f64,
                mim: 0.5,
                contrast: Some(1.5 - 0.1 * s as f64),
                top1: Some(0.25),
            })
            .unwrap()
        })
        .collect();
    std::fs::write(&log, lines.join("\n")).unwrap();
    let written = plot_log(&log).unwrap();
    assert_eq!(written.len(), 2);
    for p in &written {
        roxmltree::Document::parse(&std::fs::read_to_string(p).unwrap()).unwrap();
    }
    std::fs::write(&log, "").unwrap();
    assert!(plot_log(&log).unwrap().is_empty());
    std::fs::write(&log, "{not json").unwrap();
    assert_eq!(plot_log(&log).unwrap_err().kind(), aerovit_core::ErrorKind::Io);
}
