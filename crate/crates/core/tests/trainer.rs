mod common;

use aerovit_core::adapter::freeze_backbone;
use aerovit_core::checkpoint;
use aerovit_core::model::params::ParamGroup;
use aerovit_core::model::Model;
use aerovit_core::objectives::{head_param_specs, ContrastConfig, MaskConfig};
use aerovit_core::synth::{synth_dataset, ViewKind};
use aerovit_core::trainer::{run_stage, Schedule, Stage, StageConfig, TrainState};
use aerovit_core::{Error, Image};
use common::rng;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn stage_cfg(steps: usize) -> StageConfig {
    StageConfig {
        batch_size: 4,
        schedule: Schedule {
            base_lr: 1e-3,
            warmup_steps: steps.saturating_sub(1).min(2),
            total_steps: steps,
            weight_decay: 0.05,
        },
        mask: MaskConfig { unit: 8, ratio: 0.5 },
        contrast: ContrastConfig {
            proj_hidden: 16,
            proj_dim: 8,
            ..ContrastConfig::default()
        },
        ..StageConfig::default()
    }
}

fn setup(seed: u64) -> (Model, TrainState, Vec<Image>) {
    let model = Model::new(common::two_stage()).unwrap();
    let mut params = model.init_params(&mut rng(seed)).unwrap();
    params.extend_from_specs(
        &head_param_specs(&model.config, &stage_cfg(0).contrast).unwrap(),
        &mut rng(seed + 1),
    );
    let data = synth_dataset(8, 16, ViewKind::Mixed, seed).unwrap();
    (model, TrainState::new(params, seed), data)
}

fn noop(_: &aerovit_core::trainer::StepMetrics) -> aerovit_core::Result<()> {
    Ok(())
}

#[test]
fn finetuning_leaves_the_backbone_bit_identical() {
    let (mut model, mut state, data) = setup(1);
    run_stage(Stage::Mim, &stage_cfg(3), &model, &data, &mut state, noop).unwrap();
    let snapshot = state.params.clone();
    model
        .attach_adapters(&mut state.params, common::small_adapters(), &mut rng(2))
        .unwrap();
    freeze_backbone(&mut state.params).unwrap();
    let log = run_stage(Stage::Finetune, &stage_cfg(10), &model, &data, &mut state, noop).unwrap();
    assert_eq!(log.len(), 10);
    for (name, p) in snapshot.iter() {
        assert_eq!(state.params.value(name).unwrap(), &p.value, "{name} moved");
    }
    // Gradient reaches the earliest adapter, through the zero-initialised Up
    // projections of every later one.
    for name in [
        "stages.0.blocks.0.adapter.msa.down.weight",
        "stages.0.blocks.0.adapter.ffn.conv.kernel",
        "stages.0.blocks.0.adapter.ffn.up.weight",
        "stages.1.blocks.0.adapter.msa.up.weight",
    ] {
        let p = state.params.get(name).unwrap();
        assert_eq!(p.group, ParamGroup::Adapter);
        let fresh = {
            let mut s = aerovit_core::model::params::ParamStore::new();
            s.extend_from_specs(
                &common::small_adapters().param_specs(&model.config).unwrap(),
                &mut rng(2),
            );
            s.value(name).unwrap().clone()
        };
        assert!(p.value.max_abs_diff(&fresh) > 0.0, "{name} never updated");
    }
    assert!(state.has_completed(Stage::Finetune));
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let (model, mut state, data) = setup(3);
        let mut log = run_stage(Stage::Mim, &stage_cfg(3), &model, &data, &mut state, noop).unwrap();
        log.extend(run_stage(Stage::Joint, &stage_cfg(3), &model, &data, &mut state, noop).unwrap());
        (log, checkpoint::encode(&state, &BTreeMap::new()).unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = {
        let (model, mut state, data) = setup(3);
        state.seed = 4;
        (run_stage(Stage::Mim, &stage_cfg(3), &model, &data, &mut state, noop).unwrap(), ())
    };
    assert_ne!(a[..3], c[..]);
}

#[test]
fn zero_steps_change_nothing() {
    let (model, mut state, data) = setup(5);
    let before = state.clone();
    let log = run_stage(Stage::Mim, &stage_cfg(0), &model, &data, &mut state, noop).unwrap();
    assert!(log.is_empty());
    assert_eq!(state, before);
}

#[test]
fn stage_preconditions() {
    let (model, mut state, data) = setup(6);
    let err = run_stage(Stage::Joint, &stage_cfg(1), &model, &data, &mut state, noop).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let err = run_stage(Stage::Finetune, &stage_cfg(1), &model, &data, &mut state, noop).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let allowed = StageConfig {
        allow_without_mim: true,
        ..stage_cfg(1)
    };
    run_stage(Stage::Joint, &allowed, &model, &data, &mut state, noop).unwrap();

    // Adapters attached but the backbone left trainable.
    let mut with = model.clone();
    with.attach_adapters(&mut state.params, common::small_adapters(), &mut rng(7)).unwrap();
    let err = run_stage(Stage::Finetune, &stage_cfg(1), &with, &data, &mut state, noop).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));

    let wrong = synth_dataset(2, 32, ViewKind::Vertical, 0).unwrap();
    assert!(run_stage(Stage::Mim, &stage_cfg(1), &model, &wrong, &mut state, noop).is_err());
}

#[test]
fn joint_metrics_are_complete() {
    let (model, mut state, data) = setup(8);
    run_stage(Stage::Mim, &stage_cfg(2), &model, &data, &mut state, noop).unwrap();
    let log = run_stage(Stage::Joint, &stage_cfg(2), &model, &data, &mut state, noop).unwrap();
    for m in &log {
        let cl = m.contrast.unwrap();
        assert!((m.loss - (m.mim + cl)).abs() < 1e-12);
        let top1 = m.top1.unwrap();
        assert!((0.0..=1.0).contains(&top1));
    }
    assert_eq!(log.last().unwrap().step, 4);
    assert_eq!(state.moment_steps, 2);
}

#[test]
fn trained_state_survives_a_checkpoint() {
    let (model, mut state, data) = setup(9);
    run_stage(Stage::Mim, &stage_cfg(2), &model, &data, &mut state, noop).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let meta = BTreeMap::from([("note".to_string(), "x".to_string())]);
    checkpoint::save(&path, &state, &meta).unwrap();
    let (back, m) = checkpoint::load(&path).unwrap();
    assert_eq!(back, state);
    assert_eq!(m["note"], "x");

    // Continuing from the reloaded state matches continuing in memory.
    let mut a = state.clone();
    let mut b = back;
    let cfg = StageConfig {
        allow_without_mim: true,
        ..stage_cfg(2)
    };
    let la = run_stage(Stage::Joint, &cfg, &model, &data, &mut a, noop).unwrap();
    let lb = run_stage(Stage::Joint, &cfg, &model, &data, &mut b, noop).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn schedule_shape(base in 1e-5f64..1e-2, warmup in 0usize..50, extra in 1usize..500) {
        let s = Schedule { base_lr: base, warmup_steps: warmup, total_steps: warmup + extra, weight_decay: 0.0 };
        let mut prev = -1.0;
        for k in 0..=s.total_steps {
            let lr = s.lr_at(k).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
            if k <= warmup {
                prop_assert!(lr >= prev);
                prop_assert!((lr - base * k as f64 / warmup.max(1) as f64).abs() < 1e-15 || k == warmup);
            } else {
                prop_assert!(lr <= prev + 1e-18);
            }
            prev = lr;
        }
        prop_assert!(s.lr_at(s.total_steps).unwrap() < 1e-12 * base.max(1.0));
        prop_assert!((s.lr_at(warmup).unwrap() - base).abs() < 1e-15);
        prop_assert!(matches!(s.lr_at(s.total_steps + 1), Err(Error::Contract(_))));
    }
}
