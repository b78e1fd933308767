mod common;

use aerovit_core::gradcheck::{check_gradients, DEFAULT_STEP};
use aerovit_core::model::params::{ParamGroup, ParamStore};
use aerovit_core::model::ModelConfig;
use aerovit_core::objectives::{
    batch_norm, head_param_specs, info_nce, make_mask, mim_loss, projection_head, reconstruction_head, retrieval_top1,
    ContrastConfig,
};
use aerovit_core::{Error, Graph, Tensor};
use common::{bound_session, param_inputs, randomize, rng, uniform};
use proptest::prelude::*;

/// Direct evaluation of the symmetric loss from its definition.
fn info_nce_reference(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let unit = |t: &Tensor, i: usize| {
        let row = &t.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter().map(|v| v / norm).collect::<Vec<_>>()
    };
    let sim = |i: usize, j: usize| unit(a, i).iter().zip(unit(b, j)).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| sim(j, i).exp()).sum();
        total += -(sim(i, i).exp() / row).ln() - (sim(i, i).exp() / col).ln();
    }
    total / (2 * n) as f64
}

fn eval_info_nce(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = info_nce(&mut g, va, vb, tau).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn mask_ratio_is_exact() {
    let mut r = rng(0);
    for _ in 0..20 {
        let m = make_mask(64, 8, 0.6, &mut r).unwrap();
        assert_eq!(m.units.len(), 64);
        assert_eq!(m.masked_units(), 38);
        assert_eq!(m.token_mask(4).unwrap().iter().filter(|&&t| t).count(), 38 * 4);
    }
    assert!(matches!(make_mask(60, 8, 0.6, &mut r), Err(Error::Config(_))));
    assert!(make_mask(64, 8, 1.0, &mut r).is_err());
    let empty = make_mask(64, 8, 0.0, &mut r).unwrap();
    let mut g = Graph::new();
    let p = g.constant(Tensor::zeros([3, 64, 64]));
    assert!(matches!(mim_loss(&mut g, p, p, &empty), Err(Error::Contract(_))));
}

#[test]
fn info_nce_rejects_single_pair() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones([1, 4]));
    assert!(matches!(info_nce(&mut g, a, a, 0.2), Err(Error::Contract(_))));
}

#[test]
fn info_nce_at_aligned_orthonormal_pairs_has_closed_form() {
    for (n, tau) in [(2usize, 0.2f64), (4, 0.2), (8, 0.5), (8, 1.0)] {
        let a = Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let closed = (1.0 + (n as f64 - 1.0) * (-1.0 / tau).exp()).ln();
        assert!((eval_info_nce(&a, &a, tau) - closed).abs() < 1e-12);
    }
}

/// Plain gradient descent on `b` from a random start, normalised rows, with
/// `a` orthonormal. The loss must get down to the aligned value; it is
/// allowed to go lower, since spreading `b` rows away from the other anchors
/// beats exact alignment.
#[test]
fn descent_reaches_the_aligned_value() {
    let (n, tau) = (4usize, 0.2f64);
    let a = Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    let closed = (1.0 + (n as f64 - 1.0) * (-1.0 / tau).exp()).ln();
    let mut b = uniform(&[n, n], -1.0, 1.0, 1);
    let mut last = f64::INFINITY;
    for _ in 0..3000 {
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let vb = g.leaf(b.clone());
        let l = info_nce(&mut g, va, vb, tau).unwrap();
        last = g.value(l).item().unwrap();
        let grads = g.backward(l).unwrap();
        let gb = grads.get(vb).unwrap();
        for (w, d) in b.data_mut().iter_mut().zip(gb.data()) {
            *w -= 0.5 * d;
        }
    }
    assert!(last <= closed + 1e-3, "descent stalled at {last}, aligned value {closed}");
}

#[test]
fn head_gradients() {
    let cfg = common::one_block();
    let contrast = ContrastConfig {
        proj_hidden: 6,
        proj_dim: 5,
        ..ContrastConfig::default()
    };
    let mut store = ParamStore::from_specs(&head_param_specs(&cfg, &contrast).unwrap(), &mut rng(2));
    randomize(&mut store, 0.5, 3);
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs = param_inputs(&store, &names);
    inputs.push(uniform(&[16, 8], -1.0, 1.0, 4));
    inputs.push(uniform(&[4, 8], -1.0, 1.0, 5));
    inputs.push(uniform(&[4, 8], -1.0, 1.0, 6));
    let target = uniform(&[3, 16, 16], 0.0, 1.0, 7);
    let mask = make_mask(16, 8, 0.5, &mut rng(8)).unwrap();
    let report = check_gradients(
        &inputs,
        |g, v| {
            let (params, rest) = v.split_at(names.len());
            let mut s = bound_session(g, &store, &names, params);
            let pred = reconstruction_head(&mut s, rest[0], &cfg)?;
            let t = s.graph.constant(target.clone());
            let mim = mim_loss(s.graph, pred, t, &mask)?;
            let za = projection_head(&mut s, rest[1])?;
            let zb = projection_head(&mut s, rest[2])?;
            let cl = info_nce(s.graph, za, zb, 0.2)?;
            s.graph.add(mim, cl)
        },
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:e}", report.max_rel_error());
}

#[test]
fn batch_norm_standardises_columns() {
    let mut g = Graph::new();
    let x = g.constant(uniform(&[16, 3], -5.0, 5.0, 9));
    let gamma = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap());
    let beta = g.constant(Tensor::new(vec![3], vec![0.0, -1.0, 3.0]).unwrap());
    let y = batch_norm(&mut g, x, gamma, beta).unwrap();
    let v = g.value(y);
    for (col, (gm, bt)) in [(1.0, 0.0), (2.0, -1.0), (0.5, 3.0)].into_iter().enumerate() {
        let vals: Vec<f64> = (0..16).map(|r| v.at(&[r, col])).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
        assert!((mean - bt).abs() < 1e-12);
        assert!((sd - gm).abs() < 1e-4);
    }
}

#[test]
fn head_layout() {
    let cfg = ModelConfig::toy();
    let specs = head_param_specs(&cfg, &ContrastConfig::default()).unwrap();
    assert!(specs.iter().all(|s| s.group == ParamGroup::Head));
    assert_eq!(specs[0].shape, vec![32, 48]);
    assert_eq!(specs[2].shape, vec![256, 256]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn masked_loss_sees_exactly_the_masked_pixels(seed in 0u64..10_000, ratio in 0.05f64..0.95) {
        let size = 32;
        let mask = make_mask(size, 8, ratio, &mut rng(seed)).unwrap();
        prop_assume!(!mask.is_empty());
        let pred = uniform(&[3, size, size], 0.0, 1.0, seed + 1);
        let target = uniform(&[3, size, size], 0.0, 1.0, seed + 2);
        let side = size / 8;
        let masked = |y: usize, x: usize| mask.units[(y / 8) * side + x / 8];
        let (mut sum, mut count) = (0.0, 0usize);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    if masked(y, x) {
                        sum += (pred.at(&[c, y, x]) - target.at(&[c, y, x])).abs();
                        count += 1;
                    }
                }
            }
        }
        prop_assert_eq!(count, 3 * 64 * mask.masked_units());
        let mut g = Graph::new();
        let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
        let l = mim_loss(&mut g, p, t, &mask).unwrap();
        let got = g.value(l).item().unwrap();
        prop_assert!((got - sum / count as f64).abs() < 1e-12);

        // Scribbling over unmasked pixels changes nothing.
        let mut scribbled = pred.clone();
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    if !masked(y, x) {
                        scribbled.data_mut()[(c * size + y) * size + x] = 42.0;
                    }
                }
            }
        }
        let p2 = g.constant(scribbled);
        let l2 = mim_loss(&mut g, p2, t, &mask).unwrap();
        prop_assert_eq!(g.value(l2).item().unwrap(), got);
    }

    #[test]
    fn info_nce_matches_definition(n in 2usize..7, d in 2usize..6, tau in 0.05f64..2.0, seed in 0u64..10_000) {
        let a = uniform(&[n, d], -1.0, 1.0, seed);
        let b = uniform(&[n, d], -1.0, 1.0, seed + 1);
        let got = eval_info_nce(&a, &b, tau);
        let want = info_nce_reference(&a, &b, tau);
        prop_assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn temperature_does_not_change_retrieval(n in 2usize..9, seed in 0u64..10_000, tau in 0.01f64..5.0) {
        let a = uniform(&[n, 4], -1.0, 1.0, seed);
        let b = uniform(&[n, 4], -1.0, 1.0, seed + 1);
        let d = 4;
        let cos = |i: usize, j: usize| {
            let (ra, rb) = (&a.data()[i * d..(i + 1) * d], &b.data()[j * d..(j + 1) * d]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            dot / (ra.iter().map(|v| v * v).sum::<f64>().sqrt() * rb.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let argmax = |i: usize, scale: f64| (0..n).max_by(|&x, &y| (cos(i, x) * scale).total_cmp(&(cos(i, y) * scale))).unwrap();
        let mut hits = 0;
        for i in 0..n {
            prop_assert_eq!(argmax(i, 1.0), argmax(i, 1.0 / tau));
            hits += usize::from(argmax(i, 1.0) == i);
        }
        prop_assert!((retrieval_top1(&a, &b).unwrap() - hits as f64 / n as f64).abs() < 1e-15);
    }
}
