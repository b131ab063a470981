//! Property tests for the differentiation engine: every primitive's backward
//! against central finite differences, HVP symmetry on twice-differentiable
//! losses, and forward-value invariance under recording.

use mlo_core::models::{forward_from_features, sample_loss, CompositionModel, ModelConfig};
use mlo_core::synth::{Descriptor, Level, Sample, SceneObject};
use mlo_core::tensor::{bce, concat_cols, dot, grads, hvp, ParamSet, Tensor};
use proptest::prelude::*;
use std::sync::Arc;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks `grads` of `build(inputs)` (summed against fixed coefficients to a
/// scalar) against central finite differences in every input coordinate.
fn check_fd(build: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[(usize, usize, Vec<f64>)]) {
    let loss_at = |data: &[Vec<f64>], leafed: bool| -> (f64, Vec<Tensor>) {
        let tensors: Vec<Tensor> = inputs
            .iter()
            .zip(data)
            .map(|(&(r, c, _), d)| {
                let t = Tensor::new(r, c, d.clone()).unwrap();
                if leafed {
                    t.as_leaf()
                } else {
                    t
                }
            })
            .collect();
        (build(&tensors).item().unwrap(), tensors)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, d)| d.clone()).collect();
    let (_, leaves) = loss_at(&base, true);
    let loss = build(&leaves);
    let gs = grads(&loss, &leaves, false).unwrap();

    for (pi, (_, _, data)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let mut up = base.clone();
            up[pi][ei] += FD_H;
            let mut dn = base.clone();
            dn[pi][ei] -= FD_H;
            let fd = (loss_at(&up, false).0 - loss_at(&dn, false).0) / (2.0 * FD_H);
            let got = gs[pi].data()[ei];
            prop_assert_ok(rel_err(got, fd) <= FD_TOL, pi, ei, got, fd);
        }
    }
}

fn prop_assert_ok(ok: bool, pi: usize, ei: usize, got: f64, fd: f64) {
    assert!(ok, "input {pi} elem {ei}: backward {got} vs finite difference {fd}");
}

fn vec_strategy(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n)
}

/// Coefficients that scalarize an op output without hiding sign errors.
fn coeffs(rows: usize, cols: usize, seed: &[f64]) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|i| 0.5 + seed[i % seed.len()].abs())
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 120, ..ProptestConfig::default() })]

    #[test]
    fn fd_add_sub_mul_div(a in vec_strategy(6, -2.0, 2.0), b in vec_strategy(6, 0.2, 2.0), r in vec_strategy(4, -1.0, 1.0)) {
        for op in 0..4usize {
            let r = r.clone();
            let build = move |ts: &[Tensor]| {
                let out = match op {
                    0 => ts[0].add(&ts[1]).unwrap(),
                    1 => ts[0].sub(&ts[1]).unwrap(),
                    2 => ts[0].mul(&ts[1]).unwrap(),
                    _ => ts[0].div(&ts[1]).unwrap(),
                };
                dot(&out, &coeffs(2, 3, &r)).unwrap()
            };
            check_fd(&build, &[(2, 3, a.clone()), (2, 3, b.clone())]);
        }
    }

    #[test]
    fn fd_broadcast_forms(a in vec_strategy(6, -2.0, 2.0), row in vec_strategy(3, 0.3, 1.5), s in vec_strategy(1, 0.3, 1.5), r in vec_strategy(4, -1.0, 1.0)) {
        // row-broadcast add and scalar-broadcast mul/div on the rhs
        let r1 = r.clone();
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].add(&ts[1]).unwrap(), &coeffs(2, 3, &r1)).unwrap(),
            &[(2, 3, a.clone()), (1, 3, row.clone())],
        );
        let r2 = r.clone();
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].mul(&ts[1]).unwrap(), &coeffs(2, 3, &r2)).unwrap(),
            &[(2, 3, a.clone()), (1, 1, s.clone())],
        );
        let r3 = r;
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].div(&ts[1]).unwrap(), &coeffs(2, 3, &r3)).unwrap(),
            &[(2, 3, a.clone()), (1, 1, s.clone())],
        );
    }

    #[test]
    fn fd_matmul_transpose(a in vec_strategy(6, -1.5, 1.5), b in vec_strategy(12, -1.5, 1.5), r in vec_strategy(5, -1.0, 1.0)) {
        let r1 = r.clone();
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].matmul(&ts[1]).unwrap(), &coeffs(2, 4, &r1)).unwrap(),
            &[(2, 3, a.clone()), (3, 4, b.clone())],
        );
        let r2 = r;
        check_fd(
            &move |ts: &[Tensor]| {
                dot(&ts[0].transpose().unwrap().matmul(&ts[1]).unwrap(), &coeffs(3, 4, &r2)).unwrap()
            },
            &[(2, 3, a.clone()), (2, 4, b[..8].to_vec())],
        );
    }

    #[test]
    fn fd_unary_ops(mut a in vec_strategy(6, -2.0, 2.0), pos in vec_strategy(6, 0.1, 3.0), r in vec_strategy(4, -1.0, 1.0)) {
        // keep relu and clamp inputs away from their kinks
        for v in a.iter_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
            if (v.abs() - 1.0).abs() < 1e-2 {
                *v *= 1.05;
            }
        }
        let cases: Vec<Box<dyn Fn(&Tensor) -> Tensor>> = vec![
            Box::new(|t: &Tensor| t.relu().unwrap()),
            Box::new(|t: &Tensor| t.sigmoid().unwrap()),
            Box::new(|t: &Tensor| t.neg().unwrap()),
            Box::new(|t: &Tensor| t.scale(1.7).unwrap()),
            Box::new(|t: &Tensor| t.clamp_values(-1.0, 1.0).unwrap()),
        ];
        for f in &cases {
            let r = r.clone();
            let build = move |ts: &[Tensor]| dot(&f(&ts[0]), &coeffs(2, 3, &r)).unwrap();
            check_fd(&build, &[(2, 3, a.clone())]);
        }
        let r2 = r;
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].ln().unwrap(), &coeffs(2, 3, &r2)).unwrap(),
            &[(2, 3, pos.clone())],
        );
    }

    #[test]
    fn fd_reductions_and_layout(a in vec_strategy(6, -2.0, 2.0), b in vec_strategy(4, -2.0, 2.0), r in vec_strategy(4, -1.0, 1.0)) {
        check_fd(&|ts: &[Tensor]| ts[0].sum_all().unwrap(), &[(2, 3, a.clone())]);
        check_fd(&|ts: &[Tensor]| ts[0].mean_all().unwrap(), &[(2, 3, a.clone())]);
        let r1 = r.clone();
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].sum_rows().unwrap(), &coeffs(1, 3, &r1)).unwrap(),
            &[(2, 3, a.clone())],
        );
        let r2 = r.clone();
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].broadcast_rows(3).unwrap(), &coeffs(3, 3, &r2)).unwrap(),
            &[(1, 3, a[..3].to_vec())],
        );
        let r3 = r.clone();
        check_fd(
            &move |ts: &[Tensor]| {
                dot(&concat_cols(&[ts[0].clone(), ts[1].clone()]).unwrap(), &coeffs(2, 5, &r3)).unwrap()
            },
            &[(2, 3, a.clone()), (2, 2, b.clone())],
        );
        let r4 = r.clone();
        check_fd(
            &move |ts: &[Tensor]| dot(&ts[0].slice_cols(1, 2).unwrap(), &coeffs(2, 2, &r4)).unwrap(),
            &[(2, 3, a.clone())],
        );
        let idx = Arc::new(vec![1usize, 0, 1]);
        let r5 = r;
        check_fd(
            &move |ts: &[Tensor]| {
                dot(&ts[0].gather_rows(&idx).unwrap(), &coeffs(3, 3, &r5)).unwrap()
            },
            &[(2, 3, a.clone())],
        );
    }

    #[test]
    fn fd_bce(p in vec_strategy(4, 0.05, 0.95), y in proptest::collection::vec(proptest::bool::ANY, 4)) {
        let target: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let t = Tensor::new(4, 1, target).unwrap();
        check_fd(
            &move |ts: &[Tensor]| bce(&ts[0], &t).unwrap().sum_all().unwrap(),
            &[(4, 1, p.clone())],
        );
    }

    #[test]
    fn hvp_is_symmetric_on_smooth_losses(
        w in vec_strategy(6, -1.0, 1.0),
        u in vec_strategy(6, -1.0, 1.0),
        v in vec_strategy(6, -1.0, 1.0),
        x in vec_strategy(6, -1.0, 1.0),
    ) {
        // loss = sum(sigmoid(X·W)) + 0.5‖W‖²: smooth and non-quadratic
        let xt = Tensor::new(3, 2, x).unwrap();
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(2, 3, w).unwrap());
        let loss_fn = |p: &ParamSet| {
            let w = p.get("w").unwrap();
            let s = xt.matmul(w)?.sigmoid()?.sum_all()?;
            s.add(&dot(w, w)?.scale(0.5)?)
        };
        let hv = hvp(loss_fn, &params, &v).unwrap();
        let hu = hvp(loss_fn, &params, &u).unwrap();
        let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
        prop_assert!((uhv - vhu).abs() <= 1e-6 * uhv.abs().max(vhu.abs()).max(1.0), "{uhv} vs {vhu}");
    }
}

fn micro_sample() -> Sample {
    Sample {
        id: "fd".into(),
        level: Level::Train,
        triplet_id: None,
        query: vec![Descriptor { size: None, color: Some(1), shape: Some(2) }],
        phrase_lengths: vec![2],
        scene: vec![SceneObject { size: 0, color: 1, shape: 2 }],
        answer: true,
        novel_composition: None,
        extra: Default::default(),
    }
}

/// The spec's micro check: gradients of the built-in task model's BCE loss
/// against central finite differences on a ~dozen-parameter instance.
#[test]
fn task_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig { n_sizes: 1, n_colors: 1, n_shapes: 1, d_emb: 1, hidden: 1, mwn_hidden: 2 };
    let sample = micro_sample();
    for seed in 0..100 {
        let model = CompositionModel::init(cfg, seed);
        let leaves = model.params.to_leaves();
        let loss_of = |p: &ParamSet| {
            let m = CompositionModel { config: cfg, params: p.clone() };
            sample_loss(&sample, &m).unwrap()
        };
        let loss = loss_of(&leaves);
        let leaf_vec: Vec<Tensor> = leaves.tensors().cloned().collect();
        let gs = grads(&loss, &leaf_vec, false).unwrap();
        let analytic: Vec<f64> = gs.iter().flat_map(|t| t.data().to_vec()).collect();

        let flat = model.params.flatten();
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += FD_H;
            let mut dn = flat.clone();
            dn[i] -= FD_H;
            let lu = loss_of(&model.params.unflatten(&up).unwrap()).item().unwrap();
            let ld = loss_of(&model.params.unflatten(&dn).unwrap()).item().unwrap();
            let fd = (lu - ld) / (2.0 * FD_H);
            assert!(
                rel_err(analytic[i], fd) <= FD_TOL,
                "seed {seed} param {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }
}

#[test]
fn recording_does_not_change_forward_values() {
    let cfg = ModelConfig { d_emb: 4, hidden: 8, ..ModelConfig::default() };
    let model = CompositionModel::init(cfg, 11);
    let feat = Tensor::new(2, cfg.feature_dim(), vec![0.25; 2 * cfg.feature_dim()]).unwrap();
    let scene = Tensor::new(2, cfg.scene_dim(), vec![1.0; 2 * cfg.scene_dim()]).unwrap();

    let recorded = forward_from_features(&model.params.to_leaves(), &feat, &scene).unwrap();
    let plain = forward_from_features(&model.params.detach_all(), &feat, &scene).unwrap();
    assert!(recorded.is_connected());
    assert!(!plain.is_connected());
    assert!(recorded
        .data()
        .iter()
        .zip(plain.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}
