use std::collections::HashSet;

use proptest::prelude::*;
use smto_core::aggregators::{cagrad, edm, imtl_g, nash_mtl, pcgrad, GradientBundle};
use smto_core::metrics::{
    delta_mtm, extract_fixed_weights, mean_rank, InterferenceMeter, Metric, TaskMetric,
    TaskMetrics, WeightTrace, EMA_BETA,
};
use smto_core::model::{
    backward_per_task, backward_weighted, forward_with, Activation, Batch, HeadSpec, Layer,
    LossKind, NetworkSpec, Params, Targets,
};
use smto_core::numerics::{gram, min_norm_in_hull, Mat, Rng, MIN_NORM_MAX_ITER, MIN_NORM_TOL};
use smto_core::problems::{conflict_regression, symmetric_two_task, ConflictSpec, SymmetricSpec};
use smto_core::rotation::{rotation_target, shared_feature_grads, RotationSet};
use smto_core::weighters::{rlw, si, uw_loss, RlwDistribution, UwState};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn bundle_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..5).prop_flat_map(|n| {
        (n..n + 4).prop_flat_map(move |d| {
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
        })
    })
}

fn well_posed(rows: &[Vec<f64>]) -> bool {
    rows.iter().all(|r| norm(r) > 0.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn min_norm_beats_vertices_and_uniform(rows in bundle_strategy()) {
        let g = Mat::from_rows(&rows).unwrap();
        let mn = min_norm_in_hull(&g, MIN_NORM_MAX_ITER, MIN_NORM_TOL).unwrap();
        let n = rows.len();
        let uniform: Vec<f64> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        prop_assert!(mn.norm <= norm(&uniform) + 1e-12);
        for r in &rows {
            prop_assert!(mn.norm <= norm(r) + 1e-12);
        }
        let m = gram(&g);
        prop_assert_eq!(m.clone(), m.transpose());
    }

    #[test]
    fn edm_is_scale_covariant(rows in bundle_strategy(), s in 0.01f64..100.0) {
        prop_assume!(well_posed(&rows));
        let b = GradientBundle::from_rows(&rows).unwrap();
        let d = edm(&b).unwrap().direction;
        let ds = edm(&b.scaled(s).unwrap()).unwrap().direction;
        for (a, c) in d.iter().zip(&ds) {
            prop_assert!((a * s - c).abs() <= 1e-9 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn nash_weights_scale_inversely(rows in bundle_strategy(), s in 0.1f64..10.0) {
        prop_assume!(well_posed(&rows));
        let b = GradientBundle::from_rows(&rows).unwrap();
        let r = nash_mtl(&b, 20).unwrap();
        prop_assume!(r.diagnostics.get("residual").unwrap() <= 1e-9);
        let rs = nash_mtl(&b.scaled(s).unwrap(), 20).unwrap();
        for (a, c) in r.weights.as_slice().iter().zip(rs.weights.as_slice()) {
            prop_assert!((a / s - c).abs() <= 1e-6 * (1.0 + a.abs()));
        }
        for (a, c) in r.direction.iter().zip(&rs.direction) {
            prop_assert!((a - c).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn cagrad_small_c_stays_near_average(rows in bundle_strategy(), c in 0.0f64..0.05) {
        let b = GradientBundle::from_rows(&rows).unwrap();
        let n = rows.len() as f64;
        let g0: Vec<f64> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let d = cagrad(&b, c).unwrap().direction;
        let gap: Vec<f64> = d.iter().zip(&g0).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&gap) <= c * norm(&g0) + 1e-9);
    }

    #[test]
    fn pcgrad_outputs_do_not_conflict(rows in bundle_strategy(), seed in any::<u64>()) {
        let b = GradientBundle::from_rows(&rows).unwrap();
        let r = pcgrad(&b, &mut Rng::new(seed)).unwrap();
        if let Some(d) = r.diagnostics.get("min_post_projection_dot") {
            prop_assert!(d >= -1e-9);
        }
    }

    #[test]
    fn imtl_projections_are_equal(rows in bundle_strategy()) {
        prop_assume!(well_posed(&rows));
        let b = GradientBundle::from_rows(&rows).unwrap();
        if let Ok(r) = imtl_g(&b) {
            if !r.diagnostics.flag("clamped") {
                let scale = norm(&r.direction).max(1.0);
                prop_assert!(r.diagnostics.get("projection_spread").unwrap() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn uw_gradient_matches_finite_differences(
        losses in prop::collection::vec(0.01f64..10.0, 1..6),
        s in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let n = losses.len();
        let state = UwState { log_vars: s[..n].to_vec() };
        let out = uw_loss(&losses, &state).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut up = state.clone();
            up.log_vars[i] += h;
            let mut down = state.clone();
            down.log_vars[i] -= h;
            let fd = (uw_loss(&losses, &up).unwrap().total - uw_loss(&losses, &down).unwrap().total) / (2.0 * h);
            prop_assert!((fd - out.grad_log_vars[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn delta_is_zero_on_itself_and_monotone(
        vals in prop::collection::vec((0.1f64..10.0, any::<bool>()), 1..5),
        bump in 0.001f64..1.0,
        which in any::<prop::sample::Index>(),
    ) {
        let tm = |v: &[(f64, bool)]| TaskMetrics {
            tasks: v.iter().enumerate()
                .map(|(i, (x, lower))| TaskMetric { task: format!("t{i}"), metrics: vec![Metric::new("m", *x, *lower)] })
                .collect(),
        };
        let base = tm(&vals);
        prop_assert_eq!(delta_mtm(&base, &base).unwrap(), 0.0);
        let i = which.index(vals.len());
        let mut better = vals.clone();
        if better[i].1 {
            better[i].0 *= 1.0 - bump / 2.0;
        } else {
            better[i].0 += bump;
        }
        prop_assert!(delta_mtm(&tm(&better), &base).unwrap() > 0.0);
    }

    #[test]
    fn mean_ranks_conserve_rank_sum(
        table in prop::collection::vec(prop::collection::vec(0u8..4, 3), 1..7),
    ) {
        let s = table.len();
        let all: Vec<TaskMetrics> = table.iter()
            .map(|row| TaskMetrics {
                tasks: row.iter().enumerate()
                    .map(|(t, v)| TaskMetric { task: format!("t{t}"), metrics: vec![Metric::new("m", *v as f64, t == 1)] })
                    .collect(),
            })
            .collect();
        let mr = mean_rank(&all).unwrap();
        let avg = mr.iter().sum::<f64>() / s as f64;
        prop_assert!((avg - (s as f64 + 1.0) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn interference_ignores_global_scale(rows in bundle_strategy(), s in 0.01f64..100.0) {
        prop_assume!(well_posed(&rows));
        let b = GradientBundle::from_rows(&rows).unwrap();
        let mut m1 = InterferenceMeter::new();
        let mut m2 = InterferenceMeter::new();
        let a = m1.push(&b);
        let c = m2.push(&b.scaled(s).unwrap());
        match (a, c) {
            (Some(a), Some(c)) => prop_assert!((a - c).abs() <= 1e-10),
            (a, c) => prop_assert_eq!(a.is_some(), c.is_some()),
        }
    }

    #[test]
    fn extracted_weights_are_on_the_simplex(
        epochs in prop::collection::vec(prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 1..6), 1..6),
    ) {
        let mut trace = WeightTrace::new("x", 0);
        for e in &epochs {
            trace.start_epoch();
            for w in e {
                trace.record(w.clone()).unwrap();
            }
        }
        if let Ok(w) = extract_fixed_weights(&trace, EMA_BETA) {
            prop_assert!(w.as_slice().iter().all(|v| *v >= 0.0));
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn generated_splits_are_disjoint(seed in any::<u64>()) {
        let data = symmetric_two_task(&mut Rng::new(seed), 300, SymmetricSpec::default()).unwrap();
        let key = |m: &Mat, r: usize| m.row(r).iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        let mut seen = HashSet::new();
        for split in [&data.train, &data.val, &data.test] {
            for r in 0..split.len() {
                prop_assert!(seen.insert(key(&split.inputs, r)));
            }
        }
        prop_assert_eq!(seen.len(), 300);
    }
}

#[test]
fn rlw_draws_are_symmetric() {
    let mut rng = Rng::new(9);
    for dist in [RlwDistribution::Normal, RlwDistribution::Dirichlet] {
        let n = 4;
        let mut acc = vec![0.0; n];
        let draws = 20_000;
        for _ in 0..draws {
            let w = rlw(&mut rng, dist, n).unwrap();
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.as_slice().iter().all(|v| *v >= 0.0));
            acc.iter_mut().zip(w.as_slice()).for_each(|(a, b)| *a += b / draws as f64);
        }
        for a in acc {
            assert!((a - 0.25).abs() < 0.01, "{dist:?}: {a}");
        }
    }
}

fn small_net() -> (NetworkSpec, Batch) {
    let spec = NetworkSpec {
        input_dim: 3,
        encoder: vec![Layer::new(4, Activation::Tanh)],
        heads: vec![
            HeadSpec { hidden: vec![], output_dim: 3, loss: LossKind::CrossEntropy },
            HeadSpec { hidden: vec![Layer::new(2, Activation::Sigmoid)], output_dim: 2, loss: LossKind::MeanSquaredError },
        ],
        dropout_p: 0.0,
    };
    let mut rng = Rng::new(5);
    let rows = 6;
    let inputs = Mat::from_vec(rows, 3, (0..rows * 3).map(|_| rng.normal()).collect()).unwrap();
    let targets = vec![
        Targets::Classes((0..rows).map(|_| rng.below(3)).collect()),
        Targets::Values(Mat::from_vec(rows, 2, (0..rows * 2).map(|_| rng.normal()).collect()).unwrap()),
    ];
    (spec, Batch { inputs, targets })
}

#[test]
fn si_gradient_is_gradient_of_log_loss_sum() {
    let (spec, batch) = small_net();
    let params = Params::init(&spec, &mut Rng::new(2)).unwrap();
    let losses = forward_with(&spec, &params, &batch, None, None).unwrap().losses;
    let w = si(&losses).unwrap();
    let got = backward_weighted(&spec, &params, &batch, None, None, w.as_slice()).unwrap().grad;
    let h = 1e-6;
    let objective = |p: &Params| -> f64 {
        forward_with(&spec, p, &batch, None, None).unwrap().losses.iter().map(|l| l.ln()).sum()
    };
    for (k, g) in got.iter().enumerate() {
        let mut p = params.clone();
        p.values[k] += h;
        let up = objective(&p);
        p.values[k] -= 2.0 * h;
        let fd = (up - objective(&p)) / (2.0 * h);
        assert!((fd - g).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {g}");
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let (spec, batch) = small_net();
    let params = Params::init(&spec, &mut Rng::new(3)).unwrap();
    let tg = backward_per_task(&spec, &params, &batch, None, None).unwrap();
    let h = 1e-5;
    for t in 0..2 {
        for (slot, k) in params.head_ranges[t].clone().enumerate() {
            let mut p = params.clone();
            p.values[k] += h;
            let up = forward_with(&spec, &p, &batch, None, None).unwrap().losses[t];
            p.values[k] -= 2.0 * h;
            let down = forward_with(&spec, &p, &batch, None, None).unwrap().losses[t];
            let fd = (up - down) / (2.0 * h);
            assert!((fd - tg.heads[t][slot]).abs() <= 1e-4 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn rotation_training_leaves_model_gradients_alone() {
    let (spec, batch) = small_net();
    let params = Params::init(&spec, &mut Rng::new(4)).unwrap();
    let mut rot = RotationSet::new(2, spec.feature_dim(), 0.01, 1.0);
    let mut rng = Rng::new(8);
    for t in 0..2 {
        let f = spec.feature_dim();
        let mut a = Mat::zeros(f, f);
        for i in 0..f {
            for j in i + 1..f {
                a[(i, j)] = 0.3 * rng.normal();
                a[(j, i)] = -a[(i, j)];
            }
        }
        rot.set_generator(t, &a).unwrap();
    }
    let before = rot.rotations().to_vec();
    let a = backward_per_task(&spec, &params, &batch, None, Some(&before)).unwrap();
    let target = rotation_target(&shared_feature_grads(&rot, &a.features)).unwrap();
    rot.step(&a.features, &target.v).unwrap();
    let b = backward_per_task(&spec, &params, &batch, None, Some(&before)).unwrap();
    assert_eq!(a.shared.matrix(), b.shared.matrix());
    assert_eq!(a.heads, b.heads);
    assert_ne!(rot.rotations(), &before[..]);
}

#[test]
fn conflict_noise_is_the_bayes_loss() {
    let spec = ConflictSpec { noise: 0.3, ..Default::default() };
    let mut rng = Rng::new(12);
    let w = spec.task_vectors(&mut rng.clone()).unwrap();
    let data = conflict_regression(spec, &mut rng, 30_000).unwrap();
    for t in 0..spec.n_tasks {
        let mut sum = 0.0;
        let mut count = 0;
        for split in [&data.train, &data.val, &data.test] {
            let Targets::Values(y) = &split.targets[t] else { panic!("regression targets") };
            for r in 0..split.len() {
                let pred: f64 = split.inputs.row(r).iter().zip(w.row(t)).map(|(a, b)| a * b).sum();
                sum += (y[(r, 0)] - pred).powi(2);
                count += 1;
            }
        }
        let mse = sum / count as f64;
        let var = spec.noise * spec.noise;
        assert!((mse - var).abs() <= 0.05 * var, "task {t}: {mse} vs {var}");
    }
}
