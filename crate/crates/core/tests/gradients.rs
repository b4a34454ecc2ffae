//! Finite-difference checks of every tape primitive and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniclr::gradcheck::{run_audit, AuditConfig};
use uniclr::losses::{self, LossConfig};
use uniclr::{DenseMatrix, Result, Tape, Var};

const STEP: f64 = 1e-6;

fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Independent oracle: perturb each entry, rebuild the graph, difference.
fn fd_max_rel_err<F>(build: F, inputs: &[DenseMatrix]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[DenseMatrix]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
        let r = build(&mut t, &vs).unwrap();
        t.value(r).get(0, 0)
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    let root = build(&mut t, &vs).unwrap();
    let grads = t.backward(root).unwrap();

    let mut worst = 0.0f64;
    for (idx, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vs[idx]);
        let mut num = vec![0.0; x.data().len()];
        for (k, slot) in num.iter_mut().enumerate() {
            let mut up = inputs.to_vec();
            let mut dn = inputs.to_vec();
            let mut du = up[idx].data().to_vec();
            let mut dd = dn[idx].data().to_vec();
            du[k] += STEP;
            dd[k] -= STEP;
            up[idx] = DenseMatrix::new(x.rows(), x.cols(), du).unwrap();
            dn[idx] = DenseMatrix::new(x.rows(), x.cols(), dd).unwrap();
            *slot = (eval(&up) - eval(&dn)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.frobenius_norm();
        let nn = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}

#[test]
fn matmul_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_mat(3, 4, &mut rng);
    let b = rand_mat(4, 2, &mut rng);
    let err = fd_max_rel_err(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        },
        &[a, b],
    );
    assert!(err <= 1e-6, "matmul rel err {err}");
}

#[test]
fn transpose_trace_gradient_is_other_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_mat(3, 3, &mut rng);
    let b = rand_mat(3, 3, &mut rng);
    let build = |t: &mut Tape, v: &[Var]| {
        let at = t.transpose(v[0]);
        let p = t.matmul(at, v[1])?;
        t.trace(p)
    };
    let err = fd_max_rel_err(build, &[a.clone(), b.clone()]);
    assert!(err <= 1e-6, "transpose rel err {err}");

    let mut t = Tape::new();
    let va = t.leaf(a);
    let vb = t.leaf(b.clone());
    let root = build(&mut t, &[va, vb]).unwrap();
    let g = t.backward(root).unwrap().wrt(va);
    assert!(g.sub(&b).unwrap().max_abs() < 1e-15);
}

#[test]
fn transpose_is_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_mat(4, 7, &mut rng);
    assert_eq!(a.transpose().transpose(), a);
}

#[test]
fn softmax_ce_value_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_mat(5, 5, &mut rng).scale(3.0);
    let targets = [0usize, 1, 2, 3, 4];

    // two-pass oracle: softmax first, then log
    let mut oracle = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        oracle += -(exps[target] / total).ln();
    }
    oracle /= 5.0;
    let mut t = Tape::new();
    let l = t.leaf(logits.clone());
    let ce = t.softmax_cross_entropy(l, &targets).unwrap();
    assert!((t.scalar(ce).unwrap() - oracle).abs() <= 1e-12);

    let err = fd_max_rel_err(|t, v| t.softmax_cross_entropy(v[0], &[0, 1, 2, 3, 4]), &[logits]);
    assert!(err <= 1e-6, "ce rel err {err}");
}

#[test]
fn frobenius_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_mat(4, 4, &mut rng);
    let oracle = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut t = Tape::new();
    let v = t.leaf(a.clone());
    let f = t.frobenius_norm(v);
    assert!((t.scalar(f).unwrap() - oracle).abs() <= 1e-12);
    let err = fd_max_rel_err(|t, v| Ok(t.frobenius_norm(v[0])), &[a]);
    assert!(err <= 1e-6);
}

#[test]
fn composite_relu_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_mat(3, 4, &mut rng);
    let b = rand_mat(4, 5, &mut rng);
    let c = rand_mat(3, 5, &mut rng);
    let err = fd_max_rel_err(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let r = t.relu(p);
            let s = t.add(r, v[2])?;
            let s = t.scale(s, 0.7);
            let f = t.frobenius_norm(s);
            let d = t.sub(s, v[2])?;
            let g = t.sum(d);
            t.add(f, g)
        },
        &[a, b, c],
    );
    assert!(err <= 1e-6, "composite rel err {err}");
}

#[test]
fn standardize_statistics_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_mat(3, 8, &mut rng);
    let mut t = Tape::new();
    let v = t.leaf(a.clone());
    let s = t.batch_standardize(v).unwrap();
    for i in 0..3 {
        let row = t.value(s).row(i);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-12);
        assert!((var - 1.0).abs() <= 1e-4);
    }
    let w = rand_mat(3, 8, &mut rng);
    let err = fd_max_rel_err(
        |t, v| {
            let s = t.batch_standardize(v[0])?;
            let wt = t.transpose(v[1]);
            let p = t.matmul(s, wt)?;
            t.trace(p)
        },
        &[a, w],
    );
    assert!(err <= 1e-6, "standardize rel err {err}");
}

#[test]
fn normalize_gradient_and_idempotence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_mat(4, 5, &mut rng);
    let w = rand_mat(4, 5, &mut rng);
    let err = fd_max_rel_err(
        |t, v| {
            let n = t.l2_normalize_cols(v[0])?;
            let nt = t.transpose(n);
            let p = t.matmul(nt, v[1])?;
            t.trace(p)
        },
        &[a.clone(), w],
    );
    assert!(err <= 1e-6, "normalize rel err {err}");

    let mut t = Tape::new();
    let v = t.leaf(a);
    let n1 = t.l2_normalize_cols(v).unwrap();
    let n2 = t.l2_normalize_cols(n1).unwrap();
    assert!(t.value(n1).sub(t.value(n2)).unwrap().max_abs() <= 1e-12);
}

#[test]
fn broadcast_concat_slice_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_mat(3, 4, &mut rng);
    let b = rand_mat(3, 2, &mut rng);
    let col = rand_mat(3, 1, &mut rng);
    let err = fd_max_rel_err(
        |t, v| {
            let c = t.hconcat(v[0], v[1])?;
            let m = t.row_mean(c);
            let centered = t.sub_column(c, m)?;
            let shifted = t.add_column(centered, v[2])?;
            let part = t.col_range(shifted, 1, 5)?;
            let r = t.relu(part);
            let f = t.frobenius_norm(r);
            let s = t.sum(part);
            t.add(f, s)
        },
        &[a, b, col],
    );
    assert!(err <= 1e-6, "broadcast rel err {err}");
}

#[test]
fn solve_and_whiten_gradients_through_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for d in [2usize, 4] {
        let x = rand_mat(d, 12, &mut rng);
        let b = rand_mat(d, 3, &mut rng);
        let build = |kind: u8| {
            move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let xt = t.transpose(v[0]);
                let s = t.matmul(v[0], xt)?;
                let (s, _) = t.regularize_spd(s, 1e-2, 1e-10)?;
                let y = if kind == 0 {
                    t.solve_spd(s, v[1])?
                } else {
                    t.whiten_lower(s, v[1])?
                };
                let r = t.relu(y);
                let f = t.frobenius_norm(r);
                let s = t.sum(y);
                t.add(f, s)
            }
        };
        let e0 = fd_max_rel_err(build(0), &[x.clone(), b.clone()]);
        let e1 = fd_max_rel_err(build(1), &[x.clone(), b.clone()]);
        assert!(e0 <= 1e-4, "solve_spd rel err {e0}");
        assert!(e1 <= 1e-4, "whiten_lower rel err {e1}");
    }
}

#[test]
fn solve_spd_sum_gradient_wrt_rhs_and_features() {
    // gradient of sum(X), X = Σ_ε⁻¹ b, with Σ_ε from the features Z
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = rand_mat(4, 8, &mut rng);
    let zp = rand_mat(4, 8, &mut rng);
    let b = rand_mat(4, 3, &mut rng);
    let err = fd_max_rel_err(
        |t, v| {
            let nodes = uniclr::whitening::covariance_on_tape(t, v[0], v[1], 1e-4, false)?;
            let x = t.solve_spd(nodes.covariance, v[2])?;
            Ok(t.sum(x))
        },
        &[z, zp, b],
    );
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn every_loss_matches_finite_differences_on_five_seeds() {
    let cfgs = [
        LossConfig::sim_affinity(Some(0.5), 0.01),
        LossConfig::sim_affinity(None, 0.0),
        LossConfig::sim_whitening(Some(0.5), 0.01, 1e-4),
        LossConfig::sim_trace(1e-4),
        LossConfig::info_nce(0.5),
    ];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let z = rand_mat(3, 6, &mut rng);
        let zp = rand_mat(3, 6, &mut rng);
        for cfg in &cfgs {
            let err = fd_max_rel_err(
                |t, v| Ok(losses::uniclr_loss(t, v[0], v[1], cfg)?.total),
                &[z.clone(), zp.clone()],
            );
            assert!(err <= 1e-4, "{:?} seed {seed}: rel err {err}", cfg.variant);
        }
    }
}

#[test]
fn sigma_stop_grad_changes_whitening_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = rand_mat(3, 8, &mut rng);
    let zp = rand_mat(3, 8, &mut rng);
    let grad = |stop: bool| {
        let mut cfg = LossConfig::sim_trace(1e-4);
        cfg.sigma_stop_grad = stop;
        let mut t = Tape::new();
        let a = t.leaf(z.clone());
        let b = t.leaf(zp.clone());
        let out = losses::uniclr_loss(&mut t, a, b, &cfg).unwrap();
        t.backward(out.total).unwrap().wrt(a)
    };
    let full = grad(false);
    let frozen = grad(true);
    assert!(full.sub(&frozen).unwrap().max_abs() > 1e-6);
}

#[test]
fn tape_replay_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = rand_mat(4, 16, &mut rng);
    let zp = rand_mat(4, 16, &mut rng);
    let run = || {
        let cfg = LossConfig::sim_whitening(Some(0.5), 0.01, 1e-4);
        let mut t = Tape::new();
        let a = t.leaf(z.clone());
        let b = t.leaf(zp.clone());
        let out = losses::uniclr_loss(&mut t, a, b, &cfg).unwrap();
        let g = t.backward(out.total).unwrap();
        (t.scalar(out.total).unwrap().to_bits(), g.wrt(a), g.wrt(b))
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert_eq!(l1, l2);
    let bits = |m: &DenseMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ga1), bits(&ga2));
    assert_eq!(bits(&gb1), bits(&gb2));
}

#[test]
fn default_audit_passes() {
    let report = run_audit(&AuditConfig::default()).unwrap();
    println!("{}", report.table());
    assert!(report.passed(), "{}", report.table());
}
