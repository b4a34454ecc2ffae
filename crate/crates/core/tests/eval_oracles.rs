//! Evaluators against independent reference implementations.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniclr::cli::evaluate_encoder;
use uniclr::data::{gen_synthetic, SyntheticKind};
use uniclr::encoder::init_params;
use uniclr::eval::{collapse_metrics, knn_predict, linear_probe, ProbeConfig, Protocol};
use uniclr::trainer::TrainConfig;
use uniclr::DenseMatrix;

fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn brute_force_knn(train: &DenseMatrix, labels: &[usize], query: &[f64], k: usize) -> usize {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, usize)> = (0..train.cols())
        .map(|j| {
            let c = train.column(j);
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = c.iter().zip(query).map(|(a, b)| a * b).sum();
            (dot / (cn * qn), j)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let classes = labels.iter().max().unwrap() + 1;
    let mut votes = vec![0usize; classes];
    for &(_, j) in scored.iter().take(k) {
        votes[labels[j]] += 1;
    }
    let best = *votes.iter().max().unwrap();
    votes.iter().position(|&v| v == best).unwrap()
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [1, 3, 5, 8] {
        let train = rand_mat(5, 60, &mut rng);
        let labels: Vec<usize> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let test = rand_mat(5, 25, &mut rng);
        let got = knn_predict(&train, &labels, &test, k).unwrap();
        for (j, &g) in got.iter().enumerate() {
            assert_eq!(g, brute_force_knn(&train, &labels, &test.column(j), k), "k={k} query {j}");
        }
    }
}

#[test]
fn knn_is_invariant_to_positive_rescaling_of_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = rand_mat(4, 40, &mut rng);
    let labels: Vec<usize> = (0..40).map(|j| j % 3).collect();
    let test = rand_mat(4, 15, &mut rng);
    let scales: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..10.0)).collect();
    let scaled = DenseMatrix::from_fn(4, 40, |i, j| train.get(i, j) * scales[j]);
    assert_eq!(
        knn_predict(&train, &labels, &test, 5).unwrap(),
        knn_predict(&scaled, &labels, &test.scale(3.5), 5).unwrap()
    );
}

fn svd_effective_rank(x: &DenseMatrix) -> f64 {
    let m = DMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j));
    let mean = m.column_mean();
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    let sv = c.singular_values();
    let total: f64 = sv.iter().sum();
    let entropy: f64 = sv
        .iter()
        .map(|s| s / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    entropy.exp()
}

#[test]
fn effective_rank_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (d, n) in [(4, 64), (8, 20), (16, 6), (3, 3)] {
        let x = rand_mat(d, n, &mut rng);
        let ours = collapse_metrics(&x).unwrap().effective_rank;
        let oracle = svd_effective_rank(&x);
        assert!((ours - oracle).abs() <= 1e-8, "{d}x{n}: {ours} vs {oracle}");
    }
}

#[test]
fn effective_rank_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_mat(4, 50, &mut rng);
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let rot = DenseMatrix::from_rows(&[
        &[c, -s, 0.0, 0.0],
        &[s, c, 0.0, 0.0],
        &[0.0, 0.0, c, s],
        &[0.0, 0.0, -s, c],
    ])
    .unwrap();
    let a = collapse_metrics(&x).unwrap().effective_rank;
    let b = collapse_metrics(&rot.matmul(&x).unwrap()).unwrap().effective_rank;
    assert!((a - b).abs() <= 1e-9);
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = rand_mat(8, 400, &mut rng);
    let test = rand_mat(8, 400, &mut rng);
    let tl: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
    let el: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
    let r = linear_probe(&train, &tl, &test, &el, &ProbeConfig::default()).unwrap();
    assert!((r.accuracy - 0.5).abs() <= 0.1, "accuracy {}", r.accuracy);
}

#[test]
fn evaluation_leaves_the_encoder_untouched() {
    let full = gen_synthetic(SyntheticKind::Blobs, 3, 40, 6, 6).unwrap();
    let (train, test) = full.split(0.25, 6);
    let enc = init_params(&TrainConfig::default().architecture(6), 6).unwrap();
    let before = enc.clone();
    for protocol in [Protocol::Knn, Protocol::Linear] {
        let a = evaluate_encoder(&enc, &train, &test, protocol, 5, &ProbeConfig::default()).unwrap();
        let b = evaluate_encoder(&enc, &train, &test, protocol, 5, &ProbeConfig::default()).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.num_test, test.len());
    }
    assert_eq!(enc, before);
}
