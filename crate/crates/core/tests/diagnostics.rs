use fidelity_lab::diagnostics::{
    conditional_entropy, effective_rank, entropy_of_logits, probe_dynamics, probe_model,
    BatchEmbeddingMatrix, BatchLayout,
};
use fidelity_lab::model::checkpoint;
use fidelity_lab::model::scripted::{ScriptedModel, StepDistribution};
use fidelity_lab::model::CompressorDecoder;
use fidelity_lab::training::CompressionSample;
use fidelity_lab::vocab::{TokenSequence, Vocabulary};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random orthonormal columns from the QR factor of a Gaussian matrix.
fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
    g.qr().q()
}

fn with_spectrum(b: usize, d: usize, sigma: &[f64], seed: u64) -> BatchEmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = sigma.len();
    let u = orthonormal(b, k, &mut rng);
    let v = orthonormal(d, k, &mut rng);
    let z = u * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(sigma)) * v.transpose();
    let mut values = Vec::with_capacity(b * d);
    for r in 0..b {
        for c in 0..d {
            values.push(z[(r, c)]);
        }
    }
    BatchEmbeddingMatrix::new(b, d, values).unwrap()
}

/// exp of the spectral entropy, with σ from the eigenvalues of ZᵀZ.
fn eigen_erank(zb: &BatchEmbeddingMatrix) -> f64 {
    let z = DMatrix::from_row_slice(zb.rows(), zb.cols(), zb.values());
    let gram = z.transpose() * &z;
    let eig = gram.symmetric_eigen();
    let sigma: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let max = sigma.iter().cloned().fold(0.0, f64::max);
    let kept: Vec<f64> = sigma.into_iter().filter(|&s| s > 1e-7 * max).collect();
    let total: f64 = kept.iter().sum();
    (-kept
        .iter()
        .map(|s| s / total)
        .map(|p| p * p.ln())
        .sum::<f64>())
    .exp()
}

#[test]
fn constructed_spectra() {
    let cases: [(&[f64], f64); 3] = [
        (&[1.0, 1.0, 1.0, 1.0], 4.0),
        (&[3.0], 1.0),
        (&[2.0, 1.0, 1.0], 8f64.sqrt()),
    ];
    for (i, (sigma, want)) in cases.iter().enumerate() {
        let zb = with_spectrum(8, 6, sigma, i as u64);
        let got = effective_rank(&zb).unwrap().erank;
        assert!((got - want).abs() < 1e-6, "{sigma:?}: {got}");
        assert!((got - eigen_erank(&zb)).abs() < 1e-6);
    }
}

#[test]
fn outer_product_is_rank_one() {
    let u = [1.0, -2.0, 0.5, 3.0];
    let v = [0.3, 0.1, -0.7];
    let values: Vec<f64> = u
        .iter()
        .flat_map(|a| v.iter().map(move |b| a * b))
        .collect();
    let r = effective_rank(&BatchEmbeddingMatrix::new(4, 3, values).unwrap()).unwrap();
    assert!((r.erank - 1.0).abs() < 1e-9);
}

#[test]
fn hand_spectral_entropy() {
    let zb = with_spectrum(5, 5, &[2.0, 1.0, 1.0], 11);
    let r = effective_rank(&zb).unwrap();
    let h = 0.5 * 2f64.ln() + 0.5 * 4f64.ln();
    assert!((h - 1.0397).abs() < 1e-4);
    assert!((r.erank - h.exp()).abs() < 1e-9);
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> BatchEmbeddingMatrix {
    BatchEmbeddingMatrix::new(b, d, (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let zb = random_batch(&mut rng, 6, 9);
        let base = effective_rank(&zb).unwrap().erank;
        for c in [1e-3, 1.0, 1e3] {
            let scaled =
                BatchEmbeddingMatrix::new(6, 9, zb.values().iter().map(|v| v * c).collect())
                    .unwrap();
            assert!((effective_rank(&scaled).unwrap().erank - base).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn erank_bounds(seed in any::<u64>(), b in 2usize..10, d in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zb = random_batch(&mut rng, b, d);
        let e = effective_rank(&zb).unwrap().erank;
        prop_assert!(e >= 1.0 && e <= b.min(d) as f64 + 1e-12);
        prop_assert!((e - eigen_erank(&zb)).abs() < 1e-6);
    }

    #[test]
    fn entropy_bounds_and_brute_force(logits in prop::collection::vec(-30.0f64..30.0, 2..80)) {
        let h = entropy_of_logits(&logits);
        prop_assert!(h >= 0.0 && h <= (logits.len() as f64).ln() + 1e-12);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let brute: f64 = -logits.iter().map(|l| l.exp() / z).map(|p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
        prop_assert!((h - brute).abs() < 1e-9);
    }
}

#[test]
fn entropy_examples() {
    let mut one_hot = vec![-1e30; 64];
    one_hot[7] = 0.0;
    assert_eq!(entropy_of_logits(&one_hot), 0.0);
    assert!((entropy_of_logits(&[0.0; 64]) - 64f64.ln()).abs() < 1e-9);
    let mut two = vec![-1e30; 10];
    two[0] = 0.0;
    two[1] = 0.0;
    assert!((entropy_of_logits(&two) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn scripted_conditional_entropy() {
    let vocab = Vocabulary::synthetic(64);
    let x = TokenSequence::new((6..14).collect()).unwrap();
    let uniform = ScriptedModel::new(vocab.clone(), StepDistribution::Uniform);
    let z = uniform.compress(&x).unwrap();
    let h = conditional_entropy(&uniform, &z, &x).unwrap();
    assert!(h.per_step.iter().all(|v| (v - 64f64.ln()).abs() < 1e-9));
    let copy = ScriptedModel::new(vocab.clone(), StepDistribution::ExactCopy);
    assert_eq!(
        conditional_entropy(&copy, &copy.compress(&x).unwrap(), &x)
            .unwrap()
            .mean,
        0.0
    );
    let half = ScriptedModel::new(vocab, StepDistribution::Weighted(vec![(6, 0.5), (7, 0.5)]));
    let h = conditional_entropy(&half, &half.compress(&x).unwrap(), &x).unwrap();
    assert!((h.mean - 2f64.ln()).abs() < 1e-9);
}

fn probe_set() -> Vec<CompressionSample> {
    (0..5u32)
        .map(|i| {
            let ids: Vec<u32> = (0..8).map(|t| 6 + (i * 7 + t * (i + 1)) % 20).collect();
            CompressionSample::new(TokenSequence::new(ids).unwrap(), 6).unwrap()
        })
        .collect()
}

#[test]
fn scripted_trajectory_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(32);
    let probe = probe_set();
    let models = [
        (
            10,
            ScriptedModel::new(vocab.clone(), StepDistribution::Uniform),
        ),
        (
            20,
            ScriptedModel::new(
                vocab.clone(),
                StepDistribution::Weighted(vec![(6, 0.5), (7, 0.5)]),
            ),
        ),
        (
            30,
            ScriptedModel::new(vocab.clone(), StepDistribution::Uniform),
        ),
    ];
    let mut series = Vec::new();
    for (step, m) in &models {
        let p = dir.path().join(checkpoint::file_name(*step));
        checkpoint::save_scripted(&p, m, *step).unwrap();
        series.push((*step, p));
    }
    let traj = probe_dynamics(&series, &probe, BatchLayout::Flatten).unwrap();
    // Scripted memories are the prefix token ids, so the batch is the 5 × 6 id matrix.
    let ids: Vec<f64> = probe
        .iter()
        .flat_map(|s| {
            s.prefix()
                .ids()
                .iter()
                .map(|&t| t as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    let want_erank = eigen_erank(&BatchEmbeddingMatrix::new(5, 6, ids).unwrap());
    let want_entropy = [32f64.ln(), 2f64.ln(), 32f64.ln()];
    for (p, h) in traj.points.iter().zip(want_entropy) {
        assert!((p.erank - want_erank).abs() < 1e-6);
        assert!((p.entropy - h).abs() < 1e-9);
    }
    assert_eq!(
        (traj.points[0].erank, traj.points[0].entropy),
        (traj.points[2].erank, traj.points[2].entropy)
    );
    let direct = probe_model(&models[1].1, &probe, BatchLayout::Flatten).unwrap();
    assert_eq!(
        (direct.erank, direct.entropy),
        (traj.points[1].erank, traj.points[1].entropy)
    );
}
