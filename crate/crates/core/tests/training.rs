use fidelity_lab::model::scripted::{ScriptedModel, StepDistribution};
use fidelity_lab::model::{
    decode_logits, CompressionConfig, CompressionModel, CompressorDecoder, ModelConfig, Role,
};
use fidelity_lab::training::{
    read_metrics_csv, run_training, total_loss, write_metrics_csv, CompressionSample, NoHooks,
    TrainConfig,
};
use fidelity_lab::vocab::{TokenSequence, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 24;

fn model(seed: u64, d: usize, slots: usize, source_length: usize) -> CompressionModel<f32> {
    let c = ModelConfig::new(Role::Compressor, V, 1, 2, d, 2 * d, 40);
    let dc = ModelConfig::new(Role::Decoder, V, 1, 2, d, 2 * d, 40);
    let comp = CompressionConfig {
        memory_slots: slots,
        source_length,
        projector: true,
    };
    CompressionModel::new(Vocabulary::synthetic(V), c, dc, comp, seed).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng) -> CompressionSample {
    let n = rng.gen_range(5..14);
    let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(6..V as u32)).collect();
    let k = rng.gen_range(4..=n);
    CompressionSample::new(TokenSequence::new(ids).unwrap(), k).unwrap()
}

/// −ln softmax(row)[tok] with explicit exponentials over the vocabulary.
fn brute_nll(row: &[f64], tok: u32) -> f64 {
    let z: f64 = row.iter().map(|l| l.exp()).sum();
    -(row[tok as usize].exp() / z).ln()
}

#[test]
fn total_loss_matches_brute_force_likelihood() {
    let m = model(1, 16, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = random_sample(&mut rng);
        let l = total_loss(&m, &s).unwrap();
        let z = m.compress(&s.prefix()).unwrap();
        let logits = decode_logits(&m, &z, &s.x).unwrap();
        let (mut re, mut nt) = (0.0, 0.0);
        for (t, &tok) in s.x.ids().iter().enumerate() {
            let nll = brute_nll(logits.row(t), tok);
            if t < s.k {
                re += nll;
            } else {
                nt += nll;
            }
        }
        assert!((l.re - re).abs() < 1e-5 && (l.nt - nt).abs() < 1e-5);
        assert_eq!(l.total, l.re + l.nt);
        let (a, b) = m.sample_loss(s.x.ids(), s.k).unwrap();
        assert!((a - re).abs() < 1e-3 * re.max(1.0) && (b - nt).abs() < 1e-3 * nt.max(1.0));
    }
}

#[test]
fn uniform_decoder_example() {
    let m = ScriptedModel::new(Vocabulary::synthetic(64), StepDistribution::Uniform);
    let s = CompressionSample::new(TokenSequence::new(vec![6, 7, 8, 9]).unwrap(), 4).unwrap();
    let l = total_loss(&m, &s).unwrap();
    assert!((l.re - 4.0 * 64f64.ln()).abs() < 1e-6);
    assert_eq!(l.nt, 0.0);
    let copy = ScriptedModel::new(Vocabulary::synthetic(64), StepDistribution::ExactCopy);
    assert_eq!(total_loss(&copy, &s).unwrap().total, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn weighted_decoder_loss_is_per_token_sum(
        ids in prop::collection::vec(6u32..20, 2..10),
        p in 0.05f64..0.95,
    ) {
        let k = ids.len().div_ceil(2);
        let m = ScriptedModel::new(Vocabulary::synthetic(20), StepDistribution::Weighted(vec![(6, p)]));
        let s = CompressionSample::new(TokenSequence::new(ids.clone()).unwrap(), k).unwrap();
        let l = total_loss(&m, &s).unwrap();
        let rest = (1.0 - p) / 19.0;
        let nll = |t: u32| if t == 6 { -p.ln() } else { -rest.ln() };
        let want_re: f64 = ids[..k].iter().map(|&t| nll(t)).sum();
        let want_nt: f64 = ids[k..].iter().map(|&t| nll(t)).sum();
        prop_assert!((l.re - want_re).abs() < 1e-9 && (l.nt - want_nt).abs() < 1e-9);
        prop_assert_eq!(l.total, l.re + l.nt);
    }
}

fn fixed_samples(n: usize, seed: u64) -> Vec<CompressionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ids: Vec<u32> = (0..10).map(|_| rng.gen_range(6..V as u32)).collect();
            CompressionSample::new(TokenSequence::new(ids).unwrap(), 8).unwrap()
        })
        .collect()
}

#[test]
fn checkpoint_cadence_and_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixed_samples(6, 3);
    let cfg = TrainConfig {
        steps: 100,
        batch_size: 2,
        checkpoint_interval: 50,
        probe_interval: 25,
        ..Default::default()
    };
    let run = run_training(
        model(4, 8, 2, 8),
        &data[2..],
        &data[..2],
        &cfg,
        Some(dir.path()),
        &mut NoHooks,
    )
    .unwrap();
    let steps: Vec<u64> = run.checkpoints.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![50, 100]);
    assert!(dir.path().join("ckpt_00000050").exists() && dir.path().join("ckpt_00000100").exists());
    let logged =
        read_metrics_csv(&std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap())
            .unwrap();
    assert_eq!(
        logged.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![25, 50, 75, 100]
    );
    for (a, b) in logged.iter().zip(&run.records) {
        assert!((a.loss.total - b.loss.total).abs() < 1e-12 && a.erank == b.erank);
    }
    let again = dir.path().join("copy.csv");
    write_metrics_csv(&again, &run.records).unwrap();
    assert_eq!(
        read_metrics_csv(&std::fs::read_to_string(again).unwrap()).unwrap(),
        run.records
    );
}

#[test]
fn runs_are_reproducible() {
    let data = fixed_samples(8, 5);
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 3,
        probe_interval: 20,
        checkpoint_interval: 60,
        ..Default::default()
    };
    let a = run_training(
        model(6, 8, 2, 8),
        &data[2..],
        &data[..2],
        &cfg,
        None,
        &mut NoHooks,
    )
    .unwrap();
    let b = run_training(
        model(6, 8, 2, 8),
        &data[2..],
        &data[..2],
        &cfg,
        None,
        &mut NoHooks,
    )
    .unwrap();
    assert_eq!(a.records.len(), 3);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!((x.loss.total - y.loss.total).abs() <= 1e-6);
        assert!((x.erank.unwrap() - y.erank.unwrap()).abs() <= 1e-6);
        assert!((x.entropy.unwrap() - y.entropy.unwrap()).abs() <= 1e-6);
    }
}

#[test]
fn single_sample_overfits() {
    let data = fixed_samples(1, 9);
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 1,
        warmup_steps: 50,
        peak_lr: 3e-3,
        probe_interval: 2000,
        checkpoint_interval: 2000,
        ..Default::default()
    };
    let run = run_training(model(7, 32, 2, 8), &data, &[], &cfg, None, &mut NoHooks).unwrap();
    let per_token = total_loss(&run.model, &data[0]).unwrap().total / data[0].len() as f64;
    assert!(per_token < 0.1, "{per_token}");
}
