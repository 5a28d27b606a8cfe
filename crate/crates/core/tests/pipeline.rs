//! End-to-end pipeline checks on small corpora: pretraining properties,
//! epoch structure, checkpoint/resume equivalence, and the behavior of the
//! policy-gradient signal under a frozen detector.

use std::collections::BTreeSet;
use std::fs;
use std::sync::Arc;

use attackgan_core::config::FlatConfig;
use attackgan_core::discriminator::DiscriminatorParams;
use attackgan_core::embedding::{train_skipgram, Objective, SkipGramConfig};
use attackgan_core::generator::{
    mle_loss, policy_gradient, sample_sequence, GeneratorParams, PolicySample,
};
use attackgan_core::ingest::{synthesize_corpus, SynthSpec};
use attackgan_core::metrics::MetricRecord;
use attackgan_core::nids::evaluate_nids;
use attackgan_core::orchestrator::{
    prepare_data, pretrain_phase, resume_experiment, run_experiment, METRICS_FILE,
};
use attackgan_core::packet::{build_mask, tokenize, Granularity, Label};
use attackgan_core::rollout::{action_values, RolloutConfig};

fn small_flat(seed: u64, epochs: usize) -> FlatConfig {
    let mut flat = FlatConfig::new();
    for kv in [
        format!("run.seed={seed}"),
        format!("run.epochs={epochs}"),
        "packet.length=32".to_string(),
        "synth.n_benign=200".to_string(),
        "synth.n_malicious=200".to_string(),
        "synth.signature_positions=8,9,10,11,12,13,14,15".to_string(),
        "mask.positions=0,1,2,3".to_string(),
        "nids=dt".to_string(),
        "embed.epochs=1".to_string(),
        "embed.dim=16".to_string(),
        "mle.epochs=2".to_string(),
        "mle.batch=32".to_string(),
        "pg.batch=4".to_string(),
        "rollout.m=4".to_string(),
        "train.adv_batch=48".to_string(),
        "eval.batch=64".to_string(),
        "disc.filters=8".to_string(),
        "disc.windows=3,4".to_string(),
        "gen.hidden=32".to_string(),
    ] {
        flat.set(&kv).unwrap();
    }
    flat
}

fn read_csv(dir: &std::path::Path) -> Vec<MetricRecord> {
    let text = fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| MetricRecord::parse_csv_row(l).unwrap())
        .collect()
}

#[test]
fn pretraining_establishes_the_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let flat = small_flat(11, 2);
    let cfg = attackgan_core::config::RunConfig::from_flat(&flat).unwrap();
    let data = prepare_data(&cfg, dir.path()).unwrap();
    let state = pretrain_phase(&cfg, &data, dir.path()).unwrap();

    // NIDS generalizes on the separable corpus
    let m = evaluate_nids(&state.nids, &data.test).unwrap();
    assert!(m.accuracy >= 0.95, "nids test accuracy {}", m.accuracy);

    // MLE pretraining lowered the NLL relative to a fresh initialization
    let malicious: Vec<_> = data
        .train
        .packets()
        .iter()
        .filter(|p| p.label == Label::Malicious)
        .map(|p| tokenize(p, cfg.granularity).unwrap())
        .collect();
    let fresh = GeneratorParams::init(
        cfg.gen_hidden,
        cfg.granularity.vocab_size(),
        cfg.embed_dim,
        attackgan_core::rng::stream_seed(cfg.seed, "gen", &[]),
    );
    let before = mle_loss(&fresh, &malicious, &state.emb).unwrap();
    let after = mle_loss(&state.gen, &malicious, &state.emb).unwrap();
    assert!(
        after < before,
        "MLE should lower NLL: {after} vs {before}"
    );

    // artifacts exist on disk
    assert!(dir.path().join("embedding.atkg").exists());
    assert!(dir.path().join("nids.atkg").exists());
    assert!(dir.path().join("checkpoints/epoch_0000/gen.atkg").exists());
}

#[test]
fn runs_are_deterministic_and_structurally_sound() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let summary_a = run_experiment(&small_flat(7, 3), dir_a.path()).unwrap();
    let summary_b = run_experiment(&small_flat(7, 3), dir_b.path()).unwrap();
    let csv_a = fs::read(dir_a.path().join(METRICS_FILE)).unwrap();
    let csv_b = fs::read(dir_b.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv_a, csv_b, "identical seeds must give identical CSVs");
    assert_eq!(summary_a.content_hash, summary_b.content_hash);

    let records = read_csv(dir_a.path());
    assert_eq!(records.len(), 3, "one row per epoch");
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert_eq!(r.nids_kind, "dt");
        assert_eq!(r.mu, 4);
        assert_eq!(r.afr + r.asr, 100.0, "exact complement");
        assert!(r.mape >= 0.0);
    }
    // every generated evaluation packet satisfied its constraint mask
    assert_eq!(summary_a.mask_violations, 0);
    assert_eq!(summary_a.mask_checked, 3 * 64);

    // the manifest reproduces the run byte-for-byte when fed back in
    let manifest_text = fs::read_to_string(dir_a.path().join("run_manifest.json")).unwrap();
    let flat_again = FlatConfig::from_json_str(&manifest_text).unwrap();
    let dir_c = tempfile::tempdir().unwrap();
    run_experiment(&flat_again, dir_c.path()).unwrap();
    let csv_c = fs::read(dir_c.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv_a, csv_c, "manifest-as-config must reproduce the CSV");
}

#[test]
fn resume_matches_a_straight_run_exactly() {
    let dir_full = tempfile::tempdir().unwrap();
    let dir_split = tempfile::tempdir().unwrap();
    run_experiment(&small_flat(23, 4), dir_full.path()).unwrap();
    run_experiment(&small_flat(23, 2), dir_split.path()).unwrap();
    let resumed = resume_experiment(dir_split.path(), Some(4)).unwrap();
    assert_eq!(resumed.epochs_completed, 4);
    let csv_full = fs::read(dir_full.path().join(METRICS_FILE)).unwrap();
    let csv_split = fs::read(dir_split.path().join(METRICS_FILE)).unwrap();
    assert_eq!(
        csv_full, csv_split,
        "run(0->4) and run(0->2)+resume(2->4) must emit identical CSVs"
    );
}

/// With a frozen detector that returns 0.5 everywhere, every action value
/// equals 0.5, so the policy-gradient estimator is REINFORCE with a
/// constant reward: the score-function terms cancel in expectation over
/// the policy's own samples. The empirical batch gradient must therefore
/// be small next to the identically scaled gradient that pulls toward
/// real malicious data (the MLE direction), which has a systematic signal.
#[test]
fn constant_reward_vanishes_against_the_mle_gradient() {
    let spec = SynthSpec {
        n_benign: 64,
        n_malicious: 64,
        p: 16,
        signature_positions: (4..8).collect(),
        benign_range: (0, 99),
        malicious_range: (156, 255),
        noise_seed: 5,
    };
    let ds = synthesize_corpus(&spec).unwrap();
    let tokens: Vec<_> = ds
        .packets()
        .iter()
        .filter(|p| p.label == Label::Malicious)
        .map(|p| tokenize(p, Granularity::OneByte).unwrap())
        .collect();
    let sg = train_skipgram(
        &tokens,
        &SkipGramConfig {
            dim: 8,
            window: 2,
            epochs: 1,
            lr: 0.05,
            seed: 3,
            objective: Objective::FullSoftmax,
        },
    )
    .unwrap();
    let emb = Arc::new(sg.embedding());
    let gen = GeneratorParams::init(16, 256, 8, 9);
    // zero head weights leave the detector at exactly 0.5
    let disc = DiscriminatorParams::init(&[3], 8, 8, 11);

    let template = ds
        .packets()
        .iter()
        .find(|p| p.label == Label::Malicious)
        .unwrap();
    let mask = build_mask(template, &BTreeSet::new(), Granularity::OneByte).unwrap();
    let samples: Vec<PolicySample> = (0..32)
        .map(|i| sample_sequence(&gen, &emb, &mask, 16, 100 + i).unwrap())
        .collect();
    let mut qs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let table = action_values(
            s,
            &gen,
            &emb,
            &mask,
            &disc,
            &RolloutConfig {
                m: 4,
                seed: 500 + i as u64,
            },
        )
        .unwrap();
        assert!(table.q.iter().all(|&q| q == 0.5));
        qs.push(table.q);
    }
    let (_, pg_self) = policy_gradient(&gen, &emb, &samples, &qs).unwrap();

    // same estimator, same constant reward, but real malicious sequences:
    // no score cancellation applies, so this is the (scaled) MLE pull
    let real_batch: Vec<PolicySample> = tokens
        .iter()
        .take(32)
        .map(|seq| PolicySample {
            tokens: seq.clone(),
            step_logprobs: vec![0.0; seq.len()],
            masked_flags: vec![false; seq.len()],
        })
        .collect();
    let q_real = vec![vec![0.5; 16]; real_batch.len()];
    let (_, pg_real) = policy_gradient(&gen, &emb, &real_batch, &q_real).unwrap();

    let self_norm = pg_self.norm();
    let real_norm = pg_real.norm();
    assert!(self_norm > 0.0, "empirical batch gradient is still nonzero");
    assert!(
        self_norm < real_norm,
        "constant-reward policy gradient ({self_norm:.4}) should be smaller than the MLE pull ({real_norm:.4})"
    );
}
