//! End-to-end adversarial training.
//!
//! Pretraining (NIDS, MLE generator, substitute detector) followed by
//! alternating generator/discriminator epochs: the generator samples masked
//! packets and ascends rollout-estimated action values; the discriminator
//! retrains on NIDS-labeled batches; every epoch logs AFR/ASR/ASIR/MAPE on
//! a fresh evaluation batch and checkpoints atomically so a run can resume
//! bit-for-bit. All randomness is drawn from named streams of the run seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::checkpoint::{push_adam, read_adam, Container};
use crate::config::{FlatConfig, RunConfig};
use crate::discriminator::{train_discriminator, DiscTrainConfig, DiscriminatorParams};
use crate::embedding::{train_skipgram, EmbeddingMatrix, Objective, SkipGramConfig};
use crate::generator::{
    mle_pretrain, policy_gradient_update, sample_sequence, GeneratorParams, MleConfig,
    PolicySample,
};
use crate::ingest::{load_dataset, save_dataset, split_dataset, synthesize_corpus, LabeledDataset};
use crate::metrics::{
    afr, asir, asr, mape, MetricRecord, NormalizationStats, METRIC_CSV_HEADER,
};
use crate::nids::{evaluate_nids, train_nids, NidsModel, BYTE_SCALE_EXTRACTOR_ID};
use crate::opt::Adam;
use crate::packet::{
    build_mask, detokenize, tokenize, validate_against_mask, ConstraintMask, Label,
    NormalizedPacket, TokenSequence,
};
use crate::rng;
use crate::rollout::{action_values, RolloutConfig};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DATASET_FILE: &str = "dataset.atkd";
pub const EMBEDDING_FILE: &str = "embedding.atkg";
pub const NIDS_FILE: &str = "nids.atkg";

/// Dataset plus its split, shared by the whole run.
pub struct PreparedData {
    pub dataset: LabeledDataset,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub content_hash: String,
}

/// Mutable training state between epochs. The frozen artifacts (embedding,
/// NIDS) are shared; epoch transitions produce a new state so a failed
/// epoch leaves the previous one intact.
#[derive(Clone)]
pub struct RunState {
    pub epoch: usize,
    pub gen: GeneratorParams,
    pub gen_opt: Adam,
    pub rollout_gen: Option<GeneratorParams>,
    pub disc: DiscriminatorParams,
    pub disc_opt: Adam,
    pub emb: Arc<EmbeddingMatrix>,
    pub stats: Arc<NormalizationStats>,
    pub nids: Arc<NidsModel>,
    pub asr_original: f64,
    pub baseline: f64,
    pub disc_losses: Vec<f64>,
    pub mask_checked: u64,
    pub mask_violations: u64,
    pub best: Option<(usize, f64)>,
    pub records: Vec<MetricRecord>,
}

/// Train-set malicious packets with their tokenizations: the pool of
/// constraint templates.
struct TemplatePool {
    packets: Vec<NormalizedPacket>,
    tokens: Vec<TokenSequence>,
}

impl TemplatePool {
    fn build(train: &LabeledDataset, cfg: &RunConfig) -> Result<TemplatePool> {
        let packets: Vec<NormalizedPacket> = train
            .packets()
            .iter()
            .filter(|p| p.label == Label::Malicious)
            .cloned()
            .collect();
        if packets.is_empty() {
            return Err(Error::Orchestrator(
                "no malicious training packets to use as constraint templates".into(),
            ));
        }
        let tokens = packets
            .iter()
            .map(|p| tokenize(p, cfg.granularity))
            .collect::<Result<Vec<_>>>()?;
        Ok(TemplatePool { packets, tokens })
    }

    fn len(&self) -> usize {
        self.packets.len()
    }
}

struct GeneratedItem {
    sample: PolicySample,
    template_idx: usize,
    mask: ConstraintMask,
}

/// Sample `count` masked sequences, pairing each with a seeded random
/// malicious template. `parts` identifies the stream (epoch, step, ...).
fn generate_batch(
    gen: &GeneratorParams,
    emb: &EmbeddingMatrix,
    pool: &TemplatePool,
    cfg: &RunConfig,
    tag: &str,
    parts: &[u64],
    count: usize,
) -> Result<Vec<GeneratedItem>> {
    use rand::Rng;
    let positions = cfg.effective_mask_positions();
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let mut with_i = parts.to_vec();
        with_i.push(i as u64);
        let mut tpl_rng = rng::stream(cfg.seed, &format!("{tag}.tpl"), &with_i);
        let template_idx = tpl_rng.random_range(0..pool.len());
        let mask = build_mask(&pool.packets[template_idx], &positions, cfg.granularity)?;
        let seed = rng::stream_seed(cfg.seed, &format!("{tag}.sample"), &with_i);
        let sample = sample_sequence(gen, emb, &mask, cfg.token_len(), seed)?;
        items.push(GeneratedItem {
            sample,
            template_idx,
            mask,
        });
    }
    Ok(items)
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolve a config path: relative paths are tried against the output
/// directory first, then the working directory.
fn resolve_path(raw: &Path, out_dir: &Path) -> PathBuf {
    if raw.is_absolute() {
        return raw.to_path_buf();
    }
    let under_out = out_dir.join(raw);
    if under_out.exists() {
        under_out
    } else {
        raw.to_path_buf()
    }
}

/// Load or synthesize the corpus and split it. Synthesized corpora are
/// persisted into the output directory for provenance and resume.
pub fn prepare_data(cfg: &RunConfig, out_dir: &Path) -> Result<PreparedData> {
    let dataset = match (&cfg.data_path, &cfg.synth) {
        (Some(path), _) => load_dataset(&resolve_path(path, out_dir))?,
        (None, Some(spec)) => {
            let ds = synthesize_corpus(spec)?;
            save_dataset(
                &out_dir.join(DATASET_FILE),
                &ds,
                &format!("synthetic seed={}", spec.noise_seed),
            )?;
            ds
        }
        (None, None) => {
            return Err(Error::Config(
                "no dataset: set data.path or the synth.* keys".into(),
            ))
        }
    };
    if dataset.packet_len() != Some(cfg.packet_len) {
        return Err(Error::Orchestrator(format!(
            "dataset packet length {:?} does not match packet.length {}",
            dataset.packet_len(),
            cfg.packet_len
        )));
    }
    let (train, test) = split_dataset(&dataset, cfg.train_split, rng::mix(cfg.seed, &[0x5354]))?;
    let mut bytes = Vec::new();
    for p in dataset.packets() {
        bytes.push(if p.label == Label::Malicious { 1 } else { 0 });
        bytes.extend_from_slice(&p.bytes);
    }
    let content_hash = sha256_hex(&[&bytes]);
    Ok(PreparedData {
        dataset,
        train,
        test,
        content_hash,
    })
}

fn corpus_tokens(ds: &LabeledDataset, cfg: &RunConfig) -> Result<Vec<TokenSequence>> {
    ds.packets()
        .iter()
        .map(|p| tokenize(p, cfg.granularity))
        .collect()
}

/// Algorithm phase 1: train (or load) the frozen artifacts, MLE-pretrain
/// the generator, pretrain the substitute detector on NIDS labels, and
/// checkpoint everything as epoch 0.
pub fn pretrain_phase(cfg: &RunConfig, data: &PreparedData, out_dir: &Path) -> Result<RunState> {
    // embeddings: trained once on the full corpus, then frozen
    let mut emb = match &cfg.embed_load {
        Some(path) => {
            let c = Container::read(&resolve_path(path, out_dir))?;
            EmbeddingMatrix::restore(&c)?
        }
        None => {
            let corpus = corpus_tokens(&data.dataset, cfg)?;
            let sg = train_skipgram(
                &corpus,
                &SkipGramConfig {
                    dim: cfg.embed_dim,
                    window: cfg.embed_window,
                    epochs: cfg.embed_epochs,
                    lr: cfg.embed_lr,
                    seed: rng::stream_seed(cfg.seed, "embed", &[]),
                    objective: if cfg.granularity.vocab_size() <= 256 {
                        Objective::FullSoftmax
                    } else {
                        Objective::NegativeSampling {
                            k: cfg.embed_negatives,
                        }
                    },
                },
            )?;
            println!(
                "[pretrain] skip-gram: {} epochs, monitor loss {:?}",
                cfg.embed_epochs, sg.epoch_losses
            );
            sg.embedding()
        }
    };
    if emb.granularity != cfg.granularity || emb.dim() != cfg.embed_dim {
        return Err(Error::Orchestrator(format!(
            "embedding table ({}, d={}) does not match config ({}, d={})",
            emb.granularity.as_str(),
            emb.dim(),
            cfg.granularity.as_str(),
            cfg.embed_dim
        )));
    }
    emb.snap();
    {
        let mut c = Container::new("embedding");
        emb.store(&mut c);
        c.write(&out_dir.join(EMBEDDING_FILE))?;
    }
    let emb = Arc::new(emb);
    let stats = Arc::new(NormalizationStats::from_table(&emb));

    // black-box NIDS
    let mut nids = match &cfg.nids_load {
        Some(path) => NidsModel::load(&resolve_path(path, out_dir), BYTE_SCALE_EXTRACTOR_ID)?,
        None => train_nids(
            cfg.nids_kind,
            &data.train,
            rng::stream_seed(cfg.seed, "nids", &[]),
        )?,
    };
    nids.snap();
    nids.save(&out_dir.join(NIDS_FILE))?;
    let test_metrics = evaluate_nids(&nids, &data.test)?;
    println!(
        "[pretrain] nids {}: train {:?}, test acc {:.4} prec {:.4} rec {:.4}",
        nids.kind().as_str(),
        nids.meta().train_metrics,
        test_metrics.accuracy,
        test_metrics.precision,
        test_metrics.recall
    );
    let nids = Arc::new(nids);

    // original attack success rate: raw malicious test packets vs the NIDS
    let raw_malicious: Vec<NormalizedPacket> = data
        .test
        .packets()
        .iter()
        .filter(|p| p.label == Label::Malicious)
        .cloned()
        .collect();
    if raw_malicious.is_empty() {
        return Err(Error::Orchestrator(
            "test split has no malicious packets for the ASR baseline".into(),
        ));
    }
    let labels = nids.predict_packets(&raw_malicious)?;
    let asr_original = (asr(&labels)? as f32) as f64;
    println!("[pretrain] original ASR {asr_original:.3}%");

    // generator: MLE on real malicious training packets
    let pool = TemplatePool::build(&data.train, cfg)?;
    let mut gen = GeneratorParams::init(
        cfg.gen_hidden,
        cfg.granularity.vocab_size(),
        cfg.embed_dim,
        rng::stream_seed(cfg.seed, "gen", &[]),
    );
    if cfg.mle_epochs > 0 {
        let losses = mle_pretrain(
            &mut gen,
            &pool.tokens,
            &emb,
            &MleConfig {
                epochs: cfg.mle_epochs,
                lr: cfg.mle_lr,
                batch: cfg.mle_batch,
                seed: rng::stream_seed(cfg.seed, "mle", &[]),
            },
        )?;
        println!("[pretrain] generator MLE losses {losses:?}");
    }

    // substitute detector, pretrained on NIDS-labeled generated + benign
    let mut disc = DiscriminatorParams::init(
        &cfg.disc_windows,
        cfg.disc_filters,
        cfg.embed_dim,
        rng::stream_seed(cfg.seed, "disc", &[]),
    );
    let mut disc_opt = Adam::new(cfg.disc_lr);
    let mut disc_losses = Vec::new();
    {
        let items = generate_batch(&gen, &emb, &pool, cfg, "pre", &[], cfg.adv_batch)?;
        let (x, y) = nids_partition(&items, &data.train, cfg, &nids, 0)?;
        if x.is_empty() || y.is_empty() {
            println!("[pretrain] skipping detector pretraining: a predicted class is empty");
        } else {
            let losses = train_discriminator(
                &mut disc,
                &x,
                &y,
                &emb,
                &DiscTrainConfig {
                    epochs: cfg.disc_pretrain_epochs,
                    lr: cfg.disc_lr,
                    batch: cfg.disc_batch,
                    dropout: cfg.disc_dropout,
                    seed: rng::stream_seed(cfg.seed, "disc.pre", &[]),
                },
                &mut disc_opt,
            )?;
            println!("[pretrain] detector losses {losses:?}");
            disc_losses.push((*losses.last().unwrap() as f32) as f64);
        }
    }

    let mut state = RunState {
        epoch: 0,
        gen,
        gen_opt: Adam::new(cfg.pg_lr),
        rollout_gen: None,
        disc,
        disc_opt,
        emb,
        stats,
        nids,
        asr_original,
        baseline: 0.0,
        disc_losses,
        mask_checked: 0,
        mask_violations: 0,
        best: None,
        records: Vec::new(),
    };
    snap_state(&mut state);
    write_epoch_checkpoint(out_dir, &state)?;
    Ok(state)
}

/// Combine generated items with a seeded benign sample, let the NIDS label
/// everything, and split into predicted-benign (X) and predicted-malicious
/// (Y) token sequences.
fn nids_partition(
    items: &[GeneratedItem],
    train: &LabeledDataset,
    cfg: &RunConfig,
    nids: &NidsModel,
    salt: u64,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    use rand::Rng;
    let benign_idx = train.indices_of(Label::Benign);
    if benign_idx.is_empty() {
        return Err(Error::Orchestrator("training split has no benign packets".into()));
    }
    let mut order = benign_idx.clone();
    let mut rng = rng::stream(cfg.seed, "dstep.benign", &[salt]);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let take = order.len().min(items.len().max(1));
    let mut packets: Vec<NormalizedPacket> = Vec::with_capacity(items.len() + take);
    let mut sequences: Vec<TokenSequence> = Vec::with_capacity(items.len() + take);
    for item in items {
        packets.push(detokenize(&item.sample.tokens, cfg.packet_len)?);
        sequences.push(item.sample.tokens.clone());
    }
    for &idx in order.iter().take(take) {
        let pkt = &train.packets()[idx];
        packets.push(pkt.clone());
        sequences.push(tokenize(pkt, cfg.granularity)?);
    }
    let labels = nids.predict_packets(&packets)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (seq, label) in sequences.into_iter().zip(labels) {
        match label {
            Label::Benign => x.push(seq),
            Label::Malicious => y.push(seq),
        }
    }
    Ok((x, y))
}

fn snap_state(state: &mut RunState) {
    state.gen.snap();
    state.gen_opt.snap();
    state.disc.snap();
    state.disc_opt.snap();
    if let Some(rg) = &mut state.rollout_gen {
        rg.snap();
    }
    state.baseline = state.baseline as f32 as f64;
    for v in &mut state.disc_losses {
        *v = *v as f32 as f64;
    }
}

fn epoch_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

fn write_epoch_checkpoint(out_dir: &Path, state: &RunState) -> Result<()> {
    let dir = epoch_dir(out_dir, state.epoch);
    std::fs::create_dir_all(&dir)?;
    let mut gen = Container::new("generator");
    state.gen.store(&mut gen);
    push_adam(&mut gen, "gen/adam", &state.gen_opt);
    if let Some(rg) = &state.rollout_gen {
        let mut names = Container::new("generator_rollout");
        rg.store(&mut names);
        for entry in names.entries() {
            let mut renamed = entry.clone();
            renamed.name = format!("rollout/{}", entry.name);
            gen_push_entry(&mut gen, renamed);
        }
    }
    gen.write(&dir.join("gen.atkg"))?;

    let mut disc = Container::new("discriminator");
    state.disc.store(&mut disc);
    push_adam(&mut disc, "disc/adam", &state.disc_opt);
    disc.write(&dir.join("disc.atkg"))?;

    let mut orch = Container::new("orchestrator");
    orch.push_scalars("orch/epoch", &[state.epoch as f64]);
    orch.push_scalars("orch/asr_original", &[state.asr_original]);
    orch.push_scalars("orch/baseline", &[state.baseline]);
    orch.push_scalars("orch/disc_losses", &state.disc_losses);
    orch.push_scalars("orch/mask_checked", &[state.mask_checked as f64]);
    orch.push_scalars("orch/mask_violations", &[state.mask_violations as f64]);
    let (be, ba) = state.best.map(|(e, a)| (e as f64, a)).unwrap_or((-1.0, 0.0));
    orch.push_scalars("orch/best", &[be, ba]);
    orch.write(&dir.join("orch.atkg"))?;
    Ok(())
}

fn gen_push_entry(c: &mut Container, entry: crate::checkpoint::TensorEntry) {
    // Container has no raw-entry push; reuse push_scalars with the f32
    // payload widened. Shapes are preserved via dims.
    match entry.dims.len() {
        2 => {
            let arr = ndarray::Array2::from_shape_vec(
                (entry.dims[0] as usize, entry.dims[1] as usize),
                entry.data.iter().map(|&v| v as f64).collect(),
            )
            .expect("entry shape");
            c.push_array2(&entry.name, &arr);
        }
        _ => {
            c.push_scalars(
                &entry.name,
                &entry.data.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            );
        }
    }
}

fn load_epoch_state(
    out_dir: &Path,
    epoch: usize,
    cfg: &RunConfig,
    emb: Arc<EmbeddingMatrix>,
    nids: Arc<NidsModel>,
    records: Vec<MetricRecord>,
) -> Result<RunState> {
    let dir = epoch_dir(out_dir, epoch);
    let gen_c = Container::read(&dir.join("gen.atkg"))?;
    let gen = GeneratorParams::restore(&gen_c)?;
    let gen_opt = read_adam(&gen_c, "gen/adam", cfg.pg_lr)?;
    let rollout_gen = if gen_c.has("rollout/gen/meta") {
        let mut sub = Container::new("generator");
        for entry in gen_c.entries() {
            if let Some(stripped) = entry.name.strip_prefix("rollout/") {
                let mut e = entry.clone();
                e.name = stripped.to_string();
                gen_push_entry(&mut sub, e);
            }
        }
        Some(GeneratorParams::restore(&sub)?)
    } else {
        None
    };
    let disc_c = Container::read(&dir.join("disc.atkg"))?;
    let disc = DiscriminatorParams::restore(&disc_c)?;
    let disc_opt = read_adam(&disc_c, "disc/adam", cfg.disc_lr)?;
    let orch = Container::read(&dir.join("orch.atkg"))?;
    let best_raw = orch.scalars("orch/best")?;
    let stats = Arc::new(NormalizationStats::from_table(&emb));
    Ok(RunState {
        epoch: orch.scalar("orch/epoch")? as usize,
        gen,
        gen_opt,
        rollout_gen,
        disc,
        disc_opt,
        emb,
        stats,
        nids,
        asr_original: orch.scalar("orch/asr_original")?,
        baseline: orch.scalar("orch/baseline")?,
        disc_losses: orch.scalars("orch/disc_losses")?,
        mask_checked: orch.scalar("orch/mask_checked")? as u64,
        mask_violations: orch.scalar("orch/mask_violations")? as u64,
        best: if best_raw[0] < 0.0 {
            None
        } else {
            Some((best_raw[0] as usize, best_raw[1]))
        },
        records,
    })
}

/// One adversarial epoch: g-steps of policy-gradient updates against
/// rollout action values, d-steps of detector retraining on NIDS labels,
/// then metric evaluation on a fresh generated batch. Returns the advanced
/// state; on error the input state is untouched (the epoch is atomic).
pub fn adversarial_epoch(
    state: &RunState,
    cfg: &RunConfig,
    data: &PreparedData,
    out_dir: &Path,
) -> Result<RunState> {
    let mut next = state.clone();
    let e = state.epoch + 1;
    let pool = TemplatePool::build(&data.train, cfg)?;

    if cfg.rollout_lag > 0 && (e - 1) % cfg.rollout_lag == 0 {
        next.rollout_gen = Some(next.gen.clone());
    }

    for gs in 0..cfg.g_steps {
        let items = generate_batch(
            &next.gen,
            &next.emb,
            &pool,
            cfg,
            "g",
            &[e as u64, gs as u64],
            cfg.pg_batch,
        )?;
        let rollout_params = next.rollout_gen.as_ref().unwrap_or(&next.gen);
        let mut samples = Vec::with_capacity(items.len());
        let mut qs: Vec<Vec<f64>> = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let table = action_values(
                &item.sample,
                rollout_params,
                &next.emb,
                &item.mask,
                &next.disc,
                &RolloutConfig {
                    m: cfg.rollout_m,
                    seed: rng::stream_seed(cfg.seed, "roll", &[e as u64, gs as u64, i as u64]),
                },
            )?;
            samples.push(item.sample.clone());
            qs.push(table.q);
        }
        if cfg.baseline_enabled {
            let mean_q: f64 = qs.iter().flat_map(|q| q.iter()).sum::<f64>()
                / qs.iter().map(|q| q.len()).sum::<usize>().max(1) as f64;
            for q in &mut qs {
                for v in q.iter_mut() {
                    *v -= next.baseline;
                }
            }
            next.baseline =
                cfg.baseline_momentum * next.baseline + (1.0 - cfg.baseline_momentum) * mean_q;
        }
        policy_gradient_update(&mut next.gen, &next.emb, &samples, &qs, &mut next.gen_opt)?;
    }

    for dsi in 0..cfg.d_steps {
        let items = generate_batch(
            &next.gen,
            &next.emb,
            &pool,
            cfg,
            "d",
            &[e as u64, dsi as u64],
            cfg.adv_batch,
        )?;
        let salt = rng::mix(cfg.seed, &[e as u64, dsi as u64, 0xD5]);
        let (x, y) = nids_partition(&items, &data.train, cfg, &next.nids, salt)?;
        if x.is_empty() || y.is_empty() {
            println!(
                "[epoch {e}] d-step {dsi}: skipped (predicted sets {} benign / {} malicious)",
                x.len(),
                y.len()
            );
            let carry = next.disc_losses.last().copied().unwrap_or(0.0);
            next.disc_losses.push(carry);
            continue;
        }
        let losses = train_discriminator(
            &mut next.disc,
            &x,
            &y,
            &next.emb,
            &DiscTrainConfig {
                epochs: cfg.d_epochs,
                lr: cfg.disc_lr,
                batch: cfg.disc_batch,
                dropout: cfg.disc_dropout,
                seed: rng::stream_seed(cfg.seed, "disc.train", &[e as u64, dsi as u64]),
            },
            &mut next.disc_opt,
        )?;
        next.disc_losses.push(*losses.last().unwrap());
    }

    // evaluation batch
    let items = generate_batch(
        &next.gen,
        &next.emb,
        &pool,
        cfg,
        "eval",
        &[e as u64],
        cfg.eval_batch,
    )?;
    let mut packets = Vec::with_capacity(items.len());
    for item in &items {
        let pkt = detokenize(&item.sample.tokens, cfg.packet_len)?;
        next.mask_checked += 1;
        if validate_against_mask(&pkt, &item.mask).is_err() {
            next.mask_violations += 1;
        }
        packets.push(pkt);
    }
    let labels = next.nids.predict_packets(&packets)?;
    let afr_now = afr(&labels)?;
    let asr_now = asr(&labels)?;
    let mut mape_sum = 0.0;
    for item in &items {
        mape_sum += mape(
            &pool.tokens[item.template_idx],
            &item.sample.tokens,
            &next.emb,
            &next.stats,
        )?;
    }
    let effective_mu = items
        .first()
        .map(|it| it.mask.mu())
        .unwrap_or(cfg.mu);
    let record = MetricRecord {
        epoch: e,
        nids_kind: cfg.nids_kind.as_str().to_string(),
        mu: effective_mu,
        embedding_mode: cfg.granularity,
        afr: afr_now,
        asr: asr_now,
        asir: asir(asr_now, next.asr_original),
        mape: mape_sum / items.len() as f64,
    };
    println!(
        "[epoch {e}] afr {:.3}% asr {:.3}% asir {:.3}% mape {:.3}%",
        record.afr, record.asr, record.asir, record.mape
    );

    next.epoch = e;
    if next.best.map(|(_, a)| afr_now < a).unwrap_or(true) {
        next.best = Some((e, afr_now));
    }
    next.records.push(record.clone());
    snap_state(&mut next);
    write_epoch_checkpoint(out_dir, &next)?;
    append_metric_row(out_dir, &record)?;
    Ok(next)
}

fn append_metric_row(out_dir: &Path, record: &MetricRecord) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(out_dir.join(METRICS_FILE))?;
    writeln!(f, "{}", record.to_csv_row())?;
    Ok(())
}

/// Whether the trailing discriminator losses have plateaued.
fn disc_loss_plateaued(losses: &[f64], window: usize, rel_tol: f64) -> bool {
    if losses.len() < window + 1 {
        return false;
    }
    losses
        .windows(2)
        .rev()
        .take(window)
        .all(|w| (w[1] - w[0]).abs() / w[0].abs().max(1e-12) < rel_tol)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub epochs_completed: usize,
    pub early_stopped: bool,
    pub asr_original: f64,
    pub best_epoch: Option<usize>,
    pub best_afr: Option<f64>,
    pub final_record: Option<MetricRecord2>,
    pub mask_checked: u64,
    pub mask_violations: u64,
    pub content_hash: String,
}

/// Serializable mirror of the final metric row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricRecord2 {
    pub epoch: usize,
    pub afr: f64,
    pub asr: f64,
    pub asir: f64,
    pub mape: f64,
}

fn write_manifest(
    out_dir: &Path,
    flat: &FlatConfig,
    content_hash: &str,
    status: &str,
    error: Option<&str>,
    state: Option<&RunState>,
    early_stopped: bool,
    pretrain_ms: u128,
    total_ms: u128,
) -> Result<()> {
    let (best_epoch, best_afr) = state
        .and_then(|s| s.best)
        .map(|(e, a)| (Some(e), Some(a)))
        .unwrap_or((None, None));
    let manifest = serde_json::json!({
        "status": status,
        "error": error,
        "config": flat.to_canonical_json(),
        "content_hash": content_hash,
        "asr_original": state.map(|s| s.asr_original),
        "epochs_completed": state.map(|s| s.epoch).unwrap_or(0),
        "early_stopped": early_stopped,
        "best_epoch": best_epoch,
        "best_afr": best_afr,
        "mask_checked": state.map(|s| s.mask_checked).unwrap_or(0),
        "mask_violations": state.map(|s| s.mask_violations).unwrap_or(0),
        "timings_ms": { "pretrain": pretrain_ms, "total": total_ms },
        "versions": { "checkpoint_format": 1, "dataset_format": 1 },
    });
    std::fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(())
}

fn summary_from_state(
    out_dir: &Path,
    state: &RunState,
    early_stopped: bool,
    content_hash: &str,
) -> RunSummary {
    RunSummary {
        out_dir: out_dir.to_path_buf(),
        epochs_completed: state.epoch,
        early_stopped,
        asr_original: state.asr_original,
        best_epoch: state.best.map(|(e, _)| e),
        best_afr: state.best.map(|(_, a)| a),
        final_record: state.records.last().map(|r| MetricRecord2 {
            epoch: r.epoch,
            afr: r.afr,
            asr: r.asr,
            asir: r.asir,
            mape: r.mape,
        }),
        mask_checked: state.mask_checked,
        mask_violations: state.mask_violations,
        content_hash: content_hash.to_string(),
    }
}

/// Run the full experiment: pretraining, `run.epochs` adversarial epochs,
/// metric CSV, checkpoints, and a manifest. On failure the manifest is
/// still written, marked failed.
pub fn run_experiment(flat: &FlatConfig, out_dir: &Path) -> Result<RunSummary> {
    let cfg = RunConfig::from_flat(flat)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    let started = Instant::now();
    let data = prepare_data(&cfg, out_dir)?;
    println!(
        "[data] {} packets ({} benign / {} malicious), train {}, test {}, hash {}",
        data.dataset.len(),
        data.dataset.count(Label::Benign),
        data.dataset.count(Label::Malicious),
        data.train.len(),
        data.test.len(),
        &data.content_hash[..12.min(data.content_hash.len())]
    );
    std::fs::write(
        out_dir.join(METRICS_FILE),
        format!("{METRIC_CSV_HEADER}\n"),
    )?;

    let body = || -> Result<(RunState, bool, u128)> {
        let pre_started = Instant::now();
        let mut state = pretrain_phase(&cfg, &data, out_dir)?;
        let pretrain_ms = pre_started.elapsed().as_millis();
        let mut early_stopped = false;
        for _ in 0..cfg.epochs {
            state = adversarial_epoch(&state, &cfg, &data, out_dir)?;
            if cfg.early_stop
                && disc_loss_plateaued(
                    &state.disc_losses,
                    cfg.early_stop_window,
                    cfg.early_stop_rel_tol,
                )
            {
                early_stopped = true;
                println!("[run] early stop: detector loss plateaued");
                break;
            }
        }
        Ok((state, early_stopped, pretrain_ms))
    };

    match body() {
        Ok((state, early_stopped, pretrain_ms)) => {
            write_manifest(
                out_dir,
                flat,
                &data.content_hash,
                "ok",
                None,
                Some(&state),
                early_stopped,
                pretrain_ms,
                started.elapsed().as_millis(),
            )?;
            Ok(summary_from_state(out_dir, &state, early_stopped, &data.content_hash))
        }
        Err(e) => {
            write_manifest(
                out_dir,
                flat,
                &data.content_hash,
                "failed",
                Some(&e.to_string()),
                None,
                false,
                0,
                started.elapsed().as_millis(),
            )?;
            Err(e)
        }
    }
}

fn read_csv_records(path: &Path) -> Result<Vec<MetricRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRIC_CSV_HEADER {
                return Err(Error::Metrics(format!(
                    "unexpected CSV header {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        out.push(MetricRecord::parse_csv_row(line)?);
    }
    Ok(out)
}

/// Load the frozen artifacts and the state of the last completed epoch.
pub fn load_run_state(out_dir: &Path, cfg: &RunConfig) -> Result<(PreparedData, RunState)> {
    let data = if cfg.data_path.is_some() {
        prepare_data(cfg, out_dir)?
    } else {
        // synthesized corpora were persisted at run start
        let mut cfg2 = cfg.clone();
        cfg2.data_path = Some(out_dir.join(DATASET_FILE));
        prepare_data(&cfg2, out_dir)?
    };
    let emb = {
        let c = Container::read(&out_dir.join(EMBEDDING_FILE))?;
        Arc::new(EmbeddingMatrix::restore(&c)?)
    };
    let nids = Arc::new(NidsModel::load(
        &out_dir.join(NIDS_FILE),
        BYTE_SCALE_EXTRACTOR_ID,
    )?);
    let records = read_csv_records(&out_dir.join(METRICS_FILE))?;
    let done = records.len();
    let state = load_epoch_state(out_dir, done, cfg, emb, nids, records)?;
    Ok((data, state))
}

/// Resume a checkpointed run up to `run.epochs` (optionally overridden),
/// appending to the metric CSV. Epochs already completed are not repeated.
pub fn resume_experiment(out_dir: &Path, epochs_override: Option<usize>) -> Result<RunSummary> {
    let mut flat = FlatConfig::from_file(&out_dir.join(MANIFEST_FILE))?;
    if let Some(epochs) = epochs_override {
        flat.insert("run.epochs", serde_json::json!(epochs))?;
    }
    let cfg = RunConfig::from_flat(&flat)?;
    let started = Instant::now();
    let (data, mut state) = load_run_state(out_dir, &cfg)?;
    let mut early_stopped = false;
    while state.epoch < cfg.epochs {
        state = adversarial_epoch(&state, &cfg, &data, out_dir)?;
        if cfg.early_stop
            && disc_loss_plateaued(
                &state.disc_losses,
                cfg.early_stop_window,
                cfg.early_stop_rel_tol,
            )
        {
            early_stopped = true;
            break;
        }
    }
    write_manifest(
        out_dir,
        &flat,
        &data.content_hash,
        "ok",
        None,
        Some(&state),
        early_stopped,
        0,
        started.elapsed().as_millis(),
    )?;
    Ok(summary_from_state(out_dir, &state, early_stopped, &data.content_hash))
}

/// Regenerate an evaluation batch against a checkpointed epoch and report
/// its metrics (the CLI `evaluate` verb). Pure given the run directory.
pub fn evaluate_run(out_dir: &Path, use_best: bool) -> Result<MetricRecord> {
    let flat = FlatConfig::from_file(&out_dir.join(MANIFEST_FILE))?;
    let cfg = RunConfig::from_flat(&flat)?;
    let (data, last) = load_run_state(out_dir, &cfg)?;
    let epoch = if use_best {
        last.best.map(|(e, _)| e).unwrap_or(last.epoch)
    } else {
        last.epoch
    };
    let state = load_epoch_state(
        out_dir,
        epoch,
        &cfg,
        last.emb.clone(),
        last.nids.clone(),
        Vec::new(),
    )?;
    let pool = TemplatePool::build(&data.train, &cfg)?;
    let items = generate_batch(
        &state.gen,
        &state.emb,
        &pool,
        &cfg,
        "evaluate",
        &[epoch as u64],
        cfg.eval_batch,
    )?;
    let mut packets = Vec::with_capacity(items.len());
    for item in &items {
        packets.push(detokenize(&item.sample.tokens, cfg.packet_len)?);
    }
    let labels = state.nids.predict_packets(&packets)?;
    let afr_now = afr(&labels)?;
    let asr_now = asr(&labels)?;
    let mut mape_sum = 0.0;
    for item in &items {
        mape_sum += mape(
            &pool.tokens[item.template_idx],
            &item.sample.tokens,
            &state.emb,
            &state.stats,
        )?;
    }
    Ok(MetricRecord {
        epoch,
        nids_kind: cfg.nids_kind.as_str().to_string(),
        mu: items.first().map(|it| it.mask.mu()).unwrap_or(cfg.mu),
        embedding_mode: cfg.granularity,
        afr: afr_now,
        asr: asr_now,
        asir: asir(asr_now, state.asr_original),
        mape: mape_sum / items.len().max(1) as f64,
    })
}
