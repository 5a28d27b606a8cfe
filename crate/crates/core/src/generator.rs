//! The LSTM sequence policy.
//!
//! Emits token sequences autoregressively under constraint masks. Trained
//! first by maximum likelihood on real malicious packets (teacher forcing),
//! then by policy gradient: the gradient of the reward-weighted log
//! likelihood of sampled trajectories, with per-position action values
//! supplied by the rollout module. Masked positions are forced to the
//! template token; they condition the recurrent state but contribute no
//! gradient terms.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingMatrix;
use crate::opt::{snap_f32, Adam};
use crate::packet::{ConstraintMask, TokenSequence};
use crate::rng;
use crate::{Error, Result};

/// LSTM policy weights. Gate matrices act on the concatenation
/// `[x_t; h_{t-1}]`; the output projection maps hidden states to
/// vocabulary logits. `start` is a learned embedding fed at the first step
/// instead of reserving a vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub w_f: Array2<f64>,
    pub w_i: Array2<f64>,
    pub w_c: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_f: Array1<f64>,
    pub b_i: Array1<f64>,
    pub b_c: Array1<f64>,
    pub b_o: Array1<f64>,
    /// V x H output projection.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    /// Learned start-of-sequence input, length d.
    pub start: Array1<f64>,
    pub hidden: usize,
    pub vocab: usize,
    pub embed_dim: usize,
}

impl GeneratorParams {
    pub fn init(hidden: usize, vocab: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "gen.init", &[]);
        let z = embed_dim + hidden;
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.08..0.08))
        };
        GeneratorParams {
            w_f: mat(hidden, z, &mut rng),
            w_i: mat(hidden, z, &mut rng),
            w_c: mat(hidden, z, &mut rng),
            w_o: mat(hidden, z, &mut rng),
            b_f: Array1::zeros(hidden),
            b_i: Array1::zeros(hidden),
            b_c: Array1::zeros(hidden),
            b_o: Array1::zeros(hidden),
            w_out: mat(vocab, hidden, &mut rng),
            b_out: Array1::zeros(vocab),
            start: Array1::from_shape_fn(embed_dim, |_| rng.random_range(-0.08..0.08)),
            hidden,
            vocab,
            embed_dim,
        }
    }

    /// Parameter buffers in the fixed order shared with [`GeneratorGrads`].
    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_f.as_slice_mut().unwrap(),
            self.w_i.as_slice_mut().unwrap(),
            self.w_c.as_slice_mut().unwrap(),
            self.w_o.as_slice_mut().unwrap(),
            self.b_f.as_slice_mut().unwrap(),
            self.b_i.as_slice_mut().unwrap(),
            self.b_c.as_slice_mut().unwrap(),
            self.b_o.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
            self.start.as_slice_mut().unwrap(),
        ]
    }

    /// Round all weights through f32 (checkpoint precision).
    pub fn snap(&mut self) {
        for buf in self.flat_mut() {
            snap_f32(buf);
        }
    }

    /// Tensor layout used in checkpoint containers.
    pub fn store(&self, c: &mut crate::checkpoint::Container) {
        c.push_array2("gen/W_f", &self.w_f);
        c.push_array2("gen/W_i", &self.w_i);
        c.push_array2("gen/W_c", &self.w_c);
        c.push_array2("gen/W_o", &self.w_o);
        c.push_array1("gen/b_f", &self.b_f);
        c.push_array1("gen/b_i", &self.b_i);
        c.push_array1("gen/b_c", &self.b_c);
        c.push_array1("gen/b_o", &self.b_o);
        c.push_array2("gen/W_out", &self.w_out);
        c.push_array1("gen/out_bias", &self.b_out);
        c.push_array1("gen/start", &self.start);
        c.push_scalars(
            "gen/meta",
            &[
                self.hidden as f64,
                self.vocab as f64,
                self.embed_dim as f64,
            ],
        );
    }

    pub fn restore(c: &crate::checkpoint::Container) -> Result<Self> {
        let meta = c.scalars("gen/meta")?;
        if meta.len() != 3 {
            return Err(Error::Generator("malformed gen/meta tensor".into()));
        }
        Ok(GeneratorParams {
            w_f: c.array2("gen/W_f")?,
            w_i: c.array2("gen/W_i")?,
            w_c: c.array2("gen/W_c")?,
            w_o: c.array2("gen/W_o")?,
            b_f: c.array1("gen/b_f")?,
            b_i: c.array1("gen/b_i")?,
            b_c: c.array1("gen/b_c")?,
            b_o: c.array1("gen/b_o")?,
            w_out: c.array2("gen/W_out")?,
            b_out: c.array1("gen/out_bias")?,
            start: c.array1("gen/start")?,
            hidden: meta[0] as usize,
            vocab: meta[1] as usize,
            embed_dim: meta[2] as usize,
        })
    }
}

/// Gradients aligned with [`GeneratorParams::flat_mut`].
#[derive(Debug, Clone)]
pub struct GeneratorGrads {
    pub w_f: Array2<f64>,
    pub w_i: Array2<f64>,
    pub w_c: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_f: Array1<f64>,
    pub b_i: Array1<f64>,
    pub b_c: Array1<f64>,
    pub b_o: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub start: Array1<f64>,
}

impl GeneratorGrads {
    fn zeros(p: &GeneratorParams) -> Self {
        GeneratorGrads {
            w_f: Array2::zeros(p.w_f.raw_dim()),
            w_i: Array2::zeros(p.w_i.raw_dim()),
            w_c: Array2::zeros(p.w_c.raw_dim()),
            w_o: Array2::zeros(p.w_o.raw_dim()),
            b_f: Array1::zeros(p.b_f.raw_dim()),
            b_i: Array1::zeros(p.b_i.raw_dim()),
            b_c: Array1::zeros(p.b_c.raw_dim()),
            b_o: Array1::zeros(p.b_o.raw_dim()),
            w_out: Array2::zeros(p.w_out.raw_dim()),
            b_out: Array1::zeros(p.b_out.raw_dim()),
            start: Array1::zeros(p.start.raw_dim()),
        }
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            self.w_f.as_slice().unwrap(),
            self.w_i.as_slice().unwrap(),
            self.w_c.as_slice().unwrap(),
            self.w_o.as_slice().unwrap(),
            self.b_f.as_slice().unwrap(),
            self.b_i.as_slice().unwrap(),
            self.b_c.as_slice().unwrap(),
            self.b_o.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
            self.start.as_slice().unwrap(),
        ]
    }

    /// Euclidean norm over all gradient buffers.
    pub fn norm(&self) -> f64 {
        self.flat()
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Decoding state: hidden and cell vectors plus the emitted prefix.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
    pub t: usize,
    pub prefix: Vec<u32>,
}

impl GeneratorState {
    pub fn initial(params: &GeneratorParams) -> Self {
        GeneratorState {
            h: Array1::zeros(params.hidden),
            c: Array1::zeros(params.hidden),
            t: 0,
            prefix: Vec::new(),
        }
    }

    /// Record an emitted token.
    pub fn advanced(mut self, token: u32) -> Self {
        self.prefix.push(token);
        self.t += 1;
        self
    }
}

/// One sampled trajectory: tokens, per-step log-probabilities of the chosen
/// tokens, and flags marking mask-forced positions (excluded from updates).
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub tokens: TokenSequence,
    pub step_logprobs: Vec<f64>,
    pub masked_flags: Vec<bool>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_1d(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// One LSTM step: sigmoid gates, candidate cell, cell/hidden update, then
/// the output projection. Returns the stepped state (prefix untouched) and
/// the vocabulary logits.
pub fn lstm_step(
    params: &GeneratorParams,
    state: &GeneratorState,
    x: &Array1<f64>,
) -> Result<(GeneratorState, Array1<f64>)> {
    if x.len() != params.embed_dim {
        return Err(Error::Generator(format!(
            "input length {} does not match embedding dimension {}",
            x.len(),
            params.embed_dim
        )));
    }
    if !x.iter().all(|v| v.is_finite()) || !state.h.iter().all(|v| v.is_finite()) {
        return Err(Error::Generator("non-finite input to lstm_step".into()));
    }
    let mut z = Array1::zeros(params.embed_dim + params.hidden);
    z.slice_mut(s![..params.embed_dim]).assign(x);
    z.slice_mut(s![params.embed_dim..]).assign(&state.h);
    let f = (params.w_f.dot(&z) + &params.b_f).mapv(sigmoid);
    let i = (params.w_i.dot(&z) + &params.b_i).mapv(sigmoid);
    let cbar = (params.w_c.dot(&z) + &params.b_c).mapv(f64::tanh);
    let c = &f * &state.c + &i * &cbar;
    let o = (params.w_o.dot(&z) + &params.b_o).mapv(sigmoid);
    let h = &o * &c.mapv(f64::tanh);
    let logits = params.w_out.dot(&h) + &params.b_out;
    Ok((
        GeneratorState {
            h,
            c,
            t: state.t,
            prefix: state.prefix.clone(),
        },
        logits,
    ))
}

/// The policy's input at the state's position: the learned start vector at
/// t=0, otherwise the embedding of the previously emitted token.
fn input_at(params: &GeneratorParams, state: &GeneratorState, emb: &EmbeddingMatrix) -> Array1<f64> {
    if state.t == 0 {
        params.start.clone()
    } else {
        emb.row(*state.prefix.last().unwrap()).to_owned()
    }
}

/// Distribution over the next token from the current state.
pub fn next_token_distribution(
    params: &GeneratorParams,
    state: &GeneratorState,
    emb: &EmbeddingMatrix,
) -> Result<Array1<f64>> {
    let x = input_at(params, state, emb);
    let (_, logits) = lstm_step(params, state, &x)?;
    Ok(softmax_1d(&logits))
}

/// Draw an index from a probability vector.
pub(crate) fn categorical(probs: &Array1<f64>, rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

fn check_compat(
    params: &GeneratorParams,
    emb: &EmbeddingMatrix,
    mask: &ConstraintMask,
) -> Result<()> {
    if emb.granularity != mask.granularity() {
        return Err(Error::Generator(format!(
            "granularity mismatch: embedding {}, mask {}",
            emb.granularity.as_str(),
            mask.granularity().as_str()
        )));
    }
    if emb.dim() != params.embed_dim {
        return Err(Error::Generator(format!(
            "embedding dimension {} does not match generator ({})",
            emb.dim(),
            params.embed_dim
        )));
    }
    if emb.vocab_size() != params.vocab {
        return Err(Error::Generator(format!(
            "vocabulary size {} does not match generator ({})",
            emb.vocab_size(),
            params.vocab
        )));
    }
    Ok(())
}

/// Sample a full sequence. Masked positions emit the template token
/// (forced, not drawn) but still condition the recurrent state; free
/// positions are drawn from the next-token distribution. Deterministic
/// under `seed`.
pub fn sample_sequence(
    params: &GeneratorParams,
    emb: &EmbeddingMatrix,
    mask: &ConstraintMask,
    t_len: usize,
    seed: u64,
) -> Result<PolicySample> {
    check_compat(params, emb, mask)?;
    if t_len != mask.token_len() {
        return Err(Error::Generator(format!(
            "requested length {t_len} does not match mask length {}",
            mask.token_len()
        )));
    }
    let fixed = mask.fixed_token_positions();
    let mut rng = rng::stream(seed, "gen.sample", &[]);
    let mut state = GeneratorState::initial(params);
    let mut tokens = Vec::with_capacity(t_len);
    let mut logprobs = Vec::with_capacity(t_len);
    let mut flags = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = input_at(params, &state, emb);
        let (stepped, logits) = lstm_step(params, &state, &x)?;
        let probs = softmax_1d(&logits);
        let forced = fixed.contains(&t);
        let token = if forced {
            mask.template_token(t)
        } else {
            categorical(&probs, &mut rng)
        };
        logprobs.push(probs[token as usize].max(1e-300).ln());
        flags.push(forced);
        tokens.push(token);
        state = stepped.advanced(token);
    }
    Ok(PolicySample {
        tokens: TokenSequence {
            tokens,
            granularity: mask.granularity(),
        },
        step_logprobs: logprobs,
        masked_flags: flags,
    })
}

/// Per-step cache of a batched teacher-forced forward pass.
struct TfCache {
    z: Vec<Array2<f64>>,
    f: Vec<Array2<f64>>,
    i: Vec<Array2<f64>>,
    cbar: Vec<Array2<f64>>,
    o: Vec<Array2<f64>>,
    c: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
    h: Vec<Array2<f64>>,
}

/// Loss and gradients of the weighted next-token negative log-likelihood
///
///   loss = sum_{b,t} w[b][t] * (-ln p(tokens[b][t] | s_t))
///
/// with inputs teacher-forced on `tokens` (start vector at t=0). Both the
/// MLE objective (uniform weights) and the policy-gradient surrogate
/// (weights Q_t on free positions, 0 on masked ones) are instances.
pub(crate) fn weighted_tf_grads(
    params: &GeneratorParams,
    emb: &EmbeddingMatrix,
    tokens: &[Vec<u32>],
    weights: &[Vec<f64>],
) -> Result<(f64, GeneratorGrads)> {
    let b = tokens.len();
    if b == 0 {
        return Err(Error::Generator("empty batch".into()));
    }
    let t_len = tokens[0].len();
    for (row, w) in tokens.iter().zip(weights) {
        if row.len() != t_len || w.len() != t_len {
            return Err(Error::Generator("ragged batch".into()));
        }
        if let Some(&tok) = row.iter().find(|&&tok| tok as usize >= params.vocab) {
            return Err(Error::Generator(format!(
                "token {tok} out of range for vocabulary size {}",
                params.vocab
            )));
        }
    }
    let (d, hdim) = (params.embed_dim, params.hidden);
    let mut grads = GeneratorGrads::zeros(params);
    let mut cache = TfCache {
        z: Vec::with_capacity(t_len),
        f: Vec::with_capacity(t_len),
        i: Vec::with_capacity(t_len),
        cbar: Vec::with_capacity(t_len),
        o: Vec::with_capacity(t_len),
        c: Vec::with_capacity(t_len),
        tanh_c: Vec::with_capacity(t_len),
        h: Vec::with_capacity(t_len),
    };
    let mut dh_seq: Vec<Array2<f64>> = Vec::with_capacity(t_len);
    let mut h = Array2::<f64>::zeros((b, hdim));
    let mut c = Array2::<f64>::zeros((b, hdim));
    let mut loss = 0.0;

    for t in 0..t_len {
        // inputs
        let mut z = Array2::<f64>::zeros((b, d + hdim));
        for bi in 0..b {
            if t == 0 {
                z.slice_mut(s![bi, ..d]).assign(&params.start);
            } else {
                z.slice_mut(s![bi, ..d])
                    .assign(&emb.row(tokens[bi][t - 1]));
            }
        }
        z.slice_mut(s![.., d..]).assign(&h);
        let f = (z.dot(&params.w_f.t()) + &params.b_f).mapv(sigmoid);
        let i = (z.dot(&params.w_i.t()) + &params.b_i).mapv(sigmoid);
        let cbar = (z.dot(&params.w_c.t()) + &params.b_c).mapv(f64::tanh);
        let o = (z.dot(&params.w_o.t()) + &params.b_o).mapv(sigmoid);
        let c_new = &f * &c + &i * &cbar;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;

        // output layer, streamed per step to keep V-sized buffers transient
        let mut logits = h_new.dot(&params.w_out.t());
        logits += &params.b_out;
        let mut dlogits = logits; // reused in place
        for bi in 0..b {
            let mut row = dlogits.row_mut(bi);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            let target = tokens[bi][t] as usize;
            let w = weights[bi][t];
            loss -= w * row[target].max(1e-300).ln();
            for v in row.iter_mut() {
                *v *= w;
            }
            row[target] -= w;
        }
        grads.w_out += &dlogits.t().dot(&h_new);
        grads.b_out += &dlogits.sum_axis(Axis(0));
        dh_seq.push(dlogits.dot(&params.w_out));

        cache.z.push(z);
        cache.f.push(f);
        cache.i.push(i);
        cache.cbar.push(cbar);
        cache.o.push(o);
        cache.tanh_c.push(tanh_c);
        cache.c.push(c_new.clone());
        cache.h.push(h_new.clone());
        c = c_new;
        h = h_new;
    }

    // backward through time
    let mut dh_next = Array2::<f64>::zeros((b, hdim));
    let mut dc_next = Array2::<f64>::zeros((b, hdim));
    for t in (0..t_len).rev() {
        let dh = &dh_seq[t] + &dh_next;
        let o = &cache.o[t];
        let f = &cache.f[t];
        let i = &cache.i[t];
        let cbar = &cache.cbar[t];
        let tanh_c = &cache.tanh_c[t];
        let da_o = &dh * tanh_c * o * &o.mapv(|v| 1.0 - v);
        let dc = dc_next + &dh * o * &tanh_c.mapv(|v| 1.0 - v * v);
        let c_prev = if t == 0 {
            Array2::zeros((b, hdim))
        } else {
            cache.c[t - 1].clone()
        };
        let da_f = &dc * &c_prev * f * &f.mapv(|v| 1.0 - v);
        let da_i = &dc * cbar * i * &i.mapv(|v| 1.0 - v);
        let da_c = &dc * i * &cbar.mapv(|v| 1.0 - v * v);
        let z = &cache.z[t];
        grads.w_f += &da_f.t().dot(z);
        grads.w_i += &da_i.t().dot(z);
        grads.w_c += &da_c.t().dot(z);
        grads.w_o += &da_o.t().dot(z);
        grads.b_f += &da_f.sum_axis(Axis(0));
        grads.b_i += &da_i.sum_axis(Axis(0));
        grads.b_c += &da_c.sum_axis(Axis(0));
        grads.b_o += &da_o.sum_axis(Axis(0));
        let dz = da_f.dot(&params.w_f)
            + da_i.dot(&params.w_i)
            + da_c.dot(&params.w_c)
            + da_o.dot(&params.w_o);
        dh_next = dz.slice(s![.., d..]).to_owned();
        dc_next = dc * f;
        if t == 0 {
            grads.start += &dz.slice(s![.., ..d]).sum_axis(Axis(0));
        }
    }
    Ok((loss, grads))
}

/// Mean next-token NLL of a corpus under the current policy (no training).
pub fn mle_loss(
    params: &GeneratorParams,
    corpus: &[TokenSequence],
    emb: &EmbeddingMatrix,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Generator("empty corpus".into()));
    }
    let t_len = corpus[0].len();
    let n = corpus.len();
    let w = 1.0 / (n as f64 * t_len as f64);
    let tokens: Vec<Vec<u32>> = corpus.iter().map(|s| s.tokens.clone()).collect();
    let weights = vec![vec![w; t_len]; n];
    let (loss, _) = weighted_tf_grads(params, emb, &tokens, &weights)?;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct MleConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Maximum-likelihood pretraining with teacher forcing and the Adam rule.
/// Returns the mean per-token NLL of each epoch. Zero epochs leave the
/// parameters untouched.
pub fn mle_pretrain(
    params: &mut GeneratorParams,
    corpus: &[TokenSequence],
    emb: &EmbeddingMatrix,
    cfg: &MleConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Generator("empty corpus".into()));
    }
    let t_len = corpus[0].len();
    for seq in corpus {
        if seq.len() != t_len {
            return Err(Error::Generator("corpus mixes sequence lengths".into()));
        }
    }
    let mut opt = Adam::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, "mle.shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let tokens: Vec<Vec<u32>> =
                chunk.iter().map(|&i| corpus[i].tokens.clone()).collect();
            let w = 1.0 / (chunk.len() as f64 * t_len as f64);
            let weights = vec![vec![w; t_len]; chunk.len()];
            let (loss, grads) = weighted_tf_grads(params, emb, &tokens, &weights)?;
            opt.step(&mut params.flat_mut(), &grads.flat());
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }
    Ok(epoch_losses)
}

/// Surrogate policy-gradient loss and its gradients for a batch of sampled
/// trajectories:
///
///   L = -(1/B) sum_b sum_{t free} ln pi(y_t | s_t) * Q[b][t]
///
/// States are teacher-forced on each trajectory's own tokens; masked
/// positions condition the state but contribute no terms.
pub fn policy_gradient(
    params: &GeneratorParams,
    emb: &EmbeddingMatrix,
    samples: &[PolicySample],
    q_values: &[Vec<f64>],
) -> Result<(f64, GeneratorGrads)> {
    if samples.is_empty() {
        return Err(Error::Generator("empty sample batch".into()));
    }
    if samples.len() != q_values.len() {
        return Err(Error::Generator(format!(
            "sample/reward misalignment: {} samples, {} reward rows",
            samples.len(),
            q_values.len()
        )));
    }
    let b = samples.len();
    let t_len = samples[0].tokens.len();
    let mut tokens = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    for (sample, q) in samples.iter().zip(q_values) {
        if sample.tokens.len() != t_len || q.len() != t_len {
            return Err(Error::Generator(format!(
                "sample/reward misalignment: expected {t_len} positions, got {} tokens and {} rewards",
                sample.tokens.len(),
                q.len()
            )));
        }
        tokens.push(sample.tokens.tokens.clone());
        weights.push(
            sample
                .masked_flags
                .iter()
                .zip(q)
                .map(|(&masked, &q)| if masked { 0.0 } else { q / b as f64 })
                .collect(),
        );
    }
    weighted_tf_grads(params, emb, &tokens, &weights)
}

/// One policy-gradient step with the Adam rule. Returns the surrogate loss.
pub fn policy_gradient_update(
    params: &mut GeneratorParams,
    emb: &EmbeddingMatrix,
    samples: &[PolicySample],
    q_values: &[Vec<f64>],
    opt: &mut Adam,
) -> Result<f64> {
    let (loss, grads) = policy_gradient(params, emb, samples, q_values)?;
    opt.step(&mut params.flat_mut(), &grads.flat());
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build_mask, Granularity, Label, NormalizedPacket, Origin};
    use std::collections::BTreeSet;

    fn test_emb(v: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = rng::stream(seed, "test.gen.emb", &[]);
        EmbeddingMatrix {
            table: Array2::from_shape_fn((v, d), |_| rng.random_range(-0.5..0.5)),
            granularity: Granularity::OneByte,
        }
    }

    fn zero_params(h: usize, v: usize, d: usize) -> GeneratorParams {
        let mut p = GeneratorParams::init(h, v, d, 0);
        for buf in p.flat_mut() {
            for x in buf.iter_mut() {
                *x = 0.0;
            }
        }
        p
    }

    fn template(p: usize) -> NormalizedPacket {
        NormalizedPacket {
            bytes: (0..p).map(|i| (i * 7 % 256) as u8).collect(),
            label: Label::Malicious,
            origin: Origin::Synthetic,
        }
    }

    #[test]
    fn zero_parameters_halve_everything() {
        let params = zero_params(4, 5, 3);
        let mut state = GeneratorState::initial(&params);
        state.c = Array1::from_vec(vec![1.0, -2.0, 0.5, 4.0]);
        let x = Array1::zeros(3);
        let (next, logits) = lstm_step(&params, &state, &x).unwrap();
        for (j, (&c_new, &c_old)) in next.c.iter().zip(state.c.iter()).enumerate() {
            assert!((c_new - 0.5 * c_old).abs() < 1e-15, "c[{j}]");
            let expect_h = 0.5 * (0.5 * c_old).tanh();
            assert!((next.h[j] - expect_h).abs() < 1e-15, "h[{j}]");
        }
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn gate_outputs_stay_in_unit_interval() {
        let params = GeneratorParams::init(8, 6, 4, 3);
        let emb = test_emb(6, 4, 4);
        let mut state = GeneratorState::initial(&params);
        let mut rng = rng::stream(5, "test.gates", &[]);
        for step in 0..50 {
            let x = if step == 0 {
                params.start.clone()
            } else {
                emb.row(rng.random_range(0..6u32)).to_owned()
            };
            let (next, _) = lstm_step(&params, &state, &x).unwrap();
            // h = o * tanh(c) with o in (0,1) forces |h| < 1
            assert!(next.h.iter().all(|&h| h.abs() < 1.0));
            state = next.advanced(rng.random_range(0..6u32));
        }
    }

    /// Straight-line scalar reimplementation of the recurrence, kept
    /// independent of the batched implementation.
    fn scalar_lstm_step(
        p: &GeneratorParams,
        h_prev: &[f64],
        c_prev: &[f64],
        x: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = p.hidden;
        let d = p.embed_dim;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = Vec::with_capacity(d + hd);
        z.extend_from_slice(x);
        z.extend_from_slice(h_prev);
        let gate = |w: &Array2<f64>, b: &Array1<f64>, j: usize| {
            let mut acc = b[j];
            for (k, &zv) in z.iter().enumerate() {
                acc += w[[j, k]] * zv;
            }
            acc
        };
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for j in 0..hd {
            let f = sig(gate(&p.w_f, &p.b_f, j));
            let i = sig(gate(&p.w_i, &p.b_i, j));
            let cb = gate(&p.w_c, &p.b_c, j).tanh();
            let o = sig(gate(&p.w_o, &p.b_o, j));
            c[j] = f * c_prev[j] + i * cb;
            h[j] = o * c[j].tanh();
        }
        let mut logits = vec![0.0; p.vocab];
        for (v, row) in logits.iter_mut().zip(p.w_out.rows()) {
            let mut acc = 0.0;
            for (j, &hv) in h.iter().enumerate() {
                acc += row[j] * hv;
            }
            *v = acc;
        }
        for (v, &b) in logits.iter_mut().zip(p.b_out.iter()) {
            *v += b;
        }
        (h, c, logits)
    }

    #[test]
    fn lstm_step_matches_scalar_reimplementation() {
        let mut rng = rng::stream(21, "test.dual", &[]);
        for draw in 0..20 {
            let params = GeneratorParams::init(6, 7, 4, 100 + draw);
            let mut state = GeneratorState::initial(&params);
            state.h = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            state.c = Array1::from_shape_fn(6, |_| rng.random_range(-2.0..2.0));
            let x = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let (next, logits) = lstm_step(&params, &state, &x).unwrap();
            let (h2, c2, l2) = scalar_lstm_step(
                &params,
                state.h.as_slice().unwrap(),
                state.c.as_slice().unwrap(),
                x.as_slice().unwrap(),
            );
            for j in 0..6 {
                assert!((next.h[j] - h2[j]).abs() < 1e-12);
                assert!((next.c[j] - c2[j]).abs() < 1e-12);
            }
            for v in 0..7 {
                assert!((logits[v] - l2[v]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let params = zero_params(4, 5, 3);
        let emb = test_emb(5, 3, 1);
        let state = GeneratorState::initial(&params);
        let dist = next_token_distribution(&params, &state, &emb).unwrap();
        for &p in dist.iter() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        let mut params = zero_params(4, 5, 3);
        params.b_out[2] = 1000.0;
        let emb = test_emb(5, 3, 1);
        let state = GeneratorState::initial(&params);
        let dist = next_token_distribution(&params, &state, &emb).unwrap();
        assert!(dist[2] >= 1.0 - 1e-6);
    }

    #[test]
    fn distributions_sum_to_one_over_random_states() {
        let params = GeneratorParams::init(8, 6, 4, 3);
        let emb = test_emb(6, 4, 4);
        let mut rng = rng::stream(6, "test.dist", &[]);
        let mut state = GeneratorState::initial(&params);
        for _ in 0..1000 {
            let dist = next_token_distribution(&params, &state, &emb).unwrap();
            assert!((dist.sum() - 1.0).abs() < 1e-6);
            assert!(dist.iter().all(|&p| p > 0.0));
            let tok = rng.random_range(0..6u32);
            let x = input_at(&params, &state, &emb);
            let (next, _) = lstm_step(&params, &state, &x).unwrap();
            state = next.advanced(tok);
            if state.t > 12 {
                state = GeneratorState::initial(&params);
            }
        }
    }

    #[test]
    fn full_mask_reproduces_template() {
        let params = GeneratorParams::init(8, 256, 4, 3);
        let emb = EmbeddingMatrix {
            table: test_emb(256, 4, 4).table,
            granularity: Granularity::OneByte,
        };
        let tpl = template(16);
        let positions: BTreeSet<usize> = (0..16).collect();
        let mask = build_mask(&tpl, &positions, Granularity::OneByte).unwrap();
        let sample = sample_sequence(&params, &emb, &mask, 16, 9).unwrap();
        let expected = crate::packet::tokenize(&tpl, Granularity::OneByte).unwrap();
        assert_eq!(sample.tokens, expected);
        assert!(sample.masked_flags.iter().all(|&f| f));
    }

    #[test]
    fn degenerate_params_force_one_token() {
        let mut params = zero_params(4, 6, 3);
        params.b_out[3] = 1000.0;
        let emb = test_emb(6, 3, 2);
        let tpl = template(8);
        let mask = build_mask(&tpl, &BTreeSet::new(), Granularity::OneByte).unwrap();
        let sample = sample_sequence(&params, &emb, &mask, 8, 11).unwrap();
        assert!(sample.tokens.tokens.iter().all(|&t| t == 3));
        assert!(sample.masked_flags.iter().all(|&f| !f));
        assert!(sample
            .step_logprobs
            .iter()
            .all(|&lp| lp <= 0.0 && lp.exp() > 0.999));
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let params = GeneratorParams::init(8, 256, 4, 3);
        let emb = EmbeddingMatrix {
            table: test_emb(256, 4, 4).table,
            granularity: Granularity::OneByte,
        };
        let tpl = template(16);
        let positions: BTreeSet<usize> = [0, 1, 2, 3].into();
        let mask = build_mask(&tpl, &positions, Granularity::OneByte).unwrap();
        let a = sample_sequence(&params, &emb, &mask, 16, 42).unwrap();
        let b = sample_sequence(&params, &emb, &mask, 16, 42).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.step_logprobs, b.step_logprobs);
        let c = sample_sequence(&params, &emb, &mask, 16, 43).unwrap();
        assert!(c.tokens != a.tokens || c.step_logprobs != a.step_logprobs);
    }

    #[test]
    fn empirical_marginal_matches_distribution() {
        // V=4 toy: the marginal of the first free token over many samples
        // should match next_token_distribution within 3 sigma.
        let params = GeneratorParams::init(6, 4, 3, 7);
        let emb = EmbeddingMatrix {
            table: test_emb(4, 3, 8).table,
            granularity: Granularity::OneByte,
        };
        let tpl = NormalizedPacket {
            bytes: vec![1, 2],
            label: Label::Malicious,
            origin: Origin::Synthetic,
        };
        let mask = build_mask(&tpl, &BTreeSet::new(), Granularity::OneByte).unwrap();
        let dist = next_token_distribution(&params, &GeneratorState::initial(&params), &emb).unwrap();
        let n = 10_000usize;
        let mut counts = [0usize; 4];
        for i in 0..n {
            let s = sample_sequence(&params, &emb, &mask, 2, 1000 + i as u64).unwrap();
            counts[s.tokens.tokens[0] as usize] += 1;
        }
        for k in 0..4 {
            let p = dist[k];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let observed = counts[k] as f64 / n as f64;
            assert!(
                (observed - p).abs() <= 3.0 * sigma + 1e-9,
                "token {k}: observed {observed:.4}, expected {p:.4} (sigma {sigma:.5})"
            );
        }
    }

    #[test]
    fn mle_memorizes_a_repeated_sequence() {
        let emb = test_emb(8, 4, 12);
        let target: Vec<u32> = vec![3, 1, 4, 1, 5, 2, 6, 5];
        let corpus: Vec<TokenSequence> = (0..8)
            .map(|_| TokenSequence {
                tokens: target.clone(),
                granularity: Granularity::OneByte,
            })
            .collect();
        let mut params = GeneratorParams::init(16, 8, 4, 1);
        let before = mle_loss(&params, &corpus, &emb).unwrap();
        let losses = mle_pretrain(
            &mut params,
            &corpus,
            &emb,
            &MleConfig {
                epochs: 300,
                lr: 1e-2,
                batch: 8,
                seed: 2,
            },
        )
        .unwrap();
        let after = mle_loss(&params, &corpus, &emb).unwrap();
        assert!(after < before);
        assert!(after < 0.05, "NLL should approach 0, got {after}");
        assert!(losses.last().unwrap() < &0.05);
        // free-running samples reproduce the sequence
        let tpl = NormalizedPacket {
            bytes: vec![0; 8],
            label: Label::Malicious,
            origin: Origin::Synthetic,
        };
        let mask = build_mask(&tpl, &BTreeSet::new(), Granularity::OneByte).unwrap();
        let sample = sample_sequence(&params, &emb, &mask, 8, 77).unwrap();
        assert_eq!(sample.tokens.tokens, target);
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let emb = test_emb(8, 4, 12);
        let corpus = vec![TokenSequence {
            tokens: vec![1, 2, 3, 4],
            granularity: Granularity::OneByte,
        }];
        let mut params = GeneratorParams::init(8, 8, 4, 5);
        let before = params.clone();
        mle_pretrain(
            &mut params,
            &corpus,
            &emb,
            &MleConfig {
                epochs: 0,
                lr: 1e-2,
                batch: 4,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(params, before);
    }

    /// Perturb parameters through flat indices: buffer `bi`, element `k`.
    fn perturb(params: &mut GeneratorParams, bi: usize, k: usize, delta: f64) {
        let mut bufs = params.flat_mut();
        bufs[bi][k] += delta;
    }

    /// Central finite differences over every parameter of a small
    /// instance, compared as whole gradient vectors:
    /// ||numeric - analytic|| / max(||numeric||, ||analytic||) < tol.
    fn fd_check_indexed<F>(
        params: &mut GeneratorParams,
        loss_fn: F,
        analytic: &GeneratorGrads,
        tol: f64,
    ) where
        F: Fn(&GeneratorParams) -> f64,
    {
        let eps = 1e-6;
        let shapes: Vec<usize> = analytic.flat().iter().map(|s| s.len()).collect();
        let mut diff_sq = 0.0;
        let mut num_sq = 0.0;
        let mut ana_sq = 0.0;
        for (bi, &len) in shapes.iter().enumerate() {
            for k in 0..len {
                perturb(params, bi, k, eps);
                let lp = loss_fn(params);
                perturb(params, bi, k, -2.0 * eps);
                let lm = loss_fn(params);
                perturb(params, bi, k, eps);
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic.flat()[bi][k];
                diff_sq += (numeric - a) * (numeric - a);
                num_sq += numeric * numeric;
                ana_sq += a * a;
            }
        }
        let rel = diff_sq.sqrt() / num_sq.sqrt().max(ana_sq.sqrt()).max(1e-12);
        assert!(
            rel < tol,
            "gradient relative error {rel:.3e} exceeds {tol:.0e}"
        );
    }

    #[test]
    fn mle_gradient_matches_finite_differences() {
        // H=4, V=5, T=3 instance
        let emb = EmbeddingMatrix {
            table: test_emb(5, 3, 31).table,
            granularity: Granularity::OneByte,
        };
        let mut params = GeneratorParams::init(4, 5, 3, 32);
        let tokens = vec![vec![1u32, 4, 2], vec![0u32, 3, 3]];
        let t_len = 3;
        let w = 1.0 / (2.0 * t_len as f64);
        let weights = vec![vec![w; t_len]; 2];
        let (_, analytic) = weighted_tf_grads(&params, &emb, &tokens, &weights).unwrap();
        fd_check_indexed(
            &mut params,
            |p| weighted_tf_grads(p, &emb, &tokens, &weights).unwrap().0,
            &analytic,
            1e-4,
        );
    }

    #[test]
    fn policy_gradient_matches_finite_differences_with_frozen_randomness() {
        // T=2, V=3, H=4: freeze the sampled trajectories and their rewards,
        // then check the surrogate's gradient (common random numbers).
        let emb = EmbeddingMatrix {
            table: test_emb(3, 3, 41).table,
            granularity: Granularity::OneByte,
        };
        let mut params = GeneratorParams::init(4, 3, 3, 42);
        let tpl = NormalizedPacket {
            bytes: vec![1, 2],
            label: Label::Malicious,
            origin: Origin::Synthetic,
        };
        let mask = build_mask(&tpl, &BTreeSet::new(), Granularity::OneByte).unwrap();
        let samples: Vec<PolicySample> = (0..4)
            .map(|i| sample_sequence(&params, &emb, &mask, 2, 600 + i).unwrap())
            .collect();
        let q: Vec<Vec<f64>> = vec![
            vec![0.3, 0.9],
            vec![0.7, 0.1],
            vec![0.5, 0.5],
            vec![0.2, 0.8],
        ];
        let (_, analytic) = policy_gradient(&params, &emb, &samples, &q).unwrap();
        fd_check_indexed(
            &mut params,
            |p| policy_gradient(p, &emb, &samples, &q).unwrap().0,
            &analytic,
            1e-3,
        );
    }

    #[test]
    fn zero_rewards_freeze_parameters() {
        let emb = EmbeddingMatrix {
            table: test_emb(3, 3, 41).table,
            granularity: Granularity::OneByte,
        };
        let mut params = GeneratorParams::init(4, 3, 3, 42);
        let tpl = NormalizedPacket {
            bytes: vec![1, 2],
            label: Label::Malicious,
            origin: Origin::Synthetic,
        };
        let mask = build_mask(&tpl, &BTreeSet::new(), Granularity::OneByte).unwrap();
        let samples: Vec<PolicySample> = (0..3)
            .map(|i| sample_sequence(&params, &emb, &mask, 2, 700 + i).unwrap())
            .collect();
        let q = vec![vec![0.0, 0.0]; 3];
        let before = params.clone();
        let mut opt = Adam::new(1e-3);
        policy_gradient_update(&mut params, &emb, &samples, &q, &mut opt).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn masked_positions_leak_no_gradient() {
        let emb = EmbeddingMatrix {
            table: test_emb(4, 3, 51).table,
            granularity: Granularity::OneByte,
        };
        let params = GeneratorParams::init(4, 4, 3, 52);
        let tpl = NormalizedPacket {
            bytes: vec![1, 2, 3, 0],
            label: Label::Malicious,
            origin: Origin::Synthetic,
        };
        let positions: BTreeSet<usize> = [0, 2].into();
        let mask = build_mask(&tpl, &positions, Granularity::OneByte).unwrap();
        let samples: Vec<PolicySample> = (0..3)
            .map(|i| sample_sequence(&params, &emb, &mask, 4, 800 + i).unwrap())
            .collect();
        let q1 = vec![vec![0.1, 0.5, 0.9, 0.4]; 3];
        // perturb rewards only at the masked positions 0 and 2
        let q2 = vec![vec![7.7, 0.5, -3.0, 0.4]; 3];
        let (l1, g1) = policy_gradient(&params, &emb, &samples, &q1).unwrap();
        let (l2, g2) = policy_gradient(&params, &emb, &samples, &q2).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.flat().iter().zip(g2.flat().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bandit_concentrates_on_best_reward() {
        // T=1, V=3 degenerate case: fixed reward per arm; the policy should
        // shift its mass toward the best arm.
        let emb = EmbeddingMatrix {
            table: test_emb(3, 3, 61).table,
            granularity: Granularity::OneByte,
        };
        let mut params = GeneratorParams::init(4, 3, 3, 62);
        let tpl = NormalizedPacket {
            bytes: vec![0],
            label: Label::Malicious,
            origin: Origin::Synthetic,
        };
        let mask = build_mask(&tpl, &BTreeSet::new(), Granularity::OneByte).unwrap();
        let rewards = [0.1, 0.9, 0.2];
        let mut opt = Adam::new(5e-2);
        for iter in 0..150 {
            let samples: Vec<PolicySample> = (0..16)
                .map(|i| sample_sequence(&params, &emb, &mask, 1, iter * 100 + i).unwrap())
                .collect();
            let q: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| vec![rewards[s.tokens.tokens[0] as usize]])
                .collect();
            policy_gradient_update(&mut params, &emb, &samples, &q, &mut opt).unwrap();
        }
        let dist =
            next_token_distribution(&params, &GeneratorState::initial(&params), &emb).unwrap();
        assert!(
            dist[1] > 0.8,
            "mass should concentrate on the best arm, got {dist:?}"
        );
    }
}
