//! Monte Carlo rollout rewards.
//!
//! Completes partial sequences under the frozen policy and converts
//! discriminator probabilities into per-position action values: the value of
//! the final position is the discriminator's output on the full sequence;
//! earlier positions average the discriminator over M sampled completions
//! of the prefix. Rollouts never mutate generator or discriminator state.

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{discriminate, DiscriminatorParams};
use crate::embedding::EmbeddingMatrix;
use crate::generator::{categorical, lstm_step, GeneratorParams, GeneratorState, PolicySample};
use crate::packet::{ConstraintMask, TokenSequence};
use crate::rng;
use crate::{Error, Result};

/// Monte Carlo settings: `m` rollouts per position; per-(position, rollout)
/// RNGs are derived from `seed`, so results are schedule-independent.
#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub m: usize,
    pub seed: u64,
}

impl RolloutConfig {
    pub fn new(m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Rollout("M must be >= 1".into()));
        }
        Ok(RolloutConfig { m, seed })
    }
}

/// Per-position action values of one sampled sequence, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    pub q: Vec<f64>,
}

fn softmax_1d(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Complete a prefix under the rollout policy (the generator parameters
/// themselves), honoring the constraint mask at every position.
/// Deterministic under `seed`; a full-length prefix is returned unchanged.
pub fn mc_complete(
    prefix: &[u32],
    params: &GeneratorParams,
    emb: &EmbeddingMatrix,
    mask: &ConstraintMask,
    t_len: usize,
    seed: u64,
) -> Result<TokenSequence> {
    if prefix.len() > t_len {
        return Err(Error::Rollout(format!(
            "prefix of {} tokens exceeds sequence length {t_len}",
            prefix.len()
        )));
    }
    if t_len != mask.token_len() {
        return Err(Error::Rollout(format!(
            "sequence length {t_len} does not match mask length {}",
            mask.token_len()
        )));
    }
    let fixed = mask.fixed_token_positions();
    for (t, &tok) in prefix.iter().enumerate() {
        if fixed.contains(&t) && tok != mask.template_token(t) {
            return Err(Error::Rollout(format!(
                "prefix violates mask at position {t}: got {tok}, template {}",
                mask.template_token(t)
            )));
        }
    }
    let mut tokens = prefix.to_vec();
    if tokens.len() == t_len {
        return Ok(TokenSequence {
            tokens,
            granularity: mask.granularity(),
        });
    }
    // replay the prefix to rebuild the recurrent state
    let mut state = GeneratorState::initial(params);
    for &tok in prefix {
        let x = if state.t == 0 {
            params.start.clone()
        } else {
            emb.row(*state.prefix.last().unwrap()).to_owned()
        };
        let (next, _) = lstm_step(params, &state, &x)?;
        state = next.advanced(tok);
    }
    let mut rng = rng::stream(seed, "mc.complete", &[]);
    for t in tokens.len()..t_len {
        let x = if state.t == 0 {
            params.start.clone()
        } else {
            emb.row(*state.prefix.last().unwrap()).to_owned()
        };
        let (next, logits) = lstm_step(params, &state, &x)?;
        let token = if fixed.contains(&t) {
            mask.template_token(t)
        } else {
            categorical(&softmax_1d(&logits), &mut rng)
        };
        tokens.push(token);
        state = next.advanced(token);
    }
    Ok(TokenSequence {
        tokens,
        granularity: mask.granularity(),
    })
}

/// Batched LSTM step over M parallel rollout states.
struct BatchStates {
    h: Array2<f64>,
    c: Array2<f64>,
}

fn batch_step(
    params: &GeneratorParams,
    states: &BatchStates,
    x: &Array2<f64>,
) -> (BatchStates, Array2<f64>) {
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let m = x.nrows();
    let d = params.embed_dim;
    let mut z = Array2::zeros((m, d + params.hidden));
    z.slice_mut(s![.., ..d]).assign(x);
    z.slice_mut(s![.., d..]).assign(&states.h);
    let f = (z.dot(&params.w_f.t()) + &params.b_f).mapv(sigmoid);
    let i = (z.dot(&params.w_i.t()) + &params.b_i).mapv(sigmoid);
    let cbar = (z.dot(&params.w_c.t()) + &params.b_c).mapv(f64::tanh);
    let o = (z.dot(&params.w_o.t()) + &params.b_o).mapv(sigmoid);
    let c = &f * &states.c + &i * &cbar;
    let h = &o * &c.mapv(f64::tanh);
    let logits = h.dot(&params.w_out.t()) + &params.b_out;
    (BatchStates { h, c }, logits)
}

/// Per-position action values for a sampled sequence.
///
/// `q[T-1]` is the discriminator on the full sequence, exactly. For t < T-1,
/// `q[t]` averages the discriminator over `cfg.m` completions of the prefix
/// `tokens[0..=t]` sampled under the frozen policy.
pub fn action_values(
    sample: &PolicySample,
    params: &GeneratorParams,
    emb: &EmbeddingMatrix,
    mask: &ConstraintMask,
    disc: &DiscriminatorParams,
    cfg: &RolloutConfig,
) -> Result<RewardTable> {
    if cfg.m == 0 {
        return Err(Error::Rollout("M must be >= 1".into()));
    }
    let t_len = sample.tokens.len();
    if t_len != mask.token_len() {
        return Err(Error::Rollout(format!(
            "sample length {t_len} does not match mask length {}",
            mask.token_len()
        )));
    }
    let tokens = &sample.tokens.tokens;
    let fixed = mask.fixed_token_positions();

    // One replay of the sample caches the state after consuming inputs
    // x_0..x_t; rollouts for the prefix of length t+1 resume from it.
    let mut states: Vec<(Array1<f64>, Array1<f64>)> = Vec::with_capacity(t_len);
    {
        let mut state = GeneratorState::initial(params);
        for &tok in tokens.iter() {
            let x = if state.t == 0 {
                params.start.clone()
            } else {
                emb.row(*state.prefix.last().unwrap()).to_owned()
            };
            let (next, _) = lstm_step(params, &state, &x)?;
            state = next.advanced(tok);
            states.push((state.h.clone(), state.c.clone()));
        }
    }

    let mut q = vec![0.0; t_len];
    q[t_len - 1] = discriminate(disc, &sample.tokens, emb)?;

    let m = cfg.m;
    for t in 0..t_len.saturating_sub(1) {
        // M parallel completions of tokens[0..=t]
        let mut rngs: Vec<ChaCha8Rng> = (0..m)
            .map(|mi| rng::stream(cfg.seed, "mc", &[t as u64, mi as u64]))
            .collect();
        let (h0, c0) = &states[t];
        let mut batch = BatchStates {
            h: Array2::from_shape_fn((m, params.hidden), |(_, j)| h0[j]),
            c: Array2::from_shape_fn((m, params.hidden), |(_, j)| c0[j]),
        };
        let mut completions: Vec<Vec<u32>> = vec![tokens[..=t].to_vec(); m];
        let mut last: Vec<u32> = vec![tokens[t]; m];
        for pos in t + 1..t_len {
            let mut x = Array2::zeros((m, params.embed_dim));
            for mi in 0..m {
                x.row_mut(mi).assign(&emb.row(last[mi]));
            }
            let (next, logits) = batch_step(params, &batch, &x);
            if fixed.contains(&pos) {
                let forced = mask.template_token(pos);
                for mi in 0..m {
                    completions[mi].push(forced);
                    last[mi] = forced;
                }
            } else {
                for mi in 0..m {
                    let probs = softmax_1d(&logits.row(mi).to_owned());
                    let tok = categorical(&probs, &mut rngs[mi]);
                    completions[mi].push(tok);
                    last[mi] = tok;
                }
            }
            batch = next;
        }
        let mut acc = 0.0;
        for completion in completions {
            let seq = TokenSequence {
                tokens: completion,
                granularity: mask.granularity(),
            };
            acc += discriminate(disc, &seq, emb)?;
        }
        q[t] = acc / m as f64;
    }
    Ok(RewardTable { q })
}

/// Exact action values for tiny instances: enumerate every completion with
/// its policy probability instead of sampling. Exponential in the remaining
/// length; intended for tests and diagnostics only.
pub fn action_values_exact(
    sample: &PolicySample,
    params: &GeneratorParams,
    emb: &EmbeddingMatrix,
    mask: &ConstraintMask,
    disc: &DiscriminatorParams,
) -> Result<RewardTable> {
    let t_len = sample.tokens.len();
    if t_len != mask.token_len() {
        return Err(Error::Rollout(format!(
            "sample length {t_len} does not match mask length {}",
            mask.token_len()
        )));
    }
    let tokens = &sample.tokens.tokens;
    let fixed = mask.fixed_token_positions();
    let mut states: Vec<GeneratorState> = Vec::with_capacity(t_len);
    {
        let mut state = GeneratorState::initial(params);
        for &tok in tokens.iter() {
            let x = if state.t == 0 {
                params.start.clone()
            } else {
                emb.row(*state.prefix.last().unwrap()).to_owned()
            };
            let (next, _) = lstm_step(params, &state, &x)?;
            state = next.advanced(tok);
            states.push(state.clone());
        }
    }

    fn expectation(
        state: &GeneratorState,
        pos: usize,
        t_len: usize,
        params: &GeneratorParams,
        emb: &EmbeddingMatrix,
        mask: &ConstraintMask,
        fixed: &std::collections::BTreeSet<usize>,
        disc: &DiscriminatorParams,
    ) -> Result<f64> {
        if pos == t_len {
            let seq = TokenSequence {
                tokens: state.prefix.clone(),
                granularity: mask.granularity(),
            };
            return discriminate(disc, &seq, emb);
        }
        let x = if state.t == 0 {
            params.start.clone()
        } else {
            emb.row(*state.prefix.last().unwrap()).to_owned()
        };
        let (next, logits) = lstm_step(params, state, &x)?;
        if fixed.contains(&pos) {
            let tok = mask.template_token(pos);
            let branch = next.clone().advanced(tok);
            return expectation(&branch, pos + 1, t_len, params, emb, mask, fixed, disc);
        }
        let probs = softmax_1d(&logits);
        let mut acc = 0.0;
        for tok in 0..params.vocab as u32 {
            let branch = next.clone().advanced(tok);
            let v = expectation(&branch, pos + 1, t_len, params, emb, mask, fixed, disc)?;
            acc += probs[tok as usize] * v;
        }
        Ok(acc)
    }

    let mut q = vec![0.0; t_len];
    q[t_len - 1] = discriminate(disc, &sample.tokens, emb)?;
    for t in 0..t_len.saturating_sub(1) {
        q[t] = expectation(
            &states[t],
            t + 1,
            t_len,
            params,
            emb,
            mask,
            &fixed,
            disc,
        )?;
    }
    Ok(RewardTable { q })
}
