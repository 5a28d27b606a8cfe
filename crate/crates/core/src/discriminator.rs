//! The convolutional substitute detector.
//!
//! A TextCNN over token embeddings: one linear convolution bank per window
//! size, max-over-time pooling, a linear head, and a sigmoid that outputs
//! the probability the packet is benign. Trained on the NIDS's predicted
//! labels, it stands in for the black box and supplies the generator's
//! reward surface.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{embed_sequence, EmbeddingMatrix};
use crate::opt::{snap_f32, Adam};
use crate::packet::TokenSequence;
use crate::rng;
use crate::{Error, Result};

/// One bank of convolution kernels for a window size: `w` holds `filters`
/// rows, each a flattened `l x d` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank {
    pub window: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Substitute-detector weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub banks: Vec<ConvBank>,
    pub head_w: Array1<f64>,
    pub head_b: f64,
    pub embed_dim: usize,
}

impl DiscriminatorParams {
    /// Kernel banks for the given window sizes, `filters` kernels per size.
    pub fn init(windows: &[usize], filters: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "disc.init", &[]);
        let banks = windows
            .iter()
            .map(|&l| {
                let fan_in = (l * embed_dim) as f64;
                let scale = (1.0 / fan_in).sqrt();
                ConvBank {
                    window: l,
                    w: Array2::from_shape_fn((filters, l * embed_dim), |_| {
                        rng.random_range(-scale..scale)
                    }),
                    b: Array1::zeros(filters),
                }
            })
            .collect::<Vec<_>>();
        let total: usize = banks.iter().map(|b| b.w.nrows()).sum();
        DiscriminatorParams {
            banks,
            head_w: Array1::zeros(total),
            head_b: 0.0,
            embed_dim,
        }
    }

    pub fn max_window(&self) -> usize {
        self.banks.iter().map(|b| b.window).max().unwrap_or(0)
    }

    pub fn pooled_len(&self) -> usize {
        self.banks.iter().map(|b| b.w.nrows()).sum()
    }

    pub fn snap(&mut self) {
        for bank in &mut self.banks {
            snap_f32(bank.w.as_slice_mut().unwrap());
            snap_f32(bank.b.as_slice_mut().unwrap());
        }
        snap_f32(self.head_w.as_slice_mut().unwrap());
        self.head_b = self.head_b as f32 as f64;
    }

    pub fn store(&self, c: &mut crate::checkpoint::Container) {
        c.push_scalars(
            "disc/windows",
            &self
                .banks
                .iter()
                .map(|b| b.window as f64)
                .collect::<Vec<_>>(),
        );
        c.push_scalars("disc/meta", &[self.embed_dim as f64]);
        for bank in &self.banks {
            c.push_array2(&format!("disc/conv{}/W", bank.window), &bank.w);
            c.push_array1(&format!("disc/conv{}/b", bank.window), &bank.b);
        }
        c.push_array1("disc/head/w", &self.head_w);
        c.push_scalars("disc/head/b", &[self.head_b]);
    }

    pub fn restore(c: &crate::checkpoint::Container) -> Result<Self> {
        let windows = c.scalars("disc/windows")?;
        let meta = c.scalars("disc/meta")?;
        if meta.len() != 1 {
            return Err(Error::Discriminator("malformed disc/meta tensor".into()));
        }
        let mut banks = Vec::with_capacity(windows.len());
        for w in windows {
            let l = w as usize;
            banks.push(ConvBank {
                window: l,
                w: c.array2(&format!("disc/conv{l}/W"))?,
                b: c.array1(&format!("disc/conv{l}/b"))?,
            });
        }
        Ok(DiscriminatorParams {
            banks,
            head_w: c.array1("disc/head/w")?,
            head_b: c.scalar("disc/head/b")?,
            embed_dim: meta[0] as usize,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward pass over an embedded sequence; returns (probability, pooled
/// features, argmax window per filter) for reuse in the backward pass.
fn forward(params: &DiscriminatorParams, embedded: &Array2<f64>) -> (f64, Array1<f64>, Vec<usize>) {
    let t_len = embedded.nrows();
    let d = embedded.ncols();
    let flat = embedded.as_slice().expect("standard layout");
    let mut pooled = Array1::zeros(params.pooled_len());
    let mut argmax = vec![0usize; params.pooled_len()];
    let mut base = 0usize;
    for bank in &params.banks {
        let l = bank.window;
        let windows = t_len - l + 1;
        for (j, kernel) in bank.w.rows().into_iter().enumerate() {
            let kslice = kernel.to_slice().expect("standard layout");
            let mut best = f64::NEG_INFINITY;
            let mut best_w = 0usize;
            for w in 0..windows {
                let seg = &flat[w * d..w * d + l * d];
                let mut acc = bank.b[j];
                for (kv, sv) in kslice.iter().zip(seg) {
                    acc += kv * sv;
                }
                if acc > best {
                    best = acc;
                    best_w = w;
                }
            }
            pooled[base + j] = best;
            argmax[base + j] = best_w;
        }
        base += bank.w.nrows();
    }
    let logit = params.head_w.dot(&pooled) + params.head_b;
    (sigmoid(logit), pooled, argmax)
}

pub(crate) fn discriminate_tokens(
    params: &DiscriminatorParams,
    seq: &TokenSequence,
    emb: &EmbeddingMatrix,
) -> Result<f64> {
    if seq.len() < params.max_window() {
        return Err(Error::Discriminator(format!(
            "sequence of {} tokens is shorter than the largest window {}",
            seq.len(),
            params.max_window()
        )));
    }
    let embedded = embed_sequence(seq, emb).map_err(|e| Error::Discriminator(e.to_string()))?;
    Ok(forward(params, &embedded).0)
}

/// Probability that the packet is benign, in (0, 1).
pub fn discriminate(
    params: &DiscriminatorParams,
    seq: &TokenSequence,
    emb: &EmbeddingMatrix,
) -> Result<f64> {
    discriminate_tokens(params, seq, emb)
}

/// Gradients aligned with [`DiscriminatorParams`].
#[derive(Debug, Clone)]
pub struct DiscriminatorGrads {
    pub banks_w: Vec<Array2<f64>>,
    pub banks_b: Vec<Array1<f64>>,
    pub head_w: Array1<f64>,
    pub head_b: f64,
}

impl DiscriminatorGrads {
    fn zeros(p: &DiscriminatorParams) -> Self {
        DiscriminatorGrads {
            banks_w: p.banks.iter().map(|b| Array2::zeros(b.w.raw_dim())).collect(),
            banks_b: p.banks.iter().map(|b| Array1::zeros(b.b.raw_dim())).collect(),
            head_w: Array1::zeros(p.head_w.raw_dim()),
            head_b: 0.0,
        }
    }

    fn scale(&mut self, s: f64) {
        for w in &mut self.banks_w {
            *w *= s;
        }
        for b in &mut self.banks_b {
            *b *= s;
        }
        self.head_w *= s;
        self.head_b *= s;
    }
}

/// Accumulate the gradient of `-w*ln D(x)` (target benign, w>0) or
/// `-w*ln(1-D(y))` (target malicious) for one sample. Returns the sample's
/// loss term.
fn accumulate_sample(
    params: &DiscriminatorParams,
    grads: &mut DiscriminatorGrads,
    embedded: &Array2<f64>,
    target_benign: bool,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> f64 {
    let (prob, mut pooled, argmax) = forward(params, embedded);
    let loss = if target_benign {
        -prob.max(1e-300).ln()
    } else {
        -(1.0 - prob).max(1e-300).ln()
    };
    // d(loss)/d(logit) of the sigmoid BCE
    let dz = prob - if target_benign { 1.0 } else { 0.0 };
    let mut keep = vec![true; pooled.len()];
    if let Some((rng, p)) = dropout {
        for (k, kept) in keep.iter_mut().enumerate() {
            if rng.random::<f64>() < p {
                *kept = false;
                pooled[k] = 0.0;
            }
        }
    }
    grads.head_w.scaled_add(dz, &pooled);
    grads.head_b += dz;
    let d = embedded.ncols();
    let flat = embedded.as_slice().expect("standard layout");
    let mut base = 0usize;
    for (bi, bank) in params.banks.iter().enumerate() {
        let l = bank.window;
        for j in 0..bank.w.nrows() {
            if !keep[base + j] {
                continue;
            }
            let dpool = dz * params.head_w[base + j];
            if dpool == 0.0 {
                continue;
            }
            let w_star = argmax[base + j];
            let seg = &flat[w_star * d..w_star * d + l * d];
            let mut grow = grads.banks_w[bi].row_mut(j);
            let gslice = grow.as_slice_mut().expect("standard layout");
            for (gv, sv) in gslice.iter_mut().zip(seg) {
                *gv += dpool * sv;
            }
            grads.banks_b[bi][j] += dpool;
        }
        base += bank.w.nrows();
    }
    loss
}

/// Total detector loss over predicted-benign set X and predicted-malicious
/// set Y:
///
///   L_D = -sum_{x in X} ln D(x) - sum_{y in Y} ln(1 - D(y))
pub fn discriminator_loss(
    params: &DiscriminatorParams,
    benign_set: &[TokenSequence],
    malicious_set: &[TokenSequence],
    emb: &EmbeddingMatrix,
) -> Result<f64> {
    let mut total = 0.0;
    for x in benign_set {
        total -= discriminate(params, x, emb)?.max(1e-300).ln();
    }
    for y in malicious_set {
        total -= (1.0 - discriminate(params, y, emb)?).max(1e-300).ln();
    }
    Ok(total)
}

/// Loss and gradients of the detector objective over a (sub)batch; the
/// gradient is the mean over samples. Exposed for gradient checking.
pub fn discriminator_grads(
    params: &DiscriminatorParams,
    benign_set: &[TokenSequence],
    malicious_set: &[TokenSequence],
    emb: &EmbeddingMatrix,
) -> Result<(f64, DiscriminatorGrads)> {
    let mut grads = DiscriminatorGrads::zeros(params);
    let mut loss = 0.0;
    for x in benign_set {
        let embedded = embed_sequence(x, emb).map_err(|e| Error::Discriminator(e.to_string()))?;
        loss += accumulate_sample(params, &mut grads, &embedded, true, None);
    }
    for y in malicious_set {
        let embedded = embed_sequence(y, emb).map_err(|e| Error::Discriminator(e.to_string()))?;
        loss += accumulate_sample(params, &mut grads, &embedded, false, None);
    }
    let n = benign_set.len() + malicious_set.len();
    if n > 0 {
        grads.scale(1.0 / n as f64);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct DiscTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Dropout probability on pooled features during training (0 disables).
    pub dropout: f64,
    pub seed: u64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            epochs: 3,
            lr: 1e-3,
            batch: 64,
            dropout: 0.0,
            seed: 0,
        }
    }
}

fn adam_buffers<'a>(
    params: &'a mut DiscriminatorParams,
    head_b_slot: &'a mut [f64; 1],
) -> Vec<&'a mut [f64]> {
    head_b_slot[0] = params.head_b;
    let mut bufs: Vec<&mut [f64]> = Vec::new();
    for bank in &mut params.banks {
        bufs.push(bank.w.as_slice_mut().unwrap());
        bufs.push(bank.b.as_slice_mut().unwrap());
    }
    bufs.push(params.head_w.as_slice_mut().unwrap());
    bufs.push(head_b_slot.as_mut_slice());
    bufs
}

fn grad_buffers<'a>(grads: &'a DiscriminatorGrads, head_b_slot: &'a [f64; 1]) -> Vec<&'a [f64]> {
    let mut bufs: Vec<&[f64]> = Vec::new();
    for (w, b) in grads.banks_w.iter().zip(&grads.banks_b) {
        bufs.push(w.as_slice().unwrap());
        bufs.push(b.as_slice().unwrap());
    }
    bufs.push(grads.head_w.as_slice().unwrap());
    bufs.push(head_b_slot.as_slice());
    bufs
}

/// Train the detector for `epochs` epochs with Adam on balanced minibatches
/// (half from each set). Returns the full-set loss after each epoch.
/// The optimizer carries across calls, so adversarial d-steps continue one
/// long optimization.
pub fn train_discriminator(
    params: &mut DiscriminatorParams,
    benign_set: &[TokenSequence],
    malicious_set: &[TokenSequence],
    emb: &EmbeddingMatrix,
    cfg: &DiscTrainConfig,
    opt: &mut Adam,
) -> Result<Vec<f64>> {
    if benign_set.is_empty() {
        return Err(Error::Discriminator(
            "predicted-benign set is empty".into(),
        ));
    }
    if malicious_set.is_empty() {
        return Err(Error::Discriminator(
            "predicted-malicious set is empty".into(),
        ));
    }
    opt.lr = cfg.lr;
    let half = (cfg.batch / 2).max(1);
    let n_batches = (benign_set.len().max(malicious_set.len()) + half - 1) / half;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order_x = shuffled(benign_set.len(), cfg.seed, "disc.x", epoch);
        let mut order_y = shuffled(malicious_set.len(), cfg.seed, "disc.y", epoch);
        let mut dropout_rng = rng::stream(cfg.seed, "disc.dropout", &[epoch as u64]);
        let mut xi = 0usize;
        let mut yi = 0usize;
        for _ in 0..n_batches {
            let mut grads = DiscriminatorGrads::zeros(params);
            let mut count = 0usize;
            for _ in 0..half {
                if xi >= order_x.len() {
                    order_x = shuffled(
                        benign_set.len(),
                        cfg.seed,
                        "disc.x.wrap",
                        epoch * n_batches + xi,
                    );
                    xi = 0;
                }
                let x = &benign_set[order_x[xi]];
                xi += 1;
                let embedded =
                    embed_sequence(x, emb).map_err(|e| Error::Discriminator(e.to_string()))?;
                let dropout = if cfg.dropout > 0.0 {
                    Some((&mut dropout_rng, cfg.dropout))
                } else {
                    None
                };
                accumulate_sample(params, &mut grads, &embedded, true, dropout);
                count += 1;
            }
            for _ in 0..half {
                if yi >= order_y.len() {
                    order_y = shuffled(
                        malicious_set.len(),
                        cfg.seed,
                        "disc.y.wrap",
                        epoch * n_batches + yi,
                    );
                    yi = 0;
                }
                let y = &malicious_set[order_y[yi]];
                yi += 1;
                let embedded =
                    embed_sequence(y, emb).map_err(|e| Error::Discriminator(e.to_string()))?;
                let dropout = if cfg.dropout > 0.0 {
                    Some((&mut dropout_rng, cfg.dropout))
                } else {
                    None
                };
                accumulate_sample(params, &mut grads, &embedded, false, dropout);
                count += 1;
            }
            grads.scale(1.0 / count as f64);
            let mut head_b_slot = [0.0f64];
            let grad_slot = [grads.head_b];
            {
                let mut pbufs = adam_buffers(params, &mut head_b_slot);
                let gbufs = grad_buffers(&grads, &grad_slot);
                opt.step(&mut pbufs, &gbufs);
            }
            params.head_b = head_b_slot[0];
        }
        losses.push(discriminator_loss(params, benign_set, malicious_set, emb)?);
    }
    Ok(losses)
}

fn shuffled(n: usize, seed: u64, tag: &str, part: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, tag, &[part as u64]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
