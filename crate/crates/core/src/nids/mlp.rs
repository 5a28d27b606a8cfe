//! One-hidden-layer perceptron: 64 rectified units, logistic output,
//! trained with the Adam rule on minibatches.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::checkpoint::Container;
use crate::opt::{snap_f32, Adam};
use crate::packet::Label;
use crate::rng;
use crate::Result;

const HIDDEN: usize = 64;
const EPOCHS: usize = 40;
const BATCH: usize = 64;
const LR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub(super) struct MlpModel {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array1<f64>,
    b2: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpModel {
    pub(super) fn hyperparams(&self) -> String {
        format!("hidden={HIDDEN} activation=relu optimizer=adam lr={LR} epochs={EPOCHS} batch={BATCH}")
    }

    pub(super) fn train(x: &Array2<f64>, y: &[Label], seed: u64) -> Result<MlpModel> {
        let n = x.nrows();
        let f = x.ncols();
        let mut init_rng = rng::stream(seed, "nids.mlp.init", &[]);
        let s1 = (1.0 / f as f64).sqrt();
        let s2 = (1.0 / HIDDEN as f64).sqrt();
        let mut model = MlpModel {
            w1: Array2::from_shape_fn((HIDDEN, f), |_| init_rng.random_range(-s1..s1)),
            b1: Array1::zeros(HIDDEN),
            w2: Array1::from_shape_fn(HIDDEN, |_| init_rng.random_range(-s2..s2)),
            b2: 0.0,
        };
        let targets: Vec<f64> = y
            .iter()
            .map(|&l| if l == Label::Malicious { 1.0 } else { 0.0 })
            .collect();
        let mut opt = Adam::new(LR);
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..EPOCHS {
            let mut rng = rng::stream(seed, "nids.mlp.shuffle", &[epoch as u64]);
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(BATCH) {
                let b = chunk.len();
                let mut xb = Array2::zeros((b, f));
                let mut yb = Array1::zeros(b);
                for (bi, &idx) in chunk.iter().enumerate() {
                    xb.row_mut(bi).assign(&x.row(idx));
                    yb[bi] = targets[idx];
                }
                // forward
                let a1_pre = xb.dot(&model.w1.t()) + &model.b1;
                let a1 = a1_pre.mapv(|v| v.max(0.0));
                let logits = a1.dot(&model.w2) + model.b2;
                let probs = logits.mapv(sigmoid);
                // backward (mean BCE)
                let dz = (&probs - &yb) / b as f64;
                let gw2 = a1.t().dot(&dz);
                let gb2 = dz.sum();
                let mut da1 = dz
                    .insert_axis(Axis(1))
                    .dot(&model.w2.clone().insert_axis(Axis(0)));
                da1.zip_mut_with(&a1_pre, |g, &pre| {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                });
                let gw1 = da1.t().dot(&xb);
                let gb1 = da1.sum_axis(Axis(0));
                let mut b2_slot = [model.b2];
                let gb2_slot = [gb2];
                opt.step(
                    &mut [
                        model.w1.as_slice_mut().unwrap(),
                        model.b1.as_slice_mut().unwrap(),
                        model.w2.as_slice_mut().unwrap(),
                        &mut b2_slot,
                    ],
                    &[
                        gw1.as_slice().unwrap(),
                        gb1.as_slice().unwrap(),
                        gw2.as_slice().unwrap(),
                        &gb2_slot,
                    ],
                );
                model.b2 = b2_slot[0];
            }
        }
        Ok(model)
    }

    pub(super) fn predict(&self, x: &Array2<f64>) -> Vec<Label> {
        let a1 = (x.dot(&self.w1.t()) + &self.b1).mapv(|v| v.max(0.0));
        let logits = a1.dot(&self.w2) + self.b2;
        logits
            .iter()
            .map(|&z| {
                if sigmoid(z) > 0.5 {
                    Label::Malicious
                } else {
                    Label::Benign
                }
            })
            .collect()
    }

    pub(super) fn snap(&mut self) {
        snap_f32(self.w1.as_slice_mut().unwrap());
        snap_f32(self.b1.as_slice_mut().unwrap());
        snap_f32(self.w2.as_slice_mut().unwrap());
        self.b2 = self.b2 as f32 as f64;
    }

    pub(super) fn store(&self, c: &mut Container) {
        c.push_array2("nids/mlp/W1", &self.w1);
        c.push_array1("nids/mlp/b1", &self.b1);
        c.push_array1("nids/mlp/w2", &self.w2);
        c.push_scalars("nids/mlp/b2", &[self.b2]);
    }

    pub(super) fn restore(c: &Container) -> Result<MlpModel> {
        Ok(MlpModel {
            w1: c.array2("nids/mlp/W1")?,
            b1: c.array1("nids/mlp/b1")?,
            w2: c.array1("nids/mlp/w2")?,
            b2: c.scalar("nids/mlp/b2")?,
        })
    }
}
