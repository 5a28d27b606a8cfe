//! L2-penalized logistic regression, full-batch Adam.

use ndarray::{Array1, Array2};

use crate::checkpoint::Container;
use crate::opt::{snap_f32, Adam};
use crate::packet::Label;
use crate::Result;

const ITERS: usize = 300;
const LR: f64 = 0.1;
const L2: f64 = 1e-4;

#[derive(Debug, Clone)]
pub(super) struct LogRegModel {
    w: Array1<f64>,
    b: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LogRegModel {
    pub(super) fn hyperparams(&self) -> String {
        format!("penalty=l2 lambda={L2} optimizer=adam lr={LR} iters={ITERS}")
    }

    pub(super) fn train(x: &Array2<f64>, y: &[Label]) -> Result<LogRegModel> {
        let n = x.nrows() as f64;
        let targets = Array1::from_iter(
            y.iter()
                .map(|&l| if l == Label::Malicious { 1.0 } else { 0.0 }),
        );
        let mut model = LogRegModel {
            w: Array1::zeros(x.ncols()),
            b: 0.0,
        };
        let mut opt = Adam::new(LR);
        for _ in 0..ITERS {
            let probs = (x.dot(&model.w) + model.b).mapv(sigmoid);
            let dz = (&probs - &targets) / n;
            let gw = x.t().dot(&dz) + &(L2 * &model.w);
            let gb = dz.sum();
            let mut b_slot = [model.b];
            let gb_slot = [gb];
            opt.step(
                &mut [model.w.as_slice_mut().unwrap(), &mut b_slot],
                &[gw.as_slice().unwrap(), &gb_slot],
            );
            model.b = b_slot[0];
        }
        Ok(model)
    }

    pub(super) fn predict(&self, x: &Array2<f64>) -> Vec<Label> {
        (x.dot(&self.w) + self.b)
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
        snap_f32(self.w.as_slice_mut().unwrap());
        self.b = self.b as f32 as f64;
    }

    pub(super) fn store(&self, c: &mut Container) {
        c.push_array1("nids/lr/w", &self.w);
        c.push_scalars("nids/lr/b", &[self.b]);
    }

    pub(super) fn restore(c: &Container) -> Result<LogRegModel> {
        Ok(LogRegModel {
            w: c.array1("nids/lr/w")?,
            b: c.scalar("nids/lr/b")?,
        })
    }
}
