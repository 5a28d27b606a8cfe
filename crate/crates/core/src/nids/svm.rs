//! RBF-kernel support vector machine trained with simplified SMO
//! (random second-coordinate choice, seeded), C = 1, gamma = 1/F.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::checkpoint::Container;
use crate::opt::snap_f32;
use crate::packet::Label;
use crate::rng;
use crate::{Error, Result};

const C: f64 = 1.0;
const TOL: f64 = 1e-3;
const MAX_PASSES: usize = 5;
const MAX_SWEEPS: usize = 200;

#[derive(Debug, Clone)]
pub(super) struct SvmModel {
    support: Array2<f64>,
    /// alpha_i * y_i per support vector.
    coef: Vec<f64>,
    b: f64,
    gamma: f64,
}

fn rbf(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let mut dist = 0.0;
    for (&x, &z) in a.iter().zip(b.iter()) {
        let d = x - z;
        dist += d * d;
    }
    (-gamma * dist).exp()
}

impl SvmModel {
    pub(super) fn hyperparams(&self) -> String {
        format!(
            "kernel=rbf C={C} gamma={} tol={TOL} max_passes={MAX_PASSES}",
            self.gamma
        )
    }

    pub(super) fn train(x: &Array2<f64>, y: &[Label], seed: u64) -> Result<SvmModel> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Nids("empty training set".into()));
        }
        let gamma = 1.0 / x.ncols().max(1) as f64;
        let ys: Vec<f64> = y
            .iter()
            .map(|&l| if l == Label::Malicious { 1.0 } else { -1.0 })
            .collect();
        // kernel matrix; desk-scale corpora fit comfortably
        let mut k = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = rbf(x.row(i), x.row(j), gamma);
                k[[i, j]] = v;
                k[[j, i]] = v;
            }
        }
        let mut alpha = vec![0.0f64; n];
        let mut b = 0.0f64;
        let f_eval = |alpha: &[f64], b: f64, idx: usize| -> f64 {
            let mut acc = b;
            for (j, &a) in alpha.iter().enumerate() {
                if a > 0.0 {
                    acc += a * ys[j] * k[[j, idx]];
                }
            }
            acc
        };
        let mut rng = rng::stream(seed, "nids.svm.smo", &[]);
        let mut passes = 0usize;
        let mut sweeps = 0usize;
        while passes < MAX_PASSES && sweeps < MAX_SWEEPS {
            sweeps += 1;
            let mut changed = 0usize;
            for i in 0..n {
                let e_i = f_eval(&alpha, b, i) - ys[i];
                if !((ys[i] * e_i < -TOL && alpha[i] < C) || (ys[i] * e_i > TOL && alpha[i] > 0.0))
                {
                    continue;
                }
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                let e_j = f_eval(&alpha, b, j) - ys[j];
                let (a_i_old, a_j_old) = (alpha[i], alpha[j]);
                let (lo, hi) = if ys[i] != ys[j] {
                    ((a_j_old - a_i_old).max(0.0), (C + a_j_old - a_i_old).min(C))
                } else {
                    ((a_i_old + a_j_old - C).max(0.0), (a_i_old + a_j_old).min(C))
                };
                if lo >= hi {
                    continue;
                }
                let eta = 2.0 * k[[i, j]] - k[[i, i]] - k[[j, j]];
                if eta >= 0.0 {
                    continue;
                }
                let mut a_j = a_j_old - ys[j] * (e_i - e_j) / eta;
                a_j = a_j.clamp(lo, hi);
                if (a_j - a_j_old).abs() < 1e-5 {
                    continue;
                }
                let a_i = a_i_old + ys[i] * ys[j] * (a_j_old - a_j);
                let b1 = b - e_i
                    - ys[i] * (a_i - a_i_old) * k[[i, i]]
                    - ys[j] * (a_j - a_j_old) * k[[i, j]];
                let b2 = b - e_j
                    - ys[i] * (a_i - a_i_old) * k[[i, j]]
                    - ys[j] * (a_j - a_j_old) * k[[j, j]];
                b = if a_i > 0.0 && a_i < C {
                    b1
                } else if a_j > 0.0 && a_j < C {
                    b2
                } else {
                    0.5 * (b1 + b2)
                };
                alpha[i] = a_i;
                alpha[j] = a_j;
                changed += 1;
            }
            passes = if changed == 0 { passes + 1 } else { 0 };
        }
        let sv_idx: Vec<usize> = (0..n).filter(|&i| alpha[i] > 1e-8).collect();
        let mut support = Array2::zeros((sv_idx.len(), x.ncols()));
        let mut coef = Vec::with_capacity(sv_idx.len());
        for (row, &i) in sv_idx.iter().enumerate() {
            support.row_mut(row).assign(&x.row(i));
            coef.push(alpha[i] * ys[i]);
        }
        Ok(SvmModel {
            support,
            coef,
            b,
            gamma,
        })
    }

    fn decision(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut acc = self.b;
        for (i, &c) in self.coef.iter().enumerate() {
            acc += c * rbf(self.support.row(i), row, self.gamma);
        }
        acc
    }

    pub(super) fn predict(&self, x: &Array2<f64>) -> Vec<Label> {
        x.rows()
            .into_iter()
            .map(|row| {
                if self.decision(row) >= 0.0 {
                    Label::Malicious
                } else {
                    Label::Benign
                }
            })
            .collect()
    }

    pub(super) fn snap(&mut self) {
        snap_f32(self.support.as_slice_mut().unwrap());
        snap_f32(&mut self.coef);
        self.b = self.b as f32 as f64;
        self.gamma = self.gamma as f32 as f64;
    }

    pub(super) fn store(&self, c: &mut Container) {
        c.push_array2("nids/svm/support", &self.support);
        c.push_scalars("nids/svm/coef", &self.coef);
        c.push_scalars("nids/svm/b", &[self.b]);
        c.push_scalars("nids/svm/gamma", &[self.gamma]);
    }

    pub(super) fn restore(c: &Container) -> Result<SvmModel> {
        let support = c.array2("nids/svm/support")?;
        let coef = c.scalars("nids/svm/coef")?;
        if support.nrows() != coef.len() {
            return Err(Error::Nids(
                "support vector and coefficient counts differ".into(),
            ));
        }
        Ok(SvmModel {
            support,
            coef,
            b: c.scalar("nids/svm/b")?,
            gamma: c.scalar("nids/svm/gamma")?,
        })
    }
}
