//! Decision tree: Gini criterion, unlimited depth, deterministic
//! first-best tie-breaking over (feature, threshold).

use ndarray::Array2;

use crate::checkpoint::Container;
use crate::packet::Label;
use crate::{Error, Result};

const MIN_GAIN: f64 = 1e-12;

/// Flat node arrays; `feature == -1` marks a leaf.
#[derive(Debug, Clone)]
pub(super) struct TreeModel {
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<i64>,
    right: Vec<i64>,
    leaf_label: Vec<i64>,
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

impl TreeModel {
    pub(super) fn hyperparams(&self) -> String {
        "criterion=gini depth=unlimited".to_string()
    }

    pub(super) fn train(x: &Array2<f64>, y: &[Label]) -> Result<TreeModel> {
        if x.nrows() == 0 {
            return Err(Error::Nids("empty training set".into()));
        }
        let mut model = TreeModel {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            leaf_label: Vec::new(),
        };
        let indices: Vec<usize> = (0..x.nrows()).collect();
        model.build(x, y, indices);
        Ok(model)
    }

    fn new_node(&mut self) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(-1);
        self.right.push(-1);
        self.leaf_label.push(-1);
        self.feature.len() - 1
    }

    fn build(&mut self, x: &Array2<f64>, y: &[Label], indices: Vec<usize>) -> usize {
        let node = self.new_node();
        let total = indices.len();
        let pos = indices
            .iter()
            .filter(|&&i| y[i] == Label::Malicious)
            .count();
        let parent_gini = gini(pos, total);
        // majority label; ties default benign
        let majority = if pos * 2 > total { 1 } else { 0 };
        if pos == 0 || pos == total {
            self.leaf_label[node] = majority;
            return node;
        }
        let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, gain)
        for f in 0..x.ncols() {
            let mut vals: Vec<(f64, bool)> = indices
                .iter()
                .map(|&i| (x[[i, f]], y[i] == Label::Malicious))
                .collect();
            vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut left_pos = 0usize;
            for k in 0..total - 1 {
                if vals[k].1 {
                    left_pos += 1;
                }
                if vals[k].0 == vals[k + 1].0 {
                    continue;
                }
                let left_n = k + 1;
                let right_n = total - left_n;
                let right_pos = pos - left_pos;
                let weighted = (left_n as f64 * gini(left_pos, left_n)
                    + right_n as f64 * gini(right_pos, right_n))
                    / total as f64;
                let gain = parent_gini - weighted;
                let threshold = 0.5 * (vals[k].0 + vals[k + 1].0);
                let better = match best {
                    None => gain > MIN_GAIN,
                    Some((_, _, bg)) => gain > bg + MIN_GAIN,
                };
                if better {
                    best = Some((f, threshold, gain));
                }
            }
        }
        match best {
            None => {
                self.leaf_label[node] = majority;
                node
            }
            Some((f, threshold, _)) => {
                let (li, ri): (Vec<usize>, Vec<usize>) =
                    indices.into_iter().partition(|&i| x[[i, f]] <= threshold);
                let left = self.build(x, y, li);
                let right = self.build(x, y, ri);
                self.feature[node] = f as i64;
                self.threshold[node] = threshold;
                self.left[node] = left as i64;
                self.right[node] = right as i64;
                node
            }
        }
    }

    pub(super) fn predict(&self, x: &Array2<f64>) -> Vec<Label> {
        x.rows()
            .into_iter()
            .map(|row| {
                let mut node = 0usize;
                loop {
                    let f = self.feature[node];
                    if f < 0 {
                        return if self.leaf_label[node] == 1 {
                            Label::Malicious
                        } else {
                            Label::Benign
                        };
                    }
                    node = if row[f as usize] <= self.threshold[node] {
                        self.left[node] as usize
                    } else {
                        self.right[node] as usize
                    };
                }
            })
            .collect()
    }

    pub(super) fn snap(&mut self) {
        for t in &mut self.threshold {
            *t = *t as f32 as f64;
        }
    }

    pub(super) fn store(&self, c: &mut Container) {
        c.push_scalars(
            "nids/dt/feature",
            &self.feature.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        c.push_scalars("nids/dt/threshold", &self.threshold);
        c.push_scalars(
            "nids/dt/left",
            &self.left.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        c.push_scalars(
            "nids/dt/right",
            &self.right.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        c.push_scalars(
            "nids/dt/leaf",
            &self.leaf_label.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
    }

    pub(super) fn restore(c: &Container) -> Result<TreeModel> {
        let to_i64 = |v: Vec<f64>| v.into_iter().map(|x| x as i64).collect::<Vec<_>>();
        let model = TreeModel {
            feature: to_i64(c.scalars("nids/dt/feature")?),
            threshold: c.scalars("nids/dt/threshold")?,
            left: to_i64(c.scalars("nids/dt/left")?),
            right: to_i64(c.scalars("nids/dt/right")?),
            leaf_label: to_i64(c.scalars("nids/dt/leaf")?),
        };
        if model.feature.len() != model.threshold.len()
            || model.feature.len() != model.left.len()
            || model.feature.len() != model.right.len()
            || model.feature.len() != model.leaf_label.len()
        {
            return Err(Error::Nids("inconsistent tree arrays".into()));
        }
        Ok(model)
    }
}
