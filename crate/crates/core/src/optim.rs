//! AdamW with decoupled weight decay, gradient accumulation and clipping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{IrcError, Result};

/// Serializable dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() }
    }
}

impl TryFrom<Tensor> for Matrix {
    type Error = IrcError;

    fn try_from(t: Tensor) -> Result<Matrix> {
        Array2::from_shape_vec((t.rows, t.cols), t.data)
            .map_err(|e| IrcError::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> AdamWState {
        AdamWState {
            step: self.step,
            first_moment: self.first.iter().map(Tensor::from).collect(),
            second_moment: self.second.iter().map(Tensor::from).collect(),
        }
    }

    pub fn restore(&mut self, state: AdamWState) -> Result<()> {
        if state.first_moment.len() != self.first.len() || state.second_moment.len() != self.second.len() {
            return Err(IrcError::Checkpoint("optimizer state does not match the parameter count".into()));
        }
        let load = |ts: Vec<Tensor>, like: &[Matrix]| -> Result<Vec<Matrix>> {
            ts.into_iter()
                .zip(like)
                .map(|(t, l)| {
                    let m = Matrix::try_from(t)?;
                    if m.dim() != l.dim() {
                        return Err(IrcError::Checkpoint("optimizer moment shape mismatch".into()));
                    }
                    Ok(m)
                })
                .collect()
        };
        self.first = load(state.first_moment, &self.first)?;
        self.second = load(state.second_moment, &self.second)?;
        self.step = state.step;
        Ok(())
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) {
        assert_eq!(grads.len(), self.first.len(), "gradient list does not match the store");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            self.first[k].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.second[k].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, wd, eps) = (self.learning_rate, self.weight_decay, self.eps);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&self.first[k]).and(&self.second[k]).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
    }
}

/// Running sum of per-example gradients.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sums: Vec<Option<Matrix>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(params: usize) -> Self {
        Self { sums: vec![None; params], count: 0 }
    }

    pub fn add(&mut self, grads: Vec<Option<Matrix>>) {
        assert_eq!(grads.len(), self.sums.len());
        for (slot, g) in self.sums.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(s), Some(g)) => *s += &g,
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient over the accumulated examples; resets the accumulator.
    pub fn take_mean(&mut self) -> Vec<Option<Matrix>> {
        let n = self.count.max(1) as f64;
        self.count = 0;
        let params = self.sums.len();
        std::mem::replace(&mut self.sums, vec![None; params])
            .into_iter()
            .map(|g| g.map(|g| g / n))
            .collect()
    }
}

pub fn global_norm(grads: &[Option<Matrix>]) -> f64 {
    grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
