//! Central finite-difference checks of analytic gradients.
//!
//! Relative error is `|a - n| / max(|a|, |n|)`, falling back to the absolute
//! difference when both are below `1e-8`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::extraction::{gumbel, gumbel_sample_with, relaxed_indicator, straight_through_mask, SentenceScores};

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Location of the largest error.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_relative_error || self.checked == 1 {
            self.max_relative_error = err;
            self.worst = at();
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

/// Derivative of the straight-through gate with respect to its logit against
/// central differences of the relaxed indicator, over random logits, noise
/// pairs and the given temperatures.
pub fn check_straight_through(cases: usize, temperatures: &[f64], step: f64, rng: &mut impl Rng) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for case in 0..cases {
        let logit = rng.random_range(-4.0..4.0);
        let pair = (gumbel(rng), gumbel(rng));
        let tau = temperatures[case % temperatures.len()];
        let sample = gumbel_sample_with(&SentenceScores::from_logits(vec![0], vec![logit]), tau, vec![pair]);
        let mut g = Graph::new();
        let l = g.input(Array2::from_elem((1, 1), logit));
        let z = straight_through_mask(&mut g, l, &sample, tau);
        let grads = g.backward(z);
        let analytic = grads.get(l).map_or(0.0, |m| m[[0, 0]]);
        let numeric = (relaxed_indicator(logit + step, pair, tau) - relaxed_indicator(logit - step, pair, tau)) / (2.0 * step);
        report.record(relative_error(analytic, numeric), || format!("case {case}: logit {logit:.3}, tau {tau}"));
    }
    report
}

/// Checks `samples_per_tensor` random entries of every parameter of `model`
/// (all entries of tensors no larger than that). `store_of` must return the
/// store `loss` reads from, so that perturbations are seen by the forward pass.
pub fn check_parameters<M>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> (Graph, Var),
    step: f64,
    samples_per_tensor: usize,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let (g, out) = loss(model);
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads, store_of(model));
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store_of(model).ids().collect();
    for id in ids {
        let (name, dim) = {
            let store = store_of(model);
            (store.name(id).to_string(), store.get(id).dim())
        };
        let n = dim.0 * dim.1;
        let entries: Vec<usize> =
            if n <= samples_per_tensor { (0..n).collect() } else { (0..samples_per_tensor).map(|_| rng.random_range(0..n)).collect() };
        for idx in entries {
            let (r, c) = (idx / dim.1, idx % dim.1);
            let original = store_of(model).get(id)[[r, c]];
            let mut at = |x: f64| {
                store_of(model).get_mut(id)[[r, c]] = x;
                let (g, out) = loss(model);
                g.scalar(out)
            };
            let numeric = (at(original + step) - at(original - step)) / (2.0 * step);
            store_of(model).get_mut(id)[[r, c]] = original;
            let a = analytic[id.0].as_ref().map_or(0.0, |m| m[[r, c]]);
            report.record(relative_error(a, numeric), || format!("{name}[{r},{c}]: analytic {a:e}, numeric {numeric:e}"));
        }
    }
    report
}
