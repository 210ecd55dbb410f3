//! Gumbel-softmax relaxation of categorical sampling.

use ndarray::{Array1, ArrayView1};
use rand::Rng;

use super::mlp::softmax;

/// Standard Gumbel noise `-ln(-ln(u))`, `u ~ U(0, 1)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    /// `softmax((logits + noise) / temperature)`; gradients flow through this.
    pub soft: Array1<f64>,
    /// Index of the straight-through one-hot sample (argmax of `soft`).
    pub hard: usize,
}

impl GumbelSample {
    pub fn one_hot(&self) -> Array1<f64> {
        let mut h = Array1::zeros(self.soft.len());
        h[self.hard] = 1.0;
        h
    }
}

/// Relaxed sample with explicit noise. `temperature` must be positive.
pub fn gumbel_softmax_with_noise(logits: ArrayView1<f64>, noise: &[f64], temperature: f64) -> GumbelSample {
    assert!(temperature > 0.0, "temperature must be positive");
    assert_eq!(logits.len(), noise.len(), "one noise draw per logit");
    let perturbed: Array1<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    let soft = softmax(perturbed.view());
    let hard = argmax(soft.view());
    GumbelSample { soft, hard }
}

pub fn gumbel_softmax<R: Rng + ?Sized>(logits: ArrayView1<f64>, temperature: f64, rng: &mut R) -> GumbelSample {
    let noise = sample_gumbel(rng, logits.len());
    gumbel_softmax_with_noise(logits, &noise, temperature)
}

/// Gradient with respect to the logits given the gradient with respect to the
/// soft sample: `(1 / T) * s * (g - <g, s>)`.
pub fn gumbel_softmax_backward(soft: ArrayView1<f64>, grad_soft: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let dot = soft.dot(&grad_soft);
    (&soft * &(&grad_soft - dot)) / temperature
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
