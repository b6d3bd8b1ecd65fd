// SPDX-License-Identifier: MIT OR Apache-2.0

//! Selective state-space layers evaluated by recurrent scan.
//!
//! A single selective SSM channel turns a scalar signal `u(t)` into `y(t)`
//! with input-dependent `A(t)`, `B(t)`, `C(t)`:
//!
//! ```text
//! x(t) = A(t) ∘ x(t-1) + B(t) u(t),   x(-1) = 0
//! y(t) = C(t) · x(t)
//! A(t) = Ā^Δ(t),  Ā = exp(-exp(a_log)) ∈ (0, 1)
//! ```
//!
//! `y(t)` includes the contribution of `u(t)` itself, so the unrolled kernel
//! has a non-zero diagonal (a token can be knocked out from itself).

mod mamba1;
mod ssd;

pub use mamba1::{Mamba1Config, Mamba1Layer};
pub(crate) use ssd::{masked_attention_output, masked_scores};
pub use ssd::{HeadInputs, SsdConfig, SsdLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softplus, Rng, Tensor};

/// One independent selective SSM attached to a feature channel.
///
/// `b_proj`, `c_proj` and `delta_proj` read the full selection vector at each
/// step (width `D`), while the channel's own scalar signal is supplied
/// separately to [`SelectiveSsmChannel::scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveSsmChannel {
    /// `[n]` raw decay parameters.
    pub a_log: Tensor,
    /// `[D × n]`
    pub b_proj: Tensor,
    /// `[D × n]`
    pub c_proj: Tensor,
    /// `[D]`
    pub delta_proj: Tensor,
    /// `[1]`
    pub delta_bias: Tensor,
}

/// Discretized parameters of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStep {
    /// `A(t) = Ā^Δ(t)` (diagonal).
    pub a: Vec<f64>,
    /// `Δ(t) · B(t)`.
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

impl SelectiveSsmChannel {
    pub fn zeros(selection_dim: usize, state_dim: usize) -> Self {
        Self {
            a_log: Tensor::zeros(&[state_dim]),
            b_proj: Tensor::zeros(&[selection_dim, state_dim]),
            c_proj: Tensor::zeros(&[selection_dim, state_dim]),
            delta_proj: Tensor::zeros(&[selection_dim]),
            delta_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn random(selection_dim: usize, state_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let proj_std = scale / (selection_dim as f64).sqrt();
        Self {
            // Ā spread over roughly (0.05, 0.95)
            a_log: Tensor::uniform(&[state_dim], -3.0, 1.1, rng),
            b_proj: Tensor::randn(&[selection_dim, state_dim], proj_std, rng),
            c_proj: Tensor::randn(&[selection_dim, state_dim], proj_std, rng),
            delta_proj: Tensor::randn(&[selection_dim], proj_std, rng),
            delta_bias: Tensor::vector(vec![rng.uniform_range(-1.0, 1.0)]),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.len()
    }

    pub fn selection_dim(&self) -> usize {
        self.delta_proj.len()
    }

    /// `Ā = exp(-exp(a_log))`, each entry in `(0, 1)`.
    pub fn a_bar(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|a| (-a.exp()).exp()).collect()
    }

    /// `Δ(t) = softplus(delta_proj · u_t + delta_bias)`.
    pub fn delta(&self, u_t: &[f64]) -> f64 {
        softplus(dot(self.delta_proj.data(), u_t) + self.delta_bias.data()[0])
    }

    pub fn discretize(&self, u_t: &[f64]) -> DiscreteStep {
        self.discretize_with_delta(u_t, self.delta(u_t))
    }

    /// Discretization with an externally supplied step size.
    pub fn discretize_with_delta(&self, u_t: &[f64], delta: f64) -> DiscreteStep {
        let n = self.state_dim();
        let project = |proj: &Tensor| -> Vec<f64> {
            (0..n)
                .map(|i| u_t.iter().enumerate().map(|(k, u)| u * proj.at(k, i)).sum())
                .collect()
        };
        let a = self.a_bar().iter().map(|ab| ab.powf(delta)).collect();
        let b = project(&self.b_proj).into_iter().map(|v| v * delta).collect();
        let c = project(&self.c_proj);
        DiscreteStep { a, b, c, delta }
    }

    /// Discretized steps for every row of a `[L × D]` selection input.
    pub fn steps(&self, selection: &Tensor) -> Result<Vec<DiscreteStep>> {
        if selection.cols() != self.selection_dim() {
            return Err(Error::Dimension(format!(
                "selection width {} for channel expecting {}",
                selection.cols(),
                self.selection_dim()
            )));
        }
        Ok((0..selection.rows())
            .map(|t| self.discretize(selection.row(t)))
            .collect())
    }

    /// Runs the recurrence over `signal`, with `B(t)`, `C(t)`, `Δ(t)` read
    /// from `selection`.
    pub fn scan(&self, selection: &Tensor, signal: &[f64]) -> Result<Vec<f64>> {
        if selection.rows() != signal.len() {
            return Err(Error::Dimension(format!(
                "{} selection rows for {} signal steps",
                selection.rows(),
                signal.len()
            )));
        }
        Ok(recurrent_scan(&self.steps(selection)?, signal))
    }
}

/// `x(t) = A(t) x(t-1) + B(t) u(t)`, `y(t) = C(t)·x(t)` from `x(-1) = 0`.
pub fn recurrent_scan(steps: &[DiscreteStep], u: &[f64]) -> Vec<f64> {
    let n = steps.first().map_or(0, |s| s.a.len());
    let mut state = vec![0.0; n];
    steps
        .iter()
        .zip(u)
        .map(|(step, &ut)| {
            for i in 0..n {
                state[i] = step.a[i] * state[i] + step.b[i] * ut;
            }
            dot(&step.c, &state)
        })
        .collect()
}

/// Causal depthwise 1-D convolution over the rows of `x` (`[L × D]`).
/// `weight` is `[D × k]`; column `k-1` multiplies the current step.
pub(crate) fn causal_depthwise_conv(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (len, d) = (x.rows(), x.cols());
    let k = weight.cols();
    let mut out = Tensor::zeros(&[len, d]);
    for t in 0..len {
        for c in 0..d {
            let mut acc = bias.data()[c];
            for j in 0..k {
                let lag = k - 1 - j;
                if lag <= t {
                    acc += weight.at(c, j) * x.at(t - lag, c);
                }
            }
            out.set(t, c, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_channel(a_bar: f64) -> SelectiveSsmChannel {
        let mut ch = SelectiveSsmChannel::zeros(1, 1);
        ch.a_log = Tensor::vector(vec![(-a_bar.ln()).ln()]);
        ch.b_proj = Tensor::ones(&[1, 1]);
        ch.c_proj = Tensor::ones(&[1, 1]);
        ch
    }

    #[test]
    fn zero_delta_means_no_decay() {
        let mut rng = Rng::new(5);
        let ch = SelectiveSsmChannel::random(4, 3, 1.0, &mut rng);
        let step = ch.discretize_with_delta(&[0.1, 0.2, 0.3, 0.4], 0.0);
        assert_eq!(step.a, vec![1.0; 3]);
    }

    #[test]
    fn a_bar_half_squared() {
        let ch = scalar_channel(0.5);
        let step = ch.discretize_with_delta(&[1.0], 2.0);
        assert!((step.a[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn log_domain_decay() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let ch = SelectiveSsmChannel::random(5, 4, 1.0, &mut rng);
            let u: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let step = ch.discretize(&u);
            // log Ā = -exp(a_log)
            let delta = (1.0
                + (ch.delta_proj.data().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + ch.delta_bias.data()[0])
                    .exp())
            .ln();
            assert!((step.delta - delta).abs() < 1e-12);
            for (a_t, a_log) in step.a.iter().zip(ch.a_log.data()) {
                assert!((a_t.ln() - delta * -(a_log.exp())).abs() <= 1e-12);
            }
            assert!(step.delta > 0.0);
            assert!(ch.a_bar().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = Rng::new(7);
        let ch = SelectiveSsmChannel::random(3, 4, 1.0, &mut rng);
        let sel = Tensor::randn(&[6, 3], 1.0, &mut rng);
        assert_eq!(ch.scan(&sel, &[0.0; 6]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn two_step_hand_unrolled() {
        let steps = vec![
            DiscreteStep {
                a: vec![0.5],
                b: vec![1.0],
                c: vec![1.0],
                delta: 1.0
            };
            2
        ];
        // x0 = 1, y0 = 1; x1 = 0.5 + 1, y1 = 1.5
        assert_eq!(recurrent_scan(&steps, &[1.0, 1.0]), vec![1.0, 1.5]);
    }

    #[test]
    fn scan_matches_closed_form_kernel_sum() {
        let mut rng = Rng::new(8);
        for &(len, n) in &[(1usize, 1usize), (16, 4), (64, 16)] {
            let ch = SelectiveSsmChannel::random(3, n, 1.0, &mut rng);
            let sel = Tensor::randn(&[len, 3], 1.0, &mut rng);
            let u: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            let steps = ch.steps(&sel).unwrap();
            let y = recurrent_scan(&steps, &u);
            for t in 0..len {
                let mut want = 0.0;
                for s in 0..=t {
                    for i in 0..n {
                        let prod: f64 = (s + 1..=t).map(|r| steps[r].a[i]).product();
                        want += steps[t].c[i] * prod * steps[s].b[i] * u[s];
                    }
                }
                assert!((y[t] - want).abs() <= 1e-10, "t={t}: {} vs {want}", y[t]);
            }
        }
    }

    #[test]
    fn conv_is_causal_and_k1_is_pointwise() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let b = Tensor::zeros(&[2]);
        let base = causal_depthwise_conv(&x, &w, &b);
        let mut x2 = x.clone();
        x2.set(3, 0, 10.0);
        let moved = causal_depthwise_conv(&x2, &w, &b);
        for t in 0..3 {
            assert_eq!(base.row(t), moved.row(t));
        }
        let id = causal_depthwise_conv(&x, &Tensor::ones(&[2, 1]), &b);
        assert_eq!(id, x);
    }
}
