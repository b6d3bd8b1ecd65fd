// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softplus, Rng, Tensor};

fn default_true() -> bool {
    true
}

/// Hyperparameters of a Mamba-2 / SSD style mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsdConfig {
    pub heads: usize,
    /// Query/key width per head.
    pub state_dim: usize,
    /// Value width per head.
    pub head_dim: usize,
    /// Adds `skip_d · V` per head.
    #[serde(default = "default_true")]
    pub skip: bool,
}

/// Masked linear attention with a scalar decay per head:
///
/// ```text
/// Y_h = (L_h ∘ Q_h K_hᵀ) V_h + d_h V_h
/// L_h[p, q] = ∏_{t=q+1..p} a_t,   a_t = exp(-exp(a_log_h) Δ_h(t))
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsdLayer {
    pub heads: usize,
    pub state_dim: usize,
    pub head_dim: usize,
    pub use_skip: bool,
    /// `[H]` pre-norm gain.
    pub norm: Tensor,
    /// `[H × heads·N]`, head `h` owns columns `h·N..(h+1)·N`.
    pub q_proj: Tensor,
    /// `[H × heads·N]`
    pub k_proj: Tensor,
    /// `[H × heads·P]`
    pub v_proj: Tensor,
    /// `[H × heads]`
    pub delta_proj: Tensor,
    /// `[heads]`
    pub delta_bias: Tensor,
    /// `[heads]`
    pub a_log: Tensor,
    /// `[heads]`
    pub skip_d: Tensor,
    /// `[heads·P × H]`
    pub out_proj: Tensor,
}

/// Per-head projections for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs {
    /// `[L × N]`
    pub q: Tensor,
    /// `[L × N]`
    pub k: Tensor,
    /// `[L × P]`
    pub v: Tensor,
    /// `log a_t = -exp(a_log) Δ(t)`
    pub log_a: Vec<f64>,
    pub delta: Vec<f64>,
}

impl HeadInputs {
    pub fn len(&self) -> usize {
        self.log_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_a.is_empty()
    }

    /// Lower-triangular decay mask `L[p, q] = ∏_{t=q+1..p} a_t`.
    pub fn mask(&self) -> Tensor {
        let len = self.len();
        let a: Vec<f64> = self.log_a.iter().map(|l| l.exp()).collect();
        let mut mask = Tensor::zeros(&[len, len]);
        for p in 0..len {
            let mut prod = 1.0;
            mask.set(p, p, 1.0);
            for q in (0..p).rev() {
                prod *= a[q + 1];
                mask.set(p, q, prod);
            }
        }
        mask
    }

    /// `x_p = a_p x_{p-1} + K_pᵀ ⊗ V_p`, `Y_p = Q_p · x_p`.
    pub fn scan(&self) -> Tensor {
        let (len, n, p_dim) = (self.len(), self.q.cols(), self.v.cols());
        let mut state = vec![0.0; n * p_dim];
        let mut out = Tensor::zeros(&[len, p_dim]);
        for t in 0..len {
            let a = self.log_a[t].exp();
            let (k, v, q) = (self.k.row(t), self.v.row(t), self.q.row(t));
            for i in 0..n {
                let srow = &mut state[i * p_dim..(i + 1) * p_dim];
                for (s, &vj) in srow.iter_mut().zip(v) {
                    *s = a * *s + k[i] * vj;
                }
            }
            let orow = out.row_mut(t);
            for i in 0..n {
                let srow = &state[i * p_dim..(i + 1) * p_dim];
                for (o, &s) in orow.iter_mut().zip(srow) {
                    *o += q[i] * s;
                }
            }
        }
        out
    }
}

impl SsdLayer {
    pub fn zeros(cfg: &SsdConfig, embed_dim: usize) -> Self {
        let (h, n, p) = (cfg.heads, cfg.state_dim, cfg.head_dim);
        Self {
            heads: h,
            state_dim: n,
            head_dim: p,
            use_skip: cfg.skip,
            norm: Tensor::ones(&[embed_dim]),
            q_proj: Tensor::zeros(&[embed_dim, h * n]),
            k_proj: Tensor::zeros(&[embed_dim, h * n]),
            v_proj: Tensor::zeros(&[embed_dim, h * p]),
            delta_proj: Tensor::zeros(&[embed_dim, h]),
            delta_bias: Tensor::zeros(&[h]),
            a_log: Tensor::zeros(&[h]),
            skip_d: Tensor::zeros(&[h]),
            out_proj: Tensor::zeros(&[h * p, embed_dim]),
        }
    }

    /// Random layer. Head decays are spread evenly so that `Ā` runs from
    /// slow (≈0.95) to fast (≈0.05) across heads.
    pub fn random(cfg: &SsdConfig, embed_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let (h, n, p) = (cfg.heads, cfg.state_dim, cfg.head_dim);
        let in_std = scale / (embed_dim as f64).sqrt();
        let a_log = (0..h)
            .map(|i| {
                let frac = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.5 };
                (0.05f64).ln() + frac * ((3.0f64).ln() - (0.05f64).ln())
            })
            .collect();
        Self {
            heads: h,
            state_dim: n,
            head_dim: p,
            use_skip: cfg.skip,
            norm: Tensor::ones(&[embed_dim]),
            q_proj: Tensor::randn(&[embed_dim, h * n], in_std, rng),
            k_proj: Tensor::randn(&[embed_dim, h * n], in_std, rng),
            v_proj: Tensor::randn(&[embed_dim, h * p], in_std, rng),
            delta_proj: Tensor::randn(&[embed_dim, h], in_std, rng),
            delta_bias: Tensor::uniform(&[h], -0.5, 0.5, rng),
            a_log: Tensor::vector(a_log),
            skip_d: Tensor::ones(&[h]),
            out_proj: Tensor::randn(&[h * p, embed_dim], scale / ((h * p) as f64).sqrt(), rng),
        }
    }

    pub fn config(&self) -> SsdConfig {
        SsdConfig {
            heads: self.heads,
            state_dim: self.state_dim,
            head_dim: self.head_dim,
            skip: self.use_skip,
        }
    }

    /// Per-head `Ā = exp(-exp(a_log))`.
    pub fn a_bar(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|a| (-a.exp()).exp()).collect()
    }

    /// Projects the normalized input `[L × H]` into per-head Q, K, V and
    /// log-decays.
    pub fn head_inputs(&self, x: &Tensor) -> Result<Vec<HeadInputs>> {
        if x.cols() != self.q_proj.rows() {
            return Err(Error::Dimension(format!(
                "SSD layer of width {} given input width {}",
                self.q_proj.rows(),
                x.cols()
            )));
        }
        let q = x.matmul(&self.q_proj)?;
        let k = x.matmul(&self.k_proj)?;
        let v = x.matmul(&self.v_proj)?;
        let dt_raw = x.matmul(&self.delta_proj)?;
        let (n, p) = (self.state_dim, self.head_dim);
        Ok((0..self.heads)
            .map(|h| {
                let rate = self.a_log.data()[h].exp();
                let delta: Vec<f64> = (0..x.rows())
                    .map(|t| softplus(dt_raw.at(t, h) + self.delta_bias.data()[h]))
                    .collect();
                HeadInputs {
                    q: q.column_block(h * n, (h + 1) * n),
                    k: k.column_block(h * n, (h + 1) * n),
                    v: v.column_block(h * p, (h + 1) * p),
                    log_a: delta.iter().map(|d| -rate * d).collect(),
                    delta,
                }
            })
            .collect())
    }

    /// Adds the skip term, concatenates heads and applies `out_proj`.
    pub fn finish(&self, head_outputs: &[Tensor], inputs: &[HeadInputs]) -> Result<Tensor> {
        if head_outputs.len() != self.heads || inputs.len() != self.heads {
            return Err(Error::Contract(format!(
                "expected {} heads, got {} outputs",
                self.heads,
                head_outputs.len()
            )));
        }
        let len = head_outputs[0].rows();
        let p = self.head_dim;
        let mut cat = Tensor::zeros(&[len, self.heads * p]);
        for (h, (y, inp)) in head_outputs.iter().zip(inputs).enumerate() {
            let d = if self.use_skip { self.skip_d.data()[h] } else { 0.0 };
            for t in 0..len {
                let row = &mut cat.row_mut(t)[h * p..(h + 1) * p];
                for ((o, &yv), &vv) in row.iter_mut().zip(y.row(t)).zip(inp.v.row(t)) {
                    *o = yv + d * vv;
                }
            }
        }
        cat.matmul(&self.out_proj)
    }

    /// Recurrent-path forward of the (already normalized) input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let inputs = self.head_inputs(x)?;
        let outs: Vec<Tensor> = inputs.iter().map(HeadInputs::scan).collect();
        self.finish(&outs, &inputs)
    }

    pub(crate) fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("norm".into(), &self.norm),
            ("q_proj".into(), &self.q_proj),
            ("k_proj".into(), &self.k_proj),
            ("v_proj".into(), &self.v_proj),
            ("delta_proj".into(), &self.delta_proj),
            ("delta_bias".into(), &self.delta_bias),
            ("a_log".into(), &self.a_log),
            ("skip_d".into(), &self.skip_d),
            ("out_proj".into(), &self.out_proj),
        ]
    }

    pub(crate) fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("norm".into(), &mut self.norm),
            ("q_proj".into(), &mut self.q_proj),
            ("k_proj".into(), &mut self.k_proj),
            ("v_proj".into(), &mut self.v_proj),
            ("delta_proj".into(), &mut self.delta_proj),
            ("delta_bias".into(), &mut self.delta_bias),
            ("a_log".into(), &mut self.a_log),
            ("skip_d".into(), &mut self.skip_d),
            ("out_proj".into(), &mut self.out_proj),
        ]
    }
}

/// Direct evaluation of `(L ∘ QKᵀ) V` for one head.
pub(crate) fn masked_attention_output(inp: &HeadInputs, weights: &Tensor) -> Result<Tensor> {
    if weights.rows() != inp.len() || weights.cols() != inp.len() {
        return Err(Error::Contract(format!(
            "attention of shape {:?} for sequence length {}",
            weights.shape(),
            inp.len()
        )));
    }
    weights.matmul(&inp.v)
}

/// `(L ∘ QKᵀ)` for one head, lower triangular.
pub(crate) fn masked_scores(inp: &HeadInputs) -> Tensor {
    let mask = inp.mask();
    let len = inp.len();
    let mut out = Tensor::zeros(&[len, len]);
    for p in 0..len {
        for q in 0..=p {
            out.set(p, q, mask.at(p, q) * dot(inp.q.row(p), inp.k.row(q)));
        }
    }
    out
}
