// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm causal softmax-attention block used as the Transformer baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knockout::{KnockoutMask, SoftmaxKnockoutMode};
use crate::numerics::{dot, gelu, rms_norm, softmax_in_place, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub ff_dim: usize,
    /// Size of the learned absolute position table.
    pub max_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub heads: usize,
    /// `[H]`
    pub norm: Tensor,
    /// `[H × H]`, head `h` owns columns `h·d..(h+1)·d`.
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    /// `[H × H]`
    pub o_proj: Tensor,
    /// `[H]`
    pub norm_ff: Tensor,
    /// `[H × F]`
    pub ff_in: Tensor,
    /// `[F]`
    pub ff_in_bias: Tensor,
    /// `[F × H]`
    pub ff_out: Tensor,
    /// `[H]`
    pub ff_out_bias: Tensor,
}

impl AttentionLayer {
    pub fn zeros(cfg: &AttentionConfig, embed_dim: usize) -> Self {
        let (h, f) = (embed_dim, cfg.ff_dim);
        Self {
            heads: cfg.heads,
            norm: Tensor::ones(&[h]),
            q_proj: Tensor::zeros(&[h, h]),
            k_proj: Tensor::zeros(&[h, h]),
            v_proj: Tensor::zeros(&[h, h]),
            o_proj: Tensor::zeros(&[h, h]),
            norm_ff: Tensor::ones(&[h]),
            ff_in: Tensor::zeros(&[h, f]),
            ff_in_bias: Tensor::zeros(&[f]),
            ff_out: Tensor::zeros(&[f, h]),
            ff_out_bias: Tensor::zeros(&[h]),
        }
    }

    pub fn random(cfg: &AttentionConfig, embed_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let (h, f) = (embed_dim, cfg.ff_dim);
        let std_h = scale / (h as f64).sqrt();
        let std_f = scale / (f as f64).sqrt();
        Self {
            heads: cfg.heads,
            norm: Tensor::ones(&[h]),
            q_proj: Tensor::randn(&[h, h], std_h, rng),
            k_proj: Tensor::randn(&[h, h], std_h, rng),
            v_proj: Tensor::randn(&[h, h], std_h, rng),
            o_proj: Tensor::randn(&[h, h], std_h, rng),
            norm_ff: Tensor::ones(&[h]),
            ff_in: Tensor::randn(&[h, f], std_h, rng),
            ff_in_bias: Tensor::zeros(&[f]),
            ff_out: Tensor::randn(&[f, h], std_f, rng),
            ff_out_bias: Tensor::zeros(&[h]),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.q_proj.rows() / self.heads
    }

    /// Per-head attention weights `[L × L]` for the normalized input, with
    /// knockout edits applied.
    pub fn attention_weights(&self, x: &Tensor, edits: Option<&KnockoutMask>) -> Result<Vec<Tensor>> {
        let (len, d) = (x.rows(), self.head_dim());
        let q = x.matmul(&self.q_proj)?;
        let k = x.matmul(&self.k_proj)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * d..(h + 1) * d;
            let mut w = Tensor::filled(&[len, len], f64::NEG_INFINITY);
            for p in 0..len {
                for s in 0..=p {
                    w.set(p, s, dot(&q.row(p)[cols.clone()], &k.row(s)[cols.clone()]) * scale);
                }
            }
            let edit = edits.filter(|m| m.applies_to(h));
            let pre = edit.filter(|m| m.softmax_mode == SoftmaxKnockoutMode::PreSoftmax);
            if let Some(m) = pre {
                for &(target, source) in &m.pairs {
                    if target < len && source <= target {
                        w.set(target, source, f64::NEG_INFINITY);
                    }
                }
            }
            for p in 0..len {
                softmax_in_place(w.row_mut(p))?;
            }
            if let Some(m) = edit.filter(|m| m.softmax_mode == SoftmaxKnockoutMode::PostSoftmax) {
                for &(target, source) in &m.pairs {
                    if target < len && source <= target {
                        w.set(target, source, 0.0);
                    }
                }
            }
            out.push(w);
        }
        Ok(out)
    }

    /// Concatenated per-head `weights · V` followed by `o_proj`.
    pub fn mix_from_weights(&self, x: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
        if weights.len() != self.heads {
            return Err(Error::Contract(format!(
                "{} attention maps for {} heads",
                weights.len(),
                self.heads
            )));
        }
        let v = x.matmul(&self.v_proj)?;
        let (len, d) = (x.rows(), self.head_dim());
        let mut cat = Tensor::zeros(&[len, self.q_proj.rows()]);
        for (h, w) in weights.iter().enumerate() {
            let vh = v.column_block(h * d, (h + 1) * d);
            let zh = w.matmul(&vh)?;
            for t in 0..len {
                cat.row_mut(t)[h * d..(h + 1) * d].copy_from_slice(zh.row(t));
            }
        }
        cat.matmul(&self.o_proj)
    }

    /// Token-mixing sub-block on the normalized input.
    pub fn attend(&self, x: &Tensor, edits: Option<&KnockoutMask>) -> Result<Tensor> {
        let weights = self.attention_weights(x, edits)?;
        self.mix_from_weights(x, &weights)
    }

    /// Feed-forward sub-block on the normalized input.
    pub fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut hidden = x.matmul(&self.ff_in)?;
        let f = hidden.cols();
        for row in hidden.data_mut().chunks_mut(f) {
            for (v, b) in row.iter_mut().zip(self.ff_in_bias.data()) {
                *v = gelu(*v + b);
            }
        }
        let mut out = hidden.matmul(&self.ff_out)?;
        let h = out.cols();
        for row in out.data_mut().chunks_mut(h) {
            for (v, b) in row.iter_mut().zip(self.ff_out_bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub(crate) fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("norm".into(), &self.norm),
            ("q_proj".into(), &self.q_proj),
            ("k_proj".into(), &self.k_proj),
            ("v_proj".into(), &self.v_proj),
            ("o_proj".into(), &self.o_proj),
            ("norm_ff".into(), &self.norm_ff),
            ("ff_in".into(), &self.ff_in),
            ("ff_in_bias".into(), &self.ff_in_bias),
            ("ff_out".into(), &self.ff_out),
            ("ff_out_bias".into(), &self.ff_out_bias),
        ]
    }

    pub(crate) fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("norm".into(), &mut self.norm),
            ("q_proj".into(), &mut self.q_proj),
            ("k_proj".into(), &mut self.k_proj),
            ("v_proj".into(), &mut self.v_proj),
            ("o_proj".into(), &mut self.o_proj),
            ("norm_ff".into(), &mut self.norm_ff),
            ("ff_in".into(), &mut self.ff_in),
            ("ff_in_bias".into(), &mut self.ff_in_bias),
            ("ff_out".into(), &mut self.ff_out),
            ("ff_out_bias".into(), &mut self.ff_out_bias),
        ]
    }
}

/// Full pre-norm block on the residual stream `h`: attention (with optional
/// knockout edits) then feed-forward, each with its residual add.
pub fn attention_layer_forward(
    layer: &AttentionLayer,
    h: &Tensor,
    edits: Option<&KnockoutMask>,
    eps: f64,
) -> Result<Tensor> {
    let mut out = h.add(&layer.attend(&rms_norm(h, &layer.norm, eps)?, edits)?)?;
    let ff = layer.feed_forward(&rms_norm(&out, &layer.norm_ff, eps)?)?;
    out.add_assign(&ff)?;
    Ok(out)
}
