// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{causal_depthwise_conv, SelectiveSsmChannel};
use crate::error::{Error, Result};
use crate::numerics::{silu, Rng, Tensor};

fn default_conv_kernel() -> usize {
    4
}

fn default_true() -> bool {
    true
}

/// Hyperparameters of a Mamba-1 style mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mamba1Config {
    /// Number of channels `D` (each carries its own SSM).
    pub inner_dim: usize,
    pub state_dim: usize,
    /// Depthwise conv width; 1 removes cross-token mixing outside the SSM.
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    /// When false the SiLU gate branch is dropped (gate ≡ 1).
    #[serde(default = "default_true")]
    pub gated: bool,
}

/// in_proj → causal depthwise conv → SiLU → per-channel selective scan →
/// SiLU gate → out_proj.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mamba1Layer {
    /// `[H]` pre-norm gain applied by the model before this mixer.
    pub norm: Tensor,
    /// `[H × D]`
    pub in_proj: Tensor,
    /// `[D × k]`
    pub conv_weight: Tensor,
    /// `[D]`
    pub conv_bias: Tensor,
    /// `[H × D]`, absent when the layer is ungated.
    pub gate_proj: Option<Tensor>,
    pub channels: Vec<SelectiveSsmChannel>,
    /// `[D × H]`
    pub out_proj: Tensor,
}

impl Mamba1Layer {
    pub fn zeros(cfg: &Mamba1Config, embed_dim: usize) -> Self {
        let d = cfg.inner_dim;
        Self {
            norm: Tensor::ones(&[embed_dim]),
            in_proj: Tensor::zeros(&[embed_dim, d]),
            conv_weight: Tensor::zeros(&[d, cfg.conv_kernel]),
            conv_bias: Tensor::zeros(&[d]),
            gate_proj: cfg.gated.then(|| Tensor::zeros(&[embed_dim, d])),
            channels: (0..d).map(|_| SelectiveSsmChannel::zeros(d, cfg.state_dim)).collect(),
            out_proj: Tensor::zeros(&[d, embed_dim]),
        }
    }

    pub fn random(cfg: &Mamba1Config, embed_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let d = cfg.inner_dim;
        let in_std = scale / (embed_dim as f64).sqrt();
        let inner_std = scale / (d as f64).sqrt();
        Self {
            norm: Tensor::ones(&[embed_dim]),
            in_proj: Tensor::randn(&[embed_dim, d], in_std, rng),
            conv_weight: Tensor::randn(&[d, cfg.conv_kernel], 1.0 / cfg.conv_kernel as f64, rng),
            conv_bias: Tensor::randn(&[d], 0.1, rng),
            gate_proj: cfg.gated.then(|| Tensor::randn(&[embed_dim, d], in_std, rng)),
            channels: (0..d)
                .map(|_| SelectiveSsmChannel::random(d, cfg.state_dim, 1.0, rng))
                .collect(),
            out_proj: Tensor::randn(&[d, embed_dim], inner_std, rng),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.channels.len()
    }

    pub fn conv_kernel(&self) -> usize {
        self.conv_weight.cols()
    }

    /// Channel signals after in_proj, conv and SiLU (`[L × D]`). Row `t` is
    /// also the selection input that drives `B(t)`, `C(t)`, `Δ(t)`.
    pub fn channel_inputs(&self, x: &Tensor) -> Result<Tensor> {
        let projected = x.matmul(&self.in_proj)?;
        Ok(causal_depthwise_conv(&projected, &self.conv_weight, &self.conv_bias).map(silu))
    }

    /// SiLU gate values (`[L × D]`), if the layer is gated.
    pub fn gate(&self, x: &Tensor) -> Result<Option<Tensor>> {
        self.gate_proj.as_ref().map(|g| Ok(x.matmul(g)?.map(silu))).transpose()
    }

    /// Applies the gate and output projection to the stacked SSM outputs.
    pub fn finish(&self, ssm_out: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        let gated = match gate {
            Some(g) => ssm_out.zip_map(g, |y, g| y * g)?,
            None => ssm_out.clone(),
        };
        gated.matmul(&self.out_proj)
    }

    /// Per-channel recurrent scan over precomputed channel inputs.
    pub fn scan_channels(&self, z: &Tensor) -> Result<Tensor> {
        let (len, d) = (z.rows(), z.cols());
        if d != self.inner_dim() {
            return Err(Error::Contract(format!(
                "{d} channel inputs for a layer with {} channels",
                self.inner_dim()
            )));
        }
        let mut out = Tensor::zeros(&[len, d]);
        for (c, channel) in self.channels.iter().enumerate() {
            let y = channel.scan(z, &z.column(c))?;
            for (t, v) in y.into_iter().enumerate() {
                out.set(t, c, v);
            }
        }
        Ok(out)
    }

    /// Recurrent-path forward of the (already normalized) input `[L × H]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.channel_inputs(x)?;
        let y = self.scan_channels(&z)?;
        self.finish(&y, self.gate(x)?.as_ref())
    }

    pub(crate) fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("norm".to_string(), &self.norm),
            ("in_proj".to_string(), &self.in_proj),
            ("conv_weight".to_string(), &self.conv_weight),
            ("conv_bias".to_string(), &self.conv_bias),
        ];
        if let Some(g) = &self.gate_proj {
            out.push(("gate_proj".to_string(), g));
        }
        for (c, ch) in self.channels.iter().enumerate() {
            out.push((format!("channels.{c}.a_log"), &ch.a_log));
            out.push((format!("channels.{c}.b_proj"), &ch.b_proj));
            out.push((format!("channels.{c}.c_proj"), &ch.c_proj));
            out.push((format!("channels.{c}.delta_proj"), &ch.delta_proj));
            out.push((format!("channels.{c}.delta_bias"), &ch.delta_bias));
        }
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    pub(crate) fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("norm".to_string(), &mut self.norm),
            ("in_proj".to_string(), &mut self.in_proj),
            ("conv_weight".to_string(), &mut self.conv_weight),
            ("conv_bias".to_string(), &mut self.conv_bias),
        ];
        if let Some(g) = &mut self.gate_proj {
            out.push(("gate_proj".to_string(), g));
        }
        for (c, ch) in self.channels.iter_mut().enumerate() {
            out.push((format!("channels.{c}.a_log"), &mut ch.a_log));
            out.push((format!("channels.{c}.b_proj"), &mut ch.b_proj));
            out.push((format!("channels.{c}.c_proj"), &mut ch.c_proj));
            out.push((format!("channels.{c}.delta_proj"), &mut ch.delta_proj));
            out.push((format!("channels.{c}.delta_bias"), &mut ch.delta_bias));
        }
        out.push(("out_proj".to_string(), &mut self.out_proj));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, gated: bool) -> Mamba1Config {
        Mamba1Config {
            inner_dim: 4,
            state_dim: 3,
            conv_kernel: k,
            gated,
        }
    }

    #[test]
    fn zero_weights_zero_output() {
        let layer = Mamba1Layer::zeros(&cfg(4, true), 4);
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        assert_eq!(layer.forward(&x).unwrap(), Tensor::zeros(&[5, 4]));
    }

    #[test]
    fn wiring_reduces_to_stacked_scans() {
        let mut rng = Rng::new(2);
        let mut layer = Mamba1Layer::random(&cfg(1, false), 4, 1.0, &mut rng);
        layer.in_proj = Tensor::identity(4);
        layer.out_proj = Tensor::identity(4);
        layer.conv_weight = Tensor::ones(&[4, 1]);
        layer.conv_bias = Tensor::zeros(&[4]);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let z = x.map(silu);
        let out = layer.forward(&x).unwrap();
        for (c, ch) in layer.channels.iter().enumerate() {
            let y = ch.scan(&z, &z.column(c)).unwrap();
            assert_eq!(out.column(c), y);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(3);
        let layer = Mamba1Layer::random(&cfg(4, true), 4, 1.0, &mut rng);
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let a = layer.forward(&x).unwrap();
        let b = layer.forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn forward_is_causal() {
        let mut rng = Rng::new(4);
        let layer = Mamba1Layer::random(&cfg(4, true), 4, 1.0, &mut rng);
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let base = layer.forward(&x).unwrap();
        for s in 0..8 {
            let mut x2 = x.clone();
            x2.row_mut(s)[1] += 0.5;
            let moved = layer.forward(&x2).unwrap();
            for t in 0..s {
                assert_eq!(base.row(t), moved.row(t));
            }
        }
    }
}
