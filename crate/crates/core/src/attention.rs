// SPDX-License-Identifier: MIT OR Apache-2.0

//! Materialized hidden attention.
//!
//! Unrolling a selective SSM gives an `L × L` lower-triangular kernel per
//! unit. Row `p` is the query (later) position and column `q` the key
//! (earlier) position:
//!
//! - Mamba-1, per channel: `M[p][q] = C(p) · (∏_{r=q+1..p} A(r)) · B(q)`
//! - SSD, per head: `M[p][q] = L[p][q] · (Q_p · K_q)`
//!
//! Evaluating a layer through these matrices reproduces the recurrent scan
//! exactly up to rounding, and gives a place to zero individual token pairs.

use serde::{Deserialize, Serialize};

use crate::archive::{DType, TensorArchive};
use crate::error::{Error, Result};
use crate::knockout::{apply_mask, KnockoutMask, SoftmaxKnockoutMode};
use crate::model::{Layer, ModelWeights};
use crate::numerics::{dot, Tensor};
use crate::ssm::{masked_attention_output, masked_scores, Mamba1Layer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitAxis {
    Channel,
    Head,
}

/// Per-unit `L × L` attention matrices of one layer, zero above the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub layer_index: usize,
    pub unit_axis: UnitAxis,
    /// `[units × L × L]`
    pub entries: Tensor,
}

impl AttentionTensor {
    pub fn units(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn get(&self, unit: usize, p: usize, q: usize) -> f64 {
        let l = self.seq_len();
        self.entries.data()[(unit * l + p) * l + q]
    }

    pub fn set(&mut self, unit: usize, p: usize, q: usize, v: f64) {
        let l = self.seq_len();
        self.entries.data_mut()[(unit * l + p) * l + q] = v;
    }

    /// Unit `u` as a `[L × L]` tensor.
    pub fn unit_matrix(&self, unit: usize) -> Tensor {
        let l = self.seq_len();
        let start = unit * l * l;
        Tensor::new(vec![l, l], self.entries.data()[start..start + l * l].to_vec()).expect("unit slice has L*L entries")
    }

    fn from_units(layer_index: usize, unit_axis: UnitAxis, mats: Vec<Tensor>) -> Result<Self> {
        let units = mats.len();
        let l = mats.first().map_or(0, Tensor::rows);
        let data = mats.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Self {
            layer_index,
            unit_axis,
            entries: Tensor::new(vec![units, l, l], data)?,
        })
    }

    /// Archive form for offline inspection: one `attention` tensor plus
    /// layer index and unit axis in the metadata.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive {
            metadata: serde_json::json!({
                "layer_index": self.layer_index,
                "unit_axis": self.unit_axis,
            }),
            ..Default::default()
        };
        a.tensors.insert("attention".into(), self.entries.clone());
        a
    }

    pub fn write_dump(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().write(path, DType::F64)
    }
}

/// Mamba-1 kernel for every channel, built from the discretized steps.
fn mamba1_kernels(layer: &Mamba1Layer, x: &Tensor) -> Result<Vec<Tensor>> {
    let z = layer.channel_inputs(x)?;
    let len = z.rows();
    layer
        .channels
        .iter()
        .map(|ch| {
            let steps = ch.steps(&z)?;
            let n = ch.state_dim();
            let mut m = Tensor::zeros(&[len, len]);
            for p in 0..len {
                let mut prod = vec![1.0; n];
                m.set(p, p, dot(&steps[p].c, &steps[p].b));
                for q in (0..p).rev() {
                    for (pr, a) in prod.iter_mut().zip(&steps[q + 1].a) {
                        *pr *= a;
                    }
                    let v: f64 = (0..n).map(|i| steps[p].c[i] * prod[i] * steps[q].b[i]).sum();
                    m.set(p, q, v);
                }
            }
            Ok(m)
        })
        .collect()
}

/// Builds the full per-unit attention tensor of `layer` on the normalized
/// input `x`. Softmax layers return their (unedited) attention weights.
pub fn materialize(layer_index: usize, layer: &Layer, x: &Tensor) -> Result<AttentionTensor> {
    match layer {
        Layer::Mamba1(l) => AttentionTensor::from_units(layer_index, UnitAxis::Channel, mamba1_kernels(l, x)?),
        Layer::Ssd(l) => {
            let mats = l.head_inputs(x)?.iter().map(masked_scores).collect();
            AttentionTensor::from_units(layer_index, UnitAxis::Head, mats)
        }
        Layer::Attention(l) => AttentionTensor::from_units(layer_index, UnitAxis::Head, l.attention_weights(x, None)?),
    }
}

/// Evaluates the layer's token mixer through `attn`, optionally after
/// knockout edits. Gate and skip paths are computed as usual.
pub fn forward_via_attention(
    layer: &Layer,
    x: &Tensor,
    attn: &AttentionTensor,
    edits: Option<&KnockoutMask>,
) -> Result<Tensor> {
    if attn.units() != layer.units() || attn.seq_len() != x.rows() {
        return Err(Error::Contract(format!(
            "attention tensor {:?} does not fit layer with {} units on {} tokens",
            attn.entries.shape(),
            layer.units(),
            x.rows()
        )));
    }
    let edited;
    let attn = match edits {
        Some(mask) => {
            edited = apply_mask(attn, mask);
            &edited
        }
        None => attn,
    };
    match layer {
        Layer::Mamba1(l) => {
            let z = l.channel_inputs(x)?;
            let len = z.rows();
            let mut y = Tensor::zeros(&[len, l.inner_dim()]);
            for u in 0..l.inner_dim() {
                for p in 0..len {
                    let v: f64 = (0..=p).map(|q| attn.get(u, p, q) * z.at(q, u)).sum();
                    y.set(p, u, v);
                }
            }
            l.finish(&y, l.gate(x)?.as_ref())
        }
        Layer::Ssd(l) => {
            let inputs = l.head_inputs(x)?;
            let outs = inputs
                .iter()
                .enumerate()
                .map(|(h, inp)| masked_attention_output(inp, &attn.unit_matrix(h)))
                .collect::<Result<Vec<_>>>()?;
            l.finish(&outs, &inputs)
        }
        Layer::Attention(l) => {
            let mut weights: Vec<Tensor> = (0..l.heads).map(|h| attn.unit_matrix(h)).collect();
            // zeroed weights renormalize exactly as -inf logits would
            if let Some(mask) = edits.filter(|m| m.softmax_mode == SoftmaxKnockoutMode::PreSoftmax) {
                for (h, w) in weights.iter_mut().enumerate() {
                    if mask.applies_to(h) {
                        renormalize_rows(w);
                    }
                }
            }
            l.mix_from_weights(x, &weights)
        }
    }
}

fn renormalize_rows(w: &mut Tensor) {
    for p in 0..w.rows() {
        let row = w.row_mut(p);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Per-layer outcome of [`dual_path_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPathReport {
    pub tolerance: f64,
    /// Max absolute deviation between the two paths, per layer.
    pub layer_deviation: Vec<f64>,
    pub passed: bool,
    /// Layer with the largest deviation beyond tolerance.
    pub worst_layer: Option<usize>,
}

/// Runs every layer through both the recurrent and the materialized path on
/// the same residual stream and compares the outputs.
pub fn dual_path_check(model: &ModelWeights, tokens: &[usize], tolerance: f64) -> Result<DualPathReport> {
    dual_path_check_with(model, tokens, tolerance, |_, _| {})
}

/// [`dual_path_check`] with a hook that may modify each materialized tensor
/// before it is evaluated (fault injection).
pub fn dual_path_check_with<F>(
    model: &ModelWeights,
    tokens: &[usize],
    tolerance: f64,
    mut tamper: F,
) -> Result<DualPathReport>
where
    F: FnMut(usize, &mut AttentionTensor),
{
    if tolerance <= 0.0 {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let mut deviation = Vec::with_capacity(model.num_layers());
    model.forward_with(tokens, |i, layer, x| {
        let recurrent = layer.mix(x)?;
        let mut attn = materialize(i, layer, x)?;
        tamper(i, &mut attn);
        let via = forward_via_attention(layer, x, &attn, None)?;
        deviation.push(recurrent.max_abs_diff(&via)?);
        Ok(recurrent)
    })?;
    let worst = deviation
        .iter()
        .enumerate()
        .filter(|(_, &d)| d.is_nan() || d > tolerance)
        .fold(None, |best: Option<(usize, f64)>, (i, &d)| match best {
            Some((_, bd)) if bd >= d => best,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i);
    Ok(DualPathReport {
        tolerance,
        passed: worst.is_none(),
        worst_layer: worst,
        layer_deviation: deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, ModelSpec};
    use crate::numerics::{silu, Rng};
    use crate::ssm::{Mamba1Config, SsdConfig};
    use crate::transformer::AttentionConfig;

    fn mamba1_layer(k: usize, seed: u64) -> Layer {
        let cfg = Mamba1Config {
            inner_dim: 4,
            state_dim: 3,
            conv_kernel: k,
            gated: true,
        };
        Layer::Mamba1(Mamba1Layer::random(&cfg, 5, 1.0, &mut Rng::new(seed)))
    }

    fn ssd_layer(seed: u64) -> Layer {
        let cfg = SsdConfig {
            heads: 3,
            state_dim: 4,
            head_dim: 2,
            skip: true,
        };
        Layer::Ssd(crate::ssm::SsdLayer::random(&cfg, 5, 1.0, &mut Rng::new(seed)))
    }

    #[test]
    fn single_token_diagonal_is_cb() {
        let layer = mamba1_layer(4, 1);
        let x = Tensor::randn(&[1, 5], 1.0, &mut Rng::new(2));
        let attn = materialize(0, &layer, &x).unwrap();
        let Layer::Mamba1(l) = &layer else { unreachable!() };
        let z = l.channel_inputs(&x).unwrap();
        for (u, ch) in l.channels.iter().enumerate() {
            let s = ch.discretize(z.row(0));
            assert_eq!(attn.get(u, 0, 0), dot(&s.c, &s.b));
        }
    }

    #[test]
    fn scalar_kernel_by_hand() {
        use crate::ssm::{recurrent_scan, DiscreteStep};
        // n=1, A=0.5, B=C=1: kernel [[1,0],[0.5,1]]; y = kernel · u
        let steps = vec![
            DiscreteStep {
                a: vec![0.5],
                b: vec![1.0],
                c: vec![1.0],
                delta: 1.0
            };
            2
        ];
        let y = recurrent_scan(&steps, &[1.0, 0.0]);
        assert_eq!(y, vec![1.0, 0.5]);
        let y = recurrent_scan(&steps, &[0.0, 1.0]);
        assert_eq!(y, vec![0.0, 1.0]);
    }

    #[test]
    fn kernel_equals_signal_sensitivity() {
        let layer = mamba1_layer(4, 3);
        let Layer::Mamba1(l) = &layer else { unreachable!() };
        let x = Tensor::randn(&[6, 5], 1.0, &mut Rng::new(4));
        let attn = materialize(0, &layer, &x).unwrap();
        let z = l.channel_inputs(&x).unwrap();
        let eps = 1e-6;
        for (u, ch) in l.channels.iter().enumerate() {
            let base = z.column(u);
            for q in 0..6 {
                let mut plus = base.clone();
                plus[q] += eps;
                let mut minus = base.clone();
                minus[q] -= eps;
                let yp = ch.scan(&z, &plus).unwrap();
                let ym = ch.scan(&z, &minus).unwrap();
                for p in q..6 {
                    let fd = (yp[p] - ym[p]) / (2.0 * eps);
                    assert!((fd - attn.get(u, p, q)).abs() <= 1e-6, "u{u} p{p} q{q}");
                }
            }
        }
    }

    #[test]
    fn attention_path_matches_recurrent_path() {
        let mut rng = Rng::new(5);
        for layer in [mamba1_layer(1, 6), mamba1_layer(4, 7), ssd_layer(8)] {
            let x = Tensor::randn(&[9, 5], 1.0, &mut rng);
            let attn = materialize(0, &layer, &x).unwrap();
            for u in 0..attn.units() {
                for p in 0..9 {
                    for q in p + 1..9 {
                        assert_eq!(attn.get(u, p, q), 0.0);
                    }
                }
            }
            let via = forward_via_attention(&layer, &x, &attn, None).unwrap();
            assert!(via.max_abs_diff(&layer.mix(&x).unwrap()).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn zero_kernel_leaves_only_skip_and_bias_paths() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        // Mamba-1: no skip path, so the whole output vanishes
        let layer = mamba1_layer(4, 10);
        let mut attn = materialize(0, &layer, &x).unwrap();
        attn.entries = Tensor::zeros(attn.entries.shape());
        let out = forward_via_attention(&layer, &x, &attn, None).unwrap();
        assert_eq!(out, Tensor::zeros(&[4, 5]));
        // SSD: only d·V remains
        let layer = ssd_layer(11);
        let Layer::Ssd(l) = &layer else { unreachable!() };
        let mut attn = materialize(0, &layer, &x).unwrap();
        attn.entries = Tensor::zeros(attn.entries.shape());
        let out = forward_via_attention(&layer, &x, &attn, None).unwrap();
        let inputs = l.head_inputs(&x).unwrap();
        let zeros: Vec<Tensor> = inputs.iter().map(|i| Tensor::zeros(i.v.shape())).collect();
        assert_eq!(out, l.finish(&zeros, &inputs).unwrap());
    }

    #[test]
    fn row_with_only_diagonal_keeps_self_term() {
        let layer = mamba1_layer(1, 12);
        let Layer::Mamba1(l) = &layer else { unreachable!() };
        let x = Tensor::randn(&[5, 5], 1.0, &mut Rng::new(13));
        let mut attn = materialize(0, &layer, &x).unwrap();
        for u in 0..attn.units() {
            for q in 0..4 {
                attn.set(u, 4, q, 0.0);
            }
        }
        let z = l.channel_inputs(&x).unwrap();
        let mut y = Tensor::zeros(&[5, 4]);
        for (u, ch) in l.channels.iter().enumerate() {
            let full = ch.scan(&z, &z.column(u)).unwrap();
            for p in 0..4 {
                y.set(p, u, full[p]);
            }
            let s = ch.discretize(z.row(4));
            y.set(4, u, dot(&s.c, &s.b) * z.at(4, u));
        }
        let want = l.finish(&y, l.gate(&x).unwrap().as_ref()).unwrap();
        let got = forward_via_attention(&layer, &x, &attn, None).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let layer = ssd_layer(14);
        let x = Tensor::randn(&[4, 5], 1.0, &mut Rng::new(15));
        let attn = materialize(0, &layer, &x).unwrap();
        let x5 = Tensor::randn(&[5, 5], 1.0, &mut Rng::new(16));
        assert!(matches!(
            forward_via_attention(&layer, &x5, &attn, None),
            Err(Error::Contract(_))
        ));
    }

    fn model(layer: LayerKind, seed: u64) -> ModelWeights {
        let spec = ModelSpec {
            vocab_size: 13,
            embed_dim: 6,
            num_layers: 3,
            layer,
            tied_unembedding: false,
            norm_eps: 1e-5,
        };
        ModelWeights::random(&spec, 1.0, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn dual_path_passes_and_detects_corruption() {
        let kinds = [
            LayerKind::Mamba1(Mamba1Config {
                inner_dim: 4,
                state_dim: 3,
                conv_kernel: 1,
                gated: true,
            }),
            LayerKind::Ssd(SsdConfig {
                heads: 2,
                state_dim: 3,
                head_dim: 3,
                skip: true,
            }),
            LayerKind::SoftmaxAttention(AttentionConfig {
                heads: 2,
                ff_dim: 8,
                max_positions: 40,
            }),
        ];
        let tokens: Vec<usize> = (0..32).map(|i| (i * 7) % 13).collect();
        for (i, kind) in kinds.into_iter().enumerate() {
            let m = model(kind, 20 + i as u64);
            let report = dual_path_check(&m, &tokens, 1e-10).unwrap();
            assert!(report.passed, "{report:?}");
            let report = dual_path_check_with(&m, &tokens, 1e-10, |layer, attn| {
                if layer == 1 {
                    let v = attn.get(0, 20, 3);
                    attn.set(0, 20, 3, v + 0.5);
                }
            })
            .unwrap();
            assert!(!report.passed);
            assert_eq!(report.worst_layer, Some(1));
        }
    }

    #[test]
    fn silu_conv_inputs_feed_kernel() {
        // k=1 conv with unit weight: channel inputs are silu(x · in_proj)
        let layer = mamba1_layer(1, 30);
        let Layer::Mamba1(mut l) = layer else { unreachable!() };
        l.conv_weight = Tensor::ones(&[4, 1]);
        l.conv_bias = Tensor::zeros(&[4]);
        let x = Tensor::randn(&[3, 5], 1.0, &mut Rng::new(31));
        let z = l.channel_inputs(&x).unwrap();
        assert_eq!(z, x.matmul(&l.in_proj).unwrap().map(silu));
    }
}
