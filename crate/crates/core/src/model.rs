// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model configuration, parameters and the residual-stream forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rms_norm, Rng, Tensor};
use crate::ssm::{Mamba1Config, Mamba1Layer, SsdConfig, SsdLayer};
use crate::transformer::{AttentionConfig, AttentionLayer};

/// Which token mixer every layer of a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Mamba1(Mamba1Config),
    Ssd(SsdConfig),
    SoftmaxAttention(AttentionConfig),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Mamba1(_) => "mamba1",
            LayerKind::Ssd(_) => "ssd",
            LayerKind::SoftmaxAttention(_) => "softmax_attention",
        }
    }
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub layer: LayerKind,
    #[serde(default)]
    pub tied_unembedding: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.embed_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "num_layers, embed_dim and vocab_size must be positive".into(),
            ));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        match self.layer {
            LayerKind::Mamba1(c) => {
                if c.inner_dim == 0 || c.state_dim == 0 || c.conv_kernel == 0 {
                    return Err(Error::Config("mamba1 dimensions must be positive".into()));
                }
            }
            LayerKind::Ssd(c) => {
                if c.heads == 0 || c.state_dim == 0 || c.head_dim == 0 {
                    return Err(Error::Config("ssd dimensions must be positive".into()));
                }
            }
            LayerKind::SoftmaxAttention(c) => {
                if c.heads == 0 || self.embed_dim % c.heads != 0 {
                    return Err(Error::Config(format!(
                        "embed_dim {} not divisible by {} heads",
                        self.embed_dim, c.heads
                    )));
                }
                if c.ff_dim == 0 || c.max_positions == 0 {
                    return Err(Error::Config("attention dimensions must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of knockout units (channels or heads) per layer.
    pub fn units_per_layer(&self) -> usize {
        match self.layer {
            LayerKind::Mamba1(c) => c.inner_dim,
            LayerKind::Ssd(c) => c.heads,
            LayerKind::SoftmaxAttention(c) => c.heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Mamba1(Mamba1Layer),
    Ssd(SsdLayer),
    Attention(AttentionLayer),
}

impl Layer {
    fn zeros(kind: &LayerKind, embed_dim: usize) -> Self {
        match kind {
            LayerKind::Mamba1(c) => Layer::Mamba1(Mamba1Layer::zeros(c, embed_dim)),
            LayerKind::Ssd(c) => Layer::Ssd(SsdLayer::zeros(c, embed_dim)),
            LayerKind::SoftmaxAttention(c) => Layer::Attention(AttentionLayer::zeros(c, embed_dim)),
        }
    }

    fn random(kind: &LayerKind, embed_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        match kind {
            LayerKind::Mamba1(c) => Layer::Mamba1(Mamba1Layer::random(c, embed_dim, scale, rng)),
            LayerKind::Ssd(c) => Layer::Ssd(SsdLayer::random(c, embed_dim, scale, rng)),
            LayerKind::SoftmaxAttention(c) => Layer::Attention(AttentionLayer::random(c, embed_dim, scale, rng)),
        }
    }

    /// Gain of the norm applied before the token mixer.
    pub fn norm(&self) -> &Tensor {
        match self {
            Layer::Mamba1(l) => &l.norm,
            Layer::Ssd(l) => &l.norm,
            Layer::Attention(l) => &l.norm,
        }
    }

    /// Token mixer on the normalized input, recurrent (unedited) path.
    pub fn mix(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Mamba1(l) => l.forward(x),
            Layer::Ssd(l) => l.forward(x),
            Layer::Attention(l) => l.attend(x, None),
        }
    }

    pub fn units(&self) -> usize {
        match self {
            Layer::Mamba1(l) => l.inner_dim(),
            Layer::Ssd(l) => l.heads,
            Layer::Attention(l) => l.heads,
        }
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Layer::Mamba1(l) => l.named_params(),
            Layer::Ssd(l) => l.named_params(),
            Layer::Attention(l) => l.named_params(),
        }
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Layer::Mamba1(l) => l.named_params_mut(),
            Layer::Ssd(l) => l.named_params_mut(),
            Layer::Attention(l) => l.named_params_mut(),
        }
    }
}

/// All parameters of a model. Immutable during evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    /// `[V × H]`
    pub embed: Tensor,
    /// `[max_positions × H]`, softmax-attention models only.
    pub positions: Option<Tensor>,
    pub layers: Vec<Layer>,
    /// `[H]`
    pub final_norm: Tensor,
    /// `[H × V]`; `None` when tied to `embedᵀ`.
    pub unembed: Option<Tensor>,
}

impl ModelWeights {
    /// Zero mixers, unit norm gains, zero embeddings.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (v, h) = (spec.vocab_size, spec.embed_dim);
        Ok(Self {
            spec: spec.clone(),
            embed: Tensor::zeros(&[v, h]),
            positions: match spec.layer {
                LayerKind::SoftmaxAttention(c) => Some(Tensor::zeros(&[c.max_positions, h])),
                _ => None,
            },
            layers: (0..spec.num_layers).map(|_| Layer::zeros(&spec.layer, h)).collect(),
            final_norm: Tensor::ones(&[h]),
            unembed: (!spec.tied_unembedding).then(|| Tensor::zeros(&[h, v])),
        })
    }

    /// Random initialization; `scale` multiplies every mixer projection.
    pub fn random(spec: &ModelSpec, scale: f64, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (v, h) = (spec.vocab_size, spec.embed_dim);
        Ok(Self {
            spec: spec.clone(),
            embed: Tensor::randn(&[v, h], 1.0, rng),
            positions: match spec.layer {
                LayerKind::SoftmaxAttention(c) => Some(Tensor::randn(&[c.max_positions, h], 0.1, rng)),
                _ => None,
            },
            layers: (0..spec.num_layers)
                .map(|_| Layer::random(&spec.layer, h, scale, rng))
                .collect(),
            final_norm: Tensor::ones(&[h]),
            unembed: (!spec.tied_unembedding).then(|| Tensor::randn(&[h, v], 1.0 / (h as f64).sqrt(), rng)),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token (plus position) embeddings, `[L × H]`.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let h = self.spec.embed_dim;
        let mut out = Tensor::zeros(&[tokens.len(), h]);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= self.spec.vocab_size {
                return Err(Error::Input(format!(
                    "token {tok} at position {t} outside vocabulary of {}",
                    self.spec.vocab_size
                )));
            }
            out.row_mut(t).copy_from_slice(self.embed.row(tok));
            if let Some(pos) = &self.positions {
                if t >= pos.rows() {
                    return Err(Error::Input(format!(
                        "sequence length {} exceeds {} positions",
                        tokens.len(),
                        pos.rows()
                    )));
                }
                for (o, p) in out.row_mut(t).iter_mut().zip(pos.row(t)) {
                    *o += p;
                }
            }
        }
        Ok(out)
    }

    /// Final norm and unembedding of a residual stream `[L × H]`.
    pub fn unembed(&self, h: &Tensor) -> Result<Tensor> {
        let normed = rms_norm(h, &self.final_norm, self.spec.norm_eps)?;
        match &self.unembed {
            Some(u) => normed.matmul(u),
            None => normed.matmul(&self.embed.transpose()),
        }
    }

    /// Forward pass where `mixer(layer_index, layer, normalized_input)`
    /// supplies each layer's token-mixing output. Residual adds, norms and
    /// the feed-forward sub-block of attention layers are applied here.
    pub fn forward_with<F>(&self, tokens: &[usize], mut mixer: F) -> Result<Tensor>
    where
        F: FnMut(usize, &Layer, &Tensor) -> Result<Tensor>,
    {
        let eps = self.spec.norm_eps;
        let mut h = self.embed_tokens(tokens)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let x = rms_norm(&h, layer.norm(), eps)?;
            h.add_assign(&mixer(i, layer, &x)?)?;
            if let Layer::Attention(a) = layer {
                h.add_assign(&a.feed_forward(&rms_norm(&h, &a.norm_ff, eps)?)?)?;
            }
        }
        self.unembed(&h)
    }

    /// Next-token logits at every position, `[L × V]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_with(tokens, |_, layer, x| layer.mix(x))
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        if let Some(p) = &self.positions {
            out.push(("positions".into(), p));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(u) = &self.unembed {
            out.push(("unembed".into(), u));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        if let Some(p) = &mut self.positions {
            out.push(("positions".into(), p));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_params_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(u) = &mut self.unembed {
            out.push(("unembed".into(), u));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `embed → (norm → mixer → residual) × layers → norm → unembed`.
pub fn model_forward(weights: &ModelWeights, tokens: &[usize]) -> Result<Tensor> {
    weights.forward(tokens)
}

/// Softmax probability of `token` at the final position.
pub fn final_token_probability(logits: &Tensor, token: usize) -> Result<f64> {
    let last = logits
        .rows()
        .checked_sub(1)
        .ok_or_else(|| Error::Input("empty logits".into()))?;
    let mut row = logits.row(last).to_vec();
    if token >= row.len() {
        return Err(Error::Input(format!("answer token {token} outside vocabulary")));
    }
    crate::numerics::softmax_in_place(&mut row)?;
    Ok(row[token])
}

/// Argmax of the final-position logits (lowest index on ties).
pub fn final_argmax(logits: &Tensor) -> usize {
    let row = logits.row(logits.rows() - 1);
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn specs() -> Vec<ModelSpec> {
        let base = |layer| ModelSpec {
            vocab_size: 11,
            embed_dim: 6,
            num_layers: 2,
            layer,
            tied_unembedding: false,
            norm_eps: 1e-5,
        };
        vec![
            base(LayerKind::Mamba1(Mamba1Config {
                inner_dim: 4,
                state_dim: 3,
                conv_kernel: 4,
                gated: true,
            })),
            base(LayerKind::Ssd(SsdConfig {
                heads: 2,
                state_dim: 3,
                head_dim: 3,
                skip: true,
            })),
            base(LayerKind::SoftmaxAttention(AttentionConfig {
                heads: 2,
                ff_dim: 8,
                max_positions: 16,
            })),
        ]
    }

    #[test]
    fn zero_layers_pass_embedding_through() {
        for spec in specs() {
            let mut rng = Rng::new(1);
            let mut w = ModelWeights::zeros(&spec).unwrap();
            w.embed = Tensor::randn(&[11, 6], 1.0, &mut rng);
            w.unembed = Some(Tensor::randn(&[6, 11], 1.0, &mut rng));
            let logits = w.forward(&[3]).unwrap();
            let want = w.unembed(&w.embed_tokens(&[3]).unwrap()).unwrap();
            assert_eq!(logits, want, "{}", spec.layer.name());
        }
    }

    #[test]
    fn prefix_logits_unchanged_by_suffix() {
        for spec in specs() {
            let w = ModelWeights::random(&spec, 1.0, &mut Rng::new(2)).unwrap();
            let short = w.forward(&[1, 4, 2]).unwrap();
            let long = w.forward(&[1, 4, 2, 7, 9]).unwrap();
            for t in 0..3 {
                assert_eq!(short.row(t), long.row(t), "{}", spec.layer.name());
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        for spec in specs() {
            let w = ModelWeights::random(&spec, 1.0, &mut Rng::new(3)).unwrap();
            let a = w.forward(&[0, 5, 10, 3]).unwrap();
            let b = w.forward(&[0, 5, 10, 3]).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let w = ModelWeights::random(&specs()[1], 1.0, &mut Rng::new(4)).unwrap();
        assert!(matches!(w.forward(&[0, 11]), Err(Error::Input(_))));
    }

    #[test]
    fn tied_unembedding_uses_embed_transpose() {
        let mut spec = specs()[1].clone();
        spec.tied_unembedding = true;
        let w = ModelWeights::random(&spec, 1.0, &mut Rng::new(5)).unwrap();
        assert!(w.unembed.is_none());
        assert_eq!(w.forward(&[2, 3]).unwrap().cols(), 11);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = specs()[2].clone();
        spec.embed_dim = 7;
        assert!(spec.validate().is_err());
        let mut spec = specs()[0].clone();
        spec.num_layers = 0;
        assert!(spec.validate().is_err());
    }
}
