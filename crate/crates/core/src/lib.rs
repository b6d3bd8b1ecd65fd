// SPDX-License-Identifier: MIT OR Apache-2.0

//! # ssmko
//!
//! Selective state-space sequence layers (Mamba-1 style channels and
//! Mamba-2/SSD style heads) with two evaluation paths: the recurrent scan and
//! the materialized hidden-attention matrix. On top of the attention view sit
//! token-pair attention knockout and decay-classified feature knockout, a
//! compact softmax-attention baseline, a synthetic factual-recall trainer
//! with hand-written gradients, and an experiment harness that measures how
//! knockouts change the probability of the correct answer.
//!
//! ```
//! use ssmko::{KnockoutSpec, LayerKind, ModelSpec, ModelWeights, Rng, SsdConfig};
//!
//! let spec = ModelSpec {
//!     vocab_size: 16,
//!     embed_dim: 8,
//!     num_layers: 2,
//!     layer: LayerKind::Ssd(SsdConfig { heads: 2, state_dim: 4, head_dim: 4, skip: true }),
//!     tied_unembedding: false,
//!     norm_eps: 1e-5,
//! };
//! let model = ModelWeights::random(&spec, 1.0, &mut Rng::new(0)).unwrap();
//! let tokens = [0, 3, 5, 7];
//! // cut the flow from positions 1..=2 into the last token in both layers
//! let spec = KnockoutSpec::new(0, 2, [1, 2], [3]);
//! let logits = ssmko::knocked_forward(&model, &tokens, &spec).unwrap();
//! assert_eq!(logits.shape(), &[4, 16]);
//! ```

pub mod archive;
pub mod attention;
pub mod checks;
pub mod error;
pub mod harness;
pub mod knockout;
pub mod model;
pub mod numerics;
pub mod ssm;
pub mod trainer;
pub mod transformer;

pub use attention::{
    dual_path_check, dual_path_check_with, forward_via_attention, materialize, AttentionTensor, DualPathReport,
    UnitAxis,
};
pub use error::{Error, Result};
pub use knockout::{
    apply_knockout, classify_features, classify_scores, knocked_forward, relative_change, FeatureClassification,
    FeatureScope, KnockoutMask, KnockoutSpec, SoftmaxKnockoutMode,
};
pub use model::{model_forward, Layer, LayerKind, ModelSpec, ModelWeights};
pub use numerics::{Rng, Tensor};
pub use ssm::{Mamba1Config, Mamba1Layer, SelectiveSsmChannel, SsdConfig, SsdLayer};
pub use transformer::{attention_layer_forward, AttentionConfig, AttentionLayer};
