// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention knockout and feature knockout.
//!
//! A [`KnockoutSpec`] names a contiguous window of layers, a set of source
//! positions and a set of target positions. Inside the window, every
//! `(target, source)` entry of the hidden-attention matrix is zeroed for the
//! units in scope, and the layer is evaluated through the materialized path.
//! Layers outside the window run the plain recurrent path. Softmax layers
//! instead mask the pair with `-inf` before normalization (or zero it after,
//! see [`SoftmaxKnockoutMode`]).
//!
//! Feature scopes select units by their decay norm `‖Ā‖₁`: the largest third
//! are context-dependent (slow decay), the smallest third
//! context-independent (fast decay).

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{forward_via_attention, materialize, AttentionTensor};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelWeights};
use crate::numerics::Tensor;

/// How knockout is applied to softmax attention rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxKnockoutMode {
    /// Logit set to `-inf`; the remaining weights renormalize.
    #[default]
    PreSoftmax,
    /// Weight zeroed after softmax; the row no longer sums to one.
    PostSoftmax,
}

/// Which units of a layer an edit touches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScope {
    #[default]
    All,
    ContextDependent,
    ContextIndependent,
    Units(BTreeSet<usize>),
}

impl FeatureScope {
    pub fn label(&self) -> &'static str {
        match self {
            FeatureScope::All => "all",
            FeatureScope::ContextDependent => "context_dependent",
            FeatureScope::ContextIndependent => "context_independent",
            FeatureScope::Units(_) => "units",
        }
    }

    /// Per-unit selection flags, or `None` for every unit.
    pub fn resolve(&self, layer: &Layer) -> Result<Option<Vec<bool>>> {
        let units = layer.units();
        let pick = |set: &[usize]| {
            let mut flags = vec![false; units];
            for &u in set {
                flags[u] = true;
            }
            flags
        };
        Ok(match self {
            FeatureScope::All => None,
            FeatureScope::ContextDependent => Some(pick(&classify_features(layer)?.context_dependent)),
            FeatureScope::ContextIndependent => Some(pick(&classify_features(layer)?.context_independent)),
            FeatureScope::Units(set) => {
                if let Some(&bad) = set.iter().find(|&&u| u >= units) {
                    return Err(Error::Spec(format!("unit {bad} outside {units} units")));
                }
                Some(pick(&set.iter().copied().collect::<Vec<_>>()))
            }
        })
    }
}

/// Declarative knockout intervention. Serializes to a flat JSON object, e.g.
///
/// ```json
/// {"first_layer": 2, "window_size": 9, "sources": [1, 2], "targets": [7],
///  "scope": "context_dependent", "softmax_mode": "pre_softmax"}
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutSpec {
    pub first_layer: usize,
    pub window_size: usize,
    pub sources: BTreeSet<usize>,
    pub targets: BTreeSet<usize>,
    #[serde(default)]
    pub scope: FeatureScope,
    #[serde(default)]
    pub softmax_mode: SoftmaxKnockoutMode,
}

impl KnockoutSpec {
    pub fn new(
        first_layer: usize,
        window_size: usize,
        sources: impl IntoIterator<Item = usize>,
        targets: impl IntoIterator<Item = usize>,
    ) -> Self {
        Self {
            first_layer,
            window_size,
            sources: sources.into_iter().collect(),
            targets: targets.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn with_scope(mut self, scope: FeatureScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_softmax_mode(mut self, mode: SoftmaxKnockoutMode) -> Self {
        self.softmax_mode = mode;
        self
    }

    pub fn layers(&self) -> Range<usize> {
        self.first_layer..self.first_layer + self.window_size
    }

    pub fn covers(&self, layer: usize) -> bool {
        self.layers().contains(&layer)
    }

    pub fn is_noop(&self) -> bool {
        self.window_size == 0 || self.sources.is_empty() || self.targets.is_empty()
    }

    /// Every edited `(target, source)` pair.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.targets
            .iter()
            .flat_map(|&c| self.sources.iter().filter(move |&&r| r <= c).map(move |&r| (c, r)))
            .collect()
    }

    pub fn validate(&self, num_layers: usize, seq_len: usize) -> Result<()> {
        if self.first_layer + self.window_size > num_layers || (self.window_size > 0 && self.first_layer >= num_layers)
        {
            return Err(Error::Spec(format!(
                "window {:?} outside {num_layers} layers",
                self.layers()
            )));
        }
        if let Some(&p) = self.sources.iter().chain(&self.targets).find(|&&p| p >= seq_len) {
            return Err(Error::Spec(format!(
                "position {p} outside sequence of {seq_len} tokens"
            )));
        }
        if let (Some(&max_src), Some(&min_tgt)) = (self.sources.last(), self.targets.first()) {
            if max_src > min_tgt {
                return Err(Error::Spec(format!("source {max_src} comes after target {min_tgt}")));
            }
        }
        Ok(())
    }

    /// Resolves the spec against one layer.
    pub fn mask_for_layer(&self, layer: &Layer) -> Result<KnockoutMask> {
        Ok(KnockoutMask {
            pairs: self.pairs(),
            units: self.scope.resolve(layer)?,
            softmax_mode: self.softmax_mode,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A spec resolved for one layer: the pairs to cut and the units to cut them in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnockoutMask {
    /// `(target, source)` with `source <= target`.
    pub pairs: Vec<(usize, usize)>,
    /// `None` selects every unit.
    pub units: Option<Vec<bool>>,
    pub softmax_mode: SoftmaxKnockoutMode,
}

impl KnockoutMask {
    pub fn applies_to(&self, unit: usize) -> bool {
        self.units
            .as_ref()
            .is_none_or(|u| u.get(unit).copied().unwrap_or(false))
    }
}

/// Zeroes the masked entries in a copy of `attn`.
pub fn apply_mask(attn: &AttentionTensor, mask: &KnockoutMask) -> AttentionTensor {
    let mut out = attn.clone();
    let len = attn.seq_len();
    for u in (0..attn.units()).filter(|&u| mask.applies_to(u)) {
        for &(c, r) in &mask.pairs {
            if c < len && r <= c {
                out.set(u, c, r, 0.0);
            }
        }
    }
    out
}

/// Units of one layer split into thirds by `‖Ā‖₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureClassification {
    /// Score per unit, indexed by unit.
    pub scores: Vec<f64>,
    /// Units by descending score, ties by ascending index.
    pub order: Vec<usize>,
    /// Top third (slow decay).
    pub context_dependent: Vec<usize>,
    pub middle: Vec<usize>,
    /// Bottom third (fast decay).
    pub context_independent: Vec<usize>,
}

/// Sorts units by descending score and cuts `floor(n/3)` from each end.
pub fn classify_scores(scores: &[f64]) -> Result<FeatureClassification> {
    if scores.len() < 3 {
        return Err(Error::Classification(format!(
            "need at least 3 units, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Classification("NaN decay score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let third = scores.len() / 3;
    let n = scores.len();
    Ok(FeatureClassification {
        scores: scores.to_vec(),
        context_dependent: order[..third].to_vec(),
        middle: order[third..n - third].to_vec(),
        context_independent: order[n - third..].to_vec(),
        order,
    })
}

/// Decay scores are `Σ|Ā|` over state dims per Mamba-1 channel and `|Ā|` per
/// SSD head. Softmax layers have no decay and cannot be classified.
pub fn classify_features(layer: &Layer) -> Result<FeatureClassification> {
    let scores: Vec<f64> = match layer {
        Layer::Mamba1(l) => l
            .channels
            .iter()
            .map(|c| c.a_bar().iter().map(|a| a.abs()).sum())
            .collect(),
        Layer::Ssd(l) => l.a_bar().iter().map(|a| a.abs()).collect(),
        Layer::Attention(_) => {
            return Err(Error::Classification(
                "softmax attention has no decay parameters".into(),
            ))
        }
    };
    classify_scores(&scores)
}

/// Edits `attn` according to `spec`. The classification is only consulted
/// for decay-based scopes; pass `None` to derive nothing (scope must then be
/// `All` or explicit units).
pub fn apply_knockout(
    attn: &AttentionTensor,
    spec: &KnockoutSpec,
    classification: Option<&FeatureClassification>,
) -> Result<AttentionTensor> {
    if !spec.covers(attn.layer_index) {
        return Err(Error::Spec(format!(
            "layer {} is outside window {:?}",
            attn.layer_index,
            spec.layers()
        )));
    }
    let len = attn.seq_len();
    if let Some(&p) = spec.sources.iter().chain(&spec.targets).find(|&&p| p >= len) {
        return Err(Error::Spec(format!("position {p} outside {len} tokens")));
    }
    let units = attn.units();
    let flags = |set: &[usize]| {
        let mut f = vec![false; units];
        for &u in set {
            f[u] = true;
        }
        Some(f)
    };
    let need_class = || {
        classification
            .ok_or_else(|| Error::Classification(format!("scope {} needs a classification", spec.scope.label())))
    };
    let selected = match &spec.scope {
        FeatureScope::All => None,
        FeatureScope::ContextDependent => flags(&need_class()?.context_dependent),
        FeatureScope::ContextIndependent => flags(&need_class()?.context_independent),
        FeatureScope::Units(set) => {
            if let Some(&bad) = set.iter().find(|&&u| u >= units) {
                return Err(Error::Spec(format!("unit {bad} outside {units} units")));
            }
            flags(&set.iter().copied().collect::<Vec<_>>())
        }
    };
    Ok(apply_mask(
        attn,
        &KnockoutMask {
            pairs: spec.pairs(),
            units: selected,
            softmax_mode: spec.softmax_mode,
        },
    ))
}

/// Forward pass with the knockout applied to every layer in the window.
pub fn knocked_forward(model: &ModelWeights, tokens: &[usize], spec: &KnockoutSpec) -> Result<Tensor> {
    spec.validate(model.num_layers(), tokens.len())?;
    if spec.is_noop() {
        return model.forward(tokens);
    }
    model.forward_with(tokens, |i, layer, x| {
        if !spec.covers(i) {
            return layer.mix(x);
        }
        let mask = spec.mask_for_layer(layer)?;
        match layer {
            Layer::Attention(a) => a.attend(x, Some(&mask)),
            _ => {
                let attn = materialize(i, layer, x)?;
                forward_via_attention(layer, x, &attn, Some(&mask))
            }
        }
    })
}

/// `100 · (p_ko − p_base) / p_base`.
pub fn relative_change(p_base: f64, p_ko: f64) -> Result<f64> {
    if p_base.is_nan() || p_base <= 0.0 {
        return Err(Error::UndefinedBaseline(p_base));
    }
    Ok(100.0 * (p_ko - p_base) / p_base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::UnitAxis;
    use crate::numerics::Rng;
    use crate::ssm::{Mamba1Config, Mamba1Layer};
    use proptest::prelude::*;

    fn ones_attention(units: usize, len: usize, layer_index: usize) -> AttentionTensor {
        let mut entries = Tensor::zeros(&[units, len, len]);
        for u in 0..units {
            for p in 0..len {
                for q in 0..=p {
                    entries.data_mut()[(u * len + p) * len + q] = 1.0;
                }
            }
        }
        AttentionTensor {
            layer_index,
            unit_axis: UnitAxis::Channel,
            entries,
        }
    }

    #[test]
    fn thirds_from_sorted_scores() {
        let c = classify_scores(&[0.9, 0.8, 0.5, 0.4, 0.2, 0.1]).unwrap();
        assert_eq!(c.context_dependent, vec![0, 1]);
        assert_eq!(c.middle, vec![2, 3]);
        assert_eq!(c.context_independent, vec![4, 5]);
    }

    #[test]
    fn ties_break_by_index() {
        let c = classify_scores(&[0.5; 6]).unwrap();
        assert_eq!(c.context_dependent, vec![0, 1]);
        assert_eq!(c.middle, vec![2, 3]);
        assert_eq!(c.context_independent, vec![4, 5]);
    }

    #[test]
    fn seven_units_floor_rule() {
        let c = classify_scores(&[0.1, 0.7, 0.3, 0.9, 0.5, 0.2, 0.6]).unwrap();
        assert_eq!(c.context_dependent.len(), 2);
        assert_eq!(c.middle.len(), 3);
        assert_eq!(c.context_independent.len(), 2);
        assert_eq!(c.context_dependent, vec![3, 1]);
        assert_eq!(c.context_independent, vec![5, 0]);
    }

    #[test]
    fn too_few_units() {
        assert!(matches!(classify_scores(&[0.1, 0.2]), Err(Error::Classification(_))));
    }

    #[test]
    fn mamba1_scores_are_l1_of_a_bar() {
        let cfg = Mamba1Config {
            inner_dim: 6,
            state_dim: 4,
            conv_kernel: 1,
            gated: false,
        };
        let l = Mamba1Layer::random(&cfg, 4, 1.0, &mut Rng::new(1));
        let c = classify_features(&Layer::Mamba1(l.clone())).unwrap();
        for (u, ch) in l.channels.iter().enumerate() {
            assert_eq!(c.scores[u], ch.a_bar().iter().sum::<f64>());
        }
    }

    #[test]
    fn empty_source_set_is_identity() {
        let attn = ones_attention(3, 5, 0);
        let spec = KnockoutSpec::new(0, 1, [], [4]);
        assert_eq!(apply_knockout(&attn, &spec, None).unwrap(), attn);
    }

    #[test]
    fn full_last_row_zeroing() {
        let attn = ones_attention(3, 5, 2);
        let spec = KnockoutSpec::new(1, 2, 0..5, [4]);
        let out = apply_knockout(&attn, &spec, None).unwrap();
        for u in 0..3 {
            for q in 0..5 {
                assert_eq!(out.get(u, 4, q), 0.0);
            }
            for p in 0..4 {
                for q in 0..=p {
                    assert_eq!(out.get(u, p, q), 1.0);
                }
            }
        }
    }

    #[test]
    fn dependent_scope_touches_only_top_third() {
        let class = classify_scores(&[0.9, 0.8, 0.5, 0.4, 0.2, 0.1]).unwrap();
        let mut rng = Rng::new(2);
        let mut attn = ones_attention(6, 4, 0);
        let noise: Vec<f64> = (0..attn.entries.len()).map(|_| rng.normal()).collect();
        for (v, n) in attn.entries.data_mut().iter_mut().zip(noise) {
            *v *= n;
        }
        let spec = KnockoutSpec::new(0, 1, [0, 1], [3]).with_scope(FeatureScope::ContextDependent);
        let out = apply_knockout(&attn, &spec, Some(&class)).unwrap();
        for u in 0..6 {
            let changed = (0..4).any(|p| (0..4).any(|q| out.get(u, p, q).to_bits() != attn.get(u, p, q).to_bits()));
            assert_eq!(changed, u < 2, "unit {u}");
        }
    }

    #[test]
    fn window_must_cover_layer() {
        let attn = ones_attention(3, 4, 5);
        let spec = KnockoutSpec::new(0, 2, [0], [3]);
        assert!(matches!(apply_knockout(&attn, &spec, None), Err(Error::Spec(_))));
        let spec = KnockoutSpec::new(5, 1, [0], [9]);
        assert!(matches!(apply_knockout(&attn, &spec, None), Err(Error::Spec(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(KnockoutSpec::new(0, 3, [1], [4]).validate(3, 5).is_ok());
        assert!(KnockoutSpec::new(1, 3, [1], [4]).validate(3, 5).is_err());
        assert!(KnockoutSpec::new(0, 1, [5], [5]).validate(3, 5).is_err());
        assert!(KnockoutSpec::new(0, 1, [3], [2]).validate(3, 5).is_err());
        assert!(KnockoutSpec::new(3, 0, [1], [4]).validate(3, 5).is_ok());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = KnockoutSpec::new(2, 9, [1, 2], [7])
            .with_scope(FeatureScope::Units([0, 3].into_iter().collect()))
            .with_softmax_mode(SoftmaxKnockoutMode::PostSoftmax);
        let json = spec.to_json().unwrap();
        assert_eq!(
            json,
            r#"{"first_layer":2,"window_size":9,"sources":[1,2],"targets":[7],"scope":{"units":[0,3]},"softmax_mode":"post_softmax"}"#
        );
        assert_eq!(KnockoutSpec::from_json(&json).unwrap(), spec);
        let minimal =
            KnockoutSpec::from_json(r#"{"first_layer":0,"window_size":1,"sources":[0],"targets":[1]}"#).unwrap();
        assert_eq!(minimal.scope, FeatureScope::All);
    }

    #[test]
    fn relative_change_examples() {
        assert!((relative_change(0.4, 0.1).unwrap() + 75.0).abs() < 1e-12);
        assert_eq!(relative_change(0.3, 0.3).unwrap(), 0.0);
        assert!((relative_change(0.2, 0.5).unwrap() - 150.0).abs() < 1e-12);
        assert!(matches!(relative_change(0.0, 0.5), Err(Error::UndefinedBaseline(_))));
    }

    proptest! {
        #[test]
        fn enlarging_sources_never_edits_fewer(len in 2usize..8, a in proptest::collection::btree_set(0usize..8, 0..6), extra in proptest::collection::btree_set(0usize..8, 0..6)) {
            let target = len - 1;
            let small: BTreeSet<usize> = a.into_iter().filter(|&s| s <= target).collect();
            let large: BTreeSet<usize> = small.iter().copied().chain(extra.into_iter().filter(|&s| s <= target)).collect();
            let attn = ones_attention(2, len, 0);
            let zeros = |srcs: &BTreeSet<usize>| {
                let spec = KnockoutSpec { first_layer: 0, window_size: 1, sources: srcs.clone(), targets: [target].into_iter().collect(), ..Default::default() };
                let out = apply_knockout(&attn, &spec, None).unwrap();
                out.entries.data().iter().zip(attn.entries.data()).filter(|(o, i)| **o == 0.0 && **i != 0.0).count()
            };
            prop_assert!(zeros(&large) >= zeros(&small));
        }
    }
}
