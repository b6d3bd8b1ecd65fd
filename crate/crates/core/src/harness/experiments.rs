// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::records::{PromptRecord, SourceCategory};
use crate::knockout::{knocked_forward, relative_change, FeatureScope, KnockoutSpec, SoftmaxKnockoutMode};
use crate::model::{final_argmax, final_token_probability, Layer, ModelWeights};

/// Keeps records whose final-position argmax equals the answer token.
pub fn filter_correct(model: &ModelWeights, records: &[PromptRecord]) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for r in records {
        if final_argmax(&model.forward(&r.token_ids)?) == r.answer_token {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Records correctly predicted by every model, in input order.
pub fn filter_correct_all(models: &[&ModelWeights], records: &[PromptRecord]) -> Result<Vec<PromptRecord>> {
    let mut keep = records.to_vec();
    for m in models {
        keep = filter_correct(m, &keep)?;
    }
    Ok(keep)
}

/// A model and a fixed record set with per-record baseline probabilities
/// computed once and reused by every experiment.
pub struct Session<'a> {
    pub model: &'a ModelWeights,
    pub model_id: String,
    pub dataset_id: String,
    pub softmax_mode: SoftmaxKnockoutMode,
    records: Vec<PromptRecord>,
    baselines: Vec<f64>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Session<'a> {
    /// `workers <= 1` evaluates everything on the calling thread.
    pub fn new(model: &'a ModelWeights, records: Vec<PromptRecord>, workers: usize) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        let mut session = Self {
            model,
            model_id: String::new(),
            dataset_id: String::new(),
            softmax_mode: SoftmaxKnockoutMode::default(),
            records,
            baselines: Vec::new(),
            pool,
        };
        let idx: Vec<usize> = (0..session.records.len()).collect();
        session.baselines = session.map(&idx, |&i| {
            let r = &session.records[i];
            final_token_probability(&model.forward(&r.token_ids)?, r.answer_token)
        })?;
        Ok(session)
    }

    pub fn with_ids(mut self, model_id: impl Into<String>, dataset_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self.dataset_id = dataset_id.into();
        self
    }

    pub fn with_softmax_mode(mut self, mode: SoftmaxKnockoutMode) -> Self {
        self.softmax_mode = mode;
        self
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn baselines(&self) -> &[f64] {
        &self.baselines
    }

    fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    /// Order-preserving map, parallel when a pool exists.
    fn map<J: Sync, T: Send>(&self, jobs: &[J], f: impl Fn(&J) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        match &self.pool {
            Some(pool) => pool.install(|| jobs.par_iter().map(&f).collect()),
            None => jobs.iter().map(f).collect(),
        }
    }

    /// Gold-token probability of record `i` under `spec`.
    pub fn knocked_probability(&self, i: usize, spec: &KnockoutSpec) -> Result<f64> {
        let r = &self.records[i];
        let logits = knocked_forward(self.model, &r.token_ids, spec)?;
        final_token_probability(&logits, r.answer_token)
    }

    fn source_to_last(
        &self,
        i: usize,
        first_layer: usize,
        window: usize,
        sources: impl IntoIterator<Item = usize>,
        scope: &FeatureScope,
    ) -> KnockoutSpec {
        let last = self.records[i].last();
        KnockoutSpec::new(first_layer, window, sources.into_iter().filter(|&s| s <= last), [last])
            .with_scope(scope.clone())
            .with_softmax_mode(self.softmax_mode)
    }

    fn check_window(&self, window_size: usize) -> Result<()> {
        if window_size == 0 || window_size > self.num_layers() {
            return Err(Error::Config(format!(
                "window size {window_size} must lie in 1..={}",
                self.num_layers()
            )));
        }
        Ok(())
    }

    fn sweep(&self, window_size: usize, categories: &[SourceCategory], scope: &FeatureScope) -> Result<SweepResult> {
        self.check_window(window_size)?;
        let starts = self.num_layers() - window_size + 1;
        let mut jobs = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            for &c in categories {
                for f in 0..starts {
                    jobs.push((i, c, f, r));
                }
            }
        }
        let values = self.map(&jobs, |&(i, c, f, r)| {
            let p_base = self.baselines[i];
            let (p_ko, change_pct) = if p_base > 0.0 {
                let spec = self.source_to_last(i, f, window_size, c.positions(r), scope);
                let p = self.knocked_probability(i, &spec)?;
                (Some(p), Some(relative_change(p_base, p)?))
            } else {
                (None, None)
            };
            Ok(RawValue {
                record_id: r.id.clone(),
                category: c,
                first_layer: f,
                p_base,
                p_ko,
                change_pct,
            })
        })?;
        Ok(SweepResult::from_raw(
            self.model_id.clone(),
            self.dataset_id.clone(),
            window_size,
            self.num_layers(),
            scope.label().to_string(),
            categories,
            values,
        ))
    }

    /// Knocks each category's positions out of the last token over every
    /// window start.
    pub fn info_flow_sweep(&self, window_size: usize, categories: &[SourceCategory]) -> Result<SweepResult> {
        self.sweep(window_size, categories, &FeatureScope::All)
    }

    pub fn window_size_study(&self, sizes: &[usize], categories: &[SourceCategory]) -> Result<Vec<SweepResult>> {
        if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > self.num_layers()) {
            return Err(Error::Config(format!(
                "window size {bad} must lie in 1..={}",
                self.num_layers()
            )));
        }
        sizes.iter().map(|&s| self.info_flow_sweep(s, categories)).collect()
    }

    /// Subject → last knockout restricted to all / context-dependent /
    /// context-independent units.
    pub fn feature_knockout_study(&self, window_size: usize) -> Result<[SweepResult; 3]> {
        if self.model.layers.iter().any(|l| matches!(l, Layer::Attention(_))) {
            return Err(Error::Config("feature knockout needs an SSM model".into()));
        }
        let cats = [SourceCategory::Subject];
        Ok([
            self.sweep(window_size, &cats, &FeatureScope::All)?,
            self.sweep(window_size, &cats, &FeatureScope::ContextDependent)?,
            self.sweep(window_size, &cats, &FeatureScope::ContextIndependent)?,
        ])
    }

    /// Per-source-token knockout into the last token for one record; rows
    /// are source positions, columns window starts.
    pub fn knockout_heatmap(&self, record: usize, window_size: usize) -> Result<Heatmap> {
        self.check_window(window_size)?;
        let r = self
            .records
            .get(record)
            .ok_or_else(|| Error::Input(format!("no record {record}")))?;
        let p_base = self.baselines[record];
        if p_base.is_nan() || p_base <= 0.0 {
            return Err(Error::UndefinedBaseline(p_base));
        }
        let starts = self.num_layers() - window_size + 1;
        let jobs: Vec<(usize, usize)> = (0..r.len()).flat_map(|s| (0..starts).map(move |f| (s, f))).collect();
        let flat = self.map(&jobs, |&(s, f)| {
            let spec = self.source_to_last(record, f, window_size, [s], &FeatureScope::All);
            relative_change(p_base, self.knocked_probability(record, &spec)?)
        })?;
        Ok(Heatmap {
            record_id: r.id.clone(),
            labels: r
                .token_labels
                .clone()
                .unwrap_or_else(|| r.token_ids.iter().map(|t| t.to_string()).collect()),
            window_size,
            first_layers: (0..starts).collect(),
            values: flat.chunks(starts).map(<[f64]>::to_vec).collect(),
            p_base,
        })
    }

    /// `(p_base, p_ko)` per record after cutting the last token from itself
    /// in the final `window` layers.
    pub fn last_token_scatter(&self, window: usize) -> Result<Vec<ScatterPoint>> {
        if window > self.num_layers() {
            return Err(Error::Config(format!(
                "window {window} exceeds {} layers",
                self.num_layers()
            )));
        }
        let first = self.num_layers() - window;
        let idx: Vec<usize> = (0..self.records.len()).collect();
        self.map(&idx, |&i| {
            let last = self.records[i].last();
            let spec = self.source_to_last(i, first, window, [last], &FeatureScope::All);
            Ok(ScatterPoint {
                record_id: self.records[i].id.clone(),
                p_base: self.baselines[i],
                p_ko: self.knocked_probability(i, &spec)?,
            })
        })
    }
}

/// One (record, category, window start) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawValue {
    pub record_id: String,
    pub category: SourceCategory,
    pub first_layer: usize,
    pub p_base: f64,
    pub p_ko: Option<f64>,
    /// `None` when the record was skipped for a zero baseline.
    pub change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub category: SourceCategory,
    pub first_layer: usize,
    pub relative_depth: f64,
    /// `None` when every record was skipped.
    pub mean_change_pct: Option<f64>,
    pub n: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub model_id: String,
    pub dataset_id: String,
    pub window_size: usize,
    pub num_layers: usize,
    pub scope: String,
    pub points: Vec<SweepPoint>,
    /// Sorted by `(record_id, category, first_layer)`.
    pub raw: Vec<RawValue>,
}

impl SweepResult {
    fn from_raw(
        model_id: String,
        dataset_id: String,
        window_size: usize,
        num_layers: usize,
        scope: String,
        categories: &[SourceCategory],
        mut raw: Vec<RawValue>,
    ) -> Self {
        raw.sort_by(|a, b| (&a.record_id, a.category, a.first_layer).cmp(&(&b.record_id, b.category, b.first_layer)));
        let mut acc: BTreeMap<(SourceCategory, usize), (f64, usize, usize)> = BTreeMap::new();
        for v in &raw {
            let e = acc.entry((v.category, v.first_layer)).or_insert((0.0, 0, 0));
            match v.change_pct {
                Some(c) => {
                    e.0 += c;
                    e.1 += 1;
                }
                None => e.2 += 1,
            }
        }
        let starts = num_layers + 1 - window_size;
        let mut points = Vec::new();
        for &c in categories {
            for f in 0..starts {
                let (sum, n, skipped) = acc.get(&(c, f)).copied().unwrap_or((0.0, 0, 0));
                points.push(SweepPoint {
                    category: c,
                    first_layer: f,
                    relative_depth: f as f64 / num_layers as f64,
                    mean_change_pct: (n > 0).then(|| sum / n as f64),
                    n,
                    skipped,
                });
            }
        }
        Self {
            model_id,
            dataset_id,
            window_size,
            num_layers,
            scope,
            points,
            raw,
        }
    }

    /// Mean curve of one category, ordered by window start.
    pub fn curve(&self, category: SourceCategory) -> Vec<Option<f64>> {
        self.points
            .iter()
            .filter(|p| p.category == category)
            .map(|p| p.mean_change_pct)
            .collect()
    }

    pub fn categories(&self) -> Vec<SourceCategory> {
        let mut out: Vec<SourceCategory> = Vec::new();
        for p in &self.points {
            if !out.contains(&p.category) {
                out.push(p.category);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub record_id: String,
    pub labels: Vec<String>,
    pub window_size: usize,
    pub first_layers: Vec<usize>,
    /// `values[source][window start]`, relative change in percent.
    pub values: Vec<Vec<f64>>,
    pub p_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub record_id: String,
    pub p_base: f64,
    pub p_ko: f64,
}
