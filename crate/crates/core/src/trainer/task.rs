// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic (subject, relation) → attribute recall task.
//!
//! Vocabulary layout: `0 = <bos>`, `1 = <q>`, then the subject word pool,
//! the relation word pool and the attribute tokens. A prompt is
//! `[<bos>, subject words.., relation words.., <q>]` and the gold next token
//! is the fact's attribute.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::PromptRecord;
use crate::numerics::Rng;

pub const BOS: usize = 0;
pub const QUERY: usize = 1;

fn default_max_len() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_subjects: usize,
    pub num_relations: usize,
    pub num_attributes: usize,
    /// Size of the word pool subjects are spelled from; defaults to
    /// `num_subjects`.
    #[serde(default)]
    pub subject_words: Option<usize>,
    /// Defaults to `num_relations`.
    #[serde(default)]
    pub relation_words: Option<usize>,
    #[serde(default = "default_max_len")]
    pub max_subject_len: usize,
    #[serde(default = "default_max_len")]
    pub max_relation_len: usize,
}

impl TaskConfig {
    pub fn new(num_subjects: usize, num_relations: usize, num_attributes: usize) -> Self {
        Self {
            num_subjects,
            num_relations,
            num_attributes,
            subject_words: None,
            relation_words: None,
            max_subject_len: 3,
            max_relation_len: 3,
        }
    }

    /// A single fact.
    pub fn one_fact() -> Self {
        Self::new(1, 1, 2)
    }

    /// 64 subjects × 8 relations = 512 facts over 32 attributes.
    pub fn facts_512() -> Self {
        Self::new(64, 8, 32)
    }

    fn subject_pool(&self) -> usize {
        self.subject_words.unwrap_or(self.num_subjects)
    }

    fn relation_pool(&self) -> usize {
        self.relation_words.unwrap_or(self.num_relations)
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.subject_pool() + self.relation_pool() + self.num_attributes
    }

    fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 || self.num_relations == 0 || self.num_attributes == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        if self.max_subject_len == 0 || self.max_relation_len == 0 {
            return Err(Error::Config("span lengths must be positive".into()));
        }
        let capacity = |pool: usize, max_len: usize| -> u128 {
            (1..=max_len as u32).map(|l| (pool as u128).saturating_pow(l)).sum()
        };
        if capacity(self.subject_pool(), self.max_subject_len) < self.num_subjects as u128 {
            return Err(Error::Config(format!(
                "{} subject words cannot spell {} distinct subjects",
                self.subject_pool(),
                self.num_subjects
            )));
        }
        if capacity(self.relation_pool(), self.max_relation_len) < self.num_relations as u128 {
            return Err(Error::Config(format!(
                "{} relation words cannot spell {} distinct relations",
                self.relation_pool(),
                self.num_relations
            )));
        }
        Ok(())
    }
}

/// The sampled fact table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticFactTask {
    pub config: TaskConfig,
    pub vocab_size: usize,
    /// Token spelling of each subject.
    pub subjects: Vec<Vec<usize>>,
    /// Token spelling of each relation.
    pub relations: Vec<Vec<usize>>,
    /// `facts[s][r]` is the attribute token.
    pub facts: Vec<Vec<usize>>,
}

impl SyntheticFactTask {
    pub fn num_facts(&self) -> usize {
        self.subjects.len() * self.relations.len()
    }

    /// Human-readable token names: `<bos>`, `<q>`, `s3`, `r1`, `a7`, ...
    pub fn token_label(&self, token: usize) -> String {
        let sp = self.config.subject_pool();
        let rp = self.config.relation_pool();
        match token {
            BOS => "<bos>".into(),
            QUERY => "<q>".into(),
            t if t < 2 + sp => format!("s{}", t - 2),
            t if t < 2 + sp + rp => format!("r{}", t - 2 - sp),
            t => format!("a{}", t - 2 - sp - rp),
        }
    }

    pub fn record(&self, subject: usize, relation: usize) -> PromptRecord {
        let subj = &self.subjects[subject];
        let rel = &self.relations[relation];
        let mut tokens = vec![BOS];
        tokens.extend(subj);
        tokens.extend(rel);
        tokens.push(QUERY);
        let labels: Vec<String> = tokens.iter().map(|&t| self.token_label(t)).collect();
        PromptRecord {
            id: format!("fact-{subject}-{relation}"),
            subject_span: (1, 1 + subj.len()),
            relation_span: (1 + subj.len(), 1 + subj.len() + rel.len()),
            relation_prefix: None,
            answer_token: self.facts[subject][relation],
            source_text: Some(labels.join(" ")),
            token_labels: Some(labels),
            token_ids: tokens,
        }
    }

    /// Every fact in subject-major order.
    pub fn records(&self) -> Vec<PromptRecord> {
        (0..self.subjects.len())
            .flat_map(|s| (0..self.relations.len()).map(move |r| (s, r)))
            .map(|(s, r)| self.record(s, r))
            .collect()
    }
}

fn distinct_spellings(count: usize, pool_start: usize, pool: usize, max_len: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = 1 + rng.below(max_len);
        let word: Vec<usize> = (0..len).map(|_| pool_start + rng.below(pool)).collect();
        if seen.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

/// Samples the fact table. Both splits contain every fact in the single
/// template this task has, so the eval split measures recall of trained
/// facts.
pub fn generate_task(
    config: &TaskConfig,
    rng: &mut Rng,
) -> Result<(SyntheticFactTask, Vec<PromptRecord>, Vec<PromptRecord>)> {
    config.validate()?;
    let sp = config.subject_pool();
    let rp = config.relation_pool();
    let subjects = distinct_spellings(config.num_subjects, 2, sp, config.max_subject_len, rng);
    let relations = distinct_spellings(config.num_relations, 2 + sp, rp, config.max_relation_len, rng);
    let attr_start = 2 + sp + rp;
    let facts = (0..config.num_subjects)
        .map(|_| {
            (0..config.num_relations)
                .map(|_| attr_start + rng.below(config.num_attributes))
                .collect()
        })
        .collect();
    let task = SyntheticFactTask {
        config: config.clone(),
        vocab_size: config.vocab_size(),
        subjects,
        relations,
        facts,
    };
    let train = task.records();
    let eval = train.clone();
    Ok((task, train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_single_fact() {
        let (task, train, eval) = generate_task(&TaskConfig::one_fact(), &mut Rng::new(1)).unwrap();
        assert_eq!(task.num_facts(), 1);
        assert_eq!(train.len(), 1);
        assert_eq!(eval, train);
        train[0].validate().unwrap();
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_task(&TaskConfig::facts_512(), &mut Rng::new(9)).unwrap();
        let b = generate_task(&TaskConfig::facts_512(), &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&TaskConfig::facts_512(), &mut Rng::new(10)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn all_512_facts_in_train() {
        let (task, train, _) = generate_task(&TaskConfig::facts_512(), &mut Rng::new(3)).unwrap();
        assert_eq!(train.len(), 512);
        let pairs: BTreeSet<(Vec<usize>, Vec<usize>)> = train
            .iter()
            .map(|r| {
                (
                    r.token_ids[r.subject_span.0..r.subject_span.1].to_vec(),
                    r.token_ids[r.relation_span.0..r.relation_span.1].to_vec(),
                )
            })
            .collect();
        assert_eq!(pairs.len(), 512);
        for r in &train {
            r.validate().unwrap();
            assert_eq!(r.token_ids[0], BOS);
            assert_eq!(*r.token_ids.last().unwrap(), QUERY);
            assert!(r.answer_token >= task.vocab_size - 32 && r.answer_token < task.vocab_size);
        }
    }

    #[test]
    fn rejects_impossible_configs() {
        let mut c = TaskConfig::new(100, 1, 2);
        c.subject_words = Some(2);
        assert!(matches!(generate_task(&c, &mut Rng::new(0)), Err(Error::Config(_))));
        assert!(generate_task(&TaskConfig::new(0, 1, 1), &mut Rng::new(0)).is_err());
    }
}
