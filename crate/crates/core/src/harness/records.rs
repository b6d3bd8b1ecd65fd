// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One probe prompt: token ids, annotated spans and the gold next token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub token_ids: Vec<usize>,
    /// `[start, end)`
    pub subject_span: (usize, usize),
    /// `[start, end)`
    pub relation_span: (usize, usize),
    /// Relation tokens that precede the subject, when the subject sits inside
    /// the prompt and the relation is the complement of the subject.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_prefix: Option<(usize, usize)>,
    pub answer_token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
    /// Display label per token (heatmap rows).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_labels: Option<Vec<String>>,
}

impl PromptRecord {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn last(&self) -> usize {
        self.token_ids.len() - 1
    }

    /// Spans inside the sequence, disjoint, and both before the last token.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(format!("record {}: {msg}", self.id)));
        if self.token_ids.is_empty() {
            return bad("empty token sequence".into());
        }
        let last = self.last();
        let mut spans = vec![("subject", self.subject_span), ("relation", self.relation_span)];
        if let Some(prefix) = self.relation_prefix {
            spans.push(("relation prefix", prefix));
        }
        for &(name, (s, e)) in &spans {
            if s > e || e > last {
                return bad(format!("{name} span [{s}, {e}) must end before the last token {last}"));
            }
        }
        let a = self.subject_span;
        for &(name, b) in &spans[1..] {
            if a.0 < b.1 && b.0 < a.1 {
                return bad(format!("subject and {name} spans overlap"));
            }
        }
        if let Some(labels) = &self.token_labels {
            if labels.len() != self.token_ids.len() {
                return bad("token_labels length differs from token_ids".into());
            }
        }
        Ok(())
    }
}

/// Knockout source groups, each resolving to positions of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCategory {
    Subject,
    Relation,
    First,
    Last,
}

impl SourceCategory {
    pub const ALL: [SourceCategory; 4] = [
        SourceCategory::Subject,
        SourceCategory::Relation,
        SourceCategory::First,
        SourceCategory::Last,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SourceCategory::Subject => "subject",
            SourceCategory::Relation => "relation",
            SourceCategory::First => "first",
            SourceCategory::Last => "last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "subject" => Ok(SourceCategory::Subject),
            "relation" => Ok(SourceCategory::Relation),
            "first" => Ok(SourceCategory::First),
            "last" => Ok(SourceCategory::Last),
            other => Err(Error::Config(format!("unknown source category {other:?}"))),
        }
    }

    pub fn positions(self, record: &PromptRecord) -> BTreeSet<usize> {
        match self {
            SourceCategory::Subject => (record.subject_span.0..record.subject_span.1).collect(),
            SourceCategory::Relation => {
                let prefix = record.relation_prefix.map_or(0..0, |(s, e)| s..e);
                prefix.chain(record.relation_span.0..record.relation_span.1).collect()
            }
            SourceCategory::First => [0].into_iter().collect(),
            SourceCategory::Last => [record.last()].into_iter().collect(),
        }
    }
}

/// Reads a JSON Lines file of [`PromptRecord`]s, skipping blank lines.
pub fn read_records(path: &Path) -> Result<Vec<PromptRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
