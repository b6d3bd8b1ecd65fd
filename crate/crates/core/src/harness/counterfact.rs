// SPDX-License-Identifier: MIT OR Apache-2.0

//! COUNTERFACT-style triplet import.
//!
//! Accepts a JSON array or JSON Lines of objects in either the flat form
//! `{"prompt", "subject", "target"}` or the nested form
//! `{"case_id", "requested_rewrite": {"prompt": "{} is owned by", "subject",
//! "target_true": {"str"}}}`. A `{}` placeholder in the prompt is filled with
//! the subject.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::records::PromptRecord;
use crate::harness::tokenize::{tokenize_simple, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriplet {
    pub id: String,
    pub prompt: String,
    pub subject: String,
    pub target: String,
    /// Byte range of the first occurrence of `subject` in `prompt`.
    pub subject_char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Zero-based position in the input.
    pub index: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactImport {
    pub records: Vec<RawTriplet>,
    pub rejected: Vec<Rejection>,
    pub warnings: Vec<String>,
}

/// Which prompt tokens count as the relation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationConvention {
    /// Every token outside the subject span except the last one.
    #[default]
    Complement,
    /// Only the tokens between the subject and the last token.
    AfterSubject,
}

fn text_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    match v.get(key)? {
        Value::String(s) => Some(s),
        Value::Object(o) => o.get("str").and_then(Value::as_str),
        _ => None,
    }
}

fn extract(index: usize, v: &Value) -> std::result::Result<RawTriplet, Rejection> {
    let id = v.get("case_id").or_else(|| v.get("id")).map(|x| match x {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    });
    let reject = |reason: String| Rejection {
        index,
        id: id.clone(),
        reason,
    };
    let body = v.get("requested_rewrite").unwrap_or(v);
    let prompt = text_field(body, "prompt").ok_or_else(|| reject("missing prompt".into()))?;
    let subject = text_field(body, "subject").ok_or_else(|| reject("missing subject".into()))?;
    let target = text_field(body, "target")
        .or_else(|| text_field(body, "target_true"))
        .ok_or_else(|| reject("missing target".into()))?;
    if subject.trim().is_empty() {
        return Err(reject("empty subject".into()));
    }
    if target.trim().is_empty() {
        return Err(reject("empty target".into()));
    }
    let prompt = prompt.replacen("{}", subject, 1);
    let start = prompt
        .find(subject)
        .or_else(|| prompt.to_ascii_lowercase().find(&subject.to_ascii_lowercase()))
        .ok_or_else(|| reject(format!("subject {subject:?} not found in prompt {prompt:?}")))?;
    Ok(RawTriplet {
        id: id.clone().unwrap_or_else(|| index.to_string()),
        subject_char_span: (start, start + subject.len()),
        prompt,
        subject: subject.to_string(),
        target: target.trim().to_string(),
    })
}

/// Parses a COUNTERFACT file; malformed JSON is a parse error carrying the
/// line number, while semantically unusable records are rejected with a
/// reason.
pub fn load_counterfact(path: &Path) -> Result<CounterfactImport> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    let mut out = CounterfactImport::default();
    let values: Vec<Value> = if text.trim().is_empty() {
        out.warnings.push(format!("{} is empty", path.display()));
        Vec::new()
    } else if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| parse_err(e.line(), e))?
    } else {
        let mut vals = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if !line.trim().is_empty() {
                vals.push(serde_json::from_str(line).map_err(|e| parse_err(i + 1, e))?);
            }
        }
        vals
    };
    for (i, v) in values.iter().enumerate() {
        match extract(i, v) {
            Ok(r) => out.records.push(r),
            Err(rej) => out.rejected.push(rej),
        }
    }
    Ok(out)
}

/// Vocabulary over every prompt and target word of an import.
pub fn build_vocab(import: &CounterfactImport) -> Vocab {
    Vocab::build(
        import
            .records
            .iter()
            .flat_map(|r| [r.prompt.as_str(), r.target.as_str()]),
    )
}

/// Id of the built-in showcase prompt.
pub const DEMO_ID: &str = "sxsw-demo";

/// "Where is South by Southwest? It is located in" → "Austin".
pub fn demo_triplet() -> RawTriplet {
    let prompt = "Where is South by Southwest? It is located in";
    let subject = "South by Southwest";
    let start = prompt.find(subject).unwrap_or(0);
    RawTriplet {
        id: DEMO_ID.to_string(),
        prompt: prompt.to_string(),
        subject: subject.to_string(),
        target: "Austin".to_string(),
        subject_char_span: (start, start + subject.len()),
    }
}

/// Tokenizes triplets into [`PromptRecord`]s. The answer token is the first
/// word of the target.
pub fn to_prompt_records(
    triplets: &[RawTriplet],
    vocab: &Vocab,
    convention: RelationConvention,
) -> (Vec<PromptRecord>, Vec<Rejection>) {
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (index, t) in triplets.iter().enumerate() {
        let reject = |reason: &str| Rejection {
            index,
            id: Some(t.id.clone()),
            reason: reason.to_string(),
        };
        let tok = tokenize_simple(&t.prompt, vocab);
        let Some((s, e)) = tok.char_span_to_tokens(t.subject_char_span.0, t.subject_char_span.1) else {
            rejected.push(reject("subject covers no token"));
            continue;
        };
        let last = tok.ids.len() - 1;
        if e > last {
            rejected.push(reject("subject reaches the last token"));
            continue;
        }
        let answer_word = t.target.split_whitespace().next().unwrap_or_default();
        let Some(answer_token) = vocab.id(answer_word) else {
            rejected.push(reject("target word outside vocabulary"));
            continue;
        };
        let relation_prefix = match convention {
            RelationConvention::Complement if s > 0 => Some((0, s)),
            _ => None,
        };
        records.push(PromptRecord {
            id: t.id.clone(),
            token_ids: tok.ids,
            subject_span: (s, e),
            relation_span: (e, last),
            relation_prefix,
            answer_token,
            source_text: Some(t.prompt.clone()),
            token_labels: Some(tok.words),
        });
    }
    (records, rejected)
}
