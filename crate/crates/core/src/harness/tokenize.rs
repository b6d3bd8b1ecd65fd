// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lowercased whitespace word tokenizer. Only used for smoke tests and the
//! COUNTERFACT importer; quantitative experiments run on synthetic tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: BTreeMap<String, usize>,
    pub unk_id: usize,
}

impl Vocab {
    /// Explicit word → id table.
    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = (S, usize)>, unk_id: usize) -> Self {
        Self {
            words: words.into_iter().map(|(w, i)| (w.into(), i)).collect(),
            unk_id,
        }
    }

    /// `<unk> = 0`, then every distinct lowercased word in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        words.sort();
        words.dedup();
        Self {
            words: words.into_iter().enumerate().map(|(i, w)| (w, i + 1)).collect(),
            unk_id: 0,
        }
    }

    /// One past the largest id.
    pub fn size(&self) -> usize {
        self.words
            .values()
            .copied()
            .chain([self.unk_id])
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.get(&word.to_lowercase()).copied()
    }

    /// Id → word, `<unk>` for gaps.
    pub fn labels(&self) -> Vec<String> {
        let mut out = vec![UNK.to_string(); self.size()];
        for (w, &i) in &self.words {
            out[i] = w.clone();
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// Byte range of each token in the source text.
    pub offsets: Vec<(usize, usize)>,
    pub words: Vec<String>,
    pub unknown: usize,
}

impl Tokenized {
    /// Token span `[start, end)` covering every token that overlaps the
    /// byte range `[start, end)`; `None` when nothing overlaps.
    pub fn char_span_to_tokens(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let hits: Vec<usize> = self
            .offsets
            .iter()
            .enumerate()
            .filter(|(_, &(s, e))| s < end && start < e)
            .map(|(i, _)| i)
            .collect();
        Some((*hits.first()?, *hits.last()? + 1))
    }
}

pub fn tokenize_simple(text: &str, vocab: &Vocab) -> Tokenized {
    let mut out = Tokenized {
        ids: Vec::new(),
        offsets: Vec::new(),
        words: Vec::new(),
        unknown: 0,
    };
    let mut start = None;
    for (i, c) in text.char_indices().chain([(text.len(), ' ')]) {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                let word = text[s..i].to_lowercase();
                let id = vocab.id(&word).unwrap_or_else(|| {
                    out.unknown += 1;
                    vocab.unk_id
                });
                out.ids.push(id);
                out.offsets.push((s, i));
                out.words.push(word);
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Vocab {
        Vocab::from_words([("a", 1), ("b", 2)], 0)
    }

    #[test]
    fn direct_lookup() {
        assert_eq!(tokenize_simple("a b a", &ab()).ids, vec![1, 2, 1]);
    }

    #[test]
    fn span_alignment() {
        let t = tokenize_simple("a b a", &ab());
        assert_eq!(t.char_span_to_tokens(2, 3), Some((1, 2)));
        assert_eq!(t.char_span_to_tokens(0, 3), Some((0, 2)));
        assert_eq!(t.char_span_to_tokens(1, 2), None);
    }

    #[test]
    fn unknowns_are_counted() {
        let t = tokenize_simple("a  Zebra\tb c", &ab());
        assert_eq!(t.ids, vec![1, 0, 2, 0]);
        assert_eq!(t.unknown, 2);
        assert_eq!(t.offsets[1], (3, 8));
    }

    #[test]
    fn built_vocab_is_sorted_and_lowercased() {
        let v = Vocab::build(["Beats Music is", "owned by beats"]);
        assert_eq!(v.id("beats"), Some(1));
        assert_eq!(v.id("BY"), Some(2));
        assert_eq!(v.size(), 6);
        assert_eq!(v.labels()[0], UNK);
        let t = tokenize_simple("Beats Music is owned by", &v);
        assert_eq!(t.unknown, 0);
    }
}
