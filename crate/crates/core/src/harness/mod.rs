// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datasets, token-category segmentation and knockout experiments.

mod counterfact;
mod experiments;
pub mod plot;
mod records;
mod results;
mod tokenize;

pub use counterfact::{
    build_vocab, demo_triplet, load_counterfact, to_prompt_records, CounterfactImport, RawTriplet, Rejection,
    RelationConvention, DEMO_ID,
};
pub use experiments::{
    filter_correct, filter_correct_all, Heatmap, RawValue, ScatterPoint, Session, SweepPoint, SweepResult,
};
pub use records::{read_records, write_records, PromptRecord, SourceCategory};
pub use results::{read_json, sweeps_to_csv, write_csv, write_json, ExperimentConfig, CSV_HEADER};
pub use tokenize::{tokenize_simple, Tokenized, Vocab, UNK};
