//! Corpus records, images, prompts, metadata bins, harmonization and the
//! synthetic generator.

pub mod bins;
pub mod harmonize;
pub mod image;
pub mod prompt;
pub mod record;
pub mod synth;

pub use bins::{bin_metadata, enumerate_strata, Bins};
pub use prompt::{compose_prompt, PromptMode, PromptVocabulary};
pub use record::{
    load_corpus, read_corpus_csv, write_corpus_csv, SampleRecord, Split, ALL_ATTRIBUTES,
};
