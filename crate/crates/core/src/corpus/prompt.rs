//! Prompt vocabulary and per-sample prompt composition.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use super::record::SampleRecord;
use crate::autograd::IGNORE_INDEX;
use crate::encoders::NEUTRAL_PROMPT;
use crate::error::{Error, Result};

/// Handling of attributes without a label when composing a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// Append the neutral prompt once if any attribute is missing.
    Neutral,
    /// Drop missing attributes.
    Omit,
}

/// Description text per (attribute, class).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PromptVocabulary {
    entries: BTreeMap<String, Vec<String>>,
}

impl PromptVocabulary {
    /// Builds a vocabulary; class indices of each attribute must be exactly `0..K`.
    pub fn new(rows: impl IntoIterator<Item = (String, usize, String)>) -> Result<Self> {
        let mut sparse: BTreeMap<String, BTreeMap<usize, String>> = BTreeMap::new();
        for (attr, class, desc) in rows {
            if sparse
                .entry(attr.clone())
                .or_default()
                .insert(class, desc)
                .is_some()
            {
                return Err(Error::Format(format!(
                    "duplicate vocabulary entry {attr}/{class}"
                )));
            }
        }
        let mut entries = BTreeMap::new();
        for (attr, classes) in sparse {
            if classes.keys().copied().ne(0..classes.len()) {
                return Err(Error::Format(format!(
                    "vocabulary classes of {attr} are not 0..K"
                )));
            }
            entries.insert(attr, classes.into_values().collect());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::at_path(path))?;
        let mut r = csv::Reader::from_reader(file);
        let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
        if header != ["attribute", "class_index", "description"] {
            return Err(Error::Format(format!(
                "{}: vocabulary header must be attribute,class_index,description",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for row in r.records() {
            let row = row?;
            let class = row[1]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad class index {:?}", &row[1])))?;
            rows.push((row[0].to_string(), class, row[2].to_string()));
        }
        Self::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::at_path(path))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["attribute", "class_index", "description"])?;
        for (attr, descs) in &self.entries {
            for (i, d) in descs.iter().enumerate() {
                w.write_record([attr.as_str(), &i.to_string(), d.as_str()])?;
            }
        }
        w.flush().map_err(Error::at_path(path))?;
        Ok(())
    }

    pub fn classes(&self, attribute: &str) -> Option<usize> {
        self.entries.get(attribute).map(|v| v.len())
    }

    pub fn description(&self, attribute: &str, class: usize) -> Option<&str> {
        self.entries
            .get(attribute)
            .and_then(|v| v.get(class))
            .map(|s| s.as_str())
    }

    /// Attribute query text: the name followed by every class description.
    pub fn query(&self, attribute: &str) -> Option<String> {
        self.entries
            .get(attribute)
            .map(|v| format!("{attribute}: {}", v.join(", ")))
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .flat_map(|(a, v)| std::iter::once(a.as_str()).chain(v.iter().map(|s| s.as_str())))
    }
}

/// Joins the descriptions of the record's labelled attributes with ", ".
pub fn compose_prompt(
    record: &SampleRecord,
    vocab: &PromptVocabulary,
    attributes: &[String],
    mode: PromptMode,
) -> String {
    let mut parts = Vec::new();
    let mut missing = false;
    for a in attributes {
        let label = record.attribute(a);
        match (label != IGNORE_INDEX)
            .then(|| vocab.description(a, label as usize))
            .flatten()
        {
            Some(d) => parts.push(d.to_string()),
            None => missing = true,
        }
    }
    if missing && mode == PromptMode::Neutral {
        parts.push(NEUTRAL_PROMPT.to_string());
    }
    parts.join(", ")
}
