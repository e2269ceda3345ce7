//! Configuration-matrix runs.
//!
//! A matrix file uses the run-config syntax, except that a value may list
//! alternatives separated by `|`. Cells are the Cartesian product of the
//! alternatives, with the first listed key varying slowest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::corpus::record::{attribute_set, SampleRecord, Split};
use crate::corpus::PromptVocabulary;
use crate::error::{Error, Result};
use crate::trainer::{build_model, evaluate, train, Dataset};

pub const TABLE_HEADER: &str =
    "config,attrs,sca1,sca2,ft_vis,ft_txt,lr_clip,lr_heads,dropout,epochs,mA,F1,AUC";

/// Ordered keys, each with its alternatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMatrix {
    pub axes: Vec<(String, Vec<String>)>,
}

impl ConfigMatrix {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("matrix line {}: expected `key = a | b`", i + 1))
            })?;
            let k = k.trim().to_string();
            if axes.iter().any(|(a, _)| *a == k) {
                return Err(Error::Config(format!(
                    "matrix line {}: duplicate key {k}",
                    i + 1
                )));
            }
            let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(Error::Config(format!(
                    "matrix line {}: empty alternative",
                    i + 1
                )));
            }
            axes.push((k, values));
        }
        Ok(Self { axes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(Error::at_path(path))?)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every cell applied on top of `base`, validated.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        let mut cells = vec![base.clone()];
        for (key, values) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    c.set(key, v)?;
                    next.push(c);
                }
            }
            cells = next;
        }
        for c in &cells {
            c.train.validate()?;
        }
        Ok(cells)
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: RunConfig,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let m = &r.config.model;
        let t = &r.config.train;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.name,
            t.attributes,
            on_off(m.use_sca_path1),
            on_off(m.use_sca_path2),
            t.freeze.visual,
            t.freeze.text,
            t.lr_backbone,
            t.lr_new,
            m.dropout,
            t.epochs,
            r.balanced_accuracy,
            r.macro_f1,
            r.auc
        );
    }
    s
}

/// Trains every cell on the train split and scores the best checkpoint on
/// the validation split. `on_row` sees each row as it completes.
pub fn run_matrix(
    cells: &[RunConfig],
    records: &[SampleRecord],
    vocab: &PromptVocabulary,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cfg) in cells.iter().enumerate() {
        let attrs = attribute_set(cfg.train.attributes)?;
        let size = cfg.model.image_size;
        let train_set = Dataset::new(
            records.iter().filter(|r| r.split == Split::Train),
            &attrs,
            size,
            cfg.train.hflip,
        )?;
        let val_set = Dataset::new(
            records.iter().filter(|r| r.split == Split::Val),
            &attrs,
            size,
            false,
        )?;
        let model = build_model(cfg, vocab)?;
        let outcome = train(cfg, model, &train_set, &val_set)?;
        let best = outcome.best.model()?;
        let (core, auc) = evaluate(&best, &val_set, cfg.train.batch_size)?;
        let row = AblationRow {
            name: format!("v{}", i + 1),
            config: cfg.clone(),
            balanced_accuracy: core.balanced_accuracy,
            macro_f1: core.macro_f1,
            auc,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
