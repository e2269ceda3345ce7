//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::FreezePolicy;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, QueryMode};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Model hyperparameters; the attribute list is filled in from the
    /// prompt vocabulary when the model is built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean for {key}: {value:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Splits `key = value` lines into an ordered map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one key. Unknown keys are a config error. `sca` sets both
    /// SCA switches.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "visual_width" => m.visual_width = parse(key, value)?,
            "visual_depth" => m.visual_depth = parse(key, value)?,
            "visual_heads" => m.visual_heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "locality_bias" => m.locality_bias = parse(key, value)?,
            "text_width" => m.text_width = parse(key, value)?,
            "text_depth" => m.text_depth = parse(key, value)?,
            "text_heads" => m.text_heads = parse(key, value)?,
            "text_max_len" => m.text_max_len = parse(key, value)?,
            "joint_dim" => m.joint_dim = parse(key, value)?,
            "sca1" => m.use_sca_path1 = parse_bool(key, value)?,
            "sca2" => m.use_sca_path2 = parse_bool(key, value)?,
            "sca" => {
                m.use_sca_path1 = parse_bool(key, value)?;
                m.use_sca_path2 = m.use_sca_path1;
            }
            "sca_reduction" => m.sca_reduction = parse(key, value)?,
            "fusion_heads" => m.fusion_heads = parse(key, value)?,
            "attribute_heads" => m.attribute_heads = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "query_mode" => {
                m.query_mode = QueryMode::parse(value)
                    .ok_or_else(|| Error::Config(format!("invalid query_mode {value:?}")))?
            }
            "attributes" => t.attributes = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_backbone" => t.lr_backbone = parse(key, value)?,
            "lr_new" => t.lr_new = parse(key, value)?,
            "decay_epochs" => t.decay_epochs = parse_list(key, value)?,
            "decay_factor" => t.decay_factor = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "lambda_gender" => t.loss.lambda_gender = parse(key, value)?,
            "lambda_attribute" => t.loss.lambda_attribute = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "freeze_visual" => t.freeze.visual = parse(key, value)?,
            "freeze_text" => t.freeze.text = parse(key, value)?,
            "hflip" => t.hflip = parse_bool(key, value)?,
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(Error::at_path(path))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(Error::at_path(path))
    }

    /// Every key in a fixed order. Floats use the shortest round-trip form.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let FreezePolicy { visual, text } = t.freeze;
        let decay: Vec<String> = t.decay_epochs.iter().map(|e| e.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("visual_width", m.visual_width.to_string());
        kv("visual_depth", m.visual_depth.to_string());
        kv("visual_heads", m.visual_heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("locality_bias", m.locality_bias.to_string());
        kv("text_width", m.text_width.to_string());
        kv("text_depth", m.text_depth.to_string());
        kv("text_heads", m.text_heads.to_string());
        kv("text_max_len", m.text_max_len.to_string());
        kv("joint_dim", m.joint_dim.to_string());
        kv("sca1", m.use_sca_path1.to_string());
        kv("sca2", m.use_sca_path2.to_string());
        kv("sca_reduction", m.sca_reduction.to_string());
        kv("fusion_heads", m.fusion_heads.to_string());
        kv("attribute_heads", m.attribute_heads.to_string());
        kv("dropout", m.dropout.to_string());
        kv("query_mode", m.query_mode.as_str().to_string());
        kv("attributes", t.attributes.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_backbone", t.lr_backbone.to_string());
        kv("lr_new", t.lr_new.to_string());
        kv("decay_epochs", decay.join(","));
        kv("decay_factor", t.decay_factor.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("alpha", t.loss.alpha.to_string());
        kv("lambda_gender", t.loss.lambda_gender.to_string());
        kv("lambda_attribute", t.loss.lambda_attribute.to_string());
        kv("seed", t.seed.to_string());
        kv("freeze_visual", visual.to_string());
        kv("freeze_text", text.to_string());
        kv("hflip", t.hflip.to_string());
        if let Some(p) = &self.corpus {
            kv("corpus", p.display().to_string());
        }
        if let Some(p) = &self.out {
            kv("out", p.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lr_new", "0.0003").unwrap();
        cfg.set("decay_epochs", "5, 9").unwrap();
        cfg.set("sca2", "off").unwrap();
        cfg.set("corpus", "data/corpus.csv").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.decay_epochs, vec![5, 9]);
        assert!(!back.model.use_sca_path2);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(
            RunConfig::parse("learning_rate = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("epochs = 1\nepochs = 2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("epochs = many"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("epochs"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = RunConfig::parse("# toy run\n\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }
}
