//! Checkpoint files.
//!
//! A UTF-8 manifest of `key = value` lines ends at the first blank line.
//! The payload that follows concatenates little-endian f64 arrays in
//! manifest order: every parameter, then the first and second Adam moments
//! of each parameter that has them.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{AttributeSpec, DualPathModel};
use crate::optim::{AdamW, ParamGroup, ParamStore};
use crate::tensor::DenseTensor;
use crate::trainer::EpochMetrics;

const MAGIC: &str = "duopath checkpoint 1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochMetrics>,
    pub attributes: Vec<AttributeSpec>,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub adam_step: u64,
    /// Indexed like `params`.
    pub moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

fn corrupt(m: impl Into<String>) -> Error {
    Error::Corrupt(m.into())
}

impl Checkpoint {
    pub fn capture(
        run: &RunConfig,
        epoch: usize,
        log: &[EpochMetrics],
        model: &DualPathModel,
        optimizer: &AdamW,
    ) -> Self {
        let mut params = model.params.clone();
        params.zero_grads();
        let moments = params
            .iter()
            .map(|(id, _)| optimizer.moments(id).map(|(m, v)| (m.to_vec(), v.to_vec())))
            .collect();
        let mut run = run.clone();
        run.model.attributes.clear();
        Self {
            run,
            epoch,
            log: log.to_vec(),
            attributes: model.config.attributes.clone(),
            vocab: model.vocab().clone(),
            params,
            adam_step: optimizer.steps(),
            moments,
        }
    }

    /// Rebuilds the model with this checkpoint's parameters and trainable flags.
    pub fn model(&self) -> Result<DualPathModel> {
        let mut config = self.run.model.clone();
        config.attributes = self.attributes.clone();
        let mut model = DualPathModel::new(config, self.vocab.clone(), self.run.train.seed)?;
        if model.params.len() != self.params.len() {
            return Err(corrupt(format!(
                "checkpoint holds {} parameters, the model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for ((_, a), (_, b)) in model.params.iter().zip(self.params.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() || a.group != b.group {
                return Err(corrupt(format!(
                    "parameter {} does not match the model layout",
                    b.name
                )));
            }
        }
        model.params = self.params.clone();
        Ok(model)
    }

    pub fn optimizer(&self) -> AdamW {
        let t = &self.run.train;
        let mut opt = AdamW::new(t.lr_backbone, t.lr_new, t.weight_decay);
        opt.restore(self.adam_step, self.moments.clone());
        opt
    }

    fn manifest(&self) -> Result<String> {
        let mut lines = vec![MAGIC.to_string()];
        lines.push(format!("epoch = {}", self.epoch));
        lines.push(format!("adam_step = {}", self.adam_step));
        for l in self.run.to_text().lines() {
            lines.push(format!("config.{l}"));
        }
        lines.push(format!("vocab = {}", self.vocab.words().join(" ")));
        for a in &self.attributes {
            if a.name.contains('|') || a.query.contains('|') || a.query.contains('\n') {
                return Err(Error::Format(format!(
                    "attribute {} cannot be stored in a manifest",
                    a.name
                )));
            }
            lines.push(format!("attribute = {}|{}|{}", a.name, a.classes, a.query));
        }
        for r in &self.log {
            lines.push(format!("log = {}", r.to_csv_row()));
        }
        let mut offset = 0;
        for (_, p) in self.params.iter() {
            let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            let n = p.tensor.numel();
            lines.push(format!(
                "tensor = {}|{}|{}|{}|{offset}|{n}",
                p.name,
                shape.join(","),
                p.group.as_str(),
                p.trainable
            ));
            offset += n;
        }
        for ((_, p), m) in self.params.iter().zip(&self.moments) {
            if let Some((m, _)) = m {
                lines.push(format!("moment = {}|{offset}|{}", p.name, m.len()));
                offset += 2 * m.len();
            }
        }
        Ok(lines.join("\n") + "\n\n")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.manifest()?.into_bytes();
        let mut put = |v: &[f64]| {
            v.iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        };
        for (_, p) in self.params.iter() {
            put(p.tensor.data());
        }
        for (m, v) in self.moments.iter().flatten() {
            put(m);
            put(v);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(Error::at_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::at_path(path))?)
    }

    /// Parses and validates a whole checkpoint before returning anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| corrupt("manifest is not terminated by a blank line"))?;
        let manifest =
            std::str::from_utf8(&bytes[..split]).map_err(|_| corrupt("manifest is not UTF-8"))?;
        let payload = &bytes[split + 2..];
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("missing checkpoint header"));
        }

        let mut run = RunConfig::default();
        let mut epoch = None;
        let mut adam_step = None;
        let mut vocab = None;
        let mut attributes = Vec::new();
        let mut log = Vec::new();
        let mut tensors = Vec::new();
        let mut moments = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once(" = ")
                .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
                .ok_or_else(|| corrupt(format!("bad manifest line {line:?}")))?;
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| corrupt(format!("bad number in {line:?}")))
            };
            match k {
                "epoch" => epoch = Some(num(v)?),
                "adam_step" => adam_step = Some(num(v)? as u64),
                "vocab" => {
                    vocab = Some(Vocabulary::from_words(
                        v.split_whitespace().map(String::from).collect(),
                    ))
                }
                "attribute" => {
                    let f: Vec<&str> = v.splitn(3, '|').collect();
                    if f.len() != 3 {
                        return Err(corrupt(format!("bad attribute line {line:?}")));
                    }
                    attributes.push(AttributeSpec {
                        name: f[0].into(),
                        classes: num(f[1])?,
                        query: f[2].into(),
                    });
                }
                "log" => {
                    log.push(EpochMetrics::parse_csv_row(v).map_err(|e| corrupt(e.to_string()))?)
                }
                "tensor" => {
                    let f: Vec<&str> = v.split('|').collect();
                    if f.len() != 6 {
                        return Err(corrupt(format!("bad tensor line {line:?}")));
                    }
                    let shape = f[1]
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(num)
                        .collect::<Result<Vec<_>>>()?;
                    let group = ParamGroup::parse(f[2])
                        .ok_or_else(|| corrupt(format!("bad group in {line:?}")))?;
                    let trainable = f[3] == "true";
                    tensors.push((
                        f[0].to_string(),
                        shape,
                        group,
                        trainable,
                        num(f[4])?,
                        num(f[5])?,
                    ));
                }
                "moment" => {
                    let f: Vec<&str> = v.split('|').collect();
                    if f.len() != 3 {
                        return Err(corrupt(format!("bad moment line {line:?}")));
                    }
                    moments.push((f[0].to_string(), num(f[1])?, num(f[2])?));
                }
                _ => match k.strip_prefix("config.") {
                    Some(key) => run.set(key, v).map_err(|e| corrupt(e.to_string()))?,
                    None => return Err(corrupt(format!("unknown manifest key {k:?}"))),
                },
            }
        }

        let expected: usize = tensors.iter().map(|t| t.5).sum::<usize>()
            + moments.iter().map(|m| 2 * m.2).sum::<usize>();
        if payload.len() != 8 * expected {
            return Err(corrupt(format!(
                "payload holds {} bytes, manifest describes {}",
                payload.len(),
                8 * expected
            )));
        }
        let read = |offset: usize, len: usize| -> Vec<f64> {
            payload[8 * offset..8 * (offset + len)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };

        let mut params = ParamStore::new();
        let mut offset = 0;
        for (name, shape, group, trainable, off, len) in tensors {
            if off != offset || shape.iter().product::<usize>() != len {
                return Err(corrupt(format!(
                    "tensor {name}: shape or offset does not match the payload"
                )));
            }
            let t = DenseTensor::new(shape, read(off, len)).map_err(|e| corrupt(e.to_string()))?;
            let id = params.add(name, t, group);
            params.set_trainable(id, trainable);
            offset += len;
        }
        let mut restored = vec![None; params.len()];
        for (name, off, len) in moments {
            let id = params
                .find(&name)
                .ok_or_else(|| corrupt(format!("moment for unknown parameter {name}")))?;
            if off != offset || len != params.get(id).tensor.numel() {
                return Err(corrupt(format!(
                    "moment {name}: length or offset does not match"
                )));
            }
            restored[id.index()] = Some((read(off, len), read(off + len, len)));
            offset += 2 * len;
        }

        Ok(Self {
            run,
            epoch: epoch.ok_or_else(|| corrupt("missing epoch"))?,
            log,
            attributes,
            vocab: vocab.ok_or_else(|| corrupt("missing vocabulary"))?,
            params,
            adam_step: adam_step.ok_or_else(|| corrupt("missing optimizer step"))?,
            moments: restored,
        })
    }
}
