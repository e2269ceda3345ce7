//! Training loop: seeded shuffling, step-decayed group learning rates,
//! gradient clipping, per-epoch validation and best-checkpoint selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::image::normalize_rgb;
use crate::corpus::record::{attribute_set, SampleRecord};
use crate::corpus::PromptVocabulary;
use crate::encoders::{FreezePolicy, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{argmax, auc_female_vs_rest, core_metrics, softmax_row, CoreMetrics, FEMALE};
use crate::model::{AttributeSpec, DualPathModel, ForwardOptions, GENDER_CLASSES};
use crate::objective::{objective, LossWeights};
use crate::optim::{clip_global_norm, AdamW};
use crate::rng::stream;
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_new: f64,
    /// Epochs at whose start the learning rates are multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub freeze: FreezePolicy,
    /// 5 or 7.
    pub attributes: usize,
    /// Random horizontal flips of training images.
    pub hflip: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults for encoders trained from scratch.
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_backbone: 1e-4,
            lr_new: 1e-3,
            decay_epochs: vec![20],
            decay_factor: 0.1,
            clip_norm: 5.0,
            weight_decay: 1.5e-4,
            loss: LossWeights::default(),
            seed: 7,
            freeze: FreezePolicy { visual: 4, text: 0 },
            attributes: 5,
            hflip: true,
        }
    }
}

impl TrainConfig {
    /// Schedule for a pretrained backbone.
    pub fn pretrained() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr_backbone: 1e-6,
            lr_new: 1e-4,
            decay_epochs: vec![20, 40],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return err("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if let Some(e) = self
            .decay_epochs
            .iter()
            .find(|&&e| e == 0 || e > self.epochs)
        {
            return err(format!("decay epoch {e} lies outside 1..={}", self.epochs));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_new", self.lr_new),
            ("decay_factor", self.decay_factor),
            ("clip_norm", self.clip_norm),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        self.loss.validate()?;
        attribute_set(self.attributes).map(|_| ())
    }
}

/// `base * factor^k` where `k` counts decay epochs `<= epoch`.
pub fn lr_at(epoch: usize, base: f64, decay_epochs: &[usize], factor: f64) -> f64 {
    let k = decay_epochs.iter().filter(|&&e| e <= epoch).count();
    base * factor.powi(k as i32)
}

/// One row of the metric log. Validation metrics use the fused head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_ma: f64,
    pub val_f1: f64,
    pub val_precision: f64,
    pub val_recall_weighted: f64,
    /// NaN when the split lacks Female or non-Female samples.
    pub val_auc: f64,
}

pub const LOG_HEADER: &str =
    "epoch,train_loss,val_acc,val_mA,val_F1_macro,val_precision_macro,val_recall_weighted,val_auc";

impl EpochMetrics {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_acc,
            self.val_ma,
            self.val_f1,
            self.val_precision,
            self.val_recall_weighted,
            self.val_auc
        )
    }

    pub fn parse_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("metric row needs 8 fields: {row:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number {s:?}")))
        };
        Ok(Self {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad epoch {:?}", f[0])))?,
            train_loss: num(f[1])?,
            val_acc: num(f[2])?,
            val_ma: num(f[3])?,
            val_f1: num(f[4])?,
            val_precision: num(f[5])?,
            val_recall_weighted: num(f[6])?,
            val_auc: num(f[7])?,
        })
    }
}

pub fn log_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv_row());
    }
    s
}

/// Attribute specs of a 5- or 7-attribute model, with queries built from
/// the class descriptions.
pub fn attribute_specs(vocab: &PromptVocabulary, count: usize) -> Result<Vec<AttributeSpec>> {
    attribute_set(count)?
        .into_iter()
        .map(|name| {
            let classes = vocab.classes(&name).ok_or_else(|| {
                Error::Config(format!("prompt vocabulary has no attribute {name}"))
            })?;
            let query = vocab.query(&name).unwrap_or_else(|| name.clone());
            Ok(AttributeSpec {
                name,
                classes,
                query,
            })
        })
        .collect()
}

/// Builds a fresh model for `run`, with the text vocabulary drawn from the
/// prompt vocabulary.
pub fn build_model(run: &RunConfig, vocab: &PromptVocabulary) -> Result<DualPathModel> {
    let mut config = run.model.clone();
    config.attributes = attribute_specs(vocab, run.train.attributes)?;
    let queries: Vec<String> = config.attributes.iter().map(|a| a.query.clone()).collect();
    let words = Vocabulary::from_texts(vocab.texts().chain(queries.iter().map(String::as_str)));
    DualPathModel::new(config, words, run.train.seed)
}

#[derive(Clone, Debug)]
struct Example {
    image: Vec<f64>,
    flipped: Vec<f64>,
    prompt: String,
    gender: usize,
    labels: Vec<i64>,
}

/// Preprocessed samples ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub attributes: Vec<String>,
    examples: Vec<Example>,
}

/// One mini-batch. `attributes[a][i]` is sample `i`'s label for attribute `a`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: DenseTensor,
    pub prompts: Vec<String>,
    pub gender: Vec<i64>,
    pub attributes: Vec<Vec<i64>>,
}

impl Dataset {
    /// Records must carry decoded images. `with_flips` also stores the
    /// mirrored image of every sample.
    pub fn new<'a>(
        records: impl IntoIterator<Item = &'a SampleRecord>,
        attributes: &[String],
        image_size: usize,
        with_flips: bool,
    ) -> Result<Self> {
        let mut examples = Vec::new();
        for r in records {
            let img = r
                .image
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{}: image not loaded", r.path)))?;
            examples.push(Example {
                image: normalize_rgb(img, image_size, false),
                flipped: if with_flips {
                    normalize_rgb(img, image_size, true)
                } else {
                    Vec::new()
                },
                prompt: r.prompt.clone(),
                gender: r.gender,
                labels: attributes.iter().map(|a| r.attribute(a)).collect(),
            });
        }
        Ok(Self {
            image_size,
            attributes: attributes.to_vec(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn genders(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.gender).collect()
    }

    /// Labels of attribute `a` for every sample.
    pub fn attribute_labels(&self, a: usize) -> Vec<i64> {
        self.examples.iter().map(|e| e.labels[a]).collect()
    }

    /// Assembles the samples at `indices`; `flips[i]` selects the mirrored
    /// image of the i-th sample.
    pub fn batch(&self, indices: &[usize], flips: Option<&[bool]>) -> Result<Batch> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for (k, &i) in indices.iter().enumerate() {
            let e = &self.examples[i];
            let flip = flips.is_some_and(|f| f[k]);
            if flip && e.flipped.is_empty() {
                return Err(Error::Config(
                    "dataset was built without flipped images".into(),
                ));
            }
            data.extend_from_slice(if flip { &e.flipped } else { &e.image });
        }
        Ok(Batch {
            images: DenseTensor::new([indices.len(), 3, s, s], data)?,
            prompts: indices
                .iter()
                .map(|&i| self.examples[i].prompt.clone())
                .collect(),
            gender: indices
                .iter()
                .map(|&i| self.examples[i].gender as i64)
                .collect(),
            attributes: (0..self.attributes.len())
                .map(|a| {
                    indices
                        .iter()
                        .map(|&i| self.examples[i].labels[a])
                        .collect()
                })
                .collect(),
        })
    }
}

/// Which gender head to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenderHead {
    Direct,
    Mediated,
    Fused,
}

/// Inference outputs over a dataset, in dataset order.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub direct: Vec<[f64; GENDER_CLASSES]>,
    pub mediated: Vec<[f64; GENDER_CLASSES]>,
    pub fused: Vec<[f64; GENDER_CLASSES]>,
    /// `attributes[a][i]`: predicted class.
    pub attributes: Vec<Vec<usize>>,
}

impl Predictions {
    fn head(&self, head: GenderHead) -> &[[f64; GENDER_CLASSES]] {
        match head {
            GenderHead::Direct => &self.direct,
            GenderHead::Mediated => &self.mediated,
            GenderHead::Fused => &self.fused,
        }
    }

    pub fn gender(&self, head: GenderHead) -> Vec<usize> {
        self.head(head).iter().map(|r| argmax(r)).collect()
    }

    pub fn probabilities(&self, head: GenderHead) -> Vec<Vec<f64>> {
        self.head(head).iter().map(|r| softmax_row(r)).collect()
    }

    pub fn p_female(&self, head: GenderHead) -> Vec<f64> {
        self.head(head)
            .iter()
            .map(|r| softmax_row(r)[FEMALE])
            .collect()
    }
}

fn rows3(t: &[f64]) -> Vec<[f64; GENDER_CLASSES]> {
    t.chunks(GENDER_CLASSES)
        .map(|r| [r[0], r[1], r[2]])
        .collect()
}

/// Forward passes without dropout over the whole dataset.
pub fn predict(model: &DualPathModel, data: &Dataset, batch_size: usize) -> Result<Predictions> {
    let mut p = Predictions {
        attributes: vec![Vec::with_capacity(data.len()); model.config.attributes.len()],
        ..Predictions::default()
    };
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, None)?;
        let mut g = Graph::new();
        let out = model.forward(
            &mut g,
            &batch.images,
            &batch.prompts,
            ForwardOptions::default(),
        )?;
        p.direct.extend(rows3(g.value(out.gender_direct)));
        p.mediated.extend(rows3(g.value(out.gender_mediated)));
        p.fused.extend(rows3(g.value(out.gender_fused)));
        for (a, &logits) in out.attributes.iter().enumerate() {
            let k = g.shape(logits)[1];
            p.attributes[a].extend(g.value(logits).chunks(k).map(argmax));
        }
    }
    Ok(p)
}

/// Fused-head metrics of a dataset, with AUC (NaN when undefined).
pub fn evaluate(
    model: &DualPathModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<(CoreMetrics, f64)> {
    let p = predict(model, data, batch_size)?;
    let labels = data.genders();
    let core = core_metrics(&p.gender(GenderHead::Fused), &labels)?;
    let auc = auc_female_vs_rest(&p.p_female(GenderHead::Fused), &labels).unwrap_or(f64::NAN);
    Ok((core, auc))
}

/// Mutable training state; everything needed to resume lives in
/// [`Trainer::checkpoint`].
pub struct Trainer {
    pub run: RunConfig,
    pub model: DualPathModel,
    pub optimizer: AdamW,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochMetrics>,
    pub best: Option<Checkpoint>,
}

impl Trainer {
    /// Applies the freeze policy to `model` and sets up the optimizer.
    pub fn new(run: RunConfig, mut model: DualPathModel) -> Result<Self> {
        run.train.validate()?;
        model.apply_freeze(run.train.freeze)?;
        let t = &run.train;
        let optimizer = AdamW::new(t.lr_backbone, t.lr_new, t.weight_decay);
        Ok(Self {
            run,
            model,
            optimizer,
            epoch: 0,
            log: Vec::new(),
            best: None,
        })
    }

    /// Continues from a saved state. `best` is the best checkpoint so far.
    pub fn resume(last: Checkpoint, best: Option<Checkpoint>) -> Result<Self> {
        last.run.train.validate()?;
        let model = last.model()?;
        let optimizer = last.optimizer();
        Ok(Self {
            epoch: last.epoch,
            log: last.log.clone(),
            run: last.run,
            model,
            optimizer,
            best,
        })
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.run,
            self.epoch,
            &self.log,
            &self.model,
            &self.optimizer,
        )
    }

    /// Trains one epoch and validates. Returns the new log row.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochMetrics> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(
                "train and validation splits must be non-empty".into(),
            ));
        }
        let t = self.run.train.clone();
        let epoch = self.epoch + 1;
        self.optimizer.lr_backbone = lr_at(epoch, t.lr_backbone, &t.decay_epochs, t.decay_factor);
        self.optimizer.lr_new = lr_at(epoch, t.lr_new, &t.decay_epochs, t.decay_factor);

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(t.seed, "shuffle", epoch as u64));
        let mut flip_rng = stream(t.seed, "flip", epoch as u64);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| t.hflip && flip_rng.gen_bool(0.5))
            .collect();
        let mut dropout_rng = stream(t.seed, "dropout", epoch as u64);

        let mut total = 0.0;
        for (b, (chunk, flip)) in order
            .chunks(t.batch_size)
            .zip(flips.chunks(t.batch_size))
            .enumerate()
        {
            let diverged = |e: Error| match e {
                Error::NonFinite(op) => Error::Diverged(format!(
                    "epoch {epoch}, batch {b}: non-finite value in {op}"
                )),
                other => other,
            };
            let batch = train.batch(chunk, Some(flip))?;
            let mut g = Graph::new();
            let opts = ForwardOptions {
                dropout_rng: Some(&mut dropout_rng),
                ..ForwardOptions::default()
            };
            let out = self
                .model
                .forward(&mut g, &batch.images, &batch.prompts, opts)
                .map_err(diverged)?;
            let terms = objective(&mut g, &out, &batch.gender, &batch.attributes, &t.loss)
                .map_err(diverged)?;
            let loss = g.scalar(terms.total);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {b}: loss is {loss}"
                )));
            }
            total += loss * chunk.len() as f64;
            g.backward(terms.total).map_err(diverged)?;
            self.model.params.collect_grads(&g)?;
            clip_global_norm(&mut self.model.params, t.clip_norm);
            self.optimizer.step(&mut self.model.params)?;
        }

        let (core, auc) = evaluate(&self.model, val, t.batch_size)?;
        let row = EpochMetrics {
            epoch,
            train_loss: total / train.len() as f64,
            val_acc: core.accuracy,
            val_ma: core.balanced_accuracy,
            val_f1: core.macro_f1,
            val_precision: core.macro_precision,
            val_recall_weighted: core.weighted_recall,
            val_auc: auc,
        };
        self.epoch = epoch;
        self.log.push(row);
        let improved = self.best.as_ref().map_or(true, |b| {
            row.val_acc > b.log.last().map_or(f64::NEG_INFINITY, |r| r.val_acc)
        });
        if improved {
            self.best = Some(self.checkpoint());
        }
        Ok(row)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.run.train.epochs {
            self.run_epoch(train, val)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

/// Trains a fresh model for `run.train.epochs` epochs.
pub fn train(
    run: &RunConfig,
    model: DualPathModel,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(run.clone(), model)?;
    t.fit(train, val, |_| Ok(()))?;
    let last = t.checkpoint();
    Ok(TrainOutcome {
        best: t.best.take().expect("at least one epoch ran"),
        log: t.log,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_is_inclusive() {
        let d = [20, 40];
        assert_eq!(lr_at(1, 1e-4, &d, 0.1), 1e-4);
        assert!((lr_at(20, 1e-4, &d, 0.1) - 1e-5).abs() < 1e-20);
        assert!((lr_at(25, 1e-4, &d, 0.1) - 1e-5).abs() < 1e-20);
        assert!((lr_at(45, 1e-4, &d, 0.1) - 1e-6).abs() < 1e-20);
        assert!((lr_at(60, 1e-4, &d, 0.1) - 1e-6).abs() < 1e-20);
        assert!((lr_at(19, 1e-4, &d, 0.1) - 1e-4).abs() < 1e-20);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::pretrained().validate().is_ok());
        let bad = TrainConfig {
            decay_epochs: vec![50],
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_rows_round_trip() {
        let r = EpochMetrics {
            epoch: 3,
            train_loss: 0.1 + 0.2,
            val_acc: 2.0 / 3.0,
            val_ma: 0.5,
            val_f1: 1e-17,
            val_precision: 0.25,
            val_recall_weighted: 1.0,
            val_auc: f64::NAN,
        };
        let back = EpochMetrics::parse_csv_row(&r.to_csv_row()).unwrap();
        assert_eq!(back.train_loss.to_bits(), r.train_loss.to_bits());
        assert_eq!(back.val_acc.to_bits(), r.val_acc.to_bits());
        assert!(back.val_auc.is_nan());
        assert!(log_csv(&[r]).starts_with(LOG_HEADER));
    }
}
