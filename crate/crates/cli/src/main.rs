//! `duopath`: synthesize, harmonize, train, evaluate, explain and ablate.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, missing or
//! unparsable inputs), 1 for failures while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use duopath::ablation::{run_matrix, table_csv, ConfigMatrix};
use duopath::checkpoint::Checkpoint;
use duopath::config::RunConfig;
use duopath::corpus::bins::{bin_metadata, enumerate_strata, Bins};
use duopath::corpus::harmonize::{harmonize, read_native_csv, write_audit, OntologyMapping};
use duopath::corpus::record::{load_corpus, write_corpus_csv, SampleRecord, Split};
use duopath::corpus::synth::{synth_generate, write_corpus_dir, SynthConfig};
use duopath::corpus::{PromptMode, PromptVocabulary};
use duopath::explain::{explain_batch, write_heatmap, write_overlay};
use duopath::metrics::{core_metrics, roc_curve, roc_csv, strata_csv, stratified_report, CoreMetrics, FEMALE};
use duopath::trainer::{build_model, log_csv, predict, Dataset, GenderHead, Trainer};

#[derive(Parser)]
#[command(name = "duopath", version, about = "Dual-path gender and attribute classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (CSV, PPM images, prompt vocabulary).
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Relative frequency of the four degradation bins.
        #[arg(long, default_value = "0.4,0.2,0.2,0.2")]
        bins: String,
        /// Attribute set: 5 or 7.
        #[arg(long, default_value_t = 5)]
        attributes: usize,
        #[arg(long, default_value_t = 0.1)]
        unknown_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map native labels onto the unified ontology.
    Harmonize {
        /// CSV with columns attribute,source,native_class,unified_index.
        #[arg(long)]
        mapping: PathBuf,
        /// Prompt vocabulary CSV.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Missing attributes contribute the neutral prompt or nothing.
        #[arg(long, default_value = "neutral", value_parser = ["neutral", "omit"])]
        prompt_mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, the metric log and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus CSV; overrides `corpus` in the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Prompt vocabulary; defaults to vocab.csv next to the corpus.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Metrics, stratified report and ROC points of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Distance/height bin edges in metres.
        #[arg(long, default_value = "20,40,80")]
        strata: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute and gender heatmaps for selected samples.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Sample paths or identities, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        /// Pixels per grid cell in the PGM heatmaps.
        #[arg(long, default_value_t = 8)]
        cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every cell of a configuration matrix.
    Ablate {
        #[arg(long)]
        config_matrix: PathBuf,
        /// Base configuration the matrix overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<duopath::Error> for Failure {
    fn from(e: duopath::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow::anyhow!("{}: no such file", path.display())))
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn vocab_path(corpus: &Path, vocab: Option<PathBuf>) -> PathBuf {
    vocab.unwrap_or_else(|| corpus.parent().unwrap_or(Path::new(".")).join("vocab.csv"))
}

fn load_inputs(corpus: &Path, vocab: &Path) -> Result<(Vec<SampleRecord>, PromptVocabulary), Failure> {
    require(corpus)?;
    require(vocab)?;
    let records = usage(load_corpus(corpus).with_context(|| format!("loading {}", corpus.display())))?;
    let vocab = usage(PromptVocabulary::load(vocab).with_context(|| format!("loading {}", vocab.display())))?;
    Ok((records, vocab))
}

fn parse_floats(s: &str) -> Result<Vec<f64>, Failure> {
    usage(
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}")))
            .collect(),
    )
}

fn synth(n: usize, seed: u64, bins: &str, attributes: usize, unknown_rate: f64, out: &Path) -> Outcome {
    let cfg = SynthConfig {
        n,
        seed,
        attributes,
        bin_weights: parse_floats(bins)?,
        unknown_rate,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg).map_err(|e| Failure::Usage(e.into()))?;
    write_corpus_dir(out, &corpus)?;
    eprintln!("wrote {} samples to {}", corpus.records.len(), out.display());
    Ok(())
}

fn harmonize_cmd(mapping: &Path, vocab: &Path, inputs: &[PathBuf], mode: &str, out: &Path) -> Outcome {
    require(mapping)?;
    require(vocab)?;
    let mapping = usage(OntologyMapping::load(mapping).context("loading mapping"))?;
    let vocab = usage(PromptVocabulary::load(vocab).context("loading vocabulary"))?;
    let mut rows = Vec::new();
    for input in inputs {
        require(input)?;
        rows.extend(usage(read_native_csv(input).with_context(|| format!("reading {}", input.display())))?);
    }
    let mode = if mode == "omit" { PromptMode::Omit } else { PromptMode::Neutral };
    let (records, audit) = harmonize(&rows, &mapping, &vocab, mode)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_corpus_csv(&out.join("corpus.csv"), &records)?;
    vocab.save(&out.join("vocab.csv"))?;
    write_audit(out, &audit)?;
    eprintln!("harmonized {} samples, {} unmapped label kinds", records.len(), audit.unmapped.len());
    Ok(())
}

fn datasets(run: &RunConfig, records: &[SampleRecord]) -> anyhow::Result<(Dataset, Dataset)> {
    let attrs = duopath::corpus::record::attribute_set(run.train.attributes)?;
    let size = run.model.image_size;
    let train = Dataset::new(
        records.iter().filter(|r| r.split == Split::Train),
        &attrs,
        size,
        run.train.hflip,
    )?;
    let val = Dataset::new(records.iter().filter(|r| r.split == Split::Val), &attrs, size, false)?;
    if train.is_empty() || val.is_empty() {
        bail!("corpus needs non-empty train and val splits");
    }
    Ok((train, val))
}

fn train_cmd(
    config: Option<PathBuf>,
    corpus: Option<PathBuf>,
    vocab: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: bool,
) -> Outcome {
    let mut run = match &config {
        Some(p) => {
            require(p)?;
            usage(RunConfig::load(p).with_context(|| format!("reading {}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if corpus.is_some() {
        run.corpus = corpus;
    }
    if out.is_some() {
        run.out = out;
    }
    let Some(corpus) = run.corpus.clone() else {
        return Err(Failure::Usage(anyhow::anyhow!("no corpus given (--corpus or `corpus` in the config)")));
    };
    let Some(out) = run.out.clone() else {
        return Err(Failure::Usage(anyhow::anyhow!("no output directory given (--out or `out` in the config)")));
    };
    usage(run.train.validate().map_err(Into::into))?;
    let (records, prompts) = load_inputs(&corpus, &vocab_path(&corpus, vocab))?;
    let (train, val) = usage(datasets(&run, &records))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut trainer = if resume {
        let last = out.join("last.ckpt");
        require(&last)?;
        let best = out.join("best.ckpt");
        let best = if best.exists() { Some(Checkpoint::load(&best)?) } else { None };
        Trainer::resume(Checkpoint::load(&last)?, best)?
    } else {
        Trainer::new(run.clone(), build_model(&run, &prompts)?)?
    };
    trainer.run.save(&out.join("config.txt"))?;
    trainer.fit(&train, &val, |t| {
        let r = t.log.last().expect("epoch logged");
        eprintln!(
            "epoch {:>3}  loss {:.4}  val acc {:.4}  mA {:.4}  F1 {:.4}  AUC {:.4}",
            r.epoch, r.train_loss, r.val_acc, r.val_ma, r.val_f1, r.val_auc
        );
        t.checkpoint().save(&out.join("last.ckpt"))?;
        if let Some(b) = &t.best {
            if b.epoch == t.epoch {
                b.save(&out.join("best.ckpt"))?;
            }
        }
        fs::write(out.join("metrics.csv"), log_csv(&t.log)).map_err(|e| duopath::Error::Io(e))
    })?;
    eprintln!("best epoch {}", trainer.best_epoch().unwrap_or(0));
    Ok(())
}

fn metrics_text(name: &str, m: &CoreMetrics, auc: Option<f64>) -> String {
    let auc = auc.map_or("NA".to_string(), |a| format!("{a:.6}"));
    format!(
        "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{auc}\n",
        m.accuracy, m.balanced_accuracy, m.macro_f1, m.macro_precision, m.weighted_recall
    )
}

fn eval_cmd(checkpoint: &Path, corpus: &Path, split: &str, strata: &str, out: &Path) -> Outcome {
    require(checkpoint)?;
    require(corpus)?;
    let split = usage(Split::parse(split).map_err(Into::into))?;
    let bins = usage(Bins::new(parse_floats(strata)?).map_err(Into::into))?;
    let ckpt = usage(Checkpoint::load(checkpoint).context("loading checkpoint"))?;
    let records = usage(load_corpus(corpus).context("loading corpus"))?;
    let records: Vec<SampleRecord> = records.into_iter().filter(|r| r.split == split).collect();
    if records.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("split {split} is empty")));
    }
    let model = ckpt.model()?;
    let attrs: Vec<String> = model.config.attributes.iter().map(|a| a.name.clone()).collect();
    let data = Dataset::new(&records, &attrs, model.config.image_size, false)?;
    let preds = predict(&model, &data, ckpt.run.train.batch_size)?;
    let labels = data.genders();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut text = String::from("head,accuracy,balanced_accuracy,macro_f1,macro_precision,weighted_recall,auc\n");
    for (name, head) in [
        ("fused", GenderHead::Fused),
        ("direct", GenderHead::Direct),
        ("mediated", GenderHead::Mediated),
    ] {
        let m = core_metrics(&preds.gender(head), &labels)?;
        let auc = duopath::metrics::auc_female_vs_rest(&preds.p_female(head), &labels).ok();
        text.push_str(&metrics_text(name, &m, auc));
        if head == GenderHead::Fused {
            let mut cm = String::from("true\\pred,male,female,unknown\n");
            for (i, row) in m.confusion.counts.iter().enumerate() {
                cm.push_str(&format!("{},{},{},{}\n", ["male", "female", "unknown"][i], row[0], row[1], row[2]));
            }
            write(&out.join("confusion.csv"), &cm)?;
        }
    }
    for (a, name) in attrs.iter().enumerate() {
        let pairs: Vec<(usize, usize)> = data
            .attribute_labels(a)
            .iter()
            .zip(&preds.attributes[a])
            .filter(|(l, _)| **l >= 0)
            .map(|(&l, &p)| (p, l as usize))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let k = model.config.attributes[a].classes;
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = duopath::metrics::core_metrics_k(&p, &l, k)?;
        text.push_str(&metrics_text(&format!("attr:{name}"), &m, None));
    }
    write(&out.join("metrics.csv"), &text)?;

    let scores = preds.p_female(GenderHead::Fused);
    let keys: Vec<_> = records.iter().map(|r| bin_metadata(r, &bins)).collect();
    let strata_keys = enumerate_strata(&records, &bins);
    let reports = stratified_report(&scores, &labels, &keys, &strata_keys, 0.5);
    write(&out.join("strata.csv"), &strata_csv(&reports))?;
    let positive: Vec<bool> = labels.iter().map(|&l| l == FEMALE).collect();
    match roc_curve(&scores, &positive) {
        Ok(points) => write(&out.join("roc.csv"), &roc_csv(&points))?,
        Err(e) => eprintln!("ROC skipped: {e}"),
    }
    print!("{text}");
    Ok(())
}

fn explain_cmd(checkpoint: &Path, corpus: &Path, ids: &[String], cell: usize, out: &Path) -> Outcome {
    require(checkpoint)?;
    require(corpus)?;
    let ckpt = usage(Checkpoint::load(checkpoint).context("loading checkpoint"))?;
    let records = usage(load_corpus(corpus).context("loading corpus"))?;
    let mut chosen = Vec::new();
    for id in ids {
        let hits: Vec<&SampleRecord> = records.iter().filter(|r| r.path == *id || r.identity == *id).collect();
        if hits.is_empty() {
            return Err(Failure::Usage(anyhow::anyhow!("no sample with path or identity {id:?}")));
        }
        chosen.extend(hits);
    }
    let model = ckpt.model()?;
    let attrs: Vec<String> = model.config.attributes.iter().map(|a| a.name.clone()).collect();
    let data = Dataset::new(chosen.iter().copied(), &attrs, model.config.image_size, false)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let names: Vec<String> = chosen
        .iter()
        .map(|r| {
            Path::new(&r.path)
                .file_stem()
                .map_or(r.path.clone(), |s| s.to_string_lossy().into_owned())
        })
        .collect();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (start, chunk) in idx.chunks(32).enumerate() {
        let batch = data.batch(chunk, None)?;
        let ids: Vec<String> = chunk.iter().map(|&i| names[i].clone()).collect();
        for (k, e) in explain_batch(&model, &batch, &ids)?.iter().enumerate() {
            let source = chosen[start * 32 + k].image.as_ref().expect("loaded");
            for m in e.attributes.iter().chain([&e.gender]) {
                let stem = format!("{}_{}", m.sample, m.tag);
                write_heatmap(m, &out.join(format!("{stem}.pgm")), cell)?;
                write_overlay(m, source, &out.join(format!("{stem}_overlay.ppm")))?;
                write(&out.join(format!("{stem}.csv")), &m.to_csv())?;
            }
        }
    }
    eprintln!("explained {} samples into {}", chosen.len(), out.display());
    Ok(())
}

fn ablate_cmd(matrix: &Path, config: Option<PathBuf>, corpus: &Path, vocab: Option<PathBuf>, out: &Path) -> Outcome {
    require(matrix)?;
    let base = match &config {
        Some(p) => {
            require(p)?;
            usage(RunConfig::load(p).context("reading base config"))?
        }
        None => RunConfig::default(),
    };
    let matrix = usage(ConfigMatrix::load(matrix).context("reading config matrix"))?;
    let cells = usage(matrix.expand(&base).map_err(Into::into))?;
    let (records, prompts) = load_inputs(corpus, &vocab_path(corpus, vocab))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    base.save(&out.join("config.txt"))?;
    for (i, c) in cells.iter().enumerate() {
        c.save(&out.join(format!("v{}.config.txt", i + 1)))?;
    }
    let rows = run_matrix(&cells, &records, &prompts, |r| {
        eprintln!("{}: mA {:.4} F1 {:.4} AUC {:.4}", r.name, r.balanced_accuracy, r.macro_f1, r.auc)
    })?;
    write(&out.join("ablation.csv"), &table_csv(&rows))?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth {
            n,
            seed,
            bins,
            attributes,
            unknown_rate,
            out,
        } => synth(n, seed, &bins, attributes, unknown_rate, &out),
        Command::Harmonize {
            mapping,
            vocab,
            inputs,
            prompt_mode,
            out,
        } => harmonize_cmd(&mapping, &vocab, &inputs, &prompt_mode, &out),
        Command::Train {
            config,
            corpus,
            vocab,
            out,
            resume,
        } => train_cmd(config, corpus, vocab, out, resume),
        Command::Eval {
            checkpoint,
            corpus,
            split,
            strata,
            out,
        } => eval_cmd(&checkpoint, &corpus, &split, &strata, &out),
        Command::Explain {
            checkpoint,
            corpus,
            ids,
            cell,
            out,
        } => explain_cmd(&checkpoint, &corpus, &ids, cell, &out),
        Command::Ablate {
            config_matrix,
            config,
            corpus,
            vocab,
            out,
        } => ablate_cmd(&config_matrix, config, &corpus, vocab, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
