//! Sample records and the corpus CSV format.

use std::fmt;
use std::fs::File;
use std::path::Path;

use image::RgbImage;

use crate::autograd::IGNORE_INDEX;
use crate::error::{Error, Result};

/// Every attribute column of the corpus CSV, in column order.
pub const ALL_ATTRIBUTES: [&str; 7] = [
    "hairstyle",
    "upper",
    "lower",
    "feet",
    "accessories",
    "beard",
    "moustache",
];

/// The five-attribute set, in model order.
pub const FIVE_ATTRIBUTES: [&str; 5] = ["hairstyle", "upper", "lower", "feet", "accessories"];

pub const CORPUS_HEADER: [&str; 16] = [
    "path",
    "gender",
    "hairstyle",
    "upper",
    "lower",
    "feet",
    "accessories",
    "beard",
    "moustache",
    "prompt",
    "identity",
    "split",
    "distance_m",
    "height_m",
    "angle_deg",
    "source",
];

pub fn attribute_index(name: &str) -> Option<usize> {
    ALL_ATTRIBUTES.iter().position(|a| *a == name)
}

/// Attribute names of the five- or seven-attribute configuration.
pub fn attribute_set(count: usize) -> Result<Vec<String>> {
    match count {
        5 => Ok(FIVE_ATTRIBUTES.iter().map(|s| s.to_string()).collect()),
        7 => Ok(ALL_ATTRIBUTES.iter().map(|s| s.to_string()).collect()),
        _ => Err(Error::Config(format!(
            "attribute set must have 5 or 7 attributes, got {count}"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One pedestrian crop with its labels and capture metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// Image path relative to the corpus CSV.
    pub path: String,
    /// Decoded pixels, when loaded or generated.
    pub image: Option<RgbImage>,
    /// Male = 0, Female = 1, Unknown = 2.
    pub gender: usize,
    /// Class index per entry of [`ALL_ATTRIBUTES`], or the ignore index.
    pub attributes: [i64; 7],
    pub prompt: String,
    pub identity: String,
    pub split: Split,
    pub distance_m: Option<f64>,
    pub height_m: Option<f64>,
    pub angle_deg: Option<u32>,
    pub source: String,
}

impl SampleRecord {
    pub fn attribute(&self, name: &str) -> i64 {
        attribute_index(name)
            .map(|i| self.attributes[i])
            .unwrap_or(IGNORE_INDEX)
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(s: &str, field: &str, line: usize) -> Result<Option<T>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("line {line}: bad {field} value {s:?}")))
}

fn parse_int(s: &str, field: &str, line: usize) -> Result<i64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: bad {field} value {s:?}")))
}

/// Writes records in the corpus CSV schema.
pub fn write_corpus_csv(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(Error::at_path(path))?;
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(file);
    w.write_record(CORPUS_HEADER)?;
    for r in records {
        let mut row = vec![r.path.clone(), r.gender.to_string()];
        row.extend(r.attributes.iter().map(|a| a.to_string()));
        row.extend([
            r.prompt.clone(),
            r.identity.clone(),
            r.split.to_string(),
            opt_num(r.distance_m),
            opt_num(r.height_m),
            r.angle_deg.map(|a| a.to_string()).unwrap_or_default(),
            r.source.clone(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::at_path(path))?;
    Ok(())
}

/// Reads a corpus CSV without loading images.
pub fn read_corpus_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(Error::at_path(path))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    if header != CORPUS_HEADER {
        return Err(Error::Format(format!(
            "{}: corpus header must be {}",
            path.display(),
            CORPUS_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let gender = parse_int(&row[1], "gender", line)?;
        if !(0..3).contains(&gender) {
            return Err(Error::Format(format!(
                "line {line}: gender {gender} not in 0..3"
            )));
        }
        let mut attributes = [IGNORE_INDEX; 7];
        for (k, a) in attributes.iter_mut().enumerate() {
            *a = parse_int(&row[2 + k], ALL_ATTRIBUTES[k], line)?;
            if *a < 0 && *a != IGNORE_INDEX {
                return Err(Error::Format(format!(
                    "line {line}: bad {} label {a}",
                    ALL_ATTRIBUTES[k]
                )));
            }
        }
        out.push(SampleRecord {
            path: row[0].to_string(),
            image: None,
            gender: gender as usize,
            attributes,
            prompt: row[9].to_string(),
            identity: row[10].to_string(),
            split: Split::parse(&row[11])?,
            distance_m: parse_opt(&row[12], "distance_m", line)?,
            height_m: parse_opt(&row[13], "height_m", line)?,
            angle_deg: parse_opt(&row[14], "angle_deg", line)?,
            source: row[15].to_string(),
        });
    }
    Ok(out)
}

/// Reads a corpus CSV and decodes every image relative to its directory.
pub fn load_corpus(csv_path: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = read_corpus_csv(csv_path)?;
    let dir = csv_path.parent().unwrap_or(Path::new("."));
    for r in &mut records {
        r.image = Some(super::image::read_ppm(&dir.join(&r.path))?);
    }
    Ok(records)
}
