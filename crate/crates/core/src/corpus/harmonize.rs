//! Maps native per-dataset labels onto the unified ontology.
//!
//! Native rows are read from CSV files with the columns `path, source,
//! identity, split, gender`, any of the attribute columns, and optional
//! `distance_m, height_m, angle_deg`. The mapping file has the columns
//! `attribute,source,native_class,unified_index`; the target is a class
//! index, `unknown` (gender only) or `-100` (unassigned).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::prompt::{compose_prompt, PromptMode, PromptVocabulary};
use super::record::{attribute_index, SampleRecord, Split, ALL_ATTRIBUTES};
use crate::autograd::IGNORE_INDEX;
use crate::error::{Error, Result};

pub const UNKNOWN_GENDER: usize = 2;

/// One row of a source dataset before harmonization.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NativeRecord {
    pub path: String,
    pub source: String,
    pub identity: String,
    pub split: Option<Split>,
    pub gender: String,
    /// Native class string per attribute column; empty means missing.
    pub attributes: BTreeMap<String, String>,
    pub distance_m: Option<f64>,
    pub height_m: Option<f64>,
    pub angle_deg: Option<u32>,
}

/// `(attribute, source, native class) -> unified index`. Gender targets
/// use 0, 1 and 2; attribute targets may be [`IGNORE_INDEX`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OntologyMapping {
    table: BTreeMap<(String, String, String), i64>,
}

fn key(attribute: &str, source: &str, native: &str) -> (String, String, String) {
    (
        attribute.to_string(),
        source.to_string(),
        native.trim().to_lowercase(),
    )
}

impl OntologyMapping {
    /// Builds a mapping. Within one attribute and source, two native
    /// classes may not share a unified class index.
    pub fn new(rows: impl IntoIterator<Item = (String, String, String, i64)>) -> Result<Self> {
        let mut table = BTreeMap::new();
        let mut targets: HashMap<(String, String, i64), String> = HashMap::new();
        for (attribute, source, native, index) in rows {
            if attribute != "gender" && attribute_index(&attribute).is_none() {
                return Err(Error::Config(format!(
                    "mapping names unknown attribute {attribute:?}"
                )));
            }
            let gender = attribute == "gender";
            if gender && !(0..=UNKNOWN_GENDER as i64).contains(&index)
                || !gender && index < 0 && index != IGNORE_INDEX
            {
                return Err(Error::Config(format!(
                    "invalid unified index {index} for {attribute}"
                )));
            }
            let k = key(&attribute, &source, &native);
            if let Some(prev) = table.insert(k.clone(), index) {
                if prev != index {
                    return Err(Error::Config(format!(
                        "{attribute}/{source}: native class {native:?} maps to both {prev} and {index}"
                    )));
                }
            }
            let is_class = if gender {
                index != UNKNOWN_GENDER as i64
            } else {
                index >= 0
            };
            if is_class {
                if let Some(other) =
                    targets.insert((attribute.clone(), source.clone(), index), k.2.clone())
                {
                    if other != k.2 {
                        return Err(Error::Config(format!(
                            "{attribute}/{source}: index collision, {other:?} and {:?} both map to {index}",
                            k.2
                        )));
                    }
                }
            }
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if header != ["attribute", "source", "native_class", "unified_index"] {
            return Err(Error::Format(format!(
                "{}: unexpected mapping header {header:?}",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let target = rec[3].trim();
            let index = match target {
                "unknown" | "Unknown" => UNKNOWN_GENDER as i64,
                t => t.parse().map_err(|_| {
                    Error::Format(format!(
                        "{} line {}: bad index {t:?}",
                        path.display(),
                        i + 2
                    ))
                })?,
            };
            rows.push((
                rec[0].to_string(),
                rec[1].to_string(),
                rec[2].to_string(),
                index,
            ));
        }
        Self::new(rows)
    }

    pub fn get(&self, attribute: &str, source: &str, native: &str) -> Option<i64> {
        self.table.get(&key(attribute, source, native)).copied()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Reads native rows from one source CSV.
pub fn read_native_csv(path: &Path) -> Result<Vec<NativeRecord>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    for required in ["path", "source", "identity", "split", "gender"] {
        if !header.iter().any(|h| h == required) {
            return Err(Error::Format(format!(
                "{}: missing column {required}",
                path.display()
            )));
        }
    }
    for h in &header {
        let known = [
            "path",
            "source",
            "identity",
            "split",
            "gender",
            "distance_m",
            "height_m",
            "angle_deg",
        ];
        if !known.contains(&h.as_str()) && attribute_index(h).is_none() {
            return Err(Error::Format(format!(
                "{}: unknown column {h:?}",
                path.display()
            )));
        }
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let mut r = NativeRecord::default();
        for (h, v) in header.iter().zip(rec.iter()) {
            let v = v.trim();
            let bad = || Error::Format(format!("{} line {line}: bad {h} {v:?}", path.display()));
            match h.as_str() {
                "path" => r.path = v.into(),
                "source" => r.source = v.into(),
                "identity" => r.identity = v.into(),
                "split" => {
                    r.split = if v.is_empty() {
                        None
                    } else {
                        Some(Split::parse(v)?)
                    }
                }
                "gender" => r.gender = v.into(),
                "distance_m" => {
                    r.distance_m = (!v.is_empty())
                        .then(|| v.parse())
                        .transpose()
                        .map_err(|_| bad())?
                }
                "height_m" => {
                    r.height_m = (!v.is_empty())
                        .then(|| v.parse())
                        .transpose()
                        .map_err(|_| bad())?
                }
                "angle_deg" => {
                    r.angle_deg = (!v.is_empty())
                        .then(|| v.parse())
                        .transpose()
                        .map_err(|_| bad())?
                }
                attr => {
                    r.attributes.insert(attr.to_string(), v.to_string());
                }
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Sample counts of one dataset by split and gender (`[split][gender]`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartitionRow {
    pub name: String,
    pub counts: [[usize; 3]; 3],
}

impl PartitionRow {
    pub fn split_total(&self, split: usize) -> usize {
        self.counts[split].iter().sum()
    }

    pub fn total(&self) -> usize {
        (0..3).map(|s| self.split_total(s)).sum()
    }

    /// A message when a stated total disagrees with the recomputed one.
    pub fn check_stated_total(&self, stated: usize) -> Option<String> {
        let computed = self.total();
        (computed != stated).then(|| {
            format!(
                "{}: stated total {stated} but splits sum to {computed}",
                self.name
            )
        })
    }
}

/// Counts and problems found while harmonizing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Audit {
    /// One row per source, in name order.
    pub partitions: Vec<PartitionRow>,
    /// `(attribute, source, unified class) -> count`, ignored labels as -100.
    pub class_counts: BTreeMap<(String, String, i64), usize>,
    /// `(attribute, source, native class) -> count` of unmapped labels.
    pub unmapped: BTreeMap<(String, String, String), usize>,
}

fn split_index(s: Split) -> usize {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

impl Audit {
    /// Row summing every source.
    pub fn unified(&self, name: &str) -> PartitionRow {
        let mut row = PartitionRow {
            name: name.into(),
            ..PartitionRow::default()
        };
        for p in &self.partitions {
            for s in 0..3 {
                for g in 0..3 {
                    row.counts[s][g] += p.counts[s][g];
                }
            }
        }
        row
    }

    /// Split-by-gender table with recomputed totals, one row per source plus
    /// a unified row.
    pub fn partition_csv(&self) -> String {
        let mut s = String::from("dataset");
        for split in ["train", "val", "test"] {
            let _ = write!(s, ",{split}_M,{split}_F,{split}_U,{split}_total");
        }
        s.push_str(",total\n");
        let unified = self.unified("unified");
        for row in self.partitions.iter().chain([&unified]) {
            s.push_str(&row.name);
            for split in 0..3 {
                let c = row.counts[split];
                let _ = write!(s, ",{},{},{},{}", c[0], c[1], c[2], row.split_total(split));
            }
            let _ = writeln!(s, ",{}", row.total());
        }
        s
    }

    pub fn class_csv(&self) -> String {
        let mut s = String::from("attribute,source,class_index,count\n");
        for ((a, src, c), n) in &self.class_counts {
            let _ = writeln!(s, "{a},{src},{c},{n}");
        }
        s
    }

    pub fn unmapped_csv(&self) -> String {
        let mut s = String::from("attribute,source,native_class,count\n");
        for ((a, src, c), n) in &self.unmapped {
            let _ = writeln!(s, "{a},{src},{c},{n}");
        }
        s
    }
}

/// Harmonizes native rows. Unmapped gender labels become Unknown and
/// unmapped attribute labels become -100; both are listed in the audit.
/// Fails if an identity appears in two splits.
pub fn harmonize(
    rows: &[NativeRecord],
    mapping: &OntologyMapping,
    vocab: &PromptVocabulary,
    mode: PromptMode,
) -> Result<(Vec<SampleRecord>, Audit)> {
    let mut seen: HashMap<&str, Split> = HashMap::new();
    let mut audit = Audit::default();
    let mut partitions: BTreeMap<String, PartitionRow> = BTreeMap::new();
    let attrs: Vec<String> = ALL_ATTRIBUTES.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let split = r
            .split
            .ok_or_else(|| Error::Config(format!("{}: no split assigned", r.path)))?;
        if let Some(&first) = seen.get(r.identity.as_str()) {
            if first != split {
                return Err(Error::Leakage {
                    identity: r.identity.clone(),
                    first: first.to_string(),
                    second: split.to_string(),
                });
            }
        } else {
            seen.insert(&r.identity, split);
        }

        let gender = if r.gender.trim().is_empty() {
            UNKNOWN_GENDER
        } else {
            match mapping.get("gender", &r.source, &r.gender) {
                Some(g) => g as usize,
                None => {
                    *audit
                        .unmapped
                        .entry(key("gender", &r.source, &r.gender))
                        .or_default() += 1;
                    UNKNOWN_GENDER
                }
            }
        };

        let mut labels = [IGNORE_INDEX; 7];
        for (i, name) in ALL_ATTRIBUTES.iter().enumerate() {
            let Some(native) = r.attributes.get(*name).filter(|v| !v.trim().is_empty()) else {
                continue;
            };
            match mapping.get(name, &r.source, native) {
                Some(idx) => {
                    let classes = vocab.classes(name).unwrap_or(0) as i64;
                    if idx >= classes {
                        return Err(Error::Label {
                            label: idx,
                            classes: classes as usize,
                        });
                    }
                    labels[i] = idx;
                }
                None => {
                    *audit
                        .unmapped
                        .entry(key(name, &r.source, native))
                        .or_default() += 1
                }
            }
        }
        for (i, name) in ALL_ATTRIBUTES.iter().enumerate() {
            *audit
                .class_counts
                .entry((name.to_string(), r.source.clone(), labels[i]))
                .or_default() += 1;
        }
        partitions
            .entry(r.source.clone())
            .or_insert_with(|| PartitionRow {
                name: r.source.clone(),
                ..PartitionRow::default()
            })
            .counts[split_index(split)][gender] += 1;

        let mut record = SampleRecord {
            path: r.path.clone(),
            image: None,
            gender,
            attributes: labels,
            prompt: String::new(),
            identity: r.identity.clone(),
            split,
            distance_m: r.distance_m,
            height_m: r.height_m,
            angle_deg: r.angle_deg,
            source: r.source.clone(),
        };
        record.prompt = compose_prompt(&record, vocab, &attrs, mode);
        out.push(record);
    }
    audit.partitions = partitions.into_values().collect();
    Ok((out, audit))
}

/// Writes the audit CSVs into `dir`.
pub fn write_audit(dir: &Path, audit: &Audit) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
    for (name, text) in [
        ("audit_partition.csv", audit.partition_csv()),
        ("audit_classes.csv", audit.class_csv()),
        ("audit_unmapped.csv", audit.unmapped_csv()),
    ] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(Error::at_path(&p))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::synth_vocabulary;

    fn mapping() -> OntologyMapping {
        let rows = [
            ("gender", "a", "man", 0),
            ("gender", "a", "woman", 1),
            ("gender", "a", "unclear", 2),
            ("gender", "b", "M", 0),
            ("gender", "b", "F", 1),
            ("feet", "a", "heels", 2),
            ("feet", "b", "high-heeled shoes", 2),
            ("feet", "a", "sneakers", 0),
        ];
        OntologyMapping::new(rows.map(|(a, s, n, i)| (a.into(), s.into(), n.into(), i))).unwrap()
    }

    fn native(source: &str, id: &str, split: Split, gender: &str, feet: &str) -> NativeRecord {
        NativeRecord {
            path: format!("{id}.ppm"),
            source: source.into(),
            identity: id.into(),
            split: Some(split),
            gender: gender.into(),
            attributes: [("feet".to_string(), feet.to_string())].into(),
            ..NativeRecord::default()
        }
    }

    #[test]
    fn unclear_gender_is_unknown_and_feet_are_mapped() {
        let rows = [
            native("a", "p1", Split::Train, "unclear", "heels"),
            native("b", "p2", Split::Val, "F", "High-Heeled Shoes"),
        ];
        let (recs, audit) =
            harmonize(&rows, &mapping(), &synth_vocabulary(), PromptMode::Neutral).unwrap();
        assert_eq!(recs[0].gender, 2);
        assert_eq!(recs[0].attribute("feet"), 2);
        assert_eq!(recs[1].attribute("feet"), 2);
        assert!(recs[1].prompt.contains("a person wearing high heels"));
        assert!(audit.unmapped.is_empty());
    }

    #[test]
    fn unmapped_labels_are_kept_and_listed() {
        let rows = [native("b", "p3", Split::Test, "other", "sandals")];
        let (recs, audit) =
            harmonize(&rows, &mapping(), &synth_vocabulary(), PromptMode::Neutral).unwrap();
        assert_eq!(recs[0].gender, 2);
        assert_eq!(recs[0].attribute("feet"), IGNORE_INDEX);
        assert_eq!(audit.unmapped.len(), 2);
        assert_eq!(audit.unmapped[&key("feet", "b", "sandals")], 1);
    }

    #[test]
    fn identity_in_two_splits_is_leakage() {
        let rows = [
            native("a", "p1", Split::Train, "man", ""),
            native("a", "p1", Split::Val, "man", ""),
        ];
        match harmonize(&rows, &mapping(), &synth_vocabulary(), PromptMode::Neutral) {
            Err(Error::Leakage { identity, .. }) => assert_eq!(identity, "p1"),
            other => panic!("expected leakage, got {other:?}"),
        }
    }

    #[test]
    fn index_collisions_are_rejected() {
        let rows = [
            ("feet".to_string(), "a".to_string(), "heels".to_string(), 2),
            ("feet".to_string(), "a".to_string(), "boots".to_string(), 2),
        ];
        assert!(matches!(OntologyMapping::new(rows), Err(Error::Config(_))));
        let rows = [
            ("feet".to_string(), "a".to_string(), "heels".to_string(), 2),
            ("feet".to_string(), "a".to_string(), "heels".to_string(), 1),
        ];
        assert!(matches!(OntologyMapping::new(rows), Err(Error::Config(_))));
    }

    #[test]
    fn partition_totals_are_recomputed() {
        let row = PartitionRow {
            name: "unified".into(),
            counts: [
                [177_173, 131_419, 0],
                [110_555, 84_128, 0],
                [67_591, 67_361, 0],
            ],
        };
        assert_eq!(row.split_total(0), 308_592);
        assert_eq!(row.split_total(1), 194_683);
        assert_eq!(row.split_total(2), 134_952);
        assert_eq!(row.total(), 638_227);
        assert!(row.check_stated_total(638_372).is_some());
        assert!(row.check_stated_total(638_227).is_none());
    }

    #[test]
    fn audit_counts_every_sample() {
        let rows = [
            native("a", "p1", Split::Train, "man", "heels"),
            native("a", "p2", Split::Train, "woman", ""),
            native("b", "p3", Split::Test, "F", ""),
        ];
        let (recs, audit) =
            harmonize(&rows, &mapping(), &synth_vocabulary(), PromptMode::Neutral).unwrap();
        assert_eq!(audit.unified("all").total(), recs.len());
        let csv = audit.partition_csv();
        assert!(csv.lines().last().unwrap().ends_with(",3"));
    }
}
