//! Distance and height binning into evaluation strata.

use super::record::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::StratumKey;

pub const UNBINNED: &str = "unbinned";

/// Left-open, right-closed bins: `v ≤ e0`, `e0 < v ≤ e1`, ..., `v > e_last`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bins {
    edges: Vec<f64>,
}

impl Default for Bins {
    fn default() -> Self {
        Self {
            edges: vec![20.0, 40.0, 80.0],
        }
    }
}

impl Bins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty()
            || edges.windows(2).any(|w| !(w[0] < w[1]))
            || edges.iter().any(|e| !e.is_finite())
        {
            return Err(Error::Config(format!(
                "bin edges must be finite and strictly increasing: {edges:?}"
            )));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn count(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn index(&self, value: f64) -> usize {
        self.edges.iter().take_while(|&&e| value > e).count()
    }

    pub fn label_at(&self, index: usize, var: char) -> String {
        let e = &self.edges;
        if index == 0 {
            format!("{var}≤{}", e[0])
        } else if index == e.len() {
            format!("{var}>{}", e[e.len() - 1])
        } else {
            format!("{}<{var}≤{}", e[index - 1], e[index])
        }
    }

    pub fn label(&self, value: f64, var: char) -> String {
        self.label_at(self.index(value), var)
    }
}

pub fn angle_group(angle: Option<u32>) -> String {
    angle
        .map(|a| format!("{a}°"))
        .unwrap_or_else(|| "unangled".into())
}

/// Stratum of a record: nadir views (90°) bin by height, others by distance.
pub fn bin_metadata(record: &SampleRecord, bins: &Bins) -> StratumKey {
    let value = if record.angle_deg == Some(90) {
        record.height_m.map(|h| (h, 'H'))
    } else {
        record.distance_m.map(|d| (d, 'D'))
    };
    StratumKey {
        group: angle_group(record.angle_deg),
        range: value
            .map(|(v, c)| bins.label(v, c))
            .unwrap_or_else(|| UNBINNED.into()),
    }
}

/// Every (angle group, bin) stratum for the angle groups present in
/// `records`, plus an unbinned stratum per group that needs one.
pub fn enumerate_strata(records: &[SampleRecord], bins: &Bins) -> Vec<StratumKey> {
    let mut angles: Vec<Option<u32>> = records.iter().map(|r| r.angle_deg).collect();
    angles.sort();
    angles.dedup();
    let mut out = Vec::new();
    for a in angles {
        let var = if a == Some(90) { 'H' } else { 'D' };
        let group = angle_group(a);
        for i in 0..bins.count() {
            out.push(StratumKey {
                group: group.clone(),
                range: bins.label_at(i, var),
            });
        }
        let unbinned = StratumKey {
            group,
            range: UNBINNED.into(),
        };
        if records.iter().any(|r| bin_metadata(r, bins) == unbinned) {
            out.push(unbinned);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::IGNORE_INDEX;
    use crate::corpus::record::Split;

    fn rec(angle: Option<u32>, d: Option<f64>, h: Option<f64>) -> SampleRecord {
        SampleRecord {
            path: String::new(),
            image: None,
            gender: 0,
            attributes: [IGNORE_INDEX; 7],
            prompt: String::new(),
            identity: "x".into(),
            split: Split::Val,
            distance_m: d,
            height_m: h,
            angle_deg: angle,
            source: "s".into(),
        }
    }

    #[test]
    fn bin_examples() {
        let b = Bins::default();
        assert_eq!(
            bin_metadata(&rec(Some(30), Some(15.0), None), &b).range,
            "D≤20"
        );
        assert_eq!(
            bin_metadata(&rec(Some(90), None, Some(85.0)), &b).range,
            "H>80"
        );
        assert_eq!(
            bin_metadata(&rec(Some(60), Some(40.0), None), &b).range,
            "20<D≤40"
        );
        assert_eq!(
            bin_metadata(&rec(Some(30), Some(100.0), None), &b).range,
            "D>80"
        );
        assert_eq!(
            bin_metadata(&rec(Some(90), None, Some(20.0)), &b).range,
            "H≤20"
        );
        assert_eq!(bin_metadata(&rec(None, None, None), &b).range, UNBINNED);
        assert_eq!(
            bin_metadata(&rec(Some(30), Some(15.0), None), &b).group,
            "30°"
        );
    }

    #[test]
    fn strata_enumeration() {
        let recs = vec![rec(Some(30), Some(15.0), None), rec(Some(90), None, None)];
        let s = enumerate_strata(&recs, &Bins::default());
        assert_eq!(s.len(), 9);
        assert_eq!(s[4].range, "H≤20");
        assert_eq!(s[8].range, UNBINNED);
    }

    #[test]
    fn edges_must_increase() {
        assert!(Bins::new(vec![40.0, 20.0]).is_err());
        assert!(Bins::new(vec![]).is_err());
    }
}
