//! Field-level train/val/test splits, the sample manifest and imbalance statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

/// Field ids per split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, field: &str) -> Option<Split> {
        let has = |v: &Vec<String>| v.iter().any(|f| f == field);
        if has(&self.train) {
            Some(Split::Train)
        } else if has(&self.val) {
            Some(Split::Val)
        } else if has(&self.test) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Seeded shuffle of distinct field ids into three non-empty splits.
///
/// Validation and test sizes are rounded; training takes the remainder.
pub fn build_splits(fields: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut ids: Vec<String> = fields.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::usage(format!("{n} distinct fields cannot fill three splits")));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((fv * n as f64).round() as usize).clamp(1, n - 2);
    let n_test = ((fs * n as f64).round() as usize).clamp(1, n - 1 - n_val);
    let n_train = n - n_val - n_test;
    Ok(SplitAssignment {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    })
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub field_id: String,
    pub split: Split,
    pub augmentation: String,
}

const MANIFEST_HEADER: &str = "sample_id,field_id,split,augmentation";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        for field in [&e.sample_id, &e.field_id, &e.augmentation] {
            if field.contains([',', '\n', '"']) {
                return Err(Error::Input(format!("manifest value `{field}` contains a separator")));
            }
        }
        out.push_str(&format!("{},{},{},{}\n", e.sample_id, e.field_id, e.split, e.augmentation));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let bad = |line: usize, reason: String| Error::Ingestion {
        file: file.clone(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(bad(1, format!("header must be `{MANIFEST_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(i + 2, format!("expected 4 columns, found {}", cols.len())));
        }
        out.push(ManifestEntry {
            sample_id: cols[0].to_string(),
            field_id: cols[1].to_string(),
            split: cols[2].parse().map_err(|e: Error| bad(i + 2, e.to_string()))?,
            augmentation: cols[3].to_string(),
        });
    }
    // Leakage guard: one split per field.
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for e in &out {
        if let Some(prev) = seen.insert(&e.field_id, e.split) {
            if prev != e.split {
                return Err(bad(0, format!("field {} appears in {prev} and {}", e.field_id, e.split)));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImbalanceStats {
    /// Background/foreground ratio of each mask with foreground, in input order.
    pub ratios: Vec<f64>,
    /// Indices of masks without any foreground.
    pub empty: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Background/foreground ratio statistics; masks hold `{0, 1}` (nonzero is foreground).
pub fn imbalance_stats<M: AsRef<[u8]>>(masks: &[M]) -> Result<ImbalanceStats> {
    let mut ratios = Vec::new();
    let mut empty = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let m = m.as_ref();
        let fg = m.iter().filter(|&&v| v != 0).count();
        if fg == 0 {
            empty.push(i);
        } else {
            ratios.push((m.len() - fg) as f64 / fg as f64);
        }
    }
    if ratios.is_empty() {
        return Err(Error::usage("no mask has foreground pixels"));
    }
    let n = ratios.len() as f64;
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(ImbalanceStats {
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        median,
        mean,
        std: var.sqrt(),
        ratios,
        empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("field{i}")).collect()
    }

    #[test]
    fn ten_fields_split_eight_one_one() {
        let s = build_splits(&ids(10), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, build_splits(&ids(10), (0.8, 0.1, 0.1), 7).unwrap());
        assert!(build_splits(&ids(2), (0.8, 0.1, 0.1), 7).is_err());
        assert!(build_splits(&ids(10), (0.8, 0.1, 0.2), 7).is_err());
    }

    #[test]
    fn imbalance_examples() {
        let s = imbalance_stats(&[vec![1u8, 0, 0, 0]]).unwrap();
        assert_eq!((s.min, s.max, s.median, s.mean, s.std), (3.0, 3.0, 3.0, 3.0, 0.0));
        let s = imbalance_stats(&[vec![1u8, 0, 0], vec![1, 0, 0, 0, 0], vec![0, 0]]).unwrap();
        assert_eq!((s.mean, s.std, s.median), (3.0, 1.0, 3.0));
        assert_eq!(s.empty, vec![2]);
        assert_eq!(imbalance_stats(&[vec![1u8, 1]]).unwrap().max, 0.0);
        assert!(imbalance_stats(&[vec![0u8; 4]]).is_err());
    }

    #[test]
    fn manifest_round_trip_and_leakage_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let e = |s: &str, f: &str, split| ManifestEntry {
            sample_id: s.into(),
            field_id: f.into(),
            split,
            augmentation: "center572".into(),
        };
        let rows = vec![e("a", "f1", Split::Train), e("b", "f2", Split::Val)];
        write_manifest(&p, &rows).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), rows);
        write_manifest(&p, &[e("a", "f1", Split::Train), e("b", "f1", Split::Test)]).unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
