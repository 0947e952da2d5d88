//! Datasets of labeled sparse feature vectors: jsonl/tsv ingestion, a hashing
//! bag-of-words featurizer, and seeded splitting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng_for, STREAM_SPLIT};

/// Default feature dimension for text records (2^14 buckets).
pub const DEFAULT_FEATURE_DIM: usize = 1 << 14;

/// Seed mixed into every token hash. Changing it changes every featurized corpus.
pub const HASH_SEED: u64 = 0x51ed_270b_d1a5_e3c7;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    #[default]
    Original,
    Swapped,
    Duplicated,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Original => "original",
            SourceTag::Swapped => "swapped",
            SourceTag::Duplicated => "duplicated",
        }
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    entries: Vec<(usize, f64)>,
}

impl SparseVec {
    /// Builds from arbitrary `(index, value)` pairs; repeated indices are summed
    /// and exact zeros dropped.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut entries: Vec<(usize, f64)> = pairs.into_iter().collect();
        entries.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|&(_, v)| v != 0.0);
        SparseVec { entries: merged }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|&(i, _)| i)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: SparseVec,
    pub label: usize,
    pub source: SourceTag,
}

impl Example {
    pub fn new(features: SparseVec, label: usize) -> Self {
        Example {
            features,
            label,
            source: SourceTag::Original,
        }
    }

    pub fn tagged(mut self, source: SourceTag) -> Self {
        self.source = source;
        self
    }
}

/// An ordered, validated, immutable collection of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::validation("class count and feature dimension must be positive"));
        }
        for (i, ex) in examples.iter().enumerate() {
            check_example(ex, num_classes, feature_dim).map_err(|m| Error::validation(format!("example {i}: {m}")))?;
        }
        Ok(Dataset {
            examples,
            num_classes,
            feature_dim,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    /// Always false for a constructed dataset; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Dataset::new(examples, self.num_classes, self.feature_dim)
    }

    /// Concatenation; both sides must agree on C and d.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_classes != other.num_classes || self.feature_dim != other.feature_dim {
            return Err(Error::validation(format!(
                "cannot concatenate datasets with (C={}, d={}) and (C={}, d={})",
                self.num_classes, self.feature_dim, other.num_classes, other.feature_dim
            )));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Dataset::new(examples, self.num_classes, self.feature_dim)
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn write_jsonl(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        for ex in &self.examples {
            let features: BTreeMap<String, f64> = ex.features.iter().map(|(i, v)| (i.to_string(), v)).collect();
            let record = JsonRecordOut {
                label: ex.label,
                features,
                source: (ex.source != SourceTag::Original).then_some(ex.source),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_jsonl(file)
    }
}

fn check_example(ex: &Example, num_classes: usize, feature_dim: usize) -> std::result::Result<(), String> {
    if ex.label >= num_classes {
        return Err(format!("label {} out of range for {} classes", ex.label, num_classes));
    }
    if let Some(max) = ex.features.max_index() {
        if max >= feature_dim {
            return Err(format!("feature index {max} out of range for dimension {feature_dim}"));
        }
    }
    if ex.features.iter().any(|(_, v)| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::validation(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl Format {
    /// Guess from the file extension; anything that is not `.tsv` is jsonl.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => Format::Tsv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Declared class count; otherwise 1 + the largest label seen.
    pub num_classes: Option<usize>,
    /// Declared feature dimension. Text records are hashed into this many
    /// buckets ([`DEFAULT_FEATURE_DIM`] if unset); feature-map records must fit
    /// inside it. Without it, a file of feature maps gets 1 + its largest index.
    pub feature_dim: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecordIn {
    label: i64,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    features: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    source: Option<SourceTag>,
}

#[derive(Serialize)]
struct JsonRecordOut {
    label: usize,
    features: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<SourceTag>,
}

enum RawFeatures {
    Text(String),
    Map(SparseVec),
}

struct RawRecord {
    line: usize,
    label: usize,
    features: RawFeatures,
    source: SourceTag,
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format, options: LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(BufReader::new(file), format, options)
}

pub fn read_dataset(reader: impl BufRead, format: Format, options: LoadOptions) -> Result<Dataset> {
    let mut records = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = match format {
            Format::Jsonl => parse_json_line(&line, line_no)?,
            Format::Tsv => parse_tsv_line(&line, line_no)?,
        };
        if let Some(c) = options.num_classes {
            if record.label >= c {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label {} out of range for declared {} classes", record.label, c),
                });
            }
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let num_classes = options
        .num_classes
        .unwrap_or_else(|| 1 + records.iter().map(|r| r.label).max().unwrap_or(0));
    let has_text = records.iter().any(|r| matches!(r.features, RawFeatures::Text(_)));
    let feature_dim = match options.feature_dim {
        Some(d) => d,
        None if has_text => DEFAULT_FEATURE_DIM,
        None => {
            1 + records
                .iter()
                .filter_map(|r| match &r.features {
                    RawFeatures::Map(m) => m.max_index(),
                    RawFeatures::Text(_) => None,
                })
                .max()
                .unwrap_or(0)
        }
    };
    if has_text && feature_dim < 2 {
        return Err(Error::validation("featurizer dimension must be at least 2"));
    }

    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        let features = match r.features {
            RawFeatures::Text(text) => featurize(&text, feature_dim),
            RawFeatures::Map(m) => m,
        };
        let ex = Example {
            features,
            label: r.label,
            source: r.source,
        };
        check_example(&ex, num_classes, feature_dim).map_err(|message| Error::Parse { line: r.line, message })?;
        examples.push(ex);
    }
    Dataset::new(examples, num_classes, feature_dim)
}

fn parse_json_line(line: &str, line_no: usize) -> Result<RawRecord> {
    let parse_err = |message: String| Error::Parse { line: line_no, message };
    let rec: JsonRecordIn = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let label = usize::try_from(rec.label).map_err(|_| parse_err(format!("negative label {}", rec.label)))?;
    let features = match (rec.text, rec.features) {
        (Some(text), None) => RawFeatures::Text(text),
        (None, Some(map)) => {
            let mut pairs = Vec::with_capacity(map.len());
            for (key, value) in map {
                let index: usize = key
                    .parse()
                    .map_err(|_| parse_err(format!("feature key {key:?} is not a non-negative integer")))?;
                if !value.is_finite() {
                    return Err(parse_err(format!("non-finite value for feature {index}")));
                }
                pairs.push((index, value));
            }
            RawFeatures::Map(SparseVec::from_pairs(pairs))
        }
        (Some(_), Some(_)) => return Err(parse_err("record has both \"text\" and \"features\"".into())),
        (None, None) => return Err(parse_err("record needs \"text\" or \"features\"".into())),
    };
    Ok(RawRecord {
        line: line_no,
        label,
        features,
        source: rec.source.unwrap_or_default(),
    })
}

fn parse_tsv_line(line: &str, line_no: usize) -> Result<RawRecord> {
    let (label, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
        line: line_no,
        message: "expected two tab-separated columns (label, text)".into(),
    })?;
    let label: usize = label.trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("bad label {label:?}"),
    })?;
    Ok(RawRecord {
        line: line_no,
        label,
        features: RawFeatures::Text(text.to_string()),
        source: SourceTag::Original,
    })
}

/// FNV-1a over the little-endian seed bytes followed by the token bytes.
pub fn token_hash(token: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in HASH_SEED.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashing bag-of-words: lowercase, split on non-alphanumeric runs, count
/// tokens per bucket, scale to unit L2 norm.
pub fn featurize(text: &str, dim: usize) -> SparseVec {
    assert!(dim >= 2, "featurizer dimension must be at least 2");
    let lower = text.to_lowercase();
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let bucket = (token_hash(token) % dim as u64) as usize;
        *counts.entry(bucket).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    SparseVec::from_pairs(counts.into_iter().map(|(i, c)| (i, c / norm)))
}

/// Seeded shuffle, then contiguous slices with boundaries at
/// `round(N * cumulative_fraction)`.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::validation("no split fractions given"));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f < 1.0)) {
        return Err(Error::validation(format!("split fraction {f} not in (0, 1)")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("split fractions sum to {total}, expected 1")));
    }

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, STREAM_SPLIT));

    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cumulative = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        cumulative += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((cumulative * n as f64).round() as usize).clamp(start, n)
        };
        if end == start {
            return Err(Error::validation(format!("split part {k} would be empty ({n} examples)")));
        }
        parts.push(dataset.subset(&order[start..end])?);
        start = end;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example::new(SparseVec::from_pairs([(i % 4, 1.0 + i as f64)]), i % 3))
            .collect();
        Dataset::new(examples, 3, 4).unwrap()
    }

    fn read_str(s: &str, options: LoadOptions) -> Result<Dataset> {
        read_dataset(s.as_bytes(), Format::Jsonl, options)
    }

    #[test]
    fn class_count_from_max_label() {
        let data = "{\"label\":0,\"text\":\"a\"}\n{\"label\":1,\"text\":\"b\"}\n{\"label\":2,\"text\":\"c\"}\n";
        let ds = read_str(data, LoadOptions::default()).unwrap();
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.feature_dim(), DEFAULT_FEATURE_DIM);
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = read_str("", LoadOptions::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn label_out_of_declared_range() {
        let data = "{\"label\":0,\"text\":\"a\"}\n{\"label\":5,\"text\":\"b\"}\n";
        let err = read_str(
            data,
            LoadOptions {
                num_classes: Some(3),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_record_names_line() {
        let data = "{\"label\":0,\"text\":\"a\"}\n\n{\"label\":1,\"text\":\n";
        match read_str(data, LoadOptions::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        let both = "{\"label\":0,\"text\":\"a\",\"features\":{}}\n";
        assert!(matches!(read_str(both, LoadOptions::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn feature_map_records() {
        let data = "{\"label\":1,\"features\":{\"0\":0.5,\"7\":-2.0}}\n{\"label\":0,\"features\":{\"3\":1.0}}\n";
        let ds = read_str(data, LoadOptions::default()).unwrap();
        assert_eq!(ds.feature_dim(), 8);
        assert_eq!(ds.get(0).features.get(7), -2.0);
        let err = read_str(
            data,
            LoadOptions {
                feature_dim: Some(4),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn tsv_records() {
        let data = "0\tCash flow rose\n1\tshares fell sharply\n";
        let ds = read_dataset(
            data.as_bytes(),
            Format::Tsv,
            LoadOptions {
                feature_dim: Some(64),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.get(0).features, featurize("cash flow rose", 64));
        assert!(read_dataset("nolabel\n".as_bytes(), Format::Tsv, LoadOptions::default()).is_err());
    }

    #[test]
    fn featurize_edge_cases() {
        assert!(featurize("", 16).is_empty());
        assert!(featurize("  ,.;  ", 16).is_empty());
        let one = featurize("a a", 16);
        assert_eq!(one.nnz(), 1);
        assert_eq!(one.iter().next().unwrap().1, 1.0);
        assert_eq!(featurize("A, a!", 16), one);
    }

    #[test]
    fn split_partitions() {
        let ds = toy(10);
        let parts = split(&ds, &[0.5, 0.5], 7).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![5, 5]);
        let again = split(&ds, &[0.5, 0.5], 7).unwrap();
        assert_eq!(parts, again);
        let mut all: Vec<_> = parts.iter().flat_map(|p| p.examples().iter().map(|e| e.features.get(e.features.max_index().unwrap()) as i64)).collect();
        all.sort();
        assert_eq!(all, (1..=10).collect::<Vec<i64>>());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = toy(10);
        assert!(split(&ds, &[0.9, 0.2], 1).is_err());
        assert!(split(&ds, &[1.0], 1).is_err());
        assert!(split(&toy(2), &[0.2, 0.2, 0.6], 1).is_err());
    }

    #[test]
    fn jsonl_round_trip_with_tags() {
        let mut examples = toy(5).into_examples();
        examples[1].source = SourceTag::Swapped;
        examples[4].source = SourceTag::Duplicated;
        examples[2].features = SparseVec::from_pairs([(0, 0.1), (3, 1.0 / 3.0)]);
        let ds = Dataset::new(examples, 3, 4).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = read_dataset(
            buf.as_slice(),
            Format::Jsonl,
            LoadOptions {
                num_classes: Some(3),
                feature_dim: Some(4),
            },
        )
        .unwrap();
        assert_eq!(back, ds);
    }
}
