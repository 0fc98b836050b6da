//! Binary dataset container and the CSV DE-feature importer.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 8 | magic `EETDATA\0` |
//! | 8  | 4 | format version, `u32` = 1 |
//! | 12 | 1 | record kind: 0 raw signal, 1 DE features |
//! | 13 | 3 | reserved, zero |
//! | 16 | 4 | sampling rate in Hz (`u32`, 0 if unknown for DE data) |
//! | 20 | 4 | seconds per record |
//! | 24 | 4 | channel count `C` |
//! | 28 | 4 | band count `S` |
//! | 32 | 4 | class count `K` |
//! | 36 | 4 | record count `R` |
//! | 40 | 4 | metadata length `M` in bytes |
//! | 44 | M | metadata, UTF-8 JSON `{"bands":[{"name","low","high"}…],"electrodes":[…]}` |
//!
//! Then `R` records, each a `u32` label followed by `f64` values: raw records
//! hold `C × (seconds·rate)` samples channel-major, DE records hold
//! `seconds × C × S` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EetError, Result};
use crate::featurize::{extract_de_features, Band, BandSet, DeFeatures, RawEegSample};
use crate::layout::{map_to_grid, ElectrodeLayout};
use crate::train::LabeledSet;

pub const DATASET_MAGIC: [u8; 8] = *b"EETDATA\0";
pub const DATASET_VERSION: u32 = 1;
const FIXED_HEADER: usize = 44;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Raw,
    De,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    bands: Vec<Band>,
    electrodes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub kind: RecordKind,
    pub rate: usize,
    pub seconds: usize,
    pub classes: usize,
    pub bands: BandSet,
    pub electrodes: Vec<String>,
    /// One flat value vector per record, laid out as described in the module docs.
    pub records: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl DatasetFile {
    pub fn record_len(&self) -> usize {
        match self.kind {
            RecordKind::Raw => self.electrodes.len() * self.seconds * self.rate,
            RecordKind::De => self.seconds * self.electrodes.len() * self.bands.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.labels.len() {
            return Err(EetError::contract(format!(
                "{} records but {} labels",
                self.records.len(),
                self.labels.len()
            )));
        }
        if self.seconds == 0 || self.electrodes.is_empty() || self.classes < 2 {
            return Err(EetError::contract(
                "dataset needs seconds, electrodes and at least two classes",
            ));
        }
        if self.kind == RecordKind::Raw {
            if self.rate == 0 {
                return Err(EetError::contract("raw dataset needs a sampling rate"));
            }
            self.bands.validate_for_rate(self.rate)?;
        }
        let len = self.record_len();
        if let Some(i) = self.records.iter().position(|r| r.len() != len) {
            return Err(EetError::contract(format!(
                "record {i} has {} values, expected {len}",
                self.records[i].len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(EetError::contract(format!(
                "label {y} outside 0..{}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::to_vec(&Metadata {
            bands: self.bands.bands().to_vec(),
            electrodes: self.electrodes.clone(),
        })
        .expect("metadata serializes");
        let mut out = Vec::with_capacity(
            FIXED_HEADER + meta.len() + self.records.len() * (4 + 8 * self.record_len()),
        );
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(match self.kind {
            RecordKind::Raw => 0,
            RecordKind::De => 1,
        });
        out.extend_from_slice(&[0; 3]);
        for v in [
            self.rate,
            self.seconds,
            self.electrodes.len(),
            self.bands.len(),
            self.classes,
            self.records.len(),
            meta.len(),
        ] {
            out.extend_from_slice(&to_u32(v)?.to_le_bytes());
        }
        out.extend_from_slice(&meta);
        for (record, &label) in self.records.iter().zip(&self.labels) {
            out.extend_from_slice(&to_u32(label)?.to_le_bytes());
            for v in record {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| EetError::CorruptHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || bytes[..8] != DATASET_MAGIC {
            return Err(EetError::BadMagic {
                path: path.to_path_buf(),
                expected: "dataset",
            });
        }
        if bytes.len() < 12 {
            return Err(corrupt("header ends before the version field"));
        }
        let version = read_u32(bytes, 8);
        if version != DATASET_VERSION {
            return Err(EetError::Version {
                path: path.to_path_buf(),
                found: version,
                expected: DATASET_VERSION,
            });
        }
        if bytes.len() < FIXED_HEADER {
            return Err(corrupt("fixed header is incomplete"));
        }
        let kind = match bytes[12] {
            0 => RecordKind::Raw,
            1 => RecordKind::De,
            k => return Err(corrupt(&format!("unknown record kind {k}"))),
        };
        if bytes[13..16] != [0; 3] {
            return Err(corrupt("reserved bytes are not zero"));
        }
        let field = |i: usize| read_u32(bytes, 16 + 4 * i) as usize;
        let (rate, seconds, channels, band_count, classes, count, meta_len) = (
            field(0),
            field(1),
            field(2),
            field(3),
            field(4),
            field(5),
            field(6),
        );
        let meta_end = FIXED_HEADER
            .checked_add(meta_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("metadata runs past end of file"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[FIXED_HEADER..meta_end])
            .map_err(|e| corrupt(&format!("metadata is not valid: {e}")))?;
        if meta.electrodes.len() != channels || meta.bands.len() != band_count {
            return Err(corrupt("metadata disagrees with channel or band count"));
        }
        let bands = BandSet::new(meta.bands).map_err(|e| corrupt(&e.to_string()))?;
        let mut data = DatasetFile {
            kind,
            rate,
            seconds,
            classes,
            bands,
            electrodes: meta.electrodes,
            records: Vec::new(),
            labels: Vec::new(),
        };
        let len = data.record_len();
        let stride = len
            .checked_mul(8)
            .and_then(|b| b.checked_add(4))
            .ok_or_else(|| corrupt("record size overflows"))?;
        let mut at = meta_end;
        data.records.reserve(count.min(bytes.len() / stride.max(1)));
        for i in 0..count {
            if bytes.len() - at < stride {
                return Err(EetError::Truncated {
                    path: path.to_path_buf(),
                    record: i,
                });
            }
            data.labels.push(read_u32(bytes, at) as usize);
            data.records.push(
                bytes[at + 4..at + stride]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            );
            at += stride;
        }
        if at != bytes.len() {
            return Err(EetError::Parse(format!(
                "{}: {} trailing bytes after record {}",
                path.display(),
                bytes.len() - at,
                count
            )));
        }
        data.validate().map_err(|e| corrupt(&e.to_string()))?;
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| EetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EetError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// DE features of record `i`, computed from the raw signal when needed.
    pub fn de_features(&self, i: usize) -> Result<DeFeatures> {
        let record = &self.records[i];
        match self.kind {
            RecordKind::De => DeFeatures::new(
                self.seconds,
                self.electrodes.len(),
                self.bands.len(),
                record.clone(),
            ),
            RecordKind::Raw => {
                let n = self.seconds * self.rate;
                let signal = record.chunks(n).map(<[f64]>::to_vec).collect();
                let sample = RawEegSample::new(self.rate, signal, self.labels[i])?;
                extract_de_features(&sample, &self.bands)
            }
        }
    }

    /// Grid-mapped model inputs. Electrodes are placed by name using `layout`.
    pub fn to_labeled(&self, layout: &ElectrodeLayout) -> Result<LabeledSet> {
        self.validate()?;
        let placed = layout.restrict(&self.electrodes)?;
        let inputs = (0..self.len())
            .map(|i| map_to_grid(&self.de_features(i)?, &placed))
            .collect::<Result<_>>()?;
        LabeledSet::new(inputs, self.labels.clone())
    }

    /// Converts raw records to DE records; DE datasets are returned unchanged.
    pub fn featurized(&self) -> Result<DatasetFile> {
        if self.kind == RecordKind::De {
            return Ok(self.clone());
        }
        let records = (0..self.len())
            .map(|i| self.de_features(i).map(|f| f.values().to_vec()))
            .collect::<Result<_>>()?;
        Ok(DatasetFile {
            kind: RecordKind::De,
            records,
            ..self.clone()
        })
    }

    /// Reads DE features from CSV.
    ///
    /// The header is `sample,label,second` followed by one `electrode:band`
    /// column per feature, electrode-major. Each row holds one second of one
    /// sample; a sample's rows are contiguous with seconds `0..T` in order.
    /// Band edges come from `bands`, matched by name.
    pub fn import_csv(path: &Path, bands: &BandSet, classes: Option<usize>) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| EetError::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let parse_err = |msg: String| EetError::Parse(format!("{}: {msg}", path.display()));
        let header = reader
            .headers()
            .map_err(|e| parse_err(e.to_string()))?
            .clone();
        if header.len() < 4
            || &header[0] != "sample"
            || &header[1] != "label"
            || &header[2] != "second"
        {
            return Err(parse_err(
                "header must start with sample,label,second".into(),
            ));
        }
        let mut electrodes: Vec<String> = Vec::new();
        let mut used_bands: Vec<Band> = Vec::new();
        let mut columns = Vec::new();
        for col in header.iter().skip(3) {
            let (e, b) = col
                .split_once(':')
                .ok_or_else(|| parse_err(format!("column {col:?} is not electrode:band")))?;
            let bi = bands
                .index_of(b)
                .ok_or_else(|| parse_err(format!("unknown band {b:?}")))?;
            if !used_bands.iter().any(|u| u.name == b) {
                used_bands.push(bands.bands()[bi].clone());
            }
            if electrodes.last().map(String::as_str) != Some(e) {
                if electrodes.iter().any(|x| x == e) {
                    return Err(parse_err(format!(
                        "columns of electrode {e:?} are not contiguous"
                    )));
                }
                electrodes.push(e.to_string());
            }
            columns.push((
                electrodes.len() - 1,
                used_bands.iter().position(|u| u.name == b).unwrap(),
            ));
        }
        let band_count = used_bands.len();
        if columns.len() != electrodes.len() * band_count {
            return Err(parse_err(
                "every electrode needs one column per band".into(),
            ));
        }
        for (k, &(e, b)) in columns.iter().enumerate() {
            if (e, b) != (k / band_count, k % band_count) {
                return Err(parse_err(
                    "band columns must appear in the same order for every electrode".into(),
                ));
            }
        }
        let channels = electrodes.len();
        let mut records: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut seconds = None;
        let mut current: Option<(String, usize, Vec<f64>, usize)> = None;
        let mut finish = |cur: Option<(String, usize, Vec<f64>, usize)>| -> Result<()> {
            if let Some((id, label, values, t)) = cur {
                match seconds {
                    None => seconds = Some(t),
                    Some(s) if s != t => {
                        return Err(parse_err(format!(
                            "sample {id} has {t} seconds, expected {s}"
                        )));
                    }
                    _ => {}
                }
                records.push(values);
                labels.push(label);
            }
            Ok(())
        };
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| parse_err(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                row[i].trim().parse::<f64>().map_err(|_| {
                    parse_err(format!("row {}: {:?} is not a number", line + 2, &row[i]))
                })
            };
            let id = row[0].to_string();
            let label: usize = row[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {}: bad label {:?}", line + 2, &row[1])))?;
            let second: usize = row[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {}: bad second {:?}", line + 2, &row[2])))?;
            if current.as_ref().is_some_and(|c| c.0 != id) {
                finish(current.take())?;
            }
            let cur = current.get_or_insert_with(|| (id.clone(), label, Vec::new(), 0));
            if cur.1 != label || cur.3 != second {
                return Err(parse_err(format!(
                    "row {}: inconsistent label or out-of-order second",
                    line + 2
                )));
            }
            let values = (3..row.len()).map(num).collect::<Result<Vec<f64>>>()?;
            cur.2.extend(values);
            cur.3 += 1;
        }
        finish(current.take())?;
        let seconds = seconds.ok_or_else(|| parse_err("no data rows".into()))?;
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
        // Rows are second-major already: each row is C×S values, matching T×C×S.
        debug_assert!(records
            .iter()
            .all(|r| r.len() == seconds * channels * band_count));
        let data = DatasetFile {
            kind: RecordKind::De,
            rate: 0,
            seconds,
            classes,
            bands: BandSet::new(used_bands)?,
            electrodes,
            records,
            labels,
        };
        data.validate()?;
        Ok(data)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte field"))
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| EetError::contract(format!("{v} does not fit in a u32 header field")))
}
