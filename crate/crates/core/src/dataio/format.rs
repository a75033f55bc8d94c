use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, RecordEntry, Split, SplitManifest};
use super::record::EcgRecord;
use super::task::{LabelKind, LabelMatrix, TaskSpec};
use crate::error::{Error, Result};

pub const BIN_MAGIC: &[u8; 4] = b"ECGB";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalFormat {
    Csv,
    Bin,
}

/// Records aligned row-for-row with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<EcgRecord>,
    pub labels: LabelMatrix,
    pub task: TaskSpec,
    pub split: SplitManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Row indices of the given record ids, in order.
    pub fn rows_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.record_id(), i))
            .collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Manifest(format!("unknown record `{id}`")))
            })
            .collect()
    }

    pub fn split_rows(&self, split: Split) -> Result<Vec<usize>> {
        self.rows_of(self.split.ids(split))
    }

    /// Records and labels of one split.
    pub fn select(&self, split: Split) -> Result<(Vec<EcgRecord>, LabelMatrix)> {
        let rows = self.split_rows(split)?;
        let records = rows.iter().map(|&r| self.records[r].clone()).collect();
        Ok((records, self.labels.select_rows(&rows)))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_slice(&read(&root.join("manifest.json"))?)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads a dataset directory; records follow the manifest's order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let labels = read_labels(root, &manifest)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let subject = manifest
            .split
            .subjects
            .get(&entry.record_id)
            .cloned()
            .unwrap_or_else(|| entry.record_id.clone());
        records.push(read_record(root, entry, subject)?);
    }
    Ok(Dataset {
        records,
        labels,
        task: manifest.task,
        split: manifest.split,
    })
}

fn read_labels(root: &Path, manifest: &DatasetManifest) -> Result<LabelMatrix> {
    let path = root.join("labels.csv");
    let bytes = read(&path)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header = reader.headers()?.clone();
    if header.get(0) != Some("record_id") {
        return Err(Error::Manifest("labels.csv must start with a record_id column".into()));
    }
    let task = &manifest.task;
    let mut col_of = Vec::with_capacity(header.len() - 1);
    for name in header.iter().skip(1) {
        let idx = task
            .label_index(name)
            .ok_or_else(|| Error::Manifest(format!("labels.csv has unknown label `{name}`")))?;
        col_of.push(idx);
    }
    if let Some(missing) = task.label_names.iter().find(|n| !header.iter().any(|h| h == *n)) {
        return Err(Error::Manifest(format!("labels.csv lacks label `{missing}`")));
    }
    let n_labels = task.n_labels();
    let mut rows: HashMap<String, (Vec<f64>, Vec<bool>)> = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let id = row.get(0).unwrap_or_default().to_string();
        let mut values = vec![0.0; n_labels];
        let mut mask = vec![false; n_labels];
        for (cell, &c) in row.iter().skip(1).zip(&col_of) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            values[c] = cell.parse().map_err(|_| Error::Load {
                record_id: id.clone(),
                reason: format!("label `{}` value `{cell}` is not a number", task.label_names[c]),
            })?;
            mask[c] = true;
        }
        if rows.insert(id.clone(), (values, mask)).is_some() {
            return Err(Error::Load {
                record_id: id,
                reason: "listed twice in labels.csv".into(),
            });
        }
    }
    let mut values = Vec::with_capacity(manifest.records.len() * n_labels);
    let mut mask = Vec::with_capacity(manifest.records.len() * n_labels);
    for entry in &manifest.records {
        let (v, m) = rows.remove(&entry.record_id).ok_or_else(|| Error::Load {
            record_id: entry.record_id.clone(),
            reason: "no row in labels.csv".into(),
        })?;
        values.extend(v);
        mask.extend(m);
    }
    LabelMatrix::new(task.label_kinds.clone(), values, mask)
}

fn read_record(root: &Path, entry: &RecordEntry, subject: String) -> Result<EcgRecord> {
    let id = &entry.record_id;
    let load_err = |reason: String| Error::Load {
        record_id: id.clone(),
        reason,
    };
    let bin = root.join("records").join(format!("{id}.bin"));
    let csv_path = root.join("records").join(format!("{id}.csv"));
    if bin.exists() {
        let bytes = read(&bin)?;
        let (leads, rate, signal) = decode_bin(&bytes).map_err(load_err)?;
        if entry.sampling_rate.is_some_and(|r| r != rate) {
            return Err(load_err(format!(
                "manifest rate {:?} disagrees with file rate {rate}",
                entry.sampling_rate
            )));
        }
        EcgRecord::new(id.clone(), subject, rate, leads, signal)
    } else if csv_path.exists() {
        let rate = entry
            .sampling_rate
            .ok_or_else(|| load_err("CSV signals need a sampling_rate in the manifest".into()))?;
        let bytes = read(&csv_path)?;
        let (leads, signal) = decode_csv(&bytes).map_err(load_err)?;
        EcgRecord::new(id.clone(), subject, rate, leads, signal)
    } else {
        Err(load_err("missing signal file".into()))
    }
}

fn decode_bin(bytes: &[u8]) -> std::result::Result<(usize, u32, Vec<f64>), String> {
    if bytes.len() < 16 || &bytes[..4] != BIN_MAGIC {
        return Err("bad binary header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (leads, samples, rate) = (word(4) as usize, word(8) as usize, word(12));
    let body = &bytes[16..];
    if body.len() != leads * samples * 4 {
        return Err(format!(
            "header declares {leads}x{samples} samples but body has {} bytes",
            body.len()
        ));
    }
    let signal = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((leads, rate, signal))
}

fn decode_csv(bytes: &[u8]) -> std::result::Result<(usize, Vec<f64>), String> {
    let mut reader = csv::Reader::from_reader(bytes);
    let leads = reader.headers().map_err(|e| e.to_string())?.len();
    if leads == 0 {
        return Err("CSV header names no leads".into());
    }
    let mut by_lead: Vec<Vec<f64>> = vec![Vec::new(); leads];
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        if row.len() != leads {
            return Err(format!("sample row {i} has {} columns, expected {leads}", row.len()));
        }
        for (l, cell) in row.iter().enumerate() {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("sample row {i} lead {l}: `{cell}` is not a number"))?;
            by_lead[l].push(v);
        }
    }
    Ok((leads, by_lead.concat()))
}

pub fn encode_bin(record: &EcgRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + record.signal().len() * 4);
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&(record.n_leads() as u32).to_le_bytes());
    out.extend_from_slice(&(record.n_samples() as u32).to_le_bytes());
    out.extend_from_slice(&record.sampling_rate().to_le_bytes());
    for &v in record.signal() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn encode_csv(record: &EcgRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..record.n_leads()).map(|l| format!("lead{}", l + 1)))?;
    for t in 0..record.n_samples() {
        w.write_record((0..record.n_leads()).map(|l| record.lead(l)[t].to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

fn manifest_of(dataset: &Dataset) -> Result<DatasetManifest> {
    let manifest = DatasetManifest {
        format_version: DatasetManifest::FORMAT_VERSION,
        task: dataset.task.clone(),
        records: dataset
            .records
            .iter()
            .map(|r| RecordEntry {
                record_id: r.record_id().to_string(),
                sampling_rate: Some(r.sampling_rate()),
            })
            .collect(),
        split: dataset.split.clone(),
    };
    manifest.validate()?;
    Ok(manifest)
}

fn encode_labels(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["record_id".to_string()];
    header.extend(dataset.task.label_names.iter().cloned());
    w.write_record(&header)?;
    for (i, rec) in dataset.records.iter().enumerate() {
        let mut row = vec![rec.record_id().to_string()];
        for (l, kind) in dataset.labels.kinds().iter().enumerate() {
            row.push(match (dataset.labels.get(i, l), kind) {
                (None, _) => String::new(),
                (Some(v), LabelKind::Binary) => format!("{}", v as u8),
                (Some(v), LabelKind::Continuous) => v.to_string(),
            });
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

/// Writes `manifest.json`, `labels.csv` and one signal file per record.
/// Binary signals are stored as 32-bit floats.
pub fn save_dataset(root: &Path, dataset: &Dataset, format: SignalFormat) -> Result<()> {
    let records_dir = root.join("records");
    fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    let manifest = manifest_of(dataset)?;
    write(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    write(&root.join("labels.csv"), &encode_labels(dataset)?)?;
    for rec in &dataset.records {
        let (name, bytes) = match format {
            SignalFormat::Bin => (format!("{}.bin", rec.record_id()), encode_bin(rec)),
            SignalFormat::Csv => (format!("{}.csv", rec.record_id()), encode_csv(rec)?),
        };
        write(&records_dir.join(name), &bytes)?;
    }
    Ok(())
}

/// Hex SHA-256 of the manifest, the labels and the binary encoding of every
/// record, in record order.
pub fn dataset_digest(dataset: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&manifest_of(dataset)?)?);
    h.update(encode_labels(dataset)?);
    for rec in &dataset.records {
        h.update(encode_bin(rec));
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
