//! On-disk dataset directories, synthetic sidecars, checkpoints, and atomic writes.
//!
//! A dataset directory holds `observations.csv`, `labels.csv`, an optional
//! `demographics.csv`, and `manifest.json`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ctr::{ObservationSequence, SegmentGrid};
use crate::data::{Dataset, Record, SurvivalLabel};
use crate::error::{CtrError, Result};
use crate::synth::{SynthConfig, SynthDataset};

pub const SCHEMA_VERSION: u32 = 1;
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SYNTH_SIDECAR_FILE: &str = "synth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dim: usize,
    pub records: usize,
    pub observation_columns: Vec<String>,
    pub demographic_columns: Vec<String>,
    /// Whether `observations.csv` carries an explicit `duration` column.
    pub has_duration: bool,
    #[serde(default)]
    pub units: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Imputation {
    /// Missing feature cells are schema violations.
    #[default]
    Reject,
    /// A missing cell takes the record's previous value in that column.
    ForwardFill,
}

fn schema(file: &str, row: usize, rule: impl Into<String>) -> CtrError {
    CtrError::Schema { file: file.to_string(), row, rule: rule.into() }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp: PathBuf = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn with_path(path: &Path, e: std::io::Error) -> CtrError {
    CtrError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    serde_json::from_str(&text).map_err(|e| CtrError::Validation(format!("{}: {e}", path.display())))
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CtrError::Io(e.into_error()))
}

/// Writes `dataset` as a dataset directory. Floats use shortest round-trip formatting, so
/// reading the directory back reproduces every value exactly.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let dim = dataset.dim();
    let has_duration =
        !dataset.is_empty() && dataset.records().iter().all(|r| r.sequence.durations_override().is_some());
    let observation_columns: Vec<String> = (0..dim).map(|d| format!("x{d}")).collect();
    let mut header = vec!["record_id".to_string(), "timestamp".to_string()];
    header.extend(observation_columns.iter().cloned());
    if has_duration {
        header.push("duration".into());
    }
    let rows = dataset.records().iter().flat_map(|r| {
        let s = &r.sequence;
        (0..s.len())
            .map(|m| {
                let mut row = vec![s.record_id().to_string(), s.timestamps()[m].to_string()];
                row.extend(s.observations().row(m).iter().map(f64::to_string));
                if let Some(d) = s.durations_override().filter(|_| has_duration) {
                    row.push(d[m].to_string());
                }
                row
            })
            .collect::<Vec<_>>()
    });
    write_atomic(&dir.join(OBSERVATIONS_FILE), &csv_bytes(&header, rows)?)?;

    let header: Vec<String> = ["record_id", "event_time", "censored"].map(String::from).to_vec();
    let rows = dataset.records().iter().map(|r| {
        vec![r.sequence.record_id().to_string(), r.label.event_time.to_string(), u8::from(r.label.censored).to_string()]
    });
    write_atomic(&dir.join(LABELS_FILE), &csv_bytes(&header, rows)?)?;

    let demo_dim = dataset.demographics_dim();
    let demographic_columns: Vec<String> = (0..demo_dim).map(|d| format!("c{d}")).collect();
    let demo_path = dir.join(DEMOGRAPHICS_FILE);
    if demo_dim > 0 {
        let mut header = vec!["record_id".to_string()];
        header.extend(demographic_columns.iter().cloned());
        let rows = dataset.records().iter().map(|r| {
            let mut row = vec![r.sequence.record_id().to_string()];
            row.extend(r.sequence.demographics().unwrap_or_default().iter().map(f64::to_string));
            row
        });
        write_atomic(&demo_path, &csv_bytes(&header, rows)?)?;
    } else if demo_path.exists() {
        fs::remove_file(&demo_path)?;
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dim,
        records: dataset.len(),
        observation_columns,
        demographic_columns,
        has_duration,
        units: "timestamps and durations share one time unit".into(),
    };
    save_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn parse_number(file: &str, row: usize, column: &str, text: &str) -> Result<f64> {
    let v: f64 =
        text.trim().parse().map_err(|_| schema(file, row, format!("column {column}: '{text}' is not a number")))?;
    if !v.is_finite() {
        return Err(schema(file, row, format!("column {column}: value must be finite")));
    }
    Ok(v)
}

fn parse_flag(file: &str, row: usize, text: &str) -> Result<bool> {
    match text.trim().to_ascii_lowercase().as_str() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(schema(file, row, format!("censored flag '{other}' is not 0/1/true/false"))),
    }
}

fn open_csv(path: &Path, file: &str, expected: &[String]) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| with_path(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != expected {
        return Err(schema(file, 1, format!("header {header:?} does not match expected {expected:?}")));
    }
    Ok(rdr)
}

struct RawRecord {
    timestamps: Vec<f64>,
    rows: Vec<Vec<f64>>,
    durations: Vec<f64>,
}

/// Reads and validates a dataset directory. Records come out in the order of `labels.csv`.
pub fn ingest(dir: &Path, imputation: Imputation) -> Result<Dataset> {
    let manifest: Manifest = load_json(&dir.join(MANIFEST_FILE))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(schema(MANIFEST_FILE, 0, format!("unsupported schema version {}", manifest.schema_version)));
    }
    if manifest.observation_columns.len() != manifest.dim {
        return Err(schema(MANIFEST_FILE, 0, "observation column count differs from dim"));
    }

    let mut expected = vec!["record_id".to_string(), "timestamp".to_string()];
    expected.extend(manifest.observation_columns.iter().cloned());
    if manifest.has_duration {
        expected.push("duration".into());
    }
    let mut rdr = open_csv(&dir.join(OBSERVATIONS_FILE), OBSERVATIONS_FILE, &expected)?;
    let mut by_id: HashMap<String, RawRecord> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != expected.len() {
            return Err(schema(
                OBSERVATIONS_FILE,
                row,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(schema(OBSERVATIONS_FILE, row, "empty record_id"));
        }
        let t = parse_number(OBSERVATIONS_FILE, row, "timestamp", &rec[1])?;
        let entry =
            by_id.entry(id.clone()).or_insert(RawRecord { timestamps: vec![], rows: vec![], durations: vec![] });
        if let Some(&last) = entry.timestamps.last() {
            if t == last {
                return Err(schema(OBSERVATIONS_FILE, row, format!("duplicate (record_id, timestamp) = ({id}, {t})")));
            }
            if t < last {
                return Err(schema(
                    OBSERVATIONS_FILE,
                    row,
                    format!("record {id}: timestamp {t} after {last} is out of order"),
                ));
            }
        }
        let mut values = Vec::with_capacity(manifest.dim);
        for (d, col) in manifest.observation_columns.iter().enumerate() {
            let cell = rec[2 + d].trim();
            if cell.is_empty() {
                match (imputation, entry.rows.last()) {
                    (Imputation::ForwardFill, Some(prev)) => values.push(prev[d]),
                    (Imputation::ForwardFill, None) => {
                        return Err(schema(
                            OBSERVATIONS_FILE,
                            row,
                            format!("column {col}: missing with nothing to carry forward"),
                        ))
                    }
                    (Imputation::Reject, _) => {
                        return Err(schema(OBSERVATIONS_FILE, row, format!("column {col}: missing value")))
                    }
                }
            } else {
                values.push(parse_number(OBSERVATIONS_FILE, row, col, cell)?);
            }
        }
        if manifest.has_duration {
            let d = parse_number(OBSERVATIONS_FILE, row, "duration", &rec[2 + manifest.dim])?;
            if d < 0.0 {
                return Err(schema(OBSERVATIONS_FILE, row, "duration must be non-negative"));
            }
            entry.durations.push(d);
        }
        entry.timestamps.push(t);
        entry.rows.push(values);
    }

    let demographics = if manifest.demographic_columns.is_empty() {
        None
    } else {
        let mut expected = vec!["record_id".to_string()];
        expected.extend(manifest.demographic_columns.iter().cloned());
        let mut rdr = open_csv(&dir.join(DEMOGRAPHICS_FILE), DEMOGRAPHICS_FILE, &expected)?;
        let mut map = HashMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec?;
            if rec.len() != expected.len() {
                return Err(schema(
                    DEMOGRAPHICS_FILE,
                    row,
                    format!("expected {} fields, found {}", expected.len(), rec.len()),
                ));
            }
            let values = manifest
                .demographic_columns
                .iter()
                .enumerate()
                .map(|(d, col)| parse_number(DEMOGRAPHICS_FILE, row, col, &rec[1 + d]))
                .collect::<Result<Vec<f64>>>()?;
            if map.insert(rec[0].trim().to_string(), values).is_some() {
                return Err(schema(DEMOGRAPHICS_FILE, row, format!("duplicate record_id {}", rec[0].trim())));
            }
        }
        Some(map)
    };

    let expected: Vec<String> = ["record_id", "event_time", "censored"].map(String::from).to_vec();
    let mut rdr = open_csv(&dir.join(LABELS_FILE), LABELS_FILE, &expected)?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != 3 {
            return Err(schema(LABELS_FILE, row, format!("expected 3 fields, found {}", rec.len())));
        }
        let id = rec[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(schema(LABELS_FILE, row, format!("duplicate record_id {id}")));
        }
        let event_time = parse_number(LABELS_FILE, row, "event_time", &rec[1])?;
        let label = SurvivalLabel::new(event_time, parse_flag(LABELS_FILE, row, &rec[2])?)
            .map_err(|e| schema(LABELS_FILE, row, e.to_string()))?;
        let raw = by_id
            .remove(&id)
            .ok_or_else(|| schema(LABELS_FILE, row, format!("record {id} has no observation rows")))?;
        let m = raw.rows.len();
        let obs = Array2::from_shape_vec((m, manifest.dim), raw.rows.into_iter().flatten().collect())
            .map_err(|e| CtrError::Contract(e.to_string()))?;
        let demo = match &demographics {
            Some(map) => Some(
                map.get(&id)
                    .cloned()
                    .ok_or_else(|| schema(DEMOGRAPHICS_FILE, 0, format!("record {id} has no demographics row")))?,
            ),
            None => None,
        };
        let durations = manifest.has_duration.then_some(raw.durations);
        let seq = ObservationSequence::new(id, raw.timestamps, obs, demo, durations)
            .map_err(|e| schema(OBSERVATIONS_FILE, 0, e.to_string()))?;
        records.push(Record { sequence: seq, label });
    }
    if let Some(orphan) = by_id.keys().min() {
        return Err(schema(OBSERVATIONS_FILE, 0, format!("record {orphan} has observations but no label")));
    }
    if manifest.records != records.len() {
        return Err(schema(
            MANIFEST_FILE,
            0,
            format!("manifest lists {} records, files hold {}", manifest.records, records.len()),
        ));
    }
    Dataset::new(records)
}

/// Generator parameters and ground truth stored next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub schema_version: u32,
    pub config: SynthConfig,
    pub grid: SegmentGrid,
    pub weights: Vec<f64>,
    pub record_ids: Vec<String>,
    pub targets: Vec<f64>,
}

pub fn write_synth(dir: &Path, synth: &SynthDataset) -> Result<()> {
    write_dataset(dir, &synth.dataset)?;
    let sidecar = SynthSidecar {
        schema_version: SCHEMA_VERSION,
        config: synth.config.clone(),
        grid: synth.grid.clone(),
        weights: synth.weights.clone(),
        record_ids: synth.dataset.records().iter().map(|r| r.sequence.record_id().to_string()).collect(),
        targets: synth.targets.clone(),
    };
    save_json(&dir.join(SYNTH_SIDECAR_FILE), &sidecar)
}

pub fn read_synth(dir: &Path) -> Result<SynthDataset> {
    let dataset = ingest(dir, Imputation::Reject)?;
    let sidecar: SynthSidecar = load_json(&dir.join(SYNTH_SIDECAR_FILE))?;
    let ids: Vec<&str> = dataset.records().iter().map(|r| r.sequence.record_id()).collect();
    if ids != sidecar.record_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(schema(SYNTH_SIDECAR_FILE, 0, "record ids differ from the dataset"));
    }
    Ok(SynthDataset {
        config: sidecar.config,
        dataset,
        grid: sidecar.grid,
        weights: sidecar.weights,
        targets: sidecar.targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn manifest(dir: &Path, records: usize, has_duration: bool) {
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            dim: 1,
            records,
            observation_columns: vec!["x0".into()],
            demographic_columns: vec![],
            has_duration,
            units: String::new(),
        };
        save_json(&dir.join(MANIFEST_FILE), &m).unwrap();
    }

    #[test]
    fn minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        manifest(dir.path(), 1, false);
        write(dir.path(), OBSERVATIONS_FILE, "record_id,timestamp,x0\na,1.5,0.25\n");
        write(dir.path(), LABELS_FILE, "record_id,event_time,censored\na,3,0\n");
        let ds = ingest(dir.path(), Imputation::Reject).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.records()[0].sequence.timestamps(), &[1.5]);
    }

    #[test]
    fn out_of_order_names_row() {
        let dir = tempfile::tempdir().unwrap();
        manifest(dir.path(), 1, false);
        write(dir.path(), OBSERVATIONS_FILE, "record_id,timestamp,x0\na,2,0\na,1,0\n");
        write(dir.path(), LABELS_FILE, "record_id,event_time,censored\na,3,0\n");
        match ingest(dir.path(), Imputation::Reject).unwrap_err() {
            CtrError::Schema { file, row, rule } => {
                assert_eq!(file, OBSERVATIONS_FILE);
                assert_eq!(row, 3);
                assert!(rule.contains("out of order"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicates_and_orphans_rejected() {
        let dir = tempfile::tempdir().unwrap();
        manifest(dir.path(), 1, false);
        write(dir.path(), OBSERVATIONS_FILE, "record_id,timestamp,x0\na,1,0\na,1,0\n");
        write(dir.path(), LABELS_FILE, "record_id,event_time,censored\na,3,0\n");
        let e = ingest(dir.path(), Imputation::Reject).unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");

        write(dir.path(), OBSERVATIONS_FILE, "record_id,timestamp,x0\na,1,0\n");
        write(dir.path(), LABELS_FILE, "record_id,event_time,censored\na,3,0\na,4,1\n");
        assert!(ingest(dir.path(), Imputation::Reject).unwrap_err().to_string().contains("duplicate record_id"));

        write(dir.path(), LABELS_FILE, "record_id,event_time,censored\nb,3,0\n");
        assert!(ingest(dir.path(), Imputation::Reject).is_err());
    }

    #[test]
    fn forward_fill() {
        let dir = tempfile::tempdir().unwrap();
        manifest(dir.path(), 1, false);
        write(dir.path(), OBSERVATIONS_FILE, "record_id,timestamp,x0\na,1,0.5\na,2,\n");
        write(dir.path(), LABELS_FILE, "record_id,event_time,censored\na,3,true\n");
        assert!(ingest(dir.path(), Imputation::Reject).is_err());
        let ds = ingest(dir.path(), Imputation::ForwardFill).unwrap();
        assert_eq!(ds.records()[0].sequence.observations().column(0).to_vec(), vec![0.5, 0.5]);
        assert!(ds.records()[0].label.censored);
    }

    #[test]
    fn synthetic_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let synth = generate(&SynthConfig { records: 40, seed: 5, ..SynthConfig::default() }).unwrap();
        write_synth(dir.path(), &synth).unwrap();
        let back = read_synth(dir.path()).unwrap();
        assert_eq!(back, synth);
    }

    #[test]
    fn demographics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq =
            ObservationSequence::new("p1", vec![0.5, 2.0], ndarray::array![[1.0], [2.0]], Some(vec![0.1, 65.0]), None)
                .unwrap();
        let ds = Dataset::new(vec![Record { sequence: seq, label: SurvivalLabel::new(7.0, true).unwrap() }]).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(ingest(dir.path(), Imputation::Reject).unwrap(), ds);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
