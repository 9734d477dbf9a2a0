//! On-disk dataset and metrics formats.
//!
//! A dataset directory holds `features.csv` (`instance_id,f0,...`),
//! `annotations.csv` (`instance_id,annotator_id,label`), an optional
//! `truth.csv` (`instance_id,label`) and an optional `manifest.json`.
//! Labels are 1-based on disk and 0-based in memory. Instance ids may be
//! any unsigned integers; annotator ids are 0-based. A clean test split, if
//! any, lives in `test/` with `features.csv` and `truth.csv`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_sim::CleanDataset;
use crate::types::{Annotation, AnnotationDataset};

pub const FEATURES_FILE: &str = "features.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_DIR: &str = "test";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Generation parameters stored next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub r: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub separation: Option<f64>,
    #[serde(default)]
    pub labels_per_instance: Option<usize>,
    #[serde(default)]
    pub n_test: Option<usize>,
}

fn schema(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn expect_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(schema(
            path,
            1,
            format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, col: usize, name: &str) -> Result<T> {
    let raw = rec
        .get(col)
        .ok_or_else(|| schema(path, line_of(rec), format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| schema(path, line_of(rec), format!("cannot parse {name} from {raw:?}")))
}

fn check_width(path: &Path, rec: &csv::StringRecord, width: usize) -> Result<()> {
    if rec.len() != width {
        return Err(schema(
            path,
            line_of(rec),
            format!("expected {width} fields, found {}", rec.len()),
        ));
    }
    Ok(())
}

fn parse_label(path: &Path, rec: &csv::StringRecord, col: usize, k: Option<usize>) -> Result<usize> {
    let label: usize = parse_field(path, rec, col, "label")?;
    if label == 0 {
        return Err(schema(path, line_of(rec), "labels are 1-based; found 0"));
    }
    if let Some(k) = k {
        if label > k {
            return Err(schema(path, line_of(rec), format!("label {label} exceeds K = {k}")));
        }
    }
    Ok(label - 1)
}

/// Feature matrix read from a features file, in file order.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub ids: Vec<u64>,
    pub d: usize,
    pub values: Vec<f64>,
}

impl FeatureTable {
    pub fn index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers()?.clone();
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("instance_id".to_string())
        .chain((0..d).map(|j| format!("f{j}")))
        .collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(schema(
            path,
            1,
            "expected header instance_id,f0,...,f{d-1} with d >= 1",
        ));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(path, &rec, d + 1)?;
        let id: u64 = parse_field(path, &rec, 0, "instance_id")?;
        if seen.insert(id, ()).is_some() {
            return Err(schema(path, line_of(&rec), format!("duplicate instance_id {id}")));
        }
        for j in 0..d {
            let v: f64 = parse_field(path, &rec, j + 1, &format!("f{j}"))?;
            if !v.is_finite() {
                return Err(schema(path, line_of(&rec), format!("non-finite value in f{j}")));
            }
            values.push(v);
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(schema(path, 2, "no instances"));
    }
    Ok(FeatureTable { ids, d, values })
}

fn lookup(path: &Path, rec: &csv::StringRecord, index: &HashMap<u64, usize>) -> Result<usize> {
    let id: u64 = parse_field(path, rec, 0, "instance_id")?;
    index
        .get(&id)
        .copied()
        .ok_or_else(|| schema(path, line_of(rec), format!("unknown instance_id {id}")))
}

/// Annotations with instance ids resolved against `index` and 0-based labels.
pub fn read_annotations(path: &Path, index: &HashMap<u64, usize>, k: Option<usize>) -> Result<Vec<Annotation>> {
    let mut rdr = open_csv(path)?;
    expect_header(path, &mut rdr, &["instance_id", "annotator_id", "label"])?;
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(path, &rec, 3)?;
        let instance = lookup(path, &rec, index)?;
        let annotator: usize = parse_field(path, &rec, 1, "annotator_id")?;
        let label = parse_label(path, &rec, 2, k)?;
        if seen.insert((instance, annotator), ()).is_some() {
            return Err(schema(
                path,
                line_of(&rec),
                format!("annotator {annotator} labels this instance twice"),
            ));
        }
        out.push(Annotation { instance, annotator, label });
    }
    Ok(out)
}

/// One 0-based label per instance, in feature-table order.
pub fn read_truth(path: &Path, index: &HashMap<u64, usize>, k: Option<usize>) -> Result<Vec<usize>> {
    let mut rdr = open_csv(path)?;
    expect_header(path, &mut rdr, &["instance_id", "label"])?;
    let mut labels: Vec<Option<usize>> = vec![None; index.len()];
    for rec in rdr.records() {
        let rec = rec?;
        check_width(path, &rec, 2)?;
        let i = lookup(path, &rec, index)?;
        if labels[i].is_some() {
            return Err(schema(path, line_of(&rec), "duplicate instance_id"));
        }
        labels[i] = Some(parse_label(path, &rec, 1, k)?);
    }
    labels
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| schema(path, 0, "some instances have no label"))
}

pub fn read_manifest(dir: &Path) -> Result<Option<DatasetManifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(File::open(path)?)?))
}

/// Loads a dataset directory. `K` and `R` come from the manifest when
/// present and are otherwise inferred from the largest label and annotator
/// id seen.
pub fn load_dataset(dir: &Path) -> Result<AnnotationDataset> {
    let manifest = read_manifest(dir)?;
    let k_hint = manifest.as_ref().map(|m| m.k);
    let features = read_features(&dir.join(FEATURES_FILE))?;
    let index = features.index();
    let annotations = read_annotations(&dir.join(ANNOTATIONS_FILE), &index, k_hint)?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(read_truth(&truth_path, &index, k_hint)?)
    } else {
        None
    };
    let max_label = annotations
        .iter()
        .map(|a| a.label)
        .chain(truth.iter().flatten().copied())
        .max()
        .unwrap_or(0);
    let k = k_hint.unwrap_or((max_label + 1).max(2));
    let r = match &manifest {
        Some(m) => m.r,
        None => annotations.iter().map(|a| a.annotator + 1).max().unwrap_or(0),
    };
    if let Some(m) = &manifest {
        if m.d != features.d {
            return Err(Error::InvalidDataset(format!(
                "manifest says d = {} but features have {} columns",
                m.d, features.d
            )));
        }
    }
    AnnotationDataset::new(features.values, features.d, k, r, annotations, truth)
}

/// Loads `dir/test` if it exists.
pub fn load_test_split(dir: &Path, k: usize) -> Result<Option<CleanDataset>> {
    let test = dir.join(TEST_DIR);
    if !test.join(FEATURES_FILE).exists() {
        return Ok(None);
    }
    let features = read_features(&test.join(FEATURES_FILE))?;
    let truth = read_truth(&test.join(TRUTH_FILE), &features.index(), Some(k))?;
    Ok(Some(CleanDataset::new(features.values, features.d, k, truth)?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(BufWriter::new(file))
}

fn write_feature_rows(path: &Path, n: usize, d: usize, row: impl Fn(usize) -> Vec<f64>) -> Result<()> {
    let mut w = create(path)?;
    write!(w, "instance_id")?;
    for j in 0..d {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for i in 0..n {
        write!(w, "{i}")?;
        for v in row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn write_truth(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "instance_id,label")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i},{}", l + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a dataset directory. Floats use the shortest round-trip
/// representation so a reload is lossless and reruns are byte-identical.
pub fn write_dataset(
    dir: &Path,
    data: &AnnotationDataset,
    test: Option<&CleanDataset>,
    manifest: &DatasetManifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_feature_rows(&dir.join(FEATURES_FILE), data.n(), data.d(), |i| data.row(i).to_vec())?;
    let mut w = create(&dir.join(ANNOTATIONS_FILE))?;
    writeln!(w, "instance_id,annotator_id,label")?;
    for a in data.annotations() {
        writeln!(w, "{},{},{}", a.instance, a.annotator, a.label + 1)?;
    }
    w.flush()?;
    if let Some(t) = data.true_labels() {
        write_truth(&dir.join(TRUTH_FILE), t)?;
    }
    if let Some(test) = test {
        let tdir = dir.join(TEST_DIR);
        fs::create_dir_all(&tdir)?;
        write_feature_rows(&tdir.join(FEATURES_FILE), test.n(), test.d(), |i| test.row(i).to_vec())?;
        write_truth(&tdir.join(TRUTH_FILE), test.labels())?;
    }
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Appends one JSON object per line.
pub struct JsonlWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            inner: create(path)?,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        writeln!(self.inner)?;
        self.inner.flush()?;
        Ok(())
    }
}
