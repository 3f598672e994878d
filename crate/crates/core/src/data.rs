//! MNIST IDX files, deterministic subsampling and experiment records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use faer::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RnfError};
use crate::seed::{child_rng, shuffle};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

/// Images in `[0, 1]` (one row per example) with classes `1..=10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Mat<f64>,
    /// Class `d + 1` for raw digit `d`.
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub split: String,
    /// SHA-256 over the image file followed by the label file.
    pub checksum: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize], split: &str) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(RnfError::Config(format!("index {bad} out of range for {} examples", self.len())));
        }
        Ok(Dataset {
            images: Mat::from_fn(indices.len(), self.dim(), |r, c| self.images[(indices[r], c)]),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            rows: self.rows,
            cols: self.cols,
            split: split.to_string(),
            checksum: self.checksum.clone(),
        })
    }

    /// Raw digits `0..=9` for display.
    pub fn digits(&self) -> Vec<u8> {
        self.labels.iter().map(|c| c - 1).collect()
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn data_err(path: &Path, reason: impl Into<String>) -> RnfError {
    RnfError::Data { path: path.to_path_buf(), reason: reason.into() }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| RnfError::io(path, e))
}

fn parse_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 * (dims + 1);
    if bytes.len() < 4 {
        return Err(data_err(path, format!("truncated file: {} bytes", bytes.len())));
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(data_err(path, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    if bytes.len() < header {
        return Err(data_err(path, format!("truncated file: {} bytes, header needs {header}", bytes.len())));
    }
    let shape: Vec<usize> = (0..dims).map(|d| read_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(data_err(path, format!("truncated file: {} bytes, shape {shape:?} needs {expected}", bytes.len())));
    }
    Ok(shape)
}

/// Parse an IDX image file and its label file.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let shape = parse_header(&img, images_path, IMAGE_MAGIC, 3)?;
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    let n_labels = parse_header(&lab, labels_path, LABEL_MAGIC, 1)?[0];
    if n_labels != n {
        return Err(data_err(labels_path, format!("count mismatch: {n_labels} labels for {n} images")));
    }
    let labels: Vec<u8> = lab[8..8 + n].to_vec();
    if let Some(bad) = labels.iter().find(|&&d| d > 9) {
        return Err(data_err(labels_path, format!("label {bad} outside 0..9")));
    }
    let pixels = &img[16..];
    let d = rows * cols;
    let images = Mat::from_fn(n, d, |i, j| pixels[i * d + j] as f64 / 255.0);
    let mut hasher = Sha256::new();
    hasher.update(&img);
    hasher.update(&lab);
    Ok(Dataset {
        images,
        labels: labels.into_iter().map(|d| d + 1).collect(),
        rows,
        cols,
        split: "all".into(),
        checksum: hex(&hasher.finalize()),
    })
}

/// Write an IDX pair; pixels are rounded back to bytes.
pub fn write_mnist_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + n * ds.dim());
    for v in [IMAGE_MAGIC, n as u32, ds.rows as u32, ds.cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        for j in 0..ds.dim() {
            img.push((ds.images[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|c| c - 1));
    fs::write(images_path, img).map_err(|e| RnfError::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| RnfError::io(labels_path, e))
}

/// Load the standard training or test split from `dir`.
pub fn load_split(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let mut ds = load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = prefix.into();
    Ok(ds)
}

/// Two disjoint subsets and the indices they were drawn from.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub train: Dataset,
    pub val: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Fisher–Yates shuffle of `0..N` with the stream `"subsample"` of `seed`;
/// the first `n_train` indices form the training split, the next `n_val`
/// the validation split.
pub fn subsample(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<Subsample> {
    if n_train + n_val > ds.len() {
        return Err(RnfError::Config(format!(
            "insufficient data: {n_train} + {n_val} requested from {} examples",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    shuffle(&mut child_rng(seed, "subsample"), &mut idx);
    let train_indices = idx[..n_train].to_vec();
    let val_indices = idx[n_train..n_train + n_val].to_vec();
    Ok(Subsample {
        train: ds.select(&train_indices, "train")?,
        val: ds.select(&val_indices, "val")?,
        train_indices,
        val_indices,
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(read_file(path)?)))
}

/// One CSV cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            // shortest representation that round-trips
            Cell::Num(v) => write!(f, "{v:?}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u8> for Cell {
    fn from(v: u8) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        w.flush().map_err(|e| RnfError::io(path, e))
    }

    /// Read back a table written by [`Table::write_csv`]; every cell that
    /// parses as a number becomes numeric.
    pub fn read_csv(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(
                rec?.iter()
                    .map(|s| {
                        if let Ok(v) = s.parse::<i64>() {
                            Cell::Int(v)
                        } else if let Ok(v) = s.parse::<f64>() {
                            Cell::Num(v)
                        } else {
                            Cell::Text(s.to_string())
                        }
                    })
                    .collect(),
            );
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Table { name, header, rows })
    }

    /// Largest absolute difference between numeric cells; `None` when the
    /// shapes or non-numeric cells differ.
    pub fn max_numeric_difference(&self, other: &Table) -> Option<f64> {
        if self.header != other.header || self.rows.len() != other.rows.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            if a.len() != b.len() {
                return None;
            }
            for (x, y) in a.iter().zip(b) {
                match (as_f64(x), as_f64(y)) {
                    (Some(x), Some(y)) if x.is_nan() && y.is_nan() => {}
                    (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                    (None, None) if x == y => {}
                    _ => return None,
                }
            }
        }
        Some(worst)
    }
}

fn as_f64(c: &Cell) -> Option<f64> {
    match c {
        Cell::Int(v) => Some(*v as f64),
        Cell::Num(v) => Some(*v),
        Cell::Text(_) => None,
    }
}

pub const MANIFEST_SCHEMA: u32 = 1;

/// JSON side of a run: enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub command: String,
    /// Effective (merged) configuration.
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    /// Relative ridge values used by kernel solves, if any.
    #[serde(default)]
    pub ridge_eps: Vec<f64>,
    /// Wall-clock seconds per phase.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
    /// CSV files written next to the manifest.
    #[serde(default)]
    pub files: Vec<String>,
    /// Derived seeds, chosen indices and anything else worth keeping.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Tables plus their manifest.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub manifest: Manifest,
    pub tables: Vec<Table>,
}

impl ExperimentRecord {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            manifest: Manifest {
                schema: MANIFEST_SCHEMA,
                command: command.into(),
                config,
                seed,
                code_version: env!("CARGO_PKG_VERSION").into(),
                ridge_eps: Vec::new(),
                timings: BTreeMap::new(),
                files: Vec::new(),
                extra: serde_json::Value::Null,
            },
            tables: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Write every table as `<name>.csv` and the manifest as `manifest.json`
/// into `out_dir` (created if missing). Returns the paths written.
pub fn write_record(record: &ExperimentRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| RnfError::io(out_dir, e))?;
    let mut manifest = record.manifest.clone();
    manifest.files.clear();
    let mut paths = Vec::new();
    for t in &record.tables {
        let path = out_dir.join(format!("{}.csv", t.name));
        t.write_csv(&path)?;
        manifest.files.push(format!("{}.csv", t.name));
        paths.push(path);
    }
    let path = out_dir.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|e| RnfError::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| RnfError::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| RnfError::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(RnfError::Config(format!("unsupported manifest schema {}", m.schema)));
    }
    Ok(m)
}

/// Read a record back from the directory holding `manifest.json`.
pub fn read_record(dir: &Path) -> Result<ExperimentRecord> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let tables = manifest.files.iter().map(|f| Table::read_csv(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    Ok(ExperimentRecord { manifest, tables })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> Dataset {
        Dataset {
            images: Mat::from_fn(n, 6, |i, j| ((i * 7 + j * 3) % 256) as f64 / 255.0),
            labels: (0..n).map(|i| (i % 10) as u8 + 1).collect(),
            rows: 2,
            cols: 3,
            split: "all".into(),
            checksum: String::new(),
        }
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let ds = synthetic(25);
        write_mnist_idx(&ds, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        assert_eq!((back.rows, back.cols), (2, 3));
        assert_eq!(back.checksum.len(), 64);
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_mnist_idx(&synthetic(5), &ip, &lp).unwrap();
        let empty = dir.path().join("empty");
        fs::write(&empty, b"").unwrap();
        let e = load_mnist_idx(&empty, &lp).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        // swap roles: label magic where image magic belongs
        let e = load_mnist_idx(&lp, &lp).unwrap_err();
        assert!(e.to_string().contains("bad magic"), "{e}");
        let lp6 = dir.path().join("l6");
        write_mnist_idx(&synthetic(6), &dir.path().join("i6"), &lp6).unwrap();
        let e = load_mnist_idx(&ip, &lp6).unwrap_err();
        assert!(e.to_string().contains("count mismatch"), "{e}");
        let mut cut = fs::read(&ip).unwrap();
        cut.truncate(cut.len() - 1);
        fs::write(&ip, cut).unwrap();
        assert!(load_mnist_idx(&ip, &lp).unwrap_err().to_string().contains("truncated"));
        assert!(matches!(load_mnist_idx(&dir.path().join("nope"), &lp), Err(RnfError::Io { .. })));
    }

    #[test]
    fn subsample_examples() {
        let ds = synthetic(100);
        let a = subsample(&ds, 80, 20, 3).unwrap();
        let b = subsample(&ds, 80, 20, 3).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_eq!((a.train.len(), a.val.len()), (80, 20));
        let mut all: Vec<usize> = a.train_indices.iter().chain(&a.val_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_ne!(subsample(&ds, 80, 20, 4).unwrap().train_indices, a.train_indices);
        assert!(matches!(subsample(&ds, 90, 20, 3), Err(RnfError::Config(_))));
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("missing/nested");
        let mut rec = ExperimentRecord::new("demo", serde_json::json!({"width": 8, "sigma": [0.1, 1e-3]}), 7);
        rec.manifest.ridge_eps.push(1e-8);
        rec.manifest.timings.insert("total".into(), 0.25);
        let mut t = Table::new("losses", &["model", "loss", "label"]);
        t.push(vec![1usize.into(), 0.1f64.into(), "a".into()]);
        t.push(vec![2usize.into(), (1.0f64 / 3.0).into(), "b".into()]);
        rec.tables.push(t);
        let paths = write_record(&rec, &out).unwrap();
        assert_eq!(paths.len(), 2);
        let back = read_record(&out).unwrap();
        assert_eq!(back.manifest.config, rec.manifest.config);
        assert_eq!(back.manifest.files, vec!["losses.csv".to_string()]);
        assert_eq!(back.tables[0].max_numeric_difference(&rec.tables[0]), Some(0.0));
        let mut other = rec.tables[0].clone();
        other.rows[1][1] = Cell::Num(0.5);
        assert!(other.max_numeric_difference(&rec.tables[0]).unwrap() > 0.1);
    }
}
