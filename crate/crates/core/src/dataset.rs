//! Feature ingestion, the simulated labeling oracle, and pool bookkeeping.
//!
//! Two on-disk formats are supported. `FEATv1` is a little-endian binary
//! layout: the 4 magic bytes `FEAT`, then five `u32` fields (version = 1, N,
//! d, label flag, C), then N·d `f32` values row-major, then N `u32` labels
//! when the label flag is 1. The CSV layout is a header naming the feature
//! columns with an optional trailing `label` column. Sample ids are row
//! positions in both formats.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::{Error, Result};

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const FEAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` means CSV, anything else is treated as `FEATv1`.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// Immutable N×d feature matrix with optional oracle labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Array2<f64>,
    ids: Vec<u64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl FeatureSet {
    /// Validates and wraps a feature matrix. Ids default to row positions.
    pub fn new(
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("feature matrix must be non-empty, got {n}x{d}")));
        }
        for (row, values) in features.outer_iter().enumerate() {
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    row,
                    message: format!("non-finite feature value {v}"),
                });
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
            }
            if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
                return Err(Error::Validation {
                    row,
                    message: format!("label {y} outside [0, {num_classes})"),
                });
            }
        }
        Ok(FeatureSet {
            features,
            ids: (0..n as u64).collect(),
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Rows `indices` as a new owned matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(ndarray::Axis(0), indices)
    }

    pub fn load(path: &Path, format: Format) -> Result<Self> {
        match format {
            Format::Binary => read_binary(path),
            Format::Csv => read_csv(path),
        }
    }

    pub fn save(&self, path: &Path, format: Format) -> Result<()> {
        match format {
            Format::Binary => write_binary(self, path),
            Format::Csv => write_csv(self, path),
        }
    }
}

pub fn load_features(path: &Path, format: Format) -> Result<FeatureSet> {
    FeatureSet::load(path, format)
}

/// Fixed 24-byte header shared by the feature, checkpoint and gram dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Header {
    pub magic: [u8; 4],
    pub fields: [u32; 5],
}

impl Header {
    pub(crate) fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.magic)?;
        for f in self.fields {
            w.write_all(&f.to_le_bytes())?;
        }
        Ok(())
    }

    pub(crate) fn read(r: &mut impl Read) -> std::io::Result<Header> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let mut fields = [0u32; 5];
        for f in &mut fields {
            *f = read_u32(r)?;
        }
        Ok(Header { magic, fields })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

fn read_binary(path: &Path) -> Result<FeatureSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header =
        Header::read(&mut r).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &header.magic != FEAT_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected FEAT", header.magic)));
    }
    let [version, n, d, label_flag, c] = header.fields;
    if version != FEAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if label_flag > 1 {
        return Err(Error::Format(format!("label flag must be 0 or 1, got {label_flag}")));
    }
    let (n, d) = (n as usize, d as usize);
    let mut payload = vec![0u8; n * d * 4];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated feature payload: {e}")))?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    let labels = if label_flag == 1 {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = read_u32(&mut r)
                .map_err(|e| Error::Format(format!("truncated label payload: {e}")))?;
            labels.push(y as usize);
        }
        Some(labels)
    } else {
        None
    };
    FeatureSet::new(features, labels, c as usize)
}

fn write_binary(fs: &FeatureSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        magic: *FEAT_MAGIC,
        fields: [
            FEAT_VERSION,
            to_u32(fs.len(), "row count")?,
            to_u32(fs.dim(), "dimension")?,
            u32::from(fs.labels.is_some()),
            to_u32(fs.num_classes, "class count")?,
        ],
    };
    let io = |e| Error::io(path, e);
    header.write(&mut w).map_err(io)?;
    for v in fs.features.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    if let Some(labels) = &fs.labels {
        for &y in labels {
            w.write_all(&to_u32(y, "label")?.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_csv(path: &Path) -> Result<FeatureSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(Error::Format("empty header".into()));
    }
    let has_label = headers.iter().last().map(str::trim) == Some("label");
    let d = headers.len() - usize::from(has_label);
    if d == 0 {
        return Err(Error::Format("header names no feature columns".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::Format(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for field in record.iter().take(d) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Validation {
                row,
                message: format!("unparseable feature value {field:?}"),
            })?;
            values.push(v);
        }
        if has_label {
            let field = record[d].trim();
            let y: usize = field.parse().map_err(|_| Error::Validation {
                row,
                message: format!("label {field:?} is not a class index"),
            })?;
            labels.push(y);
        }
        n += 1;
    }
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    if has_label {
        let c = labels.iter().max().map_or(0, |m| m + 1);
        FeatureSet::new(features, Some(labels), c)
    } else {
        FeatureSet::new(features, None, 0)
    }
}

fn write_csv(fs: &FeatureSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header: Vec<String> = (0..fs.dim()).map(|j| format!("f{j}")).collect();
    if fs.labels.is_some() {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in fs.features.outer_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = &fs.labels {
            rec.push(labels[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evolving active-learning state over a pool of `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ALState {
    labeled: Vec<(usize, usize)>,
    unlabeled: BTreeSet<usize>,
    candidate: Vec<usize>,
    pub round: usize,
    pub schedule: Vec<usize>,
    pub initial_budget: usize,
}

impl ALState {
    pub fn new(pool_size: usize, schedule: Vec<usize>, initial_budget: usize) -> Self {
        ALState {
            labeled: Vec::new(),
            unlabeled: (0..pool_size).collect(),
            candidate: Vec::new(),
            round: 0,
            schedule,
            initial_budget,
        }
    }

    /// Rebuilds a state from already-known labels (one-shot selection).
    pub fn with_labeled(pool_size: usize, labeled: &[(usize, usize)]) -> Result<Self> {
        let mut state = ALState::new(pool_size, Vec::new(), labeled.len());
        for &(i, y) in labeled {
            if !state.unlabeled.remove(&i) {
                return Err(Error::Precondition(format!(
                    "sample {i} is out of range or listed twice"
                )));
            }
            state.labeled.push((i, y));
        }
        Ok(state)
    }

    pub fn pool_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Labeled `(index, label)` pairs in query order.
    pub fn labeled(&self) -> &[(usize, usize)] {
        &self.labeled
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(i, _)| i).collect()
    }

    pub fn labeled_labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(_, y)| y).collect()
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn is_unlabeled(&self, i: usize) -> bool {
        self.unlabeled.contains(&i)
    }

    /// Candidate subset, sorted ascending.
    pub fn candidate(&self) -> &[usize] {
        &self.candidate
    }

    pub fn set_candidate(&mut self, candidate: Vec<usize>) -> Result<()> {
        if let Some(i) = candidate.iter().find(|i| !self.unlabeled.contains(i)) {
            return Err(Error::Precondition(format!("candidate {i} is not unlabeled")));
        }
        let mut candidate = candidate;
        candidate.sort_unstable();
        candidate.dedup();
        self.candidate = candidate;
        Ok(())
    }
}

/// Uniformly samples `min(size, |U|)` unlabeled indices without replacement and
/// stores them (sorted) as the state's candidate subset.
pub fn sample_candidate_subset(
    state: &mut ALState,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::Precondition("candidate size must be at least 1".into()));
    }
    if state.unlabeled.is_empty() {
        return Err(Error::EmptyPool);
    }
    let pool: Vec<usize> = state.unlabeled.iter().copied().collect();
    let amount = size.min(pool.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    state.candidate = picked.clone();
    Ok(picked)
}

/// Reveals the oracle labels of `indices` and moves them from U to L.
pub fn query_oracle(
    state: &mut ALState,
    features: &FeatureSet,
    indices: &[usize],
) -> Result<Vec<usize>> {
    let truth = features
        .labels()
        .ok_or_else(|| Error::Precondition("the feature set carries no oracle labels".into()))?;
    let mut seen = BTreeSet::new();
    for &i in indices {
        if !state.unlabeled.contains(&i) {
            return Err(Error::Precondition(format!("sample {i} is already labeled or out of range")));
        }
        if !seen.insert(i) {
            return Err(Error::Precondition(format!("sample {i} queried twice")));
        }
    }
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        state.unlabeled.remove(&i);
        state.labeled.push((i, truth[i]));
        out.push(truth[i]);
    }
    state.candidate.retain(|c| !seen.contains(c));
    Ok(out)
}
