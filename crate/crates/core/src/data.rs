//! Dataset files, train/test splits and the synthetic generator.
//!
//! Two on-disk formats hold an `M x N` matrix of samples, optionally with
//! an integer label as the last column:
//!
//! * `csv-matrix`: comma separated, no header, one sample per row.
//! * `raw-f64`: little-endian `u32` row count, `u32` column count, then the
//!   values as little-endian `f64`, row-major. Labels are stored as `f64`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::Sample;
use crate::error::{invalid, Error, Result};
use crate::model::TraceEntry;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    #[default]
    CsvMatrix,
    RawF64,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv-matrix" | "csv" => Ok(DatasetFormat::CsvMatrix),
            "raw-f64" | "raw" => Ok(DatasetFormat::RawF64),
            other => Err(invalid(format!("unknown dataset format '{other}'"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::CsvMatrix => "csv-matrix",
            DatasetFormat::RawF64 => "raw-f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub format: DatasetFormat,
    /// Treat the last column as an integer class label.
    pub has_labels: bool,
    /// Rescale every sample to `[0, 1]` (constant samples become zero).
    pub normalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: DatasetFormat::CsvMatrix,
            has_labels: false,
            normalize: true,
        }
    }
}

/// Samples with optional labels. Sample ids are the original row indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn signal_len(&self) -> usize {
        self.samples.first().map_or(0, Sample::len)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.values.clone()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Rescales `values` to `[0, 1]`; a constant vector maps to zeros.
pub fn normalize_min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

fn parse_label(v: f64, row: usize, column: usize) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Parse {
            row,
            column,
            message: format!("label must be a non-negative integer, got {v}"),
        })
    }
}

/// Builds a dataset from parsed rows (1-based row numbers in errors).
fn from_rows(rows: Vec<Vec<f64>>, options: &LoadOptions) -> Result<Dataset> {
    let width = rows.first().map_or(0, Vec::len);
    let min_width = if options.has_labels { 2 } else { 1 };
    if rows.is_empty() || width < min_width {
        return Err(invalid(format!("dataset needs at least one row of {min_width}+ columns")));
    }
    let mut samples = Vec::with_capacity(rows.len());
    let mut labels = Vec::new();
    for (i, mut row) in rows.into_iter().enumerate() {
        if row.len() != width {
            return Err(Error::Parse {
                row: i + 1,
                column: row.len().min(width) + 1,
                message: format!("ragged row: {} columns, expected {width}", row.len()),
            });
        }
        if options.has_labels {
            let l = row.pop().expect("width >= 2");
            labels.push(parse_label(l, i + 1, width)?);
        }
        if options.normalize {
            normalize_min_max(&mut row);
        }
        samples.push(Sample::new(i, row)?);
    }
    Ok(Dataset {
        samples,
        labels: options.has_labels.then_some(labels),
    })
}

fn parse_csv(reader: impl Read) -> Result<Vec<Vec<f64>>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: i + 1,
            column: 0,
            message: e.to_string(),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                let bad = |message: String| Error::Parse {
                    row: i + 1,
                    column: j + 1,
                    message,
                };
                let v: f64 = cell.parse().map_err(|_| bad(format!("not a number: '{cell}'")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(format!("non-finite value '{cell}'")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn parse_raw(mut reader: impl Read) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(invalid("raw-f64 file shorter than its 8-byte header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(8))
        .ok_or_else(|| invalid("raw-f64 dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(invalid(format!(
            "raw-f64 file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let v = values.next().expect("length checked");
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Parse {
                            row: i + 1,
                            column: j + 1,
                            message: format!("non-finite value {v}"),
                        })
                    }
                })
                .collect()
        })
        .collect()
}

/// Parses a whole dataset file.
pub fn read_dataset(path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rows = match options.format {
        DatasetFormat::CsvMatrix => parse_csv(file)?,
        DatasetFormat::RawF64 => parse_raw(file)?,
    };
    from_rows(rows, options)
}

/// Seeded shuffle, then the first `round(split * M)` (at least one) samples
/// form the training set and the rest the test set.
pub fn split_dataset(dataset: &Dataset, split: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(split > 0.0 && split <= 1.0) {
        return Err(invalid(format!("split must be in (0, 1], got {split}")));
    }
    let m = dataset.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((split * m as f64).round() as usize).clamp(1.min(m), m);
    let (train, test) = idx.split_at(n_train);
    Ok((dataset.select(train), dataset.select(test)))
}

/// [`read_dataset`] followed by [`split_dataset`].
pub fn load_dataset(path: &Path, options: &LoadOptions, split: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    split_dataset(&read_dataset(path, options)?, split, seed)
}

fn format_row(values: &[f64], label: Option<usize>) -> String {
    let mut line = values.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    if let Some(l) = label {
        line.push(',');
        line.push_str(&l.to_string());
    }
    line
}

/// Writes rows as headerless CSV, with the label as the last column when
/// labels are given.
pub fn write_matrix_csv(path: &Path, rows: &[Vec<f64>], labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != rows.len() {
            return Err(invalid("one label per row required"));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for (i, r) in rows.iter().enumerate() {
        writeln!(out, "{}", format_row(r, labels.map(|l| l[i])))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes rows in the raw-f64 layout (labels appended as a last column).
pub fn write_matrix_raw(path: &Path, rows: &[Vec<f64>], labels: Option<&[usize]>) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len) + usize::from(labels.is_some());
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(rows.len() as u32).to_le_bytes())?;
    out.write_all(&(cols as u32).to_le_bytes())?;
    for (i, r) in rows.iter().enumerate() {
        for v in r {
            out.write_all(&v.to_le_bytes())?;
        }
        if let Some(l) = labels {
            out.write_all(&(l[i] as f64).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes a training trace as CSV with the header `iter,layer,objective`.
pub fn write_trace_csv(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "iter,layer,objective")?;
    for e in trace {
        writeln!(out, "{},{},{}", e.iter, e.layer, e.objective)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, dataset: &Dataset, format: DatasetFormat) -> Result<()> {
    let rows = dataset.rows();
    let labels = dataset.labels.as_deref();
    match format {
        DatasetFormat::CsvMatrix => write_matrix_csv(path, &rows, labels),
        DatasetFormat::RawF64 => write_matrix_raw(path, &rows, labels),
    }
}

/// Parameters of [`generate_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub length: usize,
    pub motif_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 20,
            length: 32,
            motif_count: 3,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Width of the motifs placed by [`generate_synthetic`].
pub fn motif_width(length: usize) -> usize {
    (length / 8).clamp(3, length.max(1))
}

/// Labeled synthetic signals.
///
/// Every class owns `motif_count` smooth random motifs, each with a fixed
/// position and amplitude. A sample of that class places all of them after
/// one common random shift of at most `length / 8` positions, scales each
/// by a factor in `[0.8, 1.2]`, and adds Gaussian noise. Sample `i` belongs
/// to class `i % classes`. Values are not normalized.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.length == 0 || spec.motif_count == 0 {
        return Err(invalid("synthetic dataset sizes must be positive"));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(invalid("noise_sigma must be finite and non-negative"));
    }
    let n = spec.length;
    let w = motif_width(n);
    if w > n {
        return Err(invalid("signal too short for a motif"));
    }
    let max_shift = (n / 8).max(1) as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    struct Motif {
        shape: Vec<f64>,
        position: usize,
        amplitude: f64,
    }
    let classes: Vec<Vec<Motif>> = (0..spec.classes)
        .map(|_| {
            (0..spec.motif_count)
                .map(|_| {
                    let raw: Vec<f64> = (0..w).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let mut shape: Vec<f64> = (0..w)
                        .map(|i| {
                            let l = if i > 0 { raw[i - 1] } else { 0.0 };
                            let r = if i + 1 < w { raw[i + 1] } else { 0.0 };
                            0.25 * l + 0.5 * raw[i] + 0.25 * r
                        })
                        .collect();
                    let peak = shape.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
                    shape.iter_mut().for_each(|v| *v /= peak);
                    Motif {
                        shape,
                        position: rng.random_range(0..=n - w),
                        amplitude: rng.random_range(0.5..1.5),
                    }
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let total = spec.classes * spec.per_class;
    let mut samples = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % spec.classes;
        let shift = rng.random_range(-max_shift..=max_shift) as isize;
        let mut signal = vec![0.0; n];
        for motif in &classes[c] {
            let scale = motif.amplitude * rng.random_range(0.8..1.2);
            for (j, v) in motif.shape.iter().enumerate() {
                let p = motif.position as isize + shift + j as isize;
                if (0..n as isize).contains(&p) {
                    signal[p as usize] += scale * v;
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in signal.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        samples.push(Sample::new(i, signal)?);
        labels.push(c);
    }
    Ok(Dataset {
        samples,
        labels: Some(labels),
    })
}

/// Applies per-sample min-max normalization to a dataset in place.
pub fn normalize_dataset(dataset: &mut Dataset) {
    for s in &mut dataset.samples {
        normalize_min_max(&mut s.values);
    }
}
