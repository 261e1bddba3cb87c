//! Dataset loading (CSV, IDX), train/test splits, and standardization.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Vec<f64>),
    Classification { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, d]`, one row per datum.
    pub features: Tensor,
    pub targets: Targets,
    /// Shape of a single datum's features, e.g. `[d]` or `[1, 28, 28]`.
    pub feature_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, targets: Targets, feature_shape: Vec<usize>) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if targets.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{n} feature rows but {} targets", targets.len()),
            ));
        }
        if feature_shape.iter().product::<usize>() != d {
            return Err(Error::shape(
                "dataset",
                format!("feature shape {feature_shape:?} does not have {d} entries"),
            ));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        if let Targets::Regression(y) = &targets {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "dataset" });
            }
        }
        if let Targets::Classification { labels, classes } = &targets {
            if labels.iter().any(|&l| l >= *classes) {
                return Err(Error::domain("dataset", "label out of range"));
            }
        }
        Ok(Self {
            features,
            targets,
            feature_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows `indices` of the feature matrix.
    pub fn feature_rows(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(vec![indices.len(), d], data).expect("row gather keeps shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let targets = match &self.targets {
            Targets::Regression(y) => Targets::Regression(indices.iter().map(|&i| y[i]).collect()),
            Targets::Classification { labels, classes } => Targets::Classification {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        };
        Self {
            features: self.feature_rows(indices),
            targets,
            feature_shape: self.feature_shape.clone(),
        }
    }

    pub fn regression_targets(&self) -> Result<&[f64]> {
        match &self.targets {
            Targets::Regression(y) => Ok(y),
            _ => Err(Error::Config("dataset has classification targets".into())),
        }
    }

    pub fn labels(&self) -> Result<(&[usize], usize)> {
        match &self.targets {
            Targets::Classification { labels, classes } => Ok((labels, *classes)),
            _ => Err(Error::Config("dataset has regression targets".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvOptions {
    /// Target column; `None` means the last column.
    pub target_column: Option<usize>,
    pub delimiter: char,
    /// Columns ignored entirely (e.g. a second target).
    pub drop_columns: Vec<usize>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            target_column: None,
            delimiter: ',',
            drop_columns: Vec::new(),
        }
    }
}

/// Numeric CSV with an optional header line, as a regression dataset.
///
/// A header is assumed when any cell of the first record does not parse as
/// a number. Constant feature columns are dropped with a warning.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let delimiter =
        u8::try_from(opts.delimiter).map_err(|_| Error::Config("delimiter must be a single-byte character".into()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(path, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, usize> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(c))
            .collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if line == 0 => {
                log::info!("{}: treating first line as a header", path.display());
            }
            Err(c) => {
                return Err(Error::data(
                    path,
                    format!("row {}, column {}: cannot parse {:?}", line + 1, c + 1, &record[c]),
                ))
            }
        }
    }
    let Some(first) = rows.first() else {
        return Err(Error::data(path, "file contains no data rows"));
    };
    let width = first.len();
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::data(
            path,
            format!("row {} has a different column count", bad + 1),
        ));
    }
    let target = opts.target_column.unwrap_or(width - 1);
    if target >= width {
        return Err(Error::data(path, format!("target column {target} out of {width}")));
    }
    let mut keep: Vec<usize> = (0..width)
        .filter(|c| *c != target && !opts.drop_columns.contains(c))
        .collect();
    keep.retain(|&c| {
        let v0 = rows[0][c];
        let constant = rows.iter().all(|r| r[c] == v0);
        if constant {
            log::warn!("{}: dropping constant column {c}", path.display());
        }
        !constant
    });
    let features: Vec<f64> = rows.iter().flat_map(|r| keep.iter().map(move |&c| r[c])).collect();
    let y = rows.iter().map(|r| r[target]).collect();
    let d = keep.len();
    Dataset::new(
        Tensor::new(vec![rows.len(), d], features)?,
        Targets::Regression(y),
        vec![d],
    )
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::data(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parse an IDX byte buffer holding unsigned bytes. Returns dimension sizes
/// and the payload.
pub fn parse_idx(bytes: &[u8], expected_dims: usize) -> std::result::Result<(Vec<usize>, &[u8]), String> {
    if bytes.len() < 4 {
        return Err("file shorter than the 4-byte magic number".into());
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let want = 0x0000_0800 | expected_dims as u32;
    if magic != want {
        return Err(format!("bad magic 0x{magic:08x}, expected 0x{want:08x}"));
    }
    let header = 4 + 4 * expected_dims;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let dims: Vec<usize> = (0..expected_dims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let payload = dims.iter().product::<usize>();
    let rest = &bytes[header..];
    if rest.len() != payload {
        return Err(format!("payload has {} bytes, header promises {payload}", rest.len()));
    }
    Ok((dims, rest))
}

/// MNIST-style image/label file pair (optionally gzipped), pixels scaled to
/// `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ibytes = read_maybe_gz(ip)?;
    let lbytes = read_maybe_gz(lp)?;
    let (idims, ipix) = parse_idx(&ibytes, 3).map_err(|e| Error::data(ip, e))?;
    let (ldims, lraw) = parse_idx(&lbytes, 1).map_err(|e| Error::data(lp, e))?;
    if idims[0] != ldims[0] {
        return Err(Error::data(ip, format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let labels: Vec<usize> = lraw.iter().map(|&b| b as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::data(lp, format!("label {bad} outside 0..9")));
    }
    let d = idims[1] * idims[2];
    let pixels = ipix.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![idims[0], d], pixels)?,
        Targets::Classification { labels, classes: 10 },
        vec![1, idims[1], idims[2]],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub index: u64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(index: u64, seed: u64) -> Self {
        Self {
            index,
            train_fraction: 0.9,
            seed,
        }
    }
}

/// Seeded shuffle of `0..n`; the first `⌈fraction · n⌉` indices train.
pub fn make_splits(n: usize, plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 data points to split, got {n}")));
    }
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // Substream per split index; stream ids above 2^32 keep clear of the
    // streams used for initialization and training.
    let mut rng = SeededRng::new(plan.seed, (1 << 32) + plan.index);
    rng.shuffle(&mut idx);
    // Guard against 0.9·n landing a hair above an integer.
    let n_train = ((plan.train_fraction * n as f64) - 1e-9).ceil() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Train-split statistics used to z-score features and regression targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Original column index of every retained feature.
    pub kept_columns: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    /// Fit on the rows `train` of a regression dataset. Columns with zero
    /// training variance are dropped.
    pub fn fit(ds: &Dataset, train: &[usize]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let y = ds.regression_targets()?;
        let mut kept = Vec::new();
        let (mut fm, mut fs) = (Vec::new(), Vec::new());
        for c in 0..ds.dim() {
            let (m, s) = mean_std(train.iter().map(|&i| ds.features.get2(i, c)));
            if s > 0.0 {
                kept.push(c);
                fm.push(m);
                fs.push(s);
            } else {
                log::warn!("dropping feature column {c}: zero variance on the training split");
            }
        }
        let (tm, ts) = mean_std(train.iter().map(|&i| y[i]));
        if !(ts > 0.0) {
            return Err(Error::Config(
                "regression targets are constant on the training split".into(),
            ));
        }
        Ok(Self {
            kept_columns: kept,
            feature_mean: fm,
            feature_std: fs,
            target_mean: tm,
            target_std: ts,
        })
    }

    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        let y = ds.regression_targets()?;
        let d = self.kept_columns.len();
        let mut feats = Vec::with_capacity(ds.len() * d);
        for i in 0..ds.len() {
            for (k, &c) in self.kept_columns.iter().enumerate() {
                feats.push((ds.features.get2(i, c) - self.feature_mean[k]) / self.feature_std[k]);
            }
        }
        let ty = y.iter().map(|v| (v - self.target_mean) / self.target_std).collect();
        Dataset::new(Tensor::new(vec![ds.len(), d], feats)?, Targets::Regression(ty), vec![d])
    }

    /// Map standardized features and targets back to original units. Dropped
    /// columns are not restored.
    pub fn inverse(&self, ds: &Dataset) -> Result<Dataset> {
        let y = ds.regression_targets()?;
        let d = self.kept_columns.len();
        let mut feats = Vec::with_capacity(ds.len() * d);
        for i in 0..ds.len() {
            for k in 0..d {
                feats.push(ds.features.get2(i, k) * self.feature_std[k] + self.feature_mean[k]);
            }
        }
        let ty = y.iter().map(|&v| self.inverse_target(v)).collect();
        Dataset::new(Tensor::new(vec![ds.len(), d], feats)?, Targets::Regression(ty), vec![d])
    }

    pub fn inverse_target(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }

    /// Added to each standardized-scale log density to express it in the
    /// original target units: `−log std_y`.
    pub fn log_lik_correction(&self) -> f64 {
        -self.target_std.ln()
    }
}

/// Fit on `train` and transform the whole dataset.
pub fn standardize(ds: &Dataset, train: &[usize]) -> Result<(Dataset, Standardizer)> {
    let st = Standardizer::fit(ds, train)?;
    Ok((st.transform(ds)?, st))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (tr, te) = make_splits(10, &SplitPlan::new(0, 1)).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        let (tr, te) = make_splits(506, &SplitPlan::new(3, 1)).unwrap();
        assert_eq!((tr.len(), te.len()), (456, 50));
        assert!(make_splits(9, &SplitPlan::new(0, 1)).is_err());
    }

    #[test]
    fn idx_magic_checked() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 4];
        assert!(parse_idx(&bytes, 1).is_ok());
        bytes[2] = 9;
        assert!(parse_idx(&bytes, 1).is_err());
    }

    #[test]
    fn log_lik_correction_value() {
        let st = Standardizer {
            kept_columns: vec![],
            feature_mean: vec![],
            feature_std: vec![],
            target_mean: 0.0,
            target_std: 2.0,
        };
        assert!((st.log_lik_correction() + std::f64::consts::LN_2).abs() < 1e-15);
    }
}
