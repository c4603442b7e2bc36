//! Datasets: embedded Iris, seeded two-arcs, CSV and IDX files, plus
//! seeded splitting and train-statistics standardization.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::rng::{Purpose, RngStreams};
use crate::tensor::Tensor;

const IRIS_CSV: &str = include_str!("../data/iris.csv");
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Environment variable naming the directory with the MNIST subset files.
pub const MNIST_DIR_ENV: &str = "DMLE_MNIST_DIR";
pub const MNIST_IMAGES_FILE: &str = "images-idx3-ubyte";
pub const MNIST_LABELS_FILE: &str = "labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Csv,
    Idx,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    Iris,
    TwoArcs {
        n: usize,
        noise: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
    MnistSubset {
        dir: Option<PathBuf>,
        n: usize,
        seed: u64,
    },
}

impl DatasetSpec {
    pub const TWO_ARCS_DEFAULT: DatasetSpec = DatasetSpec::TwoArcs {
        n: 1000,
        noise: 0.15,
        seed: 7,
    };

    /// Parses `iris`, `mnist`, `two-arcs` or `csv:<path>`.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "iris" => DatasetSpec::Iris,
            "two-arcs" => Self::TWO_ARCS_DEFAULT,
            "mnist" => DatasetSpec::MnistSubset {
                dir: None,
                n: 1000,
                seed: 0,
            },
            _ => match s.strip_prefix("csv:") {
                Some(path) if !path.is_empty() => DatasetSpec::Csv { path: path.into() },
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown dataset `{s}` (expected iris, mnist, two-arcs or csv:<path>)"
                    )))
                }
            },
        })
    }

    /// Train/val/test fractions used by the experiments.
    pub fn split_fractions(&self) -> [f64; 3] {
        match self {
            DatasetSpec::Iris => [110.0 / 150.0, 10.0 / 150.0, 30.0 / 150.0],
            DatasetSpec::TwoArcs { .. } => [0.7, 0.1, 0.2],
            DatasetSpec::Csv { .. } | DatasetSpec::MnistSubset { .. } => [0.8, 0.1, 0.1],
        }
    }

    /// Hidden widths and activation of the classifier for this dataset.
    pub fn architecture(&self) -> (Vec<usize>, Activation) {
        match self {
            DatasetSpec::Iris => (vec![16], Activation::Relu),
            DatasetSpec::TwoArcs { .. } => (vec![16], Activation::Tanh),
            DatasetSpec::MnistSubset { .. } => (vec![64], Activation::Relu),
            DatasetSpec::Csv { .. } => (vec![32], Activation::Relu),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Iris => write!(f, "iris"),
            DatasetSpec::TwoArcs { .. } => write!(f, "two-arcs"),
            DatasetSpec::Csv { path } => write!(f, "csv:{}", path.display()),
            DatasetSpec::MnistSubset { .. } => write!(f, "mnist"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
    seed: Option<u64>,
    splits: Option<Splits>,
    standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(
        x: Tensor,
        y: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
        seed: Option<u64>,
    ) -> Result<Self> {
        if !x.is_matrix() {
            return Err(Error::Dataset(format!(
                "features must be a matrix, got {:?}",
                x.shape()
            )));
        }
        if x.rows() != y.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: x.rows(),
                got: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !x.all_finite() {
            return Err(Error::Dataset("non-finite feature value".into()));
        }
        Ok(Self {
            x,
            y,
            num_classes,
            provenance,
            seed,
            splits: None,
            standardization: None,
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    /// Ground-truth labels. Only the oracle and evaluation should read these.
    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Keeps `n` rows chosen uniformly by `seed`, in their original order.
    pub fn subsample(self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Dataset(format!(
                "cannot draw {n} samples from {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut RngStreams::new(seed).stream(Purpose::Subsample, 0));
        idx.truncate(n);
        idx.sort_unstable();
        let x = self.x.select_rows(&idx)?;
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Dataset::new(x, y, self.num_classes, self.provenance, Some(seed))
    }

    /// Seeded disjoint train/val/test splits of rounded sizes, then
    /// standardizes all features with train-split mean and population std.
    /// Constant columns keep a unit divisor.
    pub fn make_splits(mut self, fractions: [f64; 3], seed: u64) -> Result<Self> {
        if fractions.iter().any(|&f| f.is_nan() || f <= 0.0)
            || fractions.iter().sum::<f64>() > 1.0 + 1e-9
        {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be positive and sum to at most 1, got {fractions:?}"
            )));
        }
        let n = self.len();
        let sizes: Vec<usize> = fractions
            .iter()
            .map(|f| (f * n as f64).round() as usize)
            .collect();
        if sizes.contains(&0) {
            return Err(Error::Dataset(format!(
                "split sizes {sizes:?} from {n} samples leave an empty split"
            )));
        }
        if sizes.iter().sum::<usize>() > n {
            return Err(Error::Dataset(format!(
                "split sizes {sizes:?} exceed {n} samples"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut RngStreams::new(seed).stream(Purpose::Split, 0));
        let train = idx[..sizes[0]].to_vec();
        let val = idx[sizes[0]..sizes[0] + sizes[1]].to_vec();
        let test = idx[sizes[0] + sizes[1]..sizes[0] + sizes[1] + sizes[2]].to_vec();

        let d = self.num_features();
        let m = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &train {
            mean.iter_mut()
                .zip(self.x.row(i))
                .for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; d];
        for &i in &train {
            for ((s, v), mu) in var.iter_mut().zip(self.x.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / m).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        for row in self.x.data_mut().chunks_mut(d) {
            for ((v, mu), sd) in row.iter_mut().zip(&mean).zip(&scale) {
                *v = (*v - mu) / sd;
            }
        }
        self.splits = Some(Splits { train, val, test });
        self.standardization = Some(Standardization { mean, scale });
        Ok(self)
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Iris => parse_csv(IRIS_CSV),
        DatasetSpec::TwoArcs { n, noise, seed } => two_arcs(*n, *noise, *seed),
        DatasetSpec::Csv { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text)
        }
        DatasetSpec::MnistSubset { dir, n, seed } => {
            let dir = dir.clone().unwrap_or_else(default_mnist_dir);
            let images = read_file(&dir.join(MNIST_IMAGES_FILE))?;
            let labels = read_file(&dir.join(MNIST_LABELS_FILE))?;
            let x = parse_idx_images(&images)?;
            let y = parse_idx_labels(&labels)?;
            let k = y.iter().max().map_or(0, |m| m + 1).max(10);
            Dataset::new(x, y, k, Provenance::Idx, None)?.subsample(*n, *seed)
        }
    }
}

/// `$DMLE_MNIST_DIR`, else `data/mnist-subset` under the working directory,
/// else the copy shipped at the workspace root.
pub fn default_mnist_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(MNIST_DIR_ENV) {
        return dir.into();
    }
    let local = PathBuf::from("data/mnist-subset");
    if local.join(MNIST_IMAGES_FILE).exists() {
        return local;
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// CSV with header `f0,...,f{d-1},label` and integer labels.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Dataset(e.to_string()))?
        .clone();
    let cols = header.len();
    if cols < 2 || &header[cols - 1] != "label" {
        return Err(Error::Dataset(
            "header must end with a `label` column".into(),
        ));
    }
    for (j, name) in header.iter().take(cols - 1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Dataset(format!(
                "expected column `f{j}`, found `{name}`"
            )));
        }
    }
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Dataset(e.to_string()))?;
        for field in rec.iter().take(cols - 1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Dataset(format!("row {}: bad feature `{field}`", line + 1)))?;
            data.push(v);
        }
        let label = &rec[cols - 1];
        y.push(label.parse::<usize>().map_err(|_| {
            Error::Dataset(format!(
                "row {}: label `{label}` is not a class index",
                line + 1
            ))
        })?);
    }
    if y.is_empty() {
        return Err(Error::Empty("csv rows"));
    }
    let k = y.iter().max().expect("nonempty") + 1;
    Dataset::new(
        Tensor::matrix(y.len(), cols - 1, data)?,
        y,
        k,
        Provenance::Csv,
        None,
    )
}

fn idx_header(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let ndims = (magic & 0xff) as usize;
    let head = 4 + 4 * ndims;
    if bytes.len() < head {
        return Err(Error::Dataset("IDX file shorter than its header".into()));
    }
    let got = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if got != magic {
        return Err(Error::Dataset(format!(
            "IDX magic {got:#010x}, expected {magic:#010x}"
        )));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let body = &bytes[head..];
    let expected: usize = dims.iter().product();
    if body.len() != expected {
        return Err(Error::Dataset(format!(
            "IDX dims {dims:?} need {expected} bytes, found {}",
            body.len()
        )));
    }
    Ok((dims, body))
}

/// Image stack `(n, rows, cols)` as an `n × rows·cols` matrix scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, body) = idx_header(bytes, IDX_IMAGES)?;
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::matrix(dims[0], dims[1] * dims[2], data)?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, body) = idx_header(bytes, IDX_LABELS)?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Two interleaving half circles with Gaussian noise: `ceil(n/2)` points of
/// class 0 on the upper arc and `floor(n/2)` of class 1 on the lower one.
pub fn two_arcs(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || noise.is_nan() || noise < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "two-arcs needs n >= 2 and noise >= 0, got {n}, {noise}"
        )));
    }
    let n_outer = n - n / 2;
    let n_inner = n / 2;
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = RngStreams::new(seed).stream(Purpose::Synthetic, 0);
    let pi = std::f64::consts::PI;
    let arc = |i: usize, m: usize| {
        if m > 1 {
            pi * i as f64 / (m - 1) as f64
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = arc(i, n_outer);
        data.extend([t.cos(), t.sin()]);
        y.push(0);
    }
    for i in 0..n_inner {
        let t = arc(i, n_inner);
        data.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        y.push(1);
    }
    for v in data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Dataset::new(
        Tensor::matrix(n, 2, data)?,
        y,
        2,
        Provenance::Synthetic,
        Some(seed),
    )
}
