//! Classification datasets: MNIST IDX files, Gaussian blobs, label noise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use safe_core::io::{read_container_file, write_container_file};
use safe_core::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Which labels were replaced, and what they were before.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub indices: Vec<usize>,
    pub original: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × d`.
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
    pub corruption: Option<Corruption>,
}

fn format_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        field: field.into(),
        reason: reason.into(),
    }
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split: split.into(),
            corruption: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.ncols()
    }

    /// The first `n` samples (all of them if `n ≥ len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let corruption = self.corruption.as_ref().map(|c| {
            let (indices, original) = c
                .indices
                .iter()
                .zip(&c.original)
                .filter(|(i, _)| **i < n)
                .map(|(i, o)| (*i, *o))
                .unzip();
            Corruption { indices, original }
        });
        Self {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split.clone(),
            corruption,
        }
    }

    /// Per-feature standardization with statistics from `reference`
    /// (features with zero variance are only centered).
    pub fn standardized_by(&self, reference: &Dataset) -> Self {
        let mean = reference.inputs.mean_axis(Axis(0)).expect("non-empty");
        let std = reference.inputs.std_axis(Axis(0), 0.0);
        let mut out = self.clone();
        for mut row in out.inputs.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = if *s > 0.0 { (*v - m) / s } else { *v - m };
            }
        }
        out
    }

    /// Saves to the binary container (inputs row-major then labels as floats).
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut h = Map::new();
        h.insert("kind".into(), Value::from("dataset"));
        h.insert("shape".into(), serde_json::json!([self.len(), self.features()]));
        h.insert("classes".into(), Value::from(self.classes));
        h.insert("split".into(), Value::from(self.split.clone()));
        h.insert("corruption".into(), serde_json::to_value(&self.corruption)?);
        let mut data: Vec<f64> = self.inputs.iter().copied().collect();
        data.extend(self.labels.iter().map(|&l| l as f64));
        write_container_file(path, &h, &data)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let (h, data) = read_container_file(path)?;
        let shape: Vec<usize> = serde_json::from_value(h.get("shape").cloned().unwrap_or(Value::Null))
            .map_err(|_| format_err("shape", "missing or malformed"))?;
        let [n, d] = shape[..] else {
            return Err(format_err("shape", "expected [n, d]"));
        };
        if data.len() != n * d + n {
            return Err(format_err("len", "payload does not match shape"));
        }
        let classes = h
            .get("classes")
            .and_then(Value::as_u64)
            .ok_or_else(|| format_err("classes", "missing"))? as usize;
        let split = h.get("split").and_then(Value::as_str).unwrap_or("").to_string();
        let inputs = Array2::from_shape_vec((n, d), data[..n * d].to_vec()).expect("shape checked");
        let labels = data[n * d..].iter().map(|&v| v as usize).collect();
        let mut ds = Self::new(inputs, labels, classes, split)?;
        ds.corruption = serde_json::from_value(h.get("corruption").cloned().unwrap_or(Value::Null))?;
        Ok(ds)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| format_err("gzip", e.to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(field, "truncated header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images.magic")?;
    if magic != IMAGE_MAGIC {
        return Err(format_err("images.magic", format!("expected 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "images.count")? as usize;
    let rows = be_u32(bytes, 8, "images.rows")? as usize;
    let cols = be_u32(bytes, 12, "images.cols")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            "images.payload",
            format!("truncated: {} of {need} bytes", payload.len()),
        ));
    }
    Ok((n, rows, cols, &payload[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels.magic")?;
    if magic != LABEL_MAGIC {
        return Err(format_err("labels.magic", format!("expected 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "labels.count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(format_err(
            "labels.payload",
            format!("truncated: {} of {n} bytes", payload.len()),
        ));
    }
    Ok(&payload[..n])
}

/// Loads an MNIST-style IDX pair (optionally gzip-compressed), pixels scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: &str) -> Result<Dataset> {
    let ib = open_maybe_gz(images)?;
    let lb = open_maybe_gz(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib)?;
    let lab = parse_idx_labels(&lb)?;
    if lab.len() != n {
        return Err(format_err(
            "count",
            format!("{n} images but {} labels", lab.len()),
        ));
    }
    let inputs = Array2::from_shape_fn((n, rows * cols), |(i, j)| pixels[i * rows * cols + j] as f64 / 255.0);
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(inputs, labels, classes, split)
}

/// Loads `train-*` and `t10k-*` IDX files from `dir` (plain or `.gz`).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let pick = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    let train = load_mnist_idx(&pick("train-images-idx3-ubyte"), &pick("train-labels-idx1-ubyte"), "train")?;
    let test = load_mnist_idx(&pick("t10k-images-idx3-ubyte"), &pick("t10k-labels-idx1-ubyte"), "test")?;
    Ok((train, test))
}

fn write_maybe_gz(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut g = GzEncoder::new(f, Compression::default());
        body(&mut g)?;
        g.finish()?.flush()?;
    } else {
        let mut f = f;
        body(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

/// Writes images in IDX format (gzip when the path ends in `.gz`).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::InvalidArgument("pixel buffer is not a whole number of images".into()));
    }
    let n = pixels.len() / (rows * cols);
    write_maybe_gz(
        path,
        |w| {
            w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
            for v in [n, rows, cols] {
                w.write_all(&(v as u32).to_be_bytes())?;
            }
            w.write_all(pixels)
        },
    )
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_maybe_gz(
        path,
        |w| {
            w.write_all(&LABEL_MAGIC.to_be_bytes())?;
            w.write_all(&(labels.len() as u32).to_be_bytes())?;
            w.write_all(labels)
        },
    )
}

/// Gaussian clusters: class centers `separation · N(0, I)`, unit-variance noise.
pub fn synth_blobs(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(Error::InvalidArgument("n, d and classes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Array2::from_shape_fn((classes, d), |_| {
        separation * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let inputs = Array2::from_shape_fn((n, d), |(i, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        centers[[labels[i], j]] + z
    });
    Dataset::new(inputs, labels, classes, "synthetic")
}

/// Replaces exactly `round(ratio · N)` labels, chosen without replacement, by
/// a uniform draw over the other classes.
pub fn corrupt_labels(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("corruption ratio {ratio} outside [0, 1]")));
    }
    let n = ds.len();
    let k = (ratio * n as f64).round() as usize;
    let mut out = ds.clone();
    if k == 0 {
        out.corruption = Some(Corruption::default());
        return Ok(out);
    }
    if ds.classes < 2 {
        return Err(Error::InvalidArgument("cannot corrupt labels with a single class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    let mut original = Vec::with_capacity(k);
    for &i in &indices {
        let old = ds.labels[i];
        let mut new = rng.random_range(0..ds.classes - 1);
        if new >= old {
            new += 1;
        }
        original.push(old);
        out.labels[i] = new;
    }
    out.corruption = Some(Corruption { indices, original });
    Ok(out)
}
