//! Datasets: MNIST in IDX format (optionally gzipped) and seeded synthetic
//! generators.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KanError, Result};
use crate::linalg::Matrix;

/// Environment variable naming the dataset directory.
pub const DATA_DIR_ENV: &str = "KANTIZE_DATA_DIR";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs scaled into a grid domain, with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    inputs: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(KanError::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(KanError::OutOfRange(format!("label {bad} with {n_classes} classes")));
        }
        Ok(Self {
            name: name.into(),
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// `n` distinct samples drawn with a fixed seed, kept in dataset order.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(KanError::InvalidArgument(format!(
                "subset of {n} requested from {} samples",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        Ok(self.select(&idx))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| KanError::from(e).context(path.display().to_string()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| KanError::from(e).context(path.display().to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| KanError::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `(count, rows*cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(KanError::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let dim = be_u32(bytes, 8, "images")? as usize * be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    if body.len() != n * dim {
        return Err(KanError::Format(format!(
            "images: expected {} pixel bytes, found {}",
            n * dim,
            body.len()
        )));
    }
    Ok((n, dim, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(KanError::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(KanError::Format(format!("labels: expected {n} bytes, found {}", body.len())));
    }
    Ok(body)
}

/// Maps a pixel byte linearly onto `[lo, hi]`; 0 and 255 hit the
/// endpoints exactly.
#[inline]
pub fn scale_pixel(p: u8, (lo, hi): (f64, f64)) -> f64 {
    if p == 255 {
        hi
    } else {
        lo + (hi - lo) * (p as f64 / 255.0)
    }
}

/// Loads an IDX image/label pair, scaling pixels into `domain`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, domain: (f64, f64)) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path.as_ref())?;
    let (n, dim, pixels) = parse_idx_images(&img).map_err(|e| e.context(images_path.display().to_string()))?;
    let labels = parse_idx_labels(&lab).map_err(|e| e.context(labels_path.as_ref().display().to_string()))?;
    if labels.len() != n {
        return Err(KanError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let data = pixels.iter().map(|&p| scale_pixel(p, domain)).collect();
    let inputs = Matrix::from_vec(n, dim, data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |f| f.to_string_lossy().into_owned());
    Dataset::new(name, inputs, labels, n_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

fn has_mnist(dir: &Path) -> bool {
    find_file(dir, "train-images-idx3-ubyte").is_some() || find_file(dir, "t10k-images-idx3-ubyte").is_some()
}

/// Directory holding the MNIST IDX files: `explicit` if given, otherwise
/// `$KANTIZE_DATA_DIR` (or its `mnist/` subdirectory).
pub fn resolve_data_dir(explicit: Option<&Path>) -> Result<PathBuf> {
    let base = match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| KanError::InvalidArgument(format!("no dataset directory given and {DATA_DIR_ENV} is unset")))?,
    };
    [base.clone(), base.join("mnist")]
        .into_iter()
        .find(|d| has_mnist(d))
        .ok_or_else(|| KanError::InvalidArgument(format!("no IDX files found in {}", base.display())))
}

/// Loads one MNIST split from `dir` (plain or gzipped IDX files).
pub fn load_mnist(dir: impl AsRef<Path>, split: Split, domain: (f64, f64)) -> Result<Dataset> {
    let dir = dir.as_ref();
    let p = split.prefix();
    let missing = |f: &str| KanError::InvalidArgument(format!("{f} not found in {}", dir.display()));
    let images = find_file(dir, &format!("{p}-images-idx3-ubyte")).ok_or_else(|| missing("images"))?;
    let labels = find_file(dir, &format!("{p}-labels-idx1-ubyte")).ok_or_else(|| missing("labels"))?;
    let mut ds = load_idx(images, labels, domain)?;
    ds.name = format!("mnist-{p}");
    Ok(ds)
}

/// Seeded synthetic classification problems with inputs in `[-1, 1]^D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Two interleaved half circles in 2-D, with Gaussian noise.
    TwoMoons { noise: f64 },
    /// Two classes split by a random hyperplane through the origin, with a
    /// margin of 0.05 around it left empty.
    LinearlySeparable { dims: usize },
    /// Isotropic Gaussian blobs around random centres.
    Blobs { dims: usize, classes: usize },
}

impl std::str::FromStr for SyntheticKind {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-moons" | "moons" => Ok(Self::TwoMoons { noise: 0.1 }),
            "linear" | "linearly-separable" => Ok(Self::LinearlySeparable { dims: 8 }),
            "blobs" => Ok(Self::Blobs { dims: 8, classes: 4 }),
            other => Err(KanError::InvalidArgument(format!("unknown synthetic dataset '{other}'"))),
        }
    }
}

pub fn synthetic_dataset(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dims, classes) = match kind {
        SyntheticKind::TwoMoons { noise } => {
            if !(noise.is_finite() && noise >= 0.0) {
                return Err(KanError::InvalidArgument(format!("noise must be non-negative, got {noise}")));
            }
            (2, 2)
        }
        SyntheticKind::LinearlySeparable { dims } => (dims, 2),
        SyntheticKind::Blobs { dims, classes } => (dims, classes),
    };
    if dims == 0 || classes < 2 {
        return Err(KanError::InvalidArgument(format!(
            "synthetic data needs dims >= 1 and classes >= 2, got {dims} and {classes}"
        )));
    }
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    match kind {
        SyntheticKind::TwoMoons { noise } => {
            let gauss = Normal::new(0.0, noise).expect("checked noise");
            for s in 0..n {
                let label = s % 2;
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let (x, y) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                // raw moons span about [-1, 2] x [-0.5, 1]
                let x = (x - 0.5) / 1.6 + gauss.sample(&mut rng) / 1.6;
                let y = (y - 0.25) / 1.0 + gauss.sample(&mut rng);
                data.push(x.clamp(-1.0, 1.0));
                data.push(y.clamp(-1.0, 1.0));
                labels.push(label);
            }
        }
        SyntheticKind::LinearlySeparable { dims } => {
            let gauss = Normal::new(0.0, 1.0).expect("unit normal");
            let mut w: Vec<f64> = (0..dims).map(|_| gauss.sample(&mut rng)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.iter_mut().for_each(|v| *v /= norm);
            while labels.len() < n {
                let x: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let d: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
                if d.abs() < 0.05 {
                    continue;
                }
                data.extend_from_slice(&x);
                labels.push(usize::from(d > 0.0));
            }
        }
        SyntheticKind::Blobs { dims, classes } => {
            let centres: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dims).map(|_| rng.random_range(-0.6..0.6)).collect())
                .collect();
            let gauss = Normal::new(0.0, 0.15).expect("fixed sigma");
            for s in 0..n {
                let label = s % classes;
                for c in &centres[label] {
                    data.push((c + gauss.sample(&mut rng)).clamp(-1.0, 1.0));
                }
                labels.push(label);
            }
        }
    }
    let inputs = Matrix::from_vec(n, dims, data)?;
    Dataset::new(format!("synthetic-{seed}"), inputs, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn parses_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &idx_images(2, 1, 3, &[0, 255, 51, 255, 0, 102]));
        let lab = write(dir.path(), "l", &idx_labels(&[9, 0]));
        let ds = load_idx(&img, &lab, (-1.0, 1.0)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 3);
        assert_eq!(ds.labels(), &[9, 0]);
        assert_eq!(ds.inputs().row(0), &[-1.0, 1.0, -1.0 + 2.0 * 51.0 / 255.0]);
        assert!(ds.inputs().as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        let ds = load_idx(&img, &lab, (-0.7, 2.3)).unwrap();
        assert_eq!(ds.inputs().get(0, 0), -0.7);
        assert_eq!(ds.inputs().get(0, 1), 2.3);
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_images(1, 2, 2, &[1, 2, 3, 4]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let img = write(dir.path(), "i.gz", &enc.finish().unwrap());
        let lab = write(dir.path(), "l", &idx_labels(&[3]));
        let ds = load_idx(&img, &lab, (0.0, 1.0)).unwrap();
        assert_eq!(ds.inputs().row(0), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &idx_images(2, 1, 1, &[0, 1]));
        let lab = write(dir.path(), "l", &idx_labels(&[1, 2, 3]));
        assert!(matches!(
            load_idx(&img, &lab, (-1.0, 1.0)),
            Err(KanError::CountMismatch { images: 2, labels: 3 })
        ));
        // swapped files
        assert!(matches!(
            load_idx(&lab, &img, (-1.0, 1.0)).unwrap_err().root(),
            KanError::BadMagic { found: 0x801, expected: 0x803 }
        ));
        let short = write(dir.path(), "s", &idx_images(3, 1, 1, &[0, 1]));
        assert!(load_idx(&short, &lab, (-1.0, 1.0)).is_err());
        let missing = dir.path().join("nope");
        assert!(matches!(load_idx(&missing, &lab, (-1.0, 1.0)).unwrap_err().root(), KanError::Io(_)));
    }

    #[test]
    fn data_dir_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("mnist");
        std::fs::create_dir(&sub).unwrap();
        write(&sub, "t10k-images-idx3-ubyte", &idx_images(1, 1, 2, &[0, 255]));
        write(&sub, "t10k-labels-idx1-ubyte", &idx_labels(&[4]));
        let found = resolve_data_dir(Some(dir.path())).unwrap();
        assert_eq!(found, sub);
        let ds = load_mnist(&found, Split::Test, (-1.0, 1.0)).unwrap();
        assert_eq!(ds.labels(), &[4]);
        assert!(load_mnist(&found, Split::Train, (-1.0, 1.0)).is_err());
        assert!(resolve_data_dir(Some(&sub.join("x"))).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_bounded() {
        for kind in [
            SyntheticKind::TwoMoons { noise: 0.1 },
            SyntheticKind::LinearlySeparable { dims: 5 },
            SyntheticKind::Blobs { dims: 3, classes: 4 },
        ] {
            let a = synthetic_dataset(kind, 300, 7).unwrap();
            let b = synthetic_dataset(kind, 300, 7).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, synthetic_dataset(kind, 300, 8).unwrap());
            assert!(a.inputs().as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(a.labels().iter().all(|&l| l < a.n_classes()));
            assert!(synthetic_dataset(kind, 0, 7).unwrap().is_empty());
        }
        assert!(synthetic_dataset(SyntheticKind::Blobs { dims: 0, classes: 3 }, 5, 0).is_err());
        assert!(synthetic_dataset(SyntheticKind::TwoMoons { noise: -1.0 }, 5, 0).is_err());
    }

    #[test]
    fn subsets() {
        let ds = synthetic_dataset(SyntheticKind::Blobs { dims: 2, classes: 3 }, 50, 1).unwrap();
        let s = ds.random_subset(20, 3).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s, ds.random_subset(20, 3).unwrap());
        assert!(ds.random_subset(51, 3).is_err());
        assert_eq!(ds.take(5).labels(), &ds.labels()[..5]);
    }
}
