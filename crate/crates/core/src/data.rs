//! Datasets: the 2-D Gaussian toy task and IDX image files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlatError};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    /// Valid input range; `None` for unbounded inputs.
    pub input_scale: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    sample_shape: Vec<usize>,
    data: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(
        sample_shape: Vec<usize>,
        data: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if width == 0 || data.len() != width * labels.len() {
            return Err(SlatError::shape("dataset", labels.len() * width, data.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(SlatError::LabelOutOfRange { label: bad, classes });
        }
        if let Some((lo, hi)) = meta.input_scale {
            if data.iter().any(|v| *v < lo || *v > hi) {
                return Err(SlatError::InvalidArgument(format!("values outside input scale [{lo}, {hi}]")));
            }
        }
        Ok(LabeledDataset {
            sample_shape,
            data,
            labels,
            classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    fn width(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    /// Stacks the selected samples into a `[B, ...sample_shape]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.width());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let shape = [&[indices.len()][..], &self.sample_shape].concat();
        let x = Tensor::new(shape, data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (x, labels) = self.batch(indices);
        LabeledDataset {
            sample_shape: self.sample_shape.clone(),
            data: x.into_data(),
            labels,
            classes: self.classes,
            meta: self.meta.clone(),
        }
    }

    /// The same samples viewed as flat vectors.
    pub fn flattened(&self) -> LabeledDataset {
        LabeledDataset {
            sample_shape: vec![self.width()],
            ..self.clone()
        }
    }

    /// First `n` elements vs the rest after a seeded permutation.
    pub fn split(&self, n: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = n.min(idx.len());
        (self.subset(&idx[..n]), self.subset(&idx[n..]))
    }

    /// `x1,x2,label` rows for 2-D datasets.
    pub fn write_toy_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.width() != 2 {
            return Err(SlatError::InvalidArgument("toy CSV export needs 2-D samples".into()));
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "x1,x2,label")?;
        for i in 0..self.len() {
            let s = self.sample(i);
            writeln!(out, "{},{},{}", s[0], s[1], self.labels[i])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Two Gaussian classes `N(-mu, diag(sigma^2))` (label 0) and `N(mu, diag(sigma^2))` (label 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub mu: [f64; 2],
    /// Per-axis standard deviations.
    pub sigma: [f64; 2],
    pub n_per_class: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            mu: [1.0, 0.05],
            sigma: [0.5, 0.02],
            n_per_class: 500,
            seed: 0,
        }
    }
}

pub fn gen_toy(spec: &ToySpec) -> Result<LabeledDataset> {
    if spec.n_per_class == 0 {
        return Err(SlatError::InvalidArgument("n_per_class must be >= 1".into()));
    }
    if !(spec.sigma[0] > 0.0 && spec.sigma[1] > 0.0) {
        return Err(SlatError::InvalidArgument("toy sigma entries must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nx = Normal::new(0.0, spec.sigma[0]).expect("sigma validated");
    let ny = Normal::new(0.0, spec.sigma[1]).expect("sigma validated");
    let mut data = Vec::with_capacity(4 * spec.n_per_class);
    let mut labels = Vec::with_capacity(2 * spec.n_per_class);
    for _ in 0..spec.n_per_class {
        for label in [0usize, 1] {
            let s = if label == 1 { 1.0 } else { -1.0 };
            data.push(s * spec.mu[0] + nx.sample(&mut rng));
            data.push(s * spec.mu[1] + ny.sample(&mut rng));
            labels.push(label);
        }
    }
    LabeledDataset::new(
        vec![2],
        data,
        labels,
        2,
        DatasetMeta {
            name: "toy".into(),
            input_scale: None,
        },
    )
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| SlatError::TruncatedFile {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(SlatError::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(SlatError::InvalidArgument(format!(
            "{}: {} trailing bytes after IDX payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    Ok(())
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = fs::read(ip)?;
    let lab = fs::read(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(SlatError::BadMagic {
            path: ip.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    check_len(&img, 16 + n * rows * cols, ip)?;

    let magic = be_u32(&lab, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(SlatError::BadMagic {
            path: lp.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = be_u32(&lab, 4, lp)? as usize;
    check_len(&lab, 8 + n_labels, lp)?;
    if n_labels != n {
        return Err(SlatError::CountMismatch { images: n, labels: n_labels });
    }

    let data = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(
        vec![1, rows, cols],
        data,
        labels,
        classes,
        DatasetMeta {
            name: ip.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            input_scale: Some((0.0, 1.0)),
        },
    )
}

/// Writes a `[1, H, W]` dataset as an IDX pair; pixels are rounded to bytes.
pub fn write_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let s = ds.sample_shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(SlatError::InvalidArgument(format!("IDX export needs [1, H, W] samples, got {s:?}")));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * s[1] * s[2]);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, s[1] as u32, s[2] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Zero-pads each spatial side of a `[C, H, W]` image by `pad` and crops back at `(dy, dx)`.
pub fn pad_crop_at(x: &[f64], shape: &[usize], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xx in 0..w {
                let sx = (xx + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + xx] = x[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random pad-and-crop applied independently to every image of a `[B, C, H, W]` batch.
pub fn augment_pad_crop<R: Rng>(x: &Tensor, pad: usize, rng: &mut R) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let shape = &x.shape()[1..];
    let mut out = x.clone();
    for i in 0..x.batch() {
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let cropped = pad_crop_at(x.row(i), shape, pad, dy, dx);
        out.row_mut(i).copy_from_slice(&cropped);
    }
    out
}

/// I.i.d. `±1` entries.
pub fn rademacher(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_seeded() {
        let spec = ToySpec { n_per_class: 50, ..Default::default() };
        assert_eq!(gen_toy(&spec).unwrap(), gen_toy(&spec).unwrap());
        let other = ToySpec { seed: 1, ..spec.clone() };
        assert_ne!(gen_toy(&spec).unwrap(), gen_toy(&other).unwrap());
    }

    #[test]
    fn toy_rejects_bad_spec() {
        assert!(gen_toy(&ToySpec { n_per_class: 0, ..Default::default() }).is_err());
        assert!(gen_toy(&ToySpec { sigma: [0.0, 1.0], ..Default::default() }).is_err());
    }

    #[test]
    fn pad_crop_identities() {
        let x: Vec<f64> = (0..2 * 4 * 5).map(|v| v as f64).collect();
        let shape = [2, 4, 5];
        assert_eq!(pad_crop_at(&x, &shape, 0, 0, 0), x);
        assert_eq!(pad_crop_at(&x, &shape, 3, 3, 3), x);
        let shifted = pad_crop_at(&x, &shape, 1, 0, 0);
        assert_eq!(shifted[0], 0.0);
        assert_eq!(shifted[6], x[0]);
        let t = Tensor::new(vec![1, 2, 4, 5], x.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_pad_crop(&t, 0, &mut rng), t);
    }

    #[test]
    fn rademacher_entries() {
        let r = rademacher(&[1000], 3);
        assert!(r.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(r, rademacher(&[1000], 3));
        assert_ne!(r, rademacher(&[1000], 4));
    }

    #[test]
    fn split_partitions() {
        let ds = gen_toy(&ToySpec { n_per_class: 10, ..Default::default() }).unwrap();
        let (a, b) = ds.split(15, 0);
        assert_eq!(a.len(), 15);
        assert_eq!(b.len(), 5);
    }
}
