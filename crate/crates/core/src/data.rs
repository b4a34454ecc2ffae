//! Datasets, loaders, vector augmentations and batching.
//!
//! Samples are columns. Labels ride along in [`Dataset`] for evaluation
//! only; training code receives [`Unlabeled`] views, which expose features
//! and nothing else.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Minimum distance between blob centers.
pub const BLOB_SEPARATION: f64 = 6.0;
/// Noise std for moons/rings.
pub const SHAPE_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `d_in × M`, one sample per column.
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

/// Feature-only view of a dataset handed to the trainer.
#[derive(Debug, Clone, Copy)]
pub struct Unlabeled<'a> {
    features: &'a DenseMatrix,
}

impl<'a> Unlabeled<'a> {
    pub fn new(features: &'a DenseMatrix) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &'a DenseMatrix {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.cols() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if labels.len() != features.cols() {
            return Err(Error::Data(format!(
                "{} labels for {} samples",
                labels.len(),
                features.cols()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        if features.cols() < num_classes {
            return Err(Error::Data(format!(
                "{} samples cannot cover {num_classes} classes",
                features.cols()
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled::new(&self.features)
    }

    /// Subset by sample index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// Seeded stratification-free split into `(train, test)` with
    /// `test_fraction` of the samples held out.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test.min(self.len()));
        (self.subset(train), self.subset(test))
    }

    /// SHA-256 of dims, features (bit patterns) and labels, hex encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for v in self.features.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Blobs,
    Moons,
    Rings,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blobs" => Some(Self::Blobs),
            "moons" => Some(Self::Moons),
            "rings" => Some(Self::Rings),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Moons => "moons",
            Self::Rings => "rings",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        gen_synthetic(self.kind, self.num_classes, self.samples_per_class, self.dim, self.seed)
    }
}

/// Labeled point clouds, class-major sample order.
///
/// Blobs: unit-variance Gaussian clusters whose centers are at least
/// [`BLOB_SEPARATION`] apart. Moons (2 classes) and rings (any number of
/// concentric circles) live in the first two coordinates; every coordinate
/// carries `N(0, 0.1²)` noise.
pub fn gen_synthetic(
    kind: SyntheticKind,
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 || dim == 0 {
        return Err(Error::Contract(format!(
            "{}: classes, samples per class and dim must be positive",
            kind.name()
        )));
    }
    if matches!(kind, SyntheticKind::Moons | SyntheticKind::Rings) && dim < 2 {
        return Err(Error::Contract(format!("{} needs dim >= 2, got {dim}", kind.name())));
    }
    if kind == SyntheticKind::Moons && num_classes != 2 {
        return Err(Error::Contract(format!("moons has exactly 2 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = num_classes * samples_per_class;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);

    match kind {
        SyntheticKind::Blobs => {
            let centers = blob_centers(num_classes, dim, &mut rng);
            for (c, center) in centers.iter().enumerate() {
                for _ in 0..samples_per_class {
                    cols.push(
                        center
                            .iter()
                            .map(|&mu| mu + rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    );
                    labels.push(c);
                }
            }
        }
        SyntheticKind::Moons | SyntheticKind::Rings => {
            let noise = Normal::new(0.0, SHAPE_NOISE).expect("valid std");
            for c in 0..num_classes {
                for _ in 0..samples_per_class {
                    let (x, y) = if kind == SyntheticKind::Moons {
                        let t = rng.random_range(0.0..std::f64::consts::PI);
                        if c == 0 {
                            (t.cos(), t.sin())
                        } else {
                            (1.0 - t.cos(), 0.5 - t.sin())
                        }
                    } else {
                        let t = rng.random_range(0.0..std::f64::consts::TAU);
                        let r = (c + 1) as f64;
                        (r * t.cos(), r * t.sin())
                    };
                    let mut col = vec![x, y];
                    col.resize(dim, 0.0);
                    for v in col.iter_mut() {
                        *v += noise.sample(&mut rng);
                    }
                    cols.push(col);
                    labels.push(c);
                }
            }
        }
    }
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let features = DenseMatrix::from_columns(&refs)?;
    Dataset::new(features, labels, kind.name())
}

/// Gaussian directions rescaled so the closest pair is exactly
/// [`BLOB_SEPARATION`] apart.
fn blob_centers(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    loop {
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        if k == 1 {
            return vec![vec![0.0; dim]];
        }
        let mut min_d = f64::INFINITY;
        for i in 0..k {
            for j in (i + 1)..k {
                let d = centers[i]
                    .iter()
                    .zip(&centers[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_d = min_d.min(d);
            }
        }
        if min_d > 1e-3 {
            let s = BLOB_SEPARATION / min_d;
            return centers
                .into_iter()
                .map(|c| c.into_iter().map(|v| v * s).collect())
                .collect();
        }
    }
}

/// CSV with a header row; each record is one sample whose last column is
/// an integer label.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    parse_csv(&bytes, &name)
}

pub fn parse_csv(bytes: &[u8], name: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header_len = match reader.headers() {
        Ok(h) if h.len() >= 2 => h.len(),
        Ok(h) => {
            return Err(Error::Format {
                offset: 0,
                message: format!("header needs at least one feature and a label column, has {}", h.len()),
            })
        }
        Err(e) => return Err(csv_format_error(e)),
    };
    let d = header_len - 1;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_format_error)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != header_len {
            return Err(Error::Format {
                offset,
                message: format!("record has {} fields, header has {header_len}", rec.len()),
            });
        }
        let mut col = Vec::with_capacity(d);
        for field in rec.iter().take(d) {
            let v: f64 = field.parse().map_err(|_| Error::Format {
                offset,
                message: format!("feature {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    offset,
                    message: format!("feature {field:?} is not finite"),
                });
            }
            col.push(v);
        }
        let raw = &rec[d];
        let label: i64 = raw.parse().map_err(|_| Error::Format {
            offset,
            message: format!("label {raw:?} is not an integer"),
        })?;
        if label < 0 {
            return Err(Error::Data(format!(
                "label {label} out of range at byte {offset}"
            )));
        }
        labels.push(label as usize);
        columns.push(col);
    }
    if columns.is_empty() {
        return Err(Error::Data("CSV has no samples".into()));
    }
    let refs: Vec<&[f64]> = columns.iter().map(|c| c.as_slice()).collect();
    Dataset::new(DenseMatrix::from_columns(&refs)?, labels, name)
}

fn csv_format_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Format {
        offset,
        message: e.to_string(),
    }
}

/// Writes `f0,…,f{d−1},label` and one row per sample. Values use the
/// shortest exact decimal form, so a reload reproduces them bitwise.
pub fn dump_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..dataset.dim() {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label\n");
    for j in 0..dataset.len() {
        for i in 0..dataset.dim() {
            out.push_str(&format!("{},", dataset.features.get(i, j)));
        }
        out.push_str(&format!("{}\n", dataset.labels[j]));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset: offset as u64,
            message: "file truncated inside header".into(),
        })
}

/// MNIST-style IDX pair: `u8` images rescaled to `[0, 1]`, one flattened
/// image per column.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(&ib, &lb)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(images, 4)? as usize;
    let rows = read_be_u32(images, 8)? as usize;
    let cols = read_be_u32(images, 12)? as usize;
    let d = rows * cols;
    let body = &images[16..];
    if body.len() != n * d {
        return Err(Error::Format {
            offset: 16 + body.len().min(n * d) as u64,
            message: format!("expected {} pixel bytes, found {}", n * d, body.len()),
        });
    }
    let lmagic = read_be_u32(labels, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = read_be_u32(labels, 4)? as usize;
    if ln != n {
        return Err(Error::Data(format!("{n} images but {ln} labels")));
    }
    let lbody = &labels[8..];
    if lbody.len() != n {
        return Err(Error::Format {
            offset: 8 + lbody.len().min(n) as u64,
            message: format!("expected {n} label bytes, found {}", lbody.len()),
        });
    }
    let features = DenseMatrix::from_fn(d, n, |i, j| body[j * d + i] as f64 / 255.0);
    Dataset::new(features, lbody.iter().map(|&b| b as usize).collect(), "idx")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            mask_prob: 0.1,
            scale_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob must be in [0, 1], got {}", self.mask_prob)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Generator for the augmentations of one batch, derived from
    /// `(seed, epoch, batch)` only.
    pub fn batch_rng(&self, epoch: usize, batch: usize) -> ChaCha8Rng {
        derived_rng(self.seed, 0xA06, epoch as u64, batch as u64)
    }
}

fn derived_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn augment_once(batch: &DenseMatrix, cfg: &AugmentConfig, rng: &mut impl Rng) -> DenseMatrix {
    let (d, n) = batch.shape();
    let (lo, hi) = cfg.scale_range;
    let scales: Vec<f64> = (0..n)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
        .collect();
    let mut out = DenseMatrix::from_fn(d, n, |i, j| batch.get(i, j) * scales[j]);
    if cfg.mask_prob > 0.0 {
        for v in out.data_mut() {
            if rng.random::<f64>() < cfg.mask_prob {
                *v = 0.0;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in out.data_mut() {
            *v += noise.sample(rng);
        }
    }
    out
}

/// Two independently augmented views: per-sample scale, then entry
/// masking, then additive Gaussian noise.
pub fn two_views(batch: &DenseMatrix, cfg: &AugmentConfig, rng: &mut impl Rng) -> (DenseMatrix, DenseMatrix) {
    let a = augment_once(batch, cfg, rng);
    let b = augment_once(batch, cfg, rng);
    (a, b)
}

/// Shuffled sample indices for one epoch, chunked into full batches (the
/// short tail is dropped). The order depends only on `(shuffle_seed, epoch)`.
pub fn batch_iterator(num_samples: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Contract(format!("batch_size must be >= 2, got {batch_size}")));
    }
    Ok(epoch_permutation(num_samples, shuffle_seed, epoch)
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// The permutation [`batch_iterator`] slices.
pub fn epoch_permutation(num_samples: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..num_samples).collect();
    idx.shuffle(&mut derived_rng(shuffle_seed, 0x5EED, epoch as u64, 0));
    idx
}

/// One prepared training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub index: usize,
    pub view_a: DenseMatrix,
    pub view_b: DenseMatrix,
}

/// Augmented views of every batch of one epoch, in order.
pub fn prepare_batch(
    data: Unlabeled<'_>,
    indices: &[usize],
    aug: &AugmentConfig,
    epoch: usize,
    batch: usize,
) -> PreparedBatch {
    let x = data.features().select_columns(indices);
    let mut rng = aug.batch_rng(epoch, batch);
    let (view_a, view_b) = two_views(&x, aug, &mut rng);
    PreparedBatch {
        index: batch,
        view_a,
        view_b,
    }
}

/// Runs `consume` over every batch of an epoch. With `prefetch`, a worker
/// thread prepares the next batch into a single-slot queue; since each
/// batch's randomness is derived from `(seed, epoch, batch)`, the output is
/// identical either way.
pub fn for_each_batch<F>(
    data: Unlabeled<'_>,
    batches: &[Vec<usize>],
    aug: &AugmentConfig,
    epoch: usize,
    prefetch: bool,
    mut consume: F,
) -> Result<()>
where
    F: FnMut(PreparedBatch) -> Result<()>,
{
    if !prefetch {
        for (b, idx) in batches.iter().enumerate() {
            consume(prepare_batch(data, idx, aug, epoch, b))?;
        }
        return Ok(());
    }
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<PreparedBatch>(1);
        s.spawn(move || {
            for (b, idx) in batches.iter().enumerate() {
                if tx.send(prepare_batch(data, idx, aug, epoch, b)).is_err() {
                    break;
                }
            }
        });
        for prepared in rx.iter() {
            consume(prepared)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_shape_and_labels() {
        let d = gen_synthetic(SyntheticKind::Blobs, 2, 10, 2, 3).unwrap();
        assert_eq!(d.features.shape(), (2, 20));
        assert_eq!(&d.labels[..10], &[0; 10]);
        assert_eq!(&d.labels[10..], &[1; 10]);
        assert_eq!(d.num_classes, 2);
    }

    #[test]
    fn generators_are_reproducible() {
        for kind in [SyntheticKind::Blobs, SyntheticKind::Moons, SyntheticKind::Rings] {
            let k = if kind == SyntheticKind::Moons { 2 } else { 3 };
            let a = gen_synthetic(kind, k, 7, 4, 11).unwrap();
            let b = gen_synthetic(kind, k, 7, 4, 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.fingerprint(), b.fingerprint());
            assert_ne!(a, gen_synthetic(kind, k, 7, 4, 12).unwrap());
        }
    }

    #[test]
    fn invalid_generator_args() {
        assert!(gen_synthetic(SyntheticKind::Moons, 2, 5, 1, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::Rings, 2, 5, 1, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::Moons, 3, 5, 2, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::Blobs, 0, 5, 2, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::Blobs, 2, 0, 2, 0).is_err());
    }

    #[test]
    fn csv_three_rows() {
        let d = parse_csv(b"a,b,label\n1,2,0\n3,4,1\n5,6,0\n", "t").unwrap();
        assert_eq!(d.features.shape(), (2, 3));
        assert_eq!(d.features.column(1), vec![3.0, 4.0]);
        assert_eq!(d.labels, vec![0, 1, 0]);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv(b"label\n0\n", "t"), Err(Error::Format { .. })));
        match parse_csv(b"a,label\n1,0\n2,x\n", "t") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv(b"a,label\n1,-1\n", "t"), Err(Error::Data(_))));
        assert!(matches!(parse_csv(b"a,label\n1,0,3\n", "t"), Err(Error::Format { .. })));
        assert!(matches!(parse_csv(b"a,label\n", "t"), Err(Error::Data(_))));
    }

    #[test]
    fn idx_bad_magic() {
        let mut img = vec![0u8; 16];
        img[3] = 0x00;
        let lab = [0u8, 0, 8, 1, 0, 0, 0, 0];
        match parse_idx(&img, &lab) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_and_full_mask_augmentations() {
        let x = DenseMatrix::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 4.0, -1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = two_views(&x, &AugmentConfig::identity(), &mut rng);
        assert_eq!(a, x);
        assert_eq!(b, x);

        let mask_all = AugmentConfig {
            mask_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let (a, b) = two_views(&x, &mask_all, &mut rng);
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn drop_last_batches() {
        let b = batch_iterator(10, 4, 1, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|c| c.len() == 4));
        assert_eq!(b, batch_iterator(10, 4, 1, 0).unwrap());
        assert_ne!(b, batch_iterator(10, 4, 1, 1).unwrap());
        let perm = epoch_permutation(10, 1, 0);
        let flat: Vec<usize> = b.concat();
        assert_eq!(flat, perm[..8].to_vec());
        assert!(matches!(batch_iterator(10, 1, 1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn prefetch_matches_inline() {
        let d = gen_synthetic(SyntheticKind::Blobs, 2, 20, 3, 0).unwrap();
        let batches = batch_iterator(d.len(), 8, 5, 2).unwrap();
        let aug = AugmentConfig::default();
        let collect = |prefetch| {
            let mut v = Vec::new();
            for_each_batch(d.unlabeled(), &batches, &aug, 2, prefetch, |b| {
                v.push(b);
                Ok(())
            })
            .unwrap();
            v
        };
        assert_eq!(collect(false), collect(true));
    }

    #[test]
    fn split_partitions_samples() {
        let d = gen_synthetic(SyntheticKind::Blobs, 2, 10, 2, 0).unwrap();
        let (tr, te) = d.split(0.25, 9);
        assert_eq!(tr.len() + te.len(), 20);
        assert_eq!(te.len(), 5);
    }
}
