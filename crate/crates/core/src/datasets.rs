//! Class-labeled datasets: IDX ingestion, seeded Gaussian blobs, and the
//! per-task input transforms (pixel permutation, additive noise).

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::num::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Dense feature matrix with integer labels and a per-class sample index.
///
/// Rows of `features` are samples. `class_index[c]` lists the row indices of
/// class `c` in ascending order; together the lists partition `0..len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    features: Array2<T>,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    image_shape: Option<(usize, usize)>,
    split: Split,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(features: Array2<T>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: features.nrows(),
                labels: labels.len(),
            });
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(invalid(format!("label {y} at sample {i} outside [0, {num_classes})")));
            }
            class_index[y].push(i);
        }
        Ok(Self {
            features: features.as_standard_layout().into_owned(),
            labels,
            num_classes,
            class_index,
            image_shape: None,
            split,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "image shape {rows}x{cols} does not match input width {}",
                self.input_dim()
            )));
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.features.row(i)
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_index.iter().map(Vec::len).collect()
    }

    /// Copies the selected rows into a new matrix, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Array2<T> {
        self.features.select(Axis(0), indices)
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Keeps only samples whose label is below `n`.
    pub fn restrict_classes(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.num_classes {
            return Err(invalid(format!("cannot restrict {} classes to {n}", self.num_classes)));
        }
        if n == self.num_classes {
            return Ok(self.clone());
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] < n).collect();
        let mut out = Self::new(self.gather(&keep), self.gather_labels(&keep), n, self.split)?;
        out.image_shape = self.image_shape;
        Ok(out)
    }
}

/// Decoded IDX image file (unsigned bytes, row-major per image).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            what,
            expected: offset + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let what = "images";
    let magic = read_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, what)? as usize;
    let rows = read_u32(bytes, 8, what)? as usize;
    let cols = read_u32(bytes, 12, what)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what,
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "labels";
    let magic = read_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, what)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what,
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for field in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&field.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from decoded IDX contents. Pixels are scaled by 1/255.
pub fn dataset_from_idx<T: Scalar>(images: &IdxImages, labels: &[u8], split: Split) -> Result<LabeledDataset<T>> {
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let dim = images.rows * images.cols;
    let scale = T::of(1.0 / 255.0);
    let data: Vec<T> = images.pixels.iter().map(|&p| T::of(f64::from(p)) * scale).collect();
    let features =
        Array2::from_shape_vec((images.count, dim), data).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(features, labels, num_classes, split)?.with_image_shape(images.rows, images.cols)
}

pub fn load_idx_dataset<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<LabeledDataset<T>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = fs::read(images_path).map_err(io_err(images_path))?;
    let label_bytes = fs::read(labels_path).map_err(io_err(labels_path))?;
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    dataset_from_idx(&images, &labels, split)
}

/// Parameters of the synthetic Gaussian-blob dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    pub input_dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BlobParams {
    pub fn new(num_classes: usize, samples_per_class: usize, input_dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            test_per_class: None,
            input_dim,
            separation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("blob dataset needs at least 2 classes"));
        }
        if self.samples_per_class == 0 || self.test_per_class == Some(0) {
            return Err(invalid("blob dataset needs at least 1 sample per class"));
        }
        if self.input_dim == 0 {
            return Err(invalid("blob input_dim must be positive"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(invalid("blob separation must be positive"));
        }
        Ok(())
    }
}

/// Half-width, in noise standard deviations, of the raw coordinate range
/// mapped onto [0, 1]. Coordinates beyond it are clamped; the map is monotone
/// so clamping never reorders a coordinate. A wider range squeezes the class
/// signal towards 0.5 and slows plain SGD badly.
const BLOB_HALF_RANGE: f64 = 3.0;

fn blob_split<T: Scalar>(
    means: &[Vec<f64>],
    per_class: usize,
    half_range: f64,
    rng: &mut ChaCha8Rng,
    split: Split,
) -> Result<LabeledDataset<T>> {
    let dim = means[0].len();
    let n = means.len() * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                let x = ((m + z + half_range) / (2.0 * half_range)).clamp(0.0, 1.0);
                data.push(T::of(x));
            }
            labels.push(c);
        }
    }
    let features = Array2::from_shape_vec((n, dim), data).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    LabeledDataset::new(features, labels, means.len(), split)
}

/// Seeded isotropic Gaussian blobs, one per class, returned as (train, test).
///
/// Class means are random unit directions scaled by `separation`; samples add
/// unit-variance noise and are mapped affinely into [0, 1]. Means, train and
/// test samples come from three independent ChaCha streams of the same seed.
pub fn make_blob_dataset<T: Scalar>(params: &BlobParams) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    params.validate()?;
    let mut mean_rng = ChaCha8Rng::seed_from_u64(params.seed);
    let means: Vec<Vec<f64>> = (0..params.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..params.input_dim).map(|_| mean_rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| x / norm * params.separation).collect()
        })
        .collect();
    let half_range = BLOB_HALF_RANGE;

    let mut train_rng = ChaCha8Rng::seed_from_u64(params.seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(params.seed);
    test_rng.set_stream(2);

    let train = blob_split(
        &means,
        params.samples_per_class,
        half_range,
        &mut train_rng,
        Split::Train,
    )?;
    let test = blob_split(
        &means,
        params.test_per_class.unwrap_or(params.samples_per_class),
        half_range,
        &mut test_rng,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Per-task input transform. One is fixed for the whole duration of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputTransform {
    Identity,
    PixelPermutation { permutation: Vec<usize>, seed: u64 },
    GaussianNoise { sigma: f64, seed: u64 },
}

impl InputTransform {
    /// Uniformly random permutation of `0..input_dim`, fixed by `seed`.
    pub fn pixel_permutation(input_dim: usize, seed: u64) -> Self {
        let mut permutation: Vec<usize> = (0..input_dim).collect();
        permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::PixelPermutation { permutation, seed }
    }

    pub fn gaussian_noise(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self::GaussianNoise { sigma, seed })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }
}

fn check_permutation(permutation: &[usize], width: usize) -> Result<()> {
    if permutation.len() != width {
        return Err(Error::ShapeMismatch(format!(
            "permutation of length {} applied to rows of width {width}",
            permutation.len()
        )));
    }
    let mut seen = vec![false; width];
    for &p in permutation {
        if p >= width || std::mem::replace(&mut seen[p], true) {
            return Err(invalid("pixel permutation is not a bijection"));
        }
    }
    Ok(())
}

/// Applies `transform` to every row. Column `j` of a permuted row is column
/// `permutation[j]` of the input; noise is drawn row-major from the
/// transform's seed and the result is clamped to [0, 1].
pub fn apply_transform<T: Scalar>(rows: ArrayView2<'_, T>, transform: &InputTransform) -> Result<Array2<T>> {
    match transform {
        InputTransform::Identity => Ok(rows.to_owned()),
        InputTransform::PixelPermutation { permutation, .. } => {
            check_permutation(permutation, rows.ncols())?;
            Ok(rows.select(Axis(1), permutation))
        }
        InputTransform::GaussianNoise { sigma, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let sigma = *sigma;
            let mut out = rows.as_standard_layout().into_owned();
            out.mapv_inplace(|x| {
                let z: f64 = rng.sample(StandardNormal);
                T::of((x.as_f64() + sigma * z).clamp(0.0, 1.0))
            });
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_idx(count: usize) -> (IdxImages, Vec<u8>) {
        let pixels: Vec<u8> = (0..count * 4).map(|i| (i * 17 % 256) as u8).collect();
        let labels: Vec<u8> = (0..count).map(|i| (i % 3) as u8).collect();
        (
            IdxImages {
                count,
                rows: 2,
                cols: 2,
                pixels,
            },
            labels,
        )
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let (images, labels) = tiny_idx(6);
        let parsed = parse_idx_images(&encode_idx_images(&images)).unwrap();
        assert_eq!(parsed, images);
        let ds: LabeledDataset<f64> = dataset_from_idx(
            &parsed,
            &parse_idx_labels(&encode_idx_labels(&labels)).unwrap(),
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.image_shape(), Some((2, 2)));
        assert_eq!(ds.row(0)[1], 17.0 / 255.0);
        assert_eq!(ds.class_index()[1], vec![1, 4]);
    }

    #[test]
    fn labels_passed_as_images_is_a_magic_error() {
        let bytes = encode_idx_images(&tiny_idx(2).0);
        match parse_idx_labels(&bytes) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found, IDX_IMAGES_MAGIC),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_and_truncation_are_distinct() {
        let (images, labels) = tiny_idx(100);
        let err = dataset_from_idx::<f32>(&images, &labels[..99], Split::Train).unwrap_err();
        assert!(matches!(
            err,
            Error::CountMismatch {
                images: 100,
                labels: 99
            }
        ));
        let bytes = encode_idx_images(&images);
        let err = parse_idx_images(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated { what: "images", .. }));
        let err = parse_idx_labels(&encode_idx_labels(&labels)[..5]).unwrap_err();
        assert!(matches!(err, Error::Truncated { what: "labels", .. }));
    }

    #[test]
    fn class_index_partitions_samples() {
        let (train, test) = make_blob_dataset::<f64>(&BlobParams::new(5, 7, 3, 2.0, 9)).unwrap();
        for ds in [&train, &test] {
            let mut all: Vec<usize> = ds.class_index().iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            for (c, members) in ds.class_index().iter().enumerate() {
                assert!(!members.is_empty());
                assert!(members.iter().all(|&i| ds.labels()[i] == c));
            }
        }
    }

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let p = BlobParams::new(10, 200, 32, 4.0, 1);
        let a = make_blob_dataset::<f32>(&p).unwrap();
        let b = make_blob_dataset::<f32>(&p).unwrap();
        assert_eq!(a, b);
        let bytes = |d: &LabeledDataset<f32>| -> Vec<u32> { d.features().iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bytes(&a.0), bytes(&b.0));
        assert!(a.0.features().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_ne!(a.0.features(), a.1.features());
        assert_eq!(a.0.split(), Split::Train);
        assert_eq!(a.1.split(), Split::Test);
    }

    #[test]
    fn blob_preconditions() {
        assert!(make_blob_dataset::<f32>(&BlobParams::new(1, 10, 4, 1.0, 0)).is_err());
        assert!(make_blob_dataset::<f32>(&BlobParams::new(2, 0, 4, 1.0, 0)).is_err());
        assert!(make_blob_dataset::<f32>(&BlobParams::new(2, 10, 4, 0.0, 0)).is_err());
    }

    #[test]
    fn transforms() {
        let m = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        assert_eq!(apply_transform(m.view(), &InputTransform::Identity).unwrap(), m);

        let perm = InputTransform::PixelPermutation {
            permutation: vec![2, 0, 1],
            seed: 0,
        };
        let out = apply_transform(m.view(), &perm).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.3, 0.1, 0.2]);

        let bad = InputTransform::PixelPermutation {
            permutation: vec![0, 1],
            seed: 0,
        };
        assert!(matches!(apply_transform(m.view(), &bad), Err(Error::ShapeMismatch(_))));
        let not_bijective = InputTransform::PixelPermutation {
            permutation: vec![0, 0, 1],
            seed: 0,
        };
        assert!(apply_transform(m.view(), &not_bijective).is_err());
    }

    #[test]
    fn permutation_then_inverse_restores_rows() {
        let (train, _) = make_blob_dataset::<f64>(&BlobParams::new(3, 4, 16, 3.0, 5)).unwrap();
        let t = InputTransform::pixel_permutation(16, 77);
        let InputTransform::PixelPermutation { permutation, .. } = &t else {
            unreachable!()
        };
        let mut inverse = vec![0; permutation.len()];
        for (j, &p) in permutation.iter().enumerate() {
            inverse[p] = j;
        }
        let inv = InputTransform::PixelPermutation {
            permutation: inverse,
            seed: 0,
        };
        let once = apply_transform(train.features(), &t).unwrap();
        let back = apply_transform(once.view(), &inv).unwrap();
        assert_eq!(back, train.features());
        assert_eq!(t, InputTransform::pixel_permutation(16, 77));
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let m = Array2::<f32>::from_elem((4, 8), 0.5);
        let t = InputTransform::gaussian_noise(0.8, 3).unwrap();
        let a = apply_transform(m.view(), &t).unwrap();
        assert_eq!(a, apply_transform(m.view(), &t).unwrap());
        assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_ne!(a, m);
        assert!(InputTransform::gaussian_noise(-1.0, 0).is_err());
        let zero = InputTransform::gaussian_noise(0.0, 3).unwrap();
        assert_eq!(apply_transform(m.view(), &zero).unwrap(), m);
    }
}
