//! IDX ingestion, train/test splitting and fixed/moving pair sampling.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AirError, Result};
use crate::tensor::{Matrix, Scalar};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Fraction of records assigned to the test split.
pub const TEST_FRACTION: f64 = 0.2;

/// Grayscale raster with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(AirError::DegenerateSize { height, width });
        }
        if pixels.len() != height * width {
            return Err(shape_err(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AirError::InvalidConfig(format!("pixel intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Builds an image from raw bytes, mapping `b` to `b / 255`.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }

    /// Quantizes back to bytes with `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.height, self.width, |r, c| T::from_f32(self.get(r, c)))
    }

    /// Converts an `H×W` matrix, clamping into `[0, 1]` to absorb rounding.
    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Result<Self> {
        let pixels = m.data().iter().map(|v| v.as_f32().clamp(0.0, 1.0)).collect();
        Self::new(m.rows(), m.cols(), pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Full,
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<u8>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(AirError::LengthMismatch {
                expected: images.len(),
                found: labels.len(),
            });
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    fn subset(&self, indices: &[usize], split: Split) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }

    /// Seeded 80/20 partition: records are shuffled, the first 80% become the
    /// train split and the rest the test split.
    pub fn train_test_split(&self, seed: u64) -> (Self, Self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = self.len() - (self.len() as f64 * TEST_FRACTION).round() as usize;
        (
            self.subset(&order[..n_train], Split::Train),
            self.subset(&order[n_train..], Split::Test),
        )
    }

    /// Splits off the last `fraction` of records (in current order) as a
    /// held-out slice, keeping the split marker.
    pub fn hold_out(&self, fraction: f64) -> (Self, Self) {
        let n_hold = ((self.len() as f64) * fraction).round() as usize;
        let n_keep = self.len() - n_hold;
        let idx: Vec<usize> = (0..self.len()).collect();
        (
            self.subset(&idx[..n_keep], self.split),
            self.subset(&idx[n_keep..], self.split),
        )
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(bytes: &[u8], magic: u32, dims: u32) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(AirError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    // the last byte of the magic is the dimension count
    if found & 0xffff_ff00 != magic & 0xffff_ff00 {
        return Err(AirError::BadMagic { expected: magic, found });
    }
    if found & 0xff != dims {
        return Err(AirError::DimMismatch {
            expected: dims,
            found: found & 0xff,
        });
    }
    let header_len = 4 + 4 * dims as usize;
    if bytes.len() < header_len {
        return Err(AirError::Truncated {
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok((0..dims as usize)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect())
}

/// Parses an IDX image file held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let dims = parse_header(bytes, IDX_IMAGES_MAGIC, 3)?;
    let (count, height, width) = (dims[0], dims[1], dims[2]);
    let payload = &bytes[16..];
    let expected = count * height * width;
    if payload.len() < expected {
        return Err(AirError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    payload[..expected]
        .chunks_exact(height * width)
        .map(|chunk| Image::from_bytes(height, width, chunk))
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = parse_header(bytes, IDX_LABELS_MAGIC, 1)?;
    let payload = &bytes[8..];
    if payload.len() < dims[0] {
        return Err(AirError::Truncated {
            expected: dims[0],
            found: payload.len(),
        });
    }
    Ok(payload[..dims[0]].to_vec())
}

/// Loads an IDX image file; gzip-compressed files are detected and inflated.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    parse_idx_images(&read_all(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_all(path.as_ref())?)
}

pub fn idx_images_bytes(images: &[Image]) -> Result<Vec<u8>> {
    let (height, width) = images.first().map(|im| (im.height(), im.width())).unwrap_or((0, 0));
    if images.iter().any(|im| (im.height(), im.width()) != (height, width)) {
        return Err(shape_err("IDX image files need a common image size"));
    }
    let mut out = Vec::with_capacity(16 + images.len() * height * width);
    out.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for d in [images.len(), height, width] {
        out.write_u32::<BigEndian>(d as u32)?;
    }
    for im in images {
        out.extend_from_slice(&im.to_bytes());
    }
    Ok(out)
}

pub fn idx_labels_bytes(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    File::create(path)?.write_all(&idx_images_bytes(images)?)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    File::create(path)?.write_all(&idx_labels_bytes(labels)?)?;
    Ok(())
}

/// Loads every `*images-idx3-ubyte[.gz]` file in `dir` together with its
/// `*labels-idx1-ubyte[.gz]` sibling, concatenated in file-name order.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let mut image_files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.contains("images-idx3-ubyte"))
        })
        .collect();
    image_files.sort();
    if image_files.is_empty() {
        return Err(AirError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no *images-idx3-ubyte file in {}", dir.display()),
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in image_files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label_path = path.with_file_name(name.replace("images-idx3-ubyte", "labels-idx1-ubyte"));
        let imgs = load_idx_images(&path)?;
        let labs = load_idx_labels(&label_path)?;
        if imgs.len() != labs.len() {
            return Err(AirError::LengthMismatch {
                expected: imgs.len(),
                found: labs.len(),
            });
        }
        images.extend(imgs);
        labels.extend(labs);
    }
    LabeledDataset::new(images, labels, Split::Full)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// Fixed and moving images share a class label.
    #[default]
    SameClass,
    Unconditional,
}

impl std::str::FromStr for PairingMode {
    type Err = AirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-class" => Ok(Self::SameClass),
            "unconditional" => Ok(Self::Unconditional),
            other => Err(AirError::InvalidConfig(format!("unknown pairing mode {other:?}"))),
        }
    }
}

/// Dataset indices of a fixed/moving pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub fixed: usize,
    pub moving: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ImagePair<'a> {
    pub fixed: &'a Image,
    pub moving: &'a Image,
    pub pairing_mode: PairingMode,
}

/// Seeded sampling of distinct fixed/moving record indices.
pub fn sample_pair_indices(
    dataset: &LabeledDataset,
    count: usize,
    mode: PairingMode,
    seed: u64,
) -> Result<Vec<PairIndex>> {
    if dataset.is_empty() {
        return Err(AirError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PairingMode::SameClass => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
            for (i, &l) in dataset.labels().iter().enumerate() {
                by_class[l as usize].push(i);
            }
            if let Some(l) = by_class.iter().position(|members| members.len() == 1) {
                return Err(AirError::EmptyClass { label: l as u8 });
            }
            Ok((0..count)
                .map(|_| {
                    let fixed = rng.gen_range(0..dataset.len());
                    let members = &by_class[dataset.labels()[fixed] as usize];
                    let pos = members.binary_search(&fixed).expect("member of own class");
                    // uniform over the class minus the fixed record
                    let mut k = rng.gen_range(0..members.len() - 1);
                    if k >= pos {
                        k += 1;
                    }
                    PairIndex {
                        fixed,
                        moving: members[k],
                    }
                })
                .collect())
        }
        PairingMode::Unconditional => {
            if dataset.len() < 2 {
                return Err(AirError::EmptyDataset);
            }
            Ok((0..count)
                .map(|_| {
                    let fixed = rng.gen_range(0..dataset.len());
                    let mut moving = rng.gen_range(0..dataset.len() - 1);
                    if moving >= fixed {
                        moving += 1;
                    }
                    PairIndex { fixed, moving }
                })
                .collect())
        }
    }
}

pub fn sample_pairs(
    dataset: &LabeledDataset,
    count: usize,
    mode: PairingMode,
    seed: u64,
) -> Result<Vec<ImagePair<'_>>> {
    Ok(sample_pair_indices(dataset, count, mode, seed)?
        .into_iter()
        .map(|p| ImagePair {
            fixed: &dataset.images()[p.fixed],
            moving: &dataset.images()[p.moving],
            pairing_mode: mode,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_u32::<BigEndian>(magic).unwrap();
        for &d in dims {
            out.write_u32::<BigEndian>(d).unwrap();
        }
        out
    }

    fn toy_dataset(labels: &[u8]) -> LabeledDataset {
        let images = labels
            .iter()
            .enumerate()
            .map(|(i, _)| Image::constant(2, 2, (i % 256) as f32 / 255.0).unwrap())
            .collect();
        LabeledDataset::new(images, labels.to_vec(), Split::Full).unwrap()
    }

    #[test]
    fn image_magic_is_accepted() {
        let mut bytes = header(2051, &[1, 2, 2]);
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
        bytes.extend_from_slice(&[0, 255, 0, 255]);
        let images = parse_idx_images(&bytes).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].pixels(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = header(IDX_IMAGES_MAGIC, &[10, 28, 28]);
        assert_eq!(bytes.len(), 16);
        bytes.extend(std::iter::repeat_n(0, 100));
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(AirError::Truncated {
                expected: 7840,
                found: 100
            })
        ));
    }

    #[test]
    fn bad_magic_and_dims_are_rejected() {
        let bytes = header(0x1234_5678, &[1, 2, 2]);
        assert!(matches!(parse_idx_images(&bytes), Err(AirError::BadMagic { .. })));
        let bytes = header(0x0000_0802, &[1, 4]);
        assert!(matches!(parse_idx_images(&bytes), Err(AirError::DimMismatch { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(AirError::Truncated { .. })));
    }

    #[test]
    fn labels_round_trip() {
        let labels = vec![3, 1, 4, 1, 5];
        assert_eq!(parse_idx_labels(&idx_labels_bytes(&labels).unwrap()).unwrap(), labels);
    }

    #[test]
    fn split_is_eighty_twenty_and_stable() {
        let ds = toy_dataset(&(0..50).map(|i| (i % 5) as u8).collect::<Vec<_>>());
        let (train, test) = ds.train_test_split(11);
        assert_eq!((train.len(), test.len()), (40, 10));
        assert_eq!(train.split(), Split::Train);
        let (train2, test2) = ds.train_test_split(11);
        assert_eq!(train.labels(), train2.labels());
        assert_eq!(test.images(), test2.images());
    }

    #[test]
    fn same_class_pairs_match_labels() {
        let ds = toy_dataset(&[0, 1, 0, 1, 2, 2, 0]);
        let idx = sample_pair_indices(&ds, 200, PairingMode::SameClass, 7).unwrap();
        assert_eq!(idx.len(), 200);
        for p in &idx {
            assert_ne!(p.fixed, p.moving);
            assert_eq!(ds.labels()[p.fixed], ds.labels()[p.moving]);
        }
        assert_eq!(idx, sample_pair_indices(&ds, 200, PairingMode::SameClass, 7).unwrap());
    }

    #[test]
    fn pairing_errors() {
        let ds = toy_dataset(&[0, 0, 1]);
        assert!(matches!(
            sample_pair_indices(&ds, 1, PairingMode::SameClass, 0),
            Err(AirError::EmptyClass { label: 1 })
        ));
        assert!(sample_pair_indices(&ds, 5, PairingMode::Unconditional, 0).is_ok());
        let empty = toy_dataset(&[]);
        assert!(matches!(
            sample_pair_indices(&empty, 1, PairingMode::Unconditional, 0),
            Err(AirError::EmptyDataset)
        ));
    }

    #[test]
    fn image_rejects_out_of_range_and_tiny() {
        assert!(Image::new(2, 2, vec![0.0, 1.5, 0.0, 0.0]).is_err());
        assert!(matches!(
            Image::new(1, 4, vec![0.0; 4]),
            Err(AirError::DegenerateSize { .. })
        ));
    }
}
