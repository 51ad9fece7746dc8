//! Deformation head, displacement fields and multi-scale fusion.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::embed::{PatchConfig, TokenSequence};
use crate::error::{shape_err, AirError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Matrix, Scalar};

pub const FIELD_MAGIC: &[u8; 8] = b"AIRFLD1\0";

/// Per-pixel offsets in normalized coordinates, stored `(H·W)×2` with
/// columns `(dx, dy)`. An offset of 2 spans a full image side.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T = f32> {
    height: usize,
    width: usize,
    offsets: Matrix<T>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn new(height: usize, width: usize, offsets: Matrix<T>) -> Result<Self> {
        if offsets.shape() != (height * width, 2) {
            return Err(shape_err(format!(
                "{:?} offsets for a {height}x{width} field",
                offsets.shape()
            )));
        }
        if !offsets.is_finite() {
            return Err(AirError::NonFinite("displacement field"));
        }
        Ok(Self { height, width, offsets })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            offsets: Matrix::zeros(height * width, 2),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offsets(&self) -> &Matrix<T> {
        &self.offsets
    }

    /// `(dx, dy)` at pixel `(r, c)`.
    pub fn at(&self, r: usize, c: usize) -> (T, T) {
        let k = r * self.width + c;
        (self.offsets.get(k, 0), self.offsets.get(k, 1))
    }

    pub fn cast<U: Scalar>(&self) -> DisplacementField<U> {
        DisplacementField {
            height: self.height,
            width: self.width,
            offsets: self.offsets.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.offsets.len() * 4);
        out.extend_from_slice(FIELD_MAGIC);
        out.write_u32::<BigEndian>(self.height as u32).expect("vec write");
        out.write_u32::<BigEndian>(self.width as u32).expect("vec write");
        for &v in self.offsets.data() {
            out.write_f32::<LittleEndian>(v.as_f32()).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != FIELD_MAGIC {
            return Err(AirError::Format("missing AIRFLD1 magic".into()));
        }
        let mut cur = &bytes[8..];
        let height = cur.read_u32::<BigEndian>()? as usize;
        let width = cur.read_u32::<BigEndian>()? as usize;
        let expected = height * width * 2 * 4;
        if cur.len() != expected {
            return Err(AirError::Truncated {
                expected,
                found: cur.len(),
            });
        }
        let data = (0..height * width * 2)
            .map(|_| cur.read_f32::<LittleEndian>().map(T::from_f32))
            .collect::<std::io::Result<Vec<T>>>()?;
        Self::new(height, width, Matrix::from_vec(height * width, 2, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Linear map from a decoder token to the `2·p·p` offsets of its patch,
/// laid out `(pixel-in-patch, channel)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformHeadParams<T = f32> {
    /// `d×(2·p·p)`
    pub projection: Matrix<T>,
    /// `1×(2·p·p)`
    pub bias: Matrix<T>,
}

impl<T: Scalar> DeformHeadParams<T> {
    /// Zero head: the identity warp.
    pub fn zeros(cfg: &PatchConfig) -> Self {
        Self {
            projection: Matrix::zeros(cfg.dim, 2 * cfg.patch_len()),
            bias: Matrix::zeros(1, 2 * cfg.patch_len()),
        }
    }

    pub fn check(&self, cfg: &PatchConfig) -> Result<()> {
        if self.projection.shape() != (cfg.dim, 2 * cfg.patch_len()) || self.bias.shape() != (1, 2 * cfg.patch_len()) {
            return Err(shape_err(format!(
                "deformation head {:?} does not fit width {} and patch size {}",
                self.projection.shape(),
                cfg.dim,
                cfg.patch_size
            )));
        }
        Ok(())
    }
}

/// Gather index turning the `n×(2·p·p)` head output into an `(H·W)×2` field.
pub fn unpatch_index(cfg: &PatchConfig) -> Vec<usize> {
    let row_len = 2 * cfg.patch_len();
    (0..cfg.height * cfg.width * 2)
        .map(|k| {
            let (pixel, ch) = (k / 2, k % 2);
            let (j, q) = cfg.patch_of(pixel);
            j * row_len + 2 * q + ch
        })
        .collect()
}

pub(crate) fn tokens_to_field_graph<T: Scalar>(
    g: &mut Graph<T>,
    decoder_out: Var,
    head: &DeformHeadParams<T>,
    cfg: &PatchConfig,
    index: Arc<Vec<usize>>,
) -> Result<Var> {
    head.check(cfg)?;
    let dv = g.value(decoder_out);
    if dv.shape() != (cfg.tokens(), cfg.dim) {
        return Err(shape_err(format!(
            "{:?} decoder tokens for {} tokens of width {}",
            dv.shape(),
            cfg.tokens(),
            cfg.dim
        )));
    }
    let w = g.param(&head.projection);
    let b = g.param(&head.bias);
    let y = g.matmul(decoder_out, w)?;
    let y = g.add_row(y, b)?;
    g.gather(y, index, cfg.height * cfg.width, 2)
}

/// Projects every token to its patch's offsets and un-patches them into a
/// full-resolution field.
pub fn tokens_to_field<T: Scalar>(
    decoder_out: &TokenSequence<T>,
    head: &DeformHeadParams<T>,
    cfg: &PatchConfig,
) -> Result<DisplacementField<T>> {
    let mut g = Graph::new();
    let x = g.constant(decoder_out.matrix().clone());
    let out = tokens_to_field_graph(&mut g, x, head, cfg, Arc::new(unpatch_index(cfg)))?;
    DisplacementField::new(cfg.height, cfg.width, g.value(out).clone())
}

/// Patch sizes of the parallel transformers and their fusion logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MaptConfig<T = f32> {
    pub scales: Vec<usize>,
    /// `1×S`, one logit per scale.
    pub fusion_logits: Matrix<T>,
}

impl<T: Scalar> MaptConfig<T> {
    /// Equal fusion weights.
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(AirError::InvalidConfig("at least one scale is required".into()));
        }
        let n = scales.len();
        Ok(Self {
            scales,
            fusion_logits: Matrix::zeros(1, n),
        })
    }

    pub fn with_logits(scales: Vec<usize>, logits: Vec<T>) -> Result<Self> {
        if scales.len() != logits.len() {
            return Err(AirError::LengthMismatch {
                expected: scales.len(),
                found: logits.len(),
            });
        }
        let n = scales.len();
        Ok(Self {
            scales,
            fusion_logits: Matrix::from_vec(1, n, logits)?,
        })
    }

    /// `softmax(fusion_logits)`
    pub fn weights(&self) -> Vec<T> {
        let l = self.fusion_logits.data();
        let max = l.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let e: Vec<T> = l.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = e.iter().copied().sum();
        e.into_iter().map(|v| v / sum).collect()
    }
}

pub(crate) fn fuse_graph<T: Scalar>(g: &mut Graph<T>, fields: &[Var], logits: &Matrix<T>) -> Result<Var> {
    if fields.len() != logits.len() {
        return Err(AirError::LengthMismatch {
            expected: logits.len(),
            found: fields.len(),
        });
    }
    let l = g.param(logits);
    let w = g.softmax_rows(l)?;
    let mut acc: Option<Var> = None;
    for (s, &f) in fields.iter().enumerate() {
        let term = g.scale_by_entry(f, w, s)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or(AirError::LengthMismatch { expected: 1, found: 0 })
}

/// `Σ_s softmax(logits)_s · field_s`
pub fn fuse_fields<T: Scalar>(fields: &[DisplacementField<T>], cfg: &MaptConfig<T>) -> Result<DisplacementField<T>> {
    let Some(first) = fields.first() else {
        return Err(AirError::LengthMismatch {
            expected: cfg.scales.len(),
            found: 0,
        });
    };
    if fields
        .iter()
        .any(|f| (f.height, f.width) != (first.height, first.width))
    {
        return Err(shape_err("fields of differing resolution"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = fields.iter().map(|f| g.constant(f.offsets.clone())).collect();
    let out = fuse_graph(&mut g, &vars, &cfg.fusion_logits)?;
    DisplacementField::new(first.height, first.width, g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> DisplacementField<f64> {
        DisplacementField::new(h, w, Matrix::from_fn(h * w, 2, |_, _| rng.gen_range(-0.3..0.3))).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_field() {
        let cfg = PatchConfig::new(7, 28, 28, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tokens = TokenSequence::new(Matrix::from_fn(16, 16, |_, _| rng.gen::<f64>())).unwrap();
        let field = tokens_to_field(&tokens, &DeformHeadParams::zeros(&cfg), &cfg).unwrap();
        assert_eq!((field.height(), field.width()), (28, 28));
        assert!(field.offsets().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_matches_per_token_loop() {
        let cfg = PatchConfig::new(2, 4, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = TokenSequence::new(Matrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
        let head = DeformHeadParams {
            projection: Matrix::from_fn(3, 8, |_, _| rng.gen_range(-1.0..1.0)),
            bias: Matrix::from_fn(1, 8, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let field = tokens_to_field(&tokens, &head, &cfg).unwrap();
        // walk tokens, write each projected value into its pixel
        let mut expected = vec![[0.0f64; 2]; 24];
        for j in 0..6 {
            let (br, bc) = (j / 3, j % 3);
            for q in 0..4 {
                let (r, c) = (br * 2 + q / 2, bc * 2 + q % 2);
                for (ch, e) in expected[r * 6 + c].iter_mut().enumerate() {
                    let col = 2 * q + ch;
                    let mut v = head.bias.get(0, col);
                    for i in 0..3 {
                        v += tokens.matrix().get(j, i) * head.projection.get(i, col);
                    }
                    *e = v;
                }
            }
        }
        for (k, e) in expected.iter().enumerate() {
            assert!((field.offsets().get(k, 0) - e[0]).abs() < 1e-12);
            assert!((field.offsets().get(k, 1) - e[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f1 = random_field(4, 4, &mut rng);
        let f2 = random_field(4, 4, &mut rng);

        let single = MaptConfig::with_logits(vec![2], vec![3.7]).unwrap();
        assert_eq!(fuse_fields(std::slice::from_ref(&f1), &single).unwrap(), f1);

        let skewed = MaptConfig::with_logits(vec![2, 4], vec![-1.0, 2.5]).unwrap();
        let same = fuse_fields(&[f1.clone(), f1.clone()], &skewed).unwrap();
        for (a, b) in same.offsets().data().iter().zip(f1.offsets().data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let even = MaptConfig::new(vec![2, 4]).unwrap();
        let avg = fuse_fields(&[f1.clone(), f2.clone()], &even).unwrap();
        for k in 0..f1.offsets().len() {
            let e = 0.5 * f1.offsets().data()[k] + 0.5 * f2.offsets().data()[k];
            assert_eq!(avg.offsets().data()[k], e);
        }
        assert!(matches!(
            fuse_fields(&[f1], &even),
            Err(AirError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn field_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(3, 5, &mut rng).cast::<f32>();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..8], b"AIRFLD1\0");
        assert_eq!(&bytes[8..16], &[0, 0, 0, 3, 0, 0, 0, 5]);
        assert_eq!(bytes.len(), 16 + 3 * 5 * 2 * 4);
        assert_eq!(&bytes[16..20], &f.offsets().data()[0].to_le_bytes());
        assert_eq!(DisplacementField::<f32>::from_bytes(&bytes).unwrap(), f);
        assert!(DisplacementField::<f32>::from_bytes(&bytes[..20]).is_err());
    }
}
