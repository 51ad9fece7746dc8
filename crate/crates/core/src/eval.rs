//! Registration metrics, test-set evaluation and result-grid export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{sample_pairs, Image, ImagePair, LabeledDataset, PairingMode};
use crate::error::{shape_err, AirError, Result};
use crate::exec::Exec;
use crate::tensor::Scalar;
use crate::train::{forward, ArchConfig, ModelParams};

/// Reported in place of +inf for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DICE_EPS: f64 = 1e-6;
/// Intensity threshold of the binary Dice variant.
pub const DICE_THRESHOLD: f32 = 0.5;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(shape_err(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.pixels().len() as f64)
}

/// Peak-1 PSNR in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceKind {
    /// `(2 Σ ab + ε) / (Σ a² + Σ b² + ε)` over raw intensities.
    #[default]
    Soft,
    /// Binary Dice after thresholding both images at [`DICE_THRESHOLD`].
    Binary,
}

impl std::str::FromStr for DiceKind {
    type Err = AirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "binary" => Ok(Self::Binary),
            other => Err(AirError::InvalidConfig(format!("unknown dice variant {other:?}"))),
        }
    }
}

pub fn smooth_dice(a: &Image, b: &Image) -> Result<f64> {
    dice(a, b, DiceKind::Soft)
}

pub fn dice(a: &Image, b: &Image, kind: DiceKind) -> Result<f64> {
    same_shape(a, b)?;
    let prep = |v: f32| match kind {
        DiceKind::Soft => v as f64,
        DiceKind::Binary => f64::from(u8::from(v >= DICE_THRESHOLD)),
    };
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let (x, y) = (prep(x), prep(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    Ok((2.0 * ab + DICE_EPS) / (aa + bb + DICE_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub dice: f64,
}

impl PairMetrics {
    pub fn between(warped: &Image, fixed: &Image, kind: DiceKind) -> Result<Self> {
        let mse = mse(warped, fixed)?;
        Ok(Self {
            mse,
            psnr: psnr_from_mse(mse),
            dice: dice(warped, fixed, kind)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub pairs: usize,
    pub mse: Stat,
    pub psnr: Stat,
    pub dice: Stat,
}

impl RunMetrics {
    pub fn aggregate(per_pair: &[PairMetrics]) -> Result<Self> {
        if per_pair.len() < 2 {
            return Err(AirError::InvalidConfig("metrics need at least two pairs".into()));
        }
        let col = |f: fn(&PairMetrics) -> f64| per_pair.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            pairs: per_pair.len(),
            mse: Stat::of(&col(|m| m.mse)),
            psnr: Stat::of(&col(|m| m.psnr)),
            dice: Stat::of(&col(|m| m.dice)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub pairs: usize,
    pub seed: u64,
    pub pairing_mode: PairingMode,
    pub dice: DiceKind,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pairs: 2000,
            seed: 0,
            pairing_mode: PairingMode::SameClass,
            dice: DiceKind::Soft,
        }
    }
}

/// Inference-mode warps of `pairs`, in order.
pub fn warp_pairs<T: Scalar>(params: &ModelParams<T>, pairs: &[ImagePair<'_>], exec: Exec) -> Result<Vec<Image>> {
    exec.map(pairs.len(), |i| forward(&pairs[i], params, None).map(|o| o.warped))
        .into_iter()
        .collect()
}

pub fn evaluate_pairs<T: Scalar>(
    params: &ModelParams<T>,
    pairs: &[ImagePair<'_>],
    kind: DiceKind,
    exec: Exec,
) -> Result<Vec<PairMetrics>> {
    exec.map(pairs.len(), |i| {
        let out = forward(&pairs[i], params, None)?;
        PairMetrics::between(&out.warped, pairs[i].fixed, kind)
    })
    .into_iter()
    .collect()
}

/// Metrics between warped and fixed images over seeded pairs of `dataset`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &LabeledDataset,
    options: &EvalOptions,
    exec: Exec,
) -> Result<RunMetrics> {
    let pairs = sample_pairs(dataset, options.pairs, options.pairing_mode, options.seed)?;
    RunMetrics::aggregate(&evaluate_pairs(params, &pairs, options.dice, exec)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: usize,
    pub mse: Stat,
    pub psnr: Stat,
    pub dice: Stat,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn new(metrics: &RunMetrics, arch: &ArchConfig, options: &EvalOptions) -> Result<Self> {
        let canonical = serde_json::to_vec(&(arch, options))?;
        let digest = Sha256::digest(&canonical);
        Ok(Self {
            pairs: metrics.pairs,
            mse: metrics.mse,
            psnr: metrics.psnr,
            dice: metrics.dice,
            config_digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Binary PGM (P5), max value 255.
pub fn pgm_bytes(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    fs::write(path, pgm_bytes(image))?;
    Ok(())
}

/// Parses a binary PGM with max value ≤ 255; `#` comments are allowed in
/// the header.
pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| AirError::Format(format!("pgm: {m}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("max value must be in 1..=255"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    let raster = &bytes[pos + 1..];
    if raster.len() < width * height {
        return Err(AirError::Truncated {
            expected: width * height,
            found: raster.len(),
        });
    }
    let pixels = raster[..width * height]
        .iter()
        .map(|&v| v as f32 / maxval as f32)
        .collect();
    Image::new(height, width, pixels)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    parse_pgm(&fs::read(path)?)
}

/// Three rows (fixed, moving, warped), one column per pair.
pub fn tile_grid(pairs: &[ImagePair<'_>], warped: &[Image]) -> Result<Image> {
    if pairs.is_empty() || pairs.len() != warped.len() {
        return Err(AirError::LengthMismatch {
            expected: pairs.len(),
            found: warped.len(),
        });
    }
    let (h, w) = (pairs[0].fixed.height(), pairs[0].fixed.width());
    let cols = pairs.len();
    let mut pixels = vec![0.0f32; 3 * h * cols * w];
    for (c, (pair, out)) in pairs.iter().zip(warped).enumerate() {
        for (row, img) in [pair.fixed, pair.moving, out].into_iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(shape_err(format!(
                    "grid tile {row},{c} is {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            for r in 0..h {
                let dst = (row * h + r) * cols * w + c * w;
                pixels[dst..dst + w].copy_from_slice(&img.pixels()[r * w..(r + 1) * w]);
            }
        }
    }
    Image::new(3 * h, cols * w, pixels)
}

pub fn export_grid(pairs: &[ImagePair<'_>], warped: &[Image], path: impl AsRef<Path>) -> Result<()> {
    write_pgm(path, &tile_grid(pairs, warped)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(px: &[f32]) -> Image {
        Image::new(2, px.len() / 2, px.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = Image::constant(4, 4, 0.0).unwrap();
        let b = Image::constant(4, 4, 1.0).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert!(mse(&a, &Image::constant(2, 2, 0.0).unwrap()).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
        assert!(psnr_from_mse(0.02) < psnr_from_mse(0.01));
    }

    #[test]
    fn dice_examples() {
        let a = img(&[0.2, 0.9, 0.0, 0.4]);
        let b = img(&[0.0, 0.0, 0.7, 0.0]);
        assert!((smooth_dice(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(smooth_dice(&a, &b).unwrap() < 1e-5);
        let c = img(&[0.3, 0.1, 0.8, 0.5]);
        assert_eq!(smooth_dice(&a, &c).unwrap(), smooth_dice(&c, &a).unwrap());
        // a thresholds to [0,1,0,0], c to [0,0,1,1]
        assert!(dice(&a, &c, DiceKind::Binary).unwrap() < 1e-6);
    }

    #[test]
    fn population_std() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }

    #[test]
    fn pgm_round_trip_with_comment() {
        let a = img(&[0.0, 0.5, 1.0, 0.25, 0.75, 0.1]);
        let back = parse_pgm(&pgm_bytes(&a)).unwrap();
        for (x, y) in a.pixels().iter().zip(back.pixels()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-7);
        }
        let commented = b"P5\n# made by hand\n2 2\n255\n\x00\xff\xff\x00";
        assert_eq!(parse_pgm(commented).unwrap().pixels(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
    }
}
