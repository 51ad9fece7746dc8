//! Patch partitioning and linear patch embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Image;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Matrix, Scalar};

pub const DEFAULT_DIM: usize = 16;

/// Non-overlapping square patches over an `height×width` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl PatchConfig {
    pub fn new(patch_size: usize, height: usize, width: usize, dim: usize) -> Result<Self> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(shape_err(format!(
                "patch size {patch_size} does not divide {height}x{width}"
            )));
        }
        if dim == 0 {
            return Err(shape_err("embedding dimension must be at least 1"));
        }
        Ok(Self {
            patch_size,
            height,
            width,
            dim,
        })
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch_size
    }

    /// Token count `n`.
    pub fn tokens(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Values per patch, `p·p`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Image pixel index of entry `q` of patch `j` (row-major in both).
    pub fn pixel_of(&self, j: usize, q: usize) -> usize {
        let p = self.patch_size;
        let (br, bc) = (j / self.grid_cols(), j % self.grid_cols());
        let (pr, pc) = (q / p, q % p);
        (br * p + pr) * self.width + bc * p + pc
    }

    /// Inverse of [`PatchConfig::pixel_of`]: `(patch, offset)` of a pixel.
    pub fn patch_of(&self, pixel: usize) -> (usize, usize) {
        let p = self.patch_size;
        let (r, c) = (pixel / self.width, pixel % self.width);
        ((r / p) * self.grid_cols() + c / p, (r % p) * p + c % p)
    }
}

/// `n×d` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T = f32> {
    tokens: Matrix<T>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Matrix<T>) -> Result<Self> {
        if !tokens.is_finite() {
            return Err(crate::error::AirError::NonFinite("token sequence"));
        }
        Ok(Self { tokens })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.tokens
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

fn check_image(image: &Image, cfg: &PatchConfig) -> Result<()> {
    if (image.height(), image.width()) != (cfg.height, cfg.width) {
        return Err(shape_err(format!(
            "{}x{} image for a {}x{} patch layout",
            image.height(),
            image.width(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

/// Flattened patches as an `n×(p·p)` matrix, patches in row-major grid order.
pub fn patchify<T: Scalar>(image: &Image, cfg: &PatchConfig) -> Result<Matrix<T>> {
    check_image(image, cfg)?;
    let px = image.pixels();
    Ok(Matrix::from_fn(cfg.tokens(), cfg.patch_len(), |j, q| {
        T::from_f32(px[cfg.pixel_of(j, q)])
    }))
}

pub fn unpatchify<T: Scalar>(patches: &Matrix<T>, cfg: &PatchConfig) -> Result<Image> {
    if patches.shape() != (cfg.tokens(), cfg.patch_len()) {
        return Err(shape_err(format!(
            "{:?} patches for {} tokens of {} values",
            patches.shape(),
            cfg.tokens(),
            cfg.patch_len()
        )));
    }
    let pixels = (0..cfg.height * cfg.width)
        .map(|k| {
            let (j, q) = cfg.patch_of(k);
            patches.get(j, q).as_f32()
        })
        .collect();
    Image::new(cfg.height, cfg.width, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEncoding {
    /// Trainable per-position vectors.
    #[default]
    Learned,
    /// Fixed sine/cosine table, excluded from training.
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams<T = f32> {
    /// `(p·p)×d`
    pub projection: Matrix<T>,
    /// `1×d`
    pub projection_bias: Matrix<T>,
    /// `n×d`
    pub positions: Matrix<T>,
}

impl<T: Scalar> EmbedParams<T> {
    pub fn zeros(cfg: &PatchConfig) -> Self {
        Self {
            projection: Matrix::zeros(cfg.patch_len(), cfg.dim),
            projection_bias: Matrix::zeros(1, cfg.dim),
            positions: Matrix::zeros(cfg.tokens(), cfg.dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &PatchConfig, encoding: PositionalEncoding, rng: &mut R) -> Self {
        let bound = 1.0 / (cfg.patch_len() as f64).sqrt();
        let projection = Matrix::from_fn(cfg.patch_len(), cfg.dim, |_, _| {
            T::from_f64(rng.gen_range(-bound..bound))
        });
        let positions = match encoding {
            PositionalEncoding::Learned => {
                Matrix::from_fn(cfg.tokens(), cfg.dim, |_, _| T::from_f64(rng.gen_range(-0.02..0.02)))
            }
            PositionalEncoding::Sinusoidal => sinusoidal_table(cfg.tokens(), cfg.dim),
        };
        Self {
            projection,
            projection_bias: Matrix::zeros(1, cfg.dim),
            positions,
        }
    }

    pub fn check(&self, cfg: &PatchConfig) -> Result<()> {
        if self.projection.shape() != (cfg.patch_len(), cfg.dim)
            || self.projection_bias.shape() != (1, cfg.dim)
            || self.positions.shape() != (cfg.tokens(), cfg.dim)
        {
            return Err(shape_err(format!(
                "embedding parameters do not fit {} tokens of {} values into width {}",
                cfg.tokens(),
                cfg.patch_len(),
                cfg.dim
            )));
        }
        Ok(())
    }
}

pub fn sinusoidal_table<T: Scalar>(n: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(n, d, |pos, i| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// `token_j = patch_j · projection + projection_bias + positions_j`
pub fn embed<T: Scalar>(patches: &Matrix<T>, params: &EmbedParams<T>) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let p = g.constant(patches.clone());
    let out = embed_graph(&mut g, p, params, PositionalEncoding::Learned)?;
    TokenSequence::new(g.value(out).clone())
}

pub(crate) fn embed_graph<T: Scalar>(
    g: &mut Graph<T>,
    patches: Var,
    params: &EmbedParams<T>,
    encoding: PositionalEncoding,
) -> Result<Var> {
    let pv = g.value(patches);
    if pv.cols() != params.projection.rows() || pv.rows() != params.positions.rows() {
        return Err(shape_err(format!(
            "{:?} patches for a {:?} projection and {} positions",
            pv.shape(),
            params.projection.shape(),
            params.positions.rows()
        )));
    }
    let w = g.param(&params.projection);
    let b = g.param(&params.projection_bias);
    let pos = match encoding {
        PositionalEncoding::Learned => g.param(&params.positions),
        PositionalEncoding::Sinusoidal => g.constant(params.positions.clone()),
    };
    let x = g.matmul(patches, w)?;
    let x = g.add_row(x, b)?;
    g.add(x, pos)
}
