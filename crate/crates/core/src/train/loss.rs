//! Similarity losses between the warped and fixed images, plus the optional
//! field smoothness penalty.

use serde::{Deserialize, Serialize};

use crate::dataio::Image;
use crate::deform::DisplacementField;
use crate::error::{shape_err, AirError, Result};
use crate::graph::Graph;
use crate::tensor::{Matrix, Scalar};

const NCC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Mean squared intensity difference.
    #[default]
    Mse,
    /// `1 − NCC` over the whole image.
    Ncc,
}

impl std::str::FromStr for LossKind {
    type Err = AirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "ncc" => Ok(Self::Ncc),
            other => Err(AirError::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn mse_kernel<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    same_shape(a, b)?;
    let sum: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(sum / T::from_f64(a.len() as f64))
}

struct NccParts<T> {
    mean_a: T,
    mean_b: T,
    cross: T,
    var_a: T,
    var_b: T,
}

fn ncc_parts<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> NccParts<T> {
    let n = T::from_f64(a.len() as f64);
    let mean_a = a.data().iter().copied().sum::<T>() / n;
    let mean_b = b.data().iter().copied().sum::<T>() / n;
    let mut cross = T::zero();
    let mut var_a = T::zero();
    let mut var_b = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cross += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    NccParts {
        mean_a,
        mean_b,
        cross,
        var_a,
        var_b,
    }
}

pub(crate) fn ncc_kernel<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    same_shape(a, b)?;
    let p = ncc_parts(a, b);
    Ok(p.cross / (p.var_a * p.var_b + T::from_f64(NCC_EPS)).sqrt())
}

/// d NCC(a, b) / d a
pub(crate) fn ncc_grad_kernel<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let p = ncc_parts(a, b);
    let denom = (p.var_a * p.var_b + T::from_f64(NCC_EPS)).sqrt();
    let k = p.cross * p.var_b / (denom * denom * denom);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (y - p.mean_b) / denom - k * (x - p.mean_a))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn smoothness_terms(height: usize, width: usize) -> usize {
    2 * (height * (width - 1) + (height - 1) * width)
}

/// Mean squared forward difference of both field channels along both axes.
pub(crate) fn smoothness_kernel<T: Scalar>(field: &Matrix<T>, height: usize, width: usize) -> Result<T> {
    if field.shape() != (height * width, 2) || height < 2 || width < 2 {
        return Err(shape_err(format!("{:?} field for {height}x{width}", field.shape())));
    }
    let f = field.data();
    let mut sum = T::zero();
    for r in 0..height {
        for c in 0..width {
            let k = r * width + c;
            for ch in 0..2 {
                if c + 1 < width {
                    let d = f[2 * (k + 1) + ch] - f[2 * k + ch];
                    sum += d * d;
                }
                if r + 1 < height {
                    let d = f[2 * (k + width) + ch] - f[2 * k + ch];
                    sum += d * d;
                }
            }
        }
    }
    Ok(sum / T::from_f64(smoothness_terms(height, width) as f64))
}

pub(crate) fn smoothness_grad_acc<T: Scalar>(
    field: &Matrix<T>,
    height: usize,
    width: usize,
    scale: T,
    out: &mut Matrix<T>,
) {
    let f = field.data();
    let k2 = scale * T::from_f64(2.0 / smoothness_terms(height, width) as f64);
    let g = out.data_mut();
    for r in 0..height {
        for c in 0..width {
            let k = r * width + c;
            for ch in 0..2 {
                if c + 1 < width {
                    let d = k2 * (f[2 * (k + 1) + ch] - f[2 * k + ch]);
                    g[2 * (k + 1) + ch] += d;
                    g[2 * k + ch] -= d;
                }
                if r + 1 < height {
                    let d = k2 * (f[2 * (k + width) + ch] - f[2 * k + ch]);
                    g[2 * (k + width) + ch] += d;
                    g[2 * k + ch] -= d;
                }
            }
        }
    }
}

/// Training objective: similarity term plus `smoothness_weight` times the
/// field smoothness penalty.
pub fn loss(
    warped: &Image,
    fixed: &Image,
    field: &DisplacementField<f32>,
    kind: LossKind,
    smoothness_weight: f64,
) -> Result<f64> {
    let a = warped.to_matrix::<f64>();
    let b = fixed.to_matrix::<f64>();
    let mut g = Graph::new();
    let av = g.constant(a);
    let bv = g.constant(b);
    let fv = g.constant(field.offsets().cast());
    let total = loss_graph(
        &mut g,
        av,
        bv,
        fv,
        (field.height(), field.width()),
        kind,
        smoothness_weight,
    )?;
    Ok(g.scalar(total))
}

pub(crate) fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    warped: crate::graph::Var,
    fixed: crate::graph::Var,
    field: crate::graph::Var,
    (height, width): (usize, usize),
    kind: LossKind,
    smoothness_weight: f64,
) -> Result<crate::graph::Var> {
    let sim = match kind {
        LossKind::Mse => g.mse(warped, fixed)?,
        LossKind::Ncc => g.ncc_loss(warped, fixed)?,
    };
    if smoothness_weight == 0.0 {
        return Ok(sim);
    }
    let smooth = g.smoothness(field, height, width)?;
    let smooth = g.scale(smooth, T::from_f64(smoothness_weight));
    g.add(sim, smooth)
}
