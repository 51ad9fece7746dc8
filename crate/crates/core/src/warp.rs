//! Differentiable bilinear sampler.
//!
//! Normalized coordinates are corner-aligned: `-1` and `+1` sit on the
//! centers of the border pixels, so a sample at `u` lands on pixel column
//! `(u + 1) / 2 · (W − 1)`. Samples outside the image clamp to the border
//! and carry no spatial derivative.

use crate::dataio::Image;
use crate::deform::DisplacementField;
use crate::error::{shape_err, AirError, Result};
use crate::tensor::{Matrix, Scalar};

/// Normalized sampling positions, `(H·W)×2` with columns `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid<T = f32> {
    height: usize,
    width: usize,
    coords: Matrix<T>,
}

impl<T: Scalar> SampleGrid<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &Matrix<T> {
        &self.coords
    }

    /// `(x, y)` at pixel `(r, c)`.
    pub fn at(&self, r: usize, c: usize) -> (T, T) {
        let k = r * self.width + c;
        (self.coords.get(k, 0), self.coords.get(k, 1))
    }
}

pub fn identity_grid<T: Scalar>(height: usize, width: usize) -> Result<SampleGrid<T>> {
    if height < 2 || width < 2 {
        return Err(AirError::DegenerateSize { height, width });
    }
    let sx = 2.0 / (width - 1) as f64;
    let sy = 2.0 / (height - 1) as f64;
    let coords = Matrix::from_fn(height * width, 2, |k, ch| {
        let (r, c) = (k / width, k % width);
        T::from_f64(if ch == 0 {
            c as f64 * sx - 1.0
        } else {
            r as f64 * sy - 1.0
        })
    });
    Ok(SampleGrid { height, width, coords })
}

struct Stencil<T> {
    x0: usize,
    y0: usize,
    fx: T,
    fy: T,
    /// d(pixel x)/du, zero when clamped
    jx: T,
    jy: T,
}

/// Pixel position of normalized coordinate `u` on an axis of `n` pixels.
/// Positions within a few ulps of a pixel center snap onto it, so the
/// identity grid reproduces the image exactly despite its rounded
/// coordinates.
fn to_pixel<T: Scalar>(u: T, n: usize) -> f64 {
    let x = (u.as_f64() + 1.0) * 0.5 * (n - 1) as f64;
    let tol = 8.0 * T::epsilon().as_f64() * (n - 1) as f64;
    let r = x.round();
    if (x - r).abs() <= tol {
        r
    } else {
        x
    }
}

fn stencil<T: Scalar>(u: T, v: T, height: usize, width: usize) -> Stencil<T> {
    let half = 0.5;
    let wmax = (width - 1) as f64;
    let hmax = (height - 1) as f64;
    let x = to_pixel(u, width);
    let y = to_pixel(v, height);
    let (xc, jx) = if x < 0.0 {
        (0.0, 0.0)
    } else if x > wmax {
        (wmax, 0.0)
    } else {
        (x, half * wmax)
    };
    let (yc, jy) = if y < 0.0 {
        (0.0, 0.0)
    } else if y > hmax {
        (hmax, 0.0)
    } else {
        (y, half * hmax)
    };
    let x0 = xc.floor().min((width - 2) as f64) as usize;
    let y0 = yc.floor().min((height - 2) as f64) as usize;
    Stencil {
        x0,
        y0,
        fx: T::from_f64(xc - x0 as f64),
        fy: T::from_f64(yc - y0 as f64),
        jx: T::from_f64(jx),
        jy: T::from_f64(jy),
    }
}

fn check_shapes<T: Scalar>(image: &Matrix<T>, coords: &Matrix<T>) -> Result<()> {
    let (h, w) = image.shape();
    if h < 2 || w < 2 {
        return Err(AirError::DegenerateSize { height: h, width: w });
    }
    if coords.shape() != (h * w, 2) {
        return Err(shape_err(format!(
            "{:?} sample coordinates for a {h}x{w} image",
            coords.shape()
        )));
    }
    Ok(())
}

/// Samples `image` (`H×W`) at every row of `coords` (`(H·W)×2`), returning an
/// `H×W` matrix.
pub fn sample_kernel<T: Scalar>(image: &Matrix<T>, coords: &Matrix<T>) -> Result<Matrix<T>> {
    check_shapes(image, coords)?;
    if !coords.is_finite() {
        return Err(AirError::NonFinite("sample coordinates"));
    }
    let (h, w) = image.shape();
    let mut out = Matrix::zeros(h, w);
    let one = T::one();
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let s = stencil(coords.get(k, 0), coords.get(k, 1), h, w);
        let m00 = image.get(s.y0, s.x0);
        let m01 = image.get(s.y0, s.x0 + 1);
        let m10 = image.get(s.y0 + 1, s.x0);
        let m11 = image.get(s.y0 + 1, s.x0 + 1);
        *o = (one - s.fy) * ((one - s.fx) * m00 + s.fx * m01) + s.fy * ((one - s.fx) * m10 + s.fx * m11);
    }
    Ok(out)
}

/// Vector-Jacobian product of [`sample_kernel`] for an upstream gradient `dy`
/// (`H×W`). Returns `(d image, d coords)` for the requested operands.
pub fn sample_backward_kernel<T: Scalar>(
    image: &Matrix<T>,
    coords: &Matrix<T>,
    dy: &Matrix<T>,
    want_image: bool,
    want_coords: bool,
) -> (Option<Matrix<T>>, Option<Matrix<T>>) {
    let (h, w) = image.shape();
    let one = T::one();
    let mut d_image = want_image.then(|| Matrix::zeros(h, w));
    let mut d_coords = want_coords.then(|| Matrix::zeros(h * w, 2));
    for (k, &g) in dy.data().iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let s = stencil(coords.get(k, 0), coords.get(k, 1), h, w);
        if let Some(di) = d_image.as_mut() {
            let d = di.data_mut();
            d[s.y0 * w + s.x0] += g * (one - s.fy) * (one - s.fx);
            d[s.y0 * w + s.x0 + 1] += g * (one - s.fy) * s.fx;
            d[(s.y0 + 1) * w + s.x0] += g * s.fy * (one - s.fx);
            d[(s.y0 + 1) * w + s.x0 + 1] += g * s.fy * s.fx;
        }
        if let Some(dc) = d_coords.as_mut() {
            let m00 = image.get(s.y0, s.x0);
            let m01 = image.get(s.y0, s.x0 + 1);
            let m10 = image.get(s.y0 + 1, s.x0);
            let m11 = image.get(s.y0 + 1, s.x0 + 1);
            let dfx = (one - s.fy) * (m01 - m00) + s.fy * (m11 - m10);
            let dfy = (one - s.fx) * (m10 - m00) + s.fx * (m11 - m01);
            dc.data_mut()[2 * k] += g * dfx * s.jx;
            dc.data_mut()[2 * k + 1] += g * dfy * s.jy;
        }
    }
    (d_image, d_coords)
}

fn displaced<T: Scalar>(grid: &SampleGrid<T>, field: &DisplacementField<T>) -> Result<Matrix<T>> {
    if (grid.height, grid.width) != (field.height(), field.width()) {
        return Err(shape_err(format!(
            "grid {}x{} vs field {}x{}",
            grid.height,
            grid.width,
            field.height(),
            field.width()
        )));
    }
    let mut coords = grid.coords.clone();
    coords.add_assign(field.offsets());
    Ok(coords)
}

fn check_image<T: Scalar>(moving: &Matrix<T>, grid: &SampleGrid<T>) -> Result<()> {
    if moving.shape() != (grid.height, grid.width) {
        return Err(shape_err(format!(
            "moving image {:?} vs grid {}x{}",
            moving.shape(),
            grid.height,
            grid.width
        )));
    }
    Ok(())
}

/// Warps `moving` by sampling it at `grid + field`.
pub fn bilinear_sample(moving: &Image, grid: &SampleGrid<f32>, field: &DisplacementField<f32>) -> Result<Image> {
    let m = moving.to_matrix::<f32>();
    Image::from_matrix(&bilinear_sample_matrix(&m, grid, field)?)
}

/// [`bilinear_sample`] over raw matrices in any precision.
pub fn bilinear_sample_matrix<T: Scalar>(
    moving: &Matrix<T>,
    grid: &SampleGrid<T>,
    field: &DisplacementField<T>,
) -> Result<Matrix<T>> {
    check_image(moving, grid)?;
    sample_kernel(moving, &displaced(grid, field)?)
}

#[derive(Debug, Clone)]
pub struct SampleGradients<T> {
    pub field: DisplacementField<T>,
    pub moving: Matrix<T>,
}

/// Gradients of a loss with respect to the field and the moving image, given
/// the loss gradient `upstream` (`H×W`) with respect to the warped image.
pub fn bilinear_sample_gradients<T: Scalar>(
    moving: &Matrix<T>,
    grid: &SampleGrid<T>,
    field: &DisplacementField<T>,
    upstream: &Matrix<T>,
) -> Result<SampleGradients<T>> {
    check_image(moving, grid)?;
    if upstream.shape() != moving.shape() {
        return Err(shape_err(format!(
            "upstream {:?} vs image {:?}",
            upstream.shape(),
            moving.shape()
        )));
    }
    let coords = displaced(grid, field)?;
    let (d_image, d_coords) = sample_backward_kernel(moving, &coords, upstream, true, true);
    Ok(SampleGradients {
        field: DisplacementField::new(grid.height, grid.width, d_coords.expect("requested"))?,
        moving: d_image.expect("requested"),
    })
}
