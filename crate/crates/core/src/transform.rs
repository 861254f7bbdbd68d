//! The global quadratic color transform.
//!
//! Each pixel `p = [R, G, B]` is expanded into the ten-term basis
//! `V(p) = [R, G, B, R², G², B², RG, GB, BR, 1]` and corrected residually:
//! `p̄ = θᵀ V(p) + p`, where `θ` is a 10×3 [`CoefficientMatrix`]. Because the
//! map is strictly per pixel, a `θ` predicted from a small thumbnail applies
//! unchanged to an image of any resolution.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{SMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::color::RgbPixel;
use crate::error::{Error, Result};
use crate::imageio::ImageBuffer;

pub const BASIS_LEN: usize = 10;

/// Basis term names in canonical order.
pub const BASIS_TERMS: [&str; BASIS_LEN] = ["R", "G", "B", "R2", "G2", "B2", "RG", "GB", "BR", "1"];

pub type ColorBasisVector = [f64; BASIS_LEN];

/// Rows below this many pixels per parallel task are processed serially.
const ROWS_PER_TASK: usize = 16;

#[inline(always)]
pub fn color_basis(p: RgbPixel) -> ColorBasisVector {
    let [r, g, b] = p;
    [r, g, b, r * r, g * g, b * b, r * g, g * b, b * r, 1.0]
}

/// `θ ∈ R^{10×3}`: row `i` weights basis term `i`, column `j` is the output channel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CoefficientMatrix {
    rows: [[f64; 3]; BASIS_LEN],
}

impl CoefficientMatrix {
    pub const ZERO: CoefficientMatrix = CoefficientMatrix {
        rows: [[0.0; 3]; BASIS_LEN],
    };

    pub fn from_rows(rows: [[f64; 3]; BASIS_LEN]) -> Self {
        Self { rows }
    }

    /// Row-major: entry `(i, j)` at `i * 3 + j`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != BASIS_LEN * 3 {
            return Err(Error::Shape(format!(
                "coefficient matrix needs 30 values, got {}",
                values.len()
            )));
        }
        let mut rows = [[0.0; 3]; BASIS_LEN];
        for (i, row) in rows.iter_mut().enumerate() {
            row.copy_from_slice(&values[i * 3..i * 3 + 3]);
        }
        Ok(Self { rows })
    }

    pub fn to_flat(&self) -> [f64; BASIS_LEN * 3] {
        let mut out = [0.0; BASIS_LEN * 3];
        for (i, row) in self.rows.iter().enumerate() {
            out[i * 3..i * 3 + 3].copy_from_slice(row);
        }
        out
    }

    pub fn rows(&self) -> &[[f64; 3]; BASIS_LEN] {
        &self.rows
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.rows[i][j] = v;
    }

    /// Bias row set to `shift` for every channel, all else zero.
    pub fn constant_shift(shift: [f64; 3]) -> Self {
        let mut m = Self::ZERO;
        m.rows[BASIS_LEN - 1] = shift;
        m
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .zip(other.rows.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.rows.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        for (row, r) in self.rows.iter().enumerate() {
            for (col, v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteCoefficients { row, col });
                }
            }
        }
        Ok(())
    }

    /// `θᵀ V(p) + p` for a single pixel, unclamped.
    #[inline(always)]
    pub fn apply_pixel(&self, p: RgbPixel) -> RgbPixel {
        let v = color_basis(p);
        let mut out = p;
        for (vi, row) in v.iter().zip(&self.rows) {
            out[0] += row[0] * vi;
            out[1] += row[1] * vi;
            out[2] += row[2] * vi;
        }
        out
    }

    /// Ten lines of three floats in basis order, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.rows {
            let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", row[0], row[1], row[2]);
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output. Blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = Vec::with_capacity(BASIS_LEN * 3);
        let mut lines = 0;
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            lines += 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::ThetaFormat(format!(
                    "line {lines}: expected 3 values, found {}",
                    fields.len()
                )));
            }
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::ThetaFormat(format!("line {lines}: `{f}` is not a number")))?;
                values.push(v);
            }
        }
        if lines != BASIS_LEN {
            return Err(Error::ThetaFormat(format!(
                "expected {BASIS_LEN} rows, found {lines}"
            )));
        }
        let m = Self::from_flat(&values)?;
        m.validate()
            .map_err(|e| Error::ThetaFormat(e.to_string()))?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn apply_impl(x: &ImageBuffer, theta: &CoefficientMatrix, clamp: bool) -> Result<ImageBuffer> {
    theta.validate()?;
    let width = x.width();
    let row_len = width * 3;
    let mut out = vec![0.0; x.data().len()];
    out.par_chunks_mut(row_len * ROWS_PER_TASK)
        .zip(x.data().par_chunks(row_len * ROWS_PER_TASK))
        .for_each(|(dst, src)| {
            for (o, s) in dst.chunks_exact_mut(3).zip(src.chunks_exact(3)) {
                let q = theta.apply_pixel([s[0], s[1], s[2]]);
                if clamp {
                    o[0] = q[0].clamp(0.0, 1.0);
                    o[1] = q[1].clamp(0.0, 1.0);
                    o[2] = q[2].clamp(0.0, 1.0);
                } else {
                    o.copy_from_slice(&q);
                }
            }
        });
    ImageBuffer::from_vec(x.height(), width, out)
}

/// Applies `θ` to every pixel and clamps the result to `[0, 1]`.
pub fn apply_transform(x: &ImageBuffer, theta: &CoefficientMatrix) -> Result<ImageBuffer> {
    apply_impl(x, theta, true)
}

/// [`apply_transform`] without the final clamp (training-time variant).
pub fn apply_transform_unclamped(x: &ImageBuffer, theta: &CoefficientMatrix) -> Result<ImageBuffer> {
    apply_impl(x, theta, false)
}

fn check_cotangent(x: &ImageBuffer, grad_out: &[f64]) -> Result<()> {
    if grad_out.len() != x.data().len() {
        return Err(Error::Shape(format!(
            "cotangent has {} values, image has {}",
            grad_out.len(),
            x.data().len()
        )));
    }
    Ok(())
}

/// `∂L/∂θ[i][j] = Σ_pixels grad_out[pixel][j] · V(pixel)[i]`.
pub fn transform_gradients(x: &ImageBuffer, grad_out: &[f64]) -> Result<CoefficientMatrix> {
    check_cotangent(x, grad_out)?;
    let mut acc = [[0.0; 3]; BASIS_LEN];
    for (p, g) in x.pixels().zip(grad_out.chunks_exact(3)) {
        let v = color_basis(p);
        for (row, vi) in acc.iter_mut().zip(v) {
            row[0] += g[0] * vi;
            row[1] += g[1] * vi;
            row[2] += g[2] * vi;
        }
    }
    Ok(CoefficientMatrix::from_rows(acc))
}

/// Gradient of the unclamped transform with respect to both `θ` and the
/// input pixels (needed when the input is itself a generated image).
pub fn transform_backward(
    x: &ImageBuffer,
    theta: &CoefficientMatrix,
    grad_out: &[f64],
) -> Result<(CoefficientMatrix, Vec<f64>)> {
    let grad_theta = transform_gradients(x, grad_out)?;
    let t = theta.rows();
    let mut grad_in = Vec::with_capacity(grad_out.len());
    for (p, g) in x.pixels().zip(grad_out.chunks_exact(3)) {
        let [r, gr, b] = p;
        // u_i = Σ_j θ[i][j] g_j, then contract with ∂V/∂p
        let mut u = [0.0; BASIS_LEN];
        for (ui, row) in u.iter_mut().zip(t) {
            *ui = row[0] * g[0] + row[1] * g[1] + row[2] * g[2];
        }
        grad_in.push(g[0] + u[0] + 2.0 * r * u[3] + gr * u[6] + b * u[8]);
        grad_in.push(g[1] + u[1] + 2.0 * gr * u[4] + r * u[6] + b * u[7]);
        grad_in.push(g[2] + u[2] + 2.0 * b * u[5] + gr * u[7] + r * u[8]);
    }
    Ok((grad_theta, grad_in))
}

type Gram = SMatrix<f64, BASIS_LEN, BASIS_LEN>;

fn gram_matrix(x: &ImageBuffer) -> Gram {
    let mut g = Gram::zeros();
    for p in x.pixels() {
        let v = color_basis(p);
        for i in 0..BASIS_LEN {
            for k in i..BASIS_LEN {
                g[(i, k)] += v[i] * v[k];
            }
        }
    }
    g.fill_lower_triangle_with_upper_triangle();
    g
}

/// Ratio of largest to smallest eigenvalue of the basis Gram matrix `Σ V Vᵀ`.
pub fn gram_condition_number(x: &ImageBuffer) -> f64 {
    let eig = SymmetricEigen::new(gram_matrix(x)).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Relative eigenvalue floor below which a Gram direction counts as missing.
const RANK_TOLERANCE: f64 = 1e-10;

/// Closed-form `θ` minimizing `Σ_p ‖θᵀV(p) + p − y(p)‖² + ridge·‖θ‖²_F`.
pub fn fit_least_squares(x: &ImageBuffer, y: &ImageBuffer, ridge: f64) -> Result<CoefficientMatrix> {
    x.check_same_shape(y)?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge must be a finite non-negative number, got {ridge}"
        )));
    }
    let mut gram = gram_matrix(x);
    let mut rhs = SMatrix::<f64, BASIS_LEN, 3>::zeros();
    for (p, q) in x.pixels().zip(y.pixels()) {
        let v = color_basis(p);
        for i in 0..BASIS_LEN {
            for j in 0..3 {
                rhs[(i, j)] += v[i] * (q[j] - p[j]);
            }
        }
    }
    if ridge == 0.0 {
        let eig = SymmetricEigen::new(gram).eigenvalues;
        let max = eig.max();
        let deficient = eig.iter().filter(|&&l| l <= RANK_TOLERANCE * max).count();
        if deficient > 0 {
            return Err(Error::RankDeficient { deficient });
        }
    } else {
        for i in 0..BASIS_LEN {
            gram[(i, i)] += ridge;
        }
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficient { deficient: 1 })?;
    let sol = chol.solve(&rhs);
    let mut rows = [[0.0; 3]; BASIS_LEN];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = sol[(i, j)];
        }
    }
    Ok(CoefficientMatrix::from_rows(rows))
}

/// `Σ_p ‖θᵀV(p) + p − y(p)‖² + ridge·‖θ‖²_F`.
pub fn least_squares_objective(
    x: &ImageBuffer,
    y: &ImageBuffer,
    theta: &CoefficientMatrix,
    ridge: f64,
) -> Result<f64> {
    x.check_same_shape(y)?;
    let data: f64 = x
        .pixels()
        .zip(y.pixels())
        .map(|(p, q)| {
            let o = theta.apply_pixel(p);
            (0..3).map(|c| (o[c] - q[c]).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(data + ridge * theta.frobenius_norm().powi(2))
}
