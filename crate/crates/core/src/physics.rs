//! Two-material decomposition physics and the closed-form model-based update.
//!
//! The stacked system matrix is `A0 ⊗ I_N` and the weights are `W0 ⊗ I_N`, so
//! every operation here reduces to independent 2×2 problems per pixel. Neither
//! Kronecker product is ever formed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AttenuationPair, ImageGrid, Material, MaterialImage, RegionOfInterest};

/// Row-major 2×2 matrix.
pub type Mat2 = [[f64; 2]; 2];

pub fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn mat2_transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

pub fn mat2_det(a: &Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

pub fn mat2_frobenius_sq(a: &Mat2) -> f64 {
    a.iter().flatten().map(|v| v * v).sum()
}

pub fn mat2_apply(a: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

/// Inverse by adjugate. Fails when `|det| < 1e-12 * ||a||_F^2`.
pub fn mat2_inverse(a: &Mat2) -> Result<Mat2> {
    let det = mat2_det(a);
    let scale = mat2_frobenius_sq(a);
    if !(det.abs() >= 1e-12 * scale) || scale == 0.0 {
        return Err(Error::Singular(format!(
            "|det| = {:e} below threshold {:e}",
            det.abs(),
            1e-12 * scale
        )));
    }
    Ok([
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ])
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn sym2_eigenvalues(a: &Mat2) -> [f64; 2] {
    let tr = a[0][0] + a[1][1];
    let diff = a[0][0] - a[1][1];
    let disc = (diff * diff + 4.0 * a[0][1] * a[1][0]).max(0.0).sqrt();
    [(tr - disc) / 2.0, (tr + disc) / 2.0]
}

/// Mass-attenuation matrix and noise weights.
///
/// `a0[energy][material]`, energy 0 = high, material 0 = water.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompPhysics {
    pub a0: Mat2,
    /// Inverse noise variances (high, low).
    pub w0_diag: [f64; 2],
}

impl DecompPhysics {
    pub fn new(a0: Mat2, w0_diag: [f64; 2]) -> Result<Self> {
        let p = Self { a0, w0_diag };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a0.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("a0 has non-finite entries".into()));
        }
        if !self.w0_diag.iter().all(|&w| w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "w0 diagonal must be positive, got {:?}",
                self.w0_diag
            )));
        }
        Ok(())
    }

    /// W0 from per-energy noise standard deviations.
    pub fn from_noise_sigmas(a0: Mat2, sigma_high: f64, sigma_low: f64) -> Result<Self> {
        Self::new(
            a0,
            [1.0 / (sigma_high * sigma_high), 1.0 / (sigma_low * sigma_low)],
        )
    }

    /// `a0ᵀ W0 a0`.
    pub fn normal_matrix(&self) -> Mat2 {
        let w = [[self.w0_diag[0], 0.0], [0.0, self.w0_diag[1]]];
        mat2_mul(&mat2_transpose(&self.a0), &mat2_mul(&w, &self.a0))
    }

    /// `a0ᵀ W0 a0 + 2β I`.
    pub fn mbid_system(&self, beta: f64) -> Mat2 {
        let mut m = self.normal_matrix();
        m[0][0] += 2.0 * beta;
        m[1][1] += 2.0 * beta;
        m
    }

    /// Per-pixel WLS cost `½‖y − a0 x‖²_W0`.
    pub fn data_fit(&self, y: [f64; 2], x: [f64; 2]) -> f64 {
        let ax = mat2_apply(&self.a0, x);
        let r = [y[0] - ax[0], y[1] - ax[1]];
        0.5 * (self.w0_diag[0] * r[0] * r[0] + self.w0_diag[1] * r[1] * r[1])
    }

    /// Gradient of [`Self::data_fit`] with respect to `x`: `−a0ᵀ W0 (y − a0 x)`.
    pub fn data_fit_gradient(&self, y: [f64; 2], x: [f64; 2]) -> [f64; 2] {
        let ax = mat2_apply(&self.a0, x);
        let wr = [
            self.w0_diag[0] * (y[0] - ax[0]),
            self.w0_diag[1] * (y[1] - ax[1]),
        ];
        let g = mat2_apply(&mat2_transpose(&self.a0), wr);
        [-g[0], -g[1]]
    }
}

/// Linear attenuation coefficients and densities used to calibrate `a0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInputs {
    /// Per material (water, bone), cm⁻¹.
    pub mu_high: [f64; 2],
    pub mu_low: [f64; 2],
    /// Per material, g/cm³.
    pub rho: [f64; 2],
}

impl CalibrationInputs {
    /// Reference densities used for calibration.
    pub const RHO_WATER: f64 = 1.0;
    pub const RHO_BONE: f64 = 1.92;
}

/// `a0[e][m] = μ_{m,e} / ρ_m`.
pub fn calibrate(inputs: &CalibrationInputs) -> Result<Mat2> {
    for (name, vals) in [
        ("mu_high", inputs.mu_high),
        ("mu_low", inputs.mu_low),
    ] {
        if !vals.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{name} entries must be positive, got {vals:?}"
            )));
        }
    }
    if let Some(m) = inputs.rho.iter().position(|&r| r == 0.0) {
        return Err(Error::InvalidArgument(format!("zero density for material {m}")));
    }
    if !inputs.rho.iter().all(|&r| r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "densities must be positive, got {:?}",
            inputs.rho
        )));
    }
    Ok([
        [
            inputs.mu_high[0] / inputs.rho[0],
            inputs.mu_high[1] / inputs.rho[1],
        ],
        [
            inputs.mu_low[0] / inputs.rho[0],
            inputs.mu_low[1] / inputs.rho[1],
        ],
    ])
}

/// Mean over a region; used to read μ off a uniform patch.
pub fn region_mean(grid: &ImageGrid, roi: &RegionOfInterest) -> Result<f64> {
    roi.check_matches(grid)?;
    Ok(roi.select(grid).sum::<f64>() / roi.count() as f64)
}

/// Unbiased sample variance over the masked pixels.
pub fn estimate_noise_variance(grid: &ImageGrid, roi: &RegionOfInterest) -> Result<f64> {
    roi.check_matches(grid)?;
    if roi.count() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ROI too small for a variance estimate ({} pixel)",
            roi.count()
        )));
    }
    let mean = region_mean(grid, roi)?;
    let ss: f64 = roi.select(grid).map(|v| (v - mean) * (v - mean)).sum();
    Ok(ss / (roi.count() - 1) as f64)
}

/// Apply a fixed 2×2 affine map `x_j = m (c_h y_H + c_l y_L ...)` pixelwise.
fn per_pixel<F>(high: &[f64], low: &[f64], f: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(usize, [f64; 2]) -> [f64; 2] + Sync,
{
    let out: Vec<[f64; 2]> = high
        .par_iter()
        .zip(low.par_iter())
        .enumerate()
        .map(|(j, (&h, &l))| f(j, [h, l]))
        .collect();
    out.into_iter().map(|[a, b]| (a, b)).unzip()
}

fn wrap_pair(grid: &ImageGrid, water: Vec<f64>, bone: Vec<f64>) -> Result<(MaterialImage, MaterialImage)> {
    Ok((
        MaterialImage::new(grid.with_data(water)?, Material::Water),
        MaterialImage::new(grid.with_data(bone)?, Material::Bone),
    ))
}

/// `x_j = a0⁻¹ y_j` at every pixel.
pub fn direct_inversion(
    y: &AttenuationPair,
    physics: &DecompPhysics,
) -> Result<(MaterialImage, MaterialImage)> {
    let inv = mat2_inverse(&physics.a0)?;
    let (w, b) = per_pixel(y.high().data(), y.low().data(), |_, yj| mat2_apply(&inv, yj));
    wrap_pair(y.high(), w, b)
}

/// Closed-form minimizer of `½‖y − A x‖²_W + β‖x − z‖²`, pixel by pixel:
/// `x̂_j = (a0ᵀW0a0 + 2βI)⁻¹ (a0ᵀW0 y_j + 2β z_j)`; β = 0 is exactly `a0⁻¹ y_j`.
pub fn mbid_update(
    y: &AttenuationPair,
    z: (&MaterialImage, &MaterialImage),
    physics: &DecompPhysics,
    beta: f64,
) -> Result<(MaterialImage, MaterialImage)> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let (zw, zb) = z;
    y.high().check_same_geometry(zw.grid(), "mbid water prior")?;
    y.high().check_same_geometry(zb.grid(), "mbid bone prior")?;
    if beta == 0.0 {
        return direct_inversion(y, physics);
    }
    let inv = mat2_inverse(&physics.mbid_system(beta))?;
    let at = mat2_transpose(&physics.a0);
    let w0 = physics.w0_diag;
    let (zw, zb) = (zw.data(), zb.data());
    let (w, b) = per_pixel(y.high().data(), y.low().data(), |j, yj| {
        let aty = mat2_apply(&at, [w0[0] * yj[0], w0[1] * yj[1]]);
        let rhs = [aty[0] + 2.0 * beta * zw[j], aty[1] + 2.0 * beta * zb[j]];
        mat2_apply(&inv, rhs)
    });
    wrap_pair(y.high(), w, b)
}
