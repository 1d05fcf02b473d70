//! Single-hidden-layer convolutional refiner: encode, soft-threshold, decode.
//!
//! Parameters are kept in patch (matrix) form:
//!
//! ```text
//! D = [D11 D12]  (2R × 2K)     E = [E11 E12]  (2K × 2R)
//!     [D21 D22]                    [E21 E22]
//! ```
//!
//! Column `k` of `D_{m,n}` is decoder filter `d_{m,n,k}`; row `k` of `E_{n,m}` is
//! encoder filter `e_{n,m,k}`, both row-major over the `r×r` support. Threshold
//! `exp(alpha[n*K + k])` applies to hidden feature `k` of group `n`.
//!
//! The canonical evaluation is the patch form
//! `z = (1/R) Σ_j P̄_jᵀ D T_{exp(α)}(E P̄_j x)` with periodic patches anchored at
//! each pixel's top-left. [`refine_conv`] evaluates the same map with periodic
//! filtering: encoder rows act by correlation, decoder columns by convolution,
//! so in convolution terms the encoder filter is the 180° rotation of the row.
//! The identical variants tie `D = Eᵀ`, which makes each decoder filter the
//! rotated encoder filter.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{convolve_periodic, correlate_periodic};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, Material, MaterialImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerVariant {
    DistinctCross,
    IdenticalCross,
    DistinctIndividual,
    IdenticalIndividual,
}

impl RefinerVariant {
    pub const ALL: [RefinerVariant; 4] = [
        RefinerVariant::DistinctCross,
        RefinerVariant::IdenticalCross,
        RefinerVariant::DistinctIndividual,
        RefinerVariant::IdenticalIndividual,
    ];

    /// Decoder tied to the encoder (`D = Eᵀ`).
    pub fn is_identical(self) -> bool {
        matches!(
            self,
            RefinerVariant::IdenticalCross | RefinerVariant::IdenticalIndividual
        )
    }

    /// Off-diagonal (cross-material) blocks forced to zero.
    pub fn is_individual(self) -> bool {
        matches!(
            self,
            RefinerVariant::DistinctIndividual | RefinerVariant::IdenticalIndividual
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            RefinerVariant::DistinctCross => "distinct_cross",
            RefinerVariant::IdenticalCross => "identical_cross",
            RefinerVariant::DistinctIndividual => "distinct_individual",
            RefinerVariant::IdenticalIndividual => "identical_individual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown refiner variant '{s}'")))
    }

    /// Number of trainable scalars for filter count `k` and patch length `r_len`.
    pub fn free_parameter_count(self, k: usize, r_len: usize) -> usize {
        match self {
            RefinerVariant::IdenticalIndividual => 2 * k * (r_len + 1),
            RefinerVariant::IdenticalCross | RefinerVariant::DistinctIndividual => {
                2 * k * (2 * r_len + 1)
            }
            RefinerVariant::DistinctCross => 2 * k * (4 * r_len + 1),
        }
    }
}

impl std::fmt::Display for RefinerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One iteration's refiner parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    variant: RefinerVariant,
    side: usize,
    k: usize,
    d: Array2<f64>,
    e: Array2<f64>,
    alpha: Array1<f64>,
}

impl RefinerParams {
    /// Builds parameters and checks the variant's structural constraints.
    pub fn new(
        variant: RefinerVariant,
        side: usize,
        k: usize,
        d: Array2<f64>,
        e: Array2<f64>,
        alpha: Array1<f64>,
    ) -> Result<Self> {
        if side == 0 || k == 0 {
            return Err(Error::InvalidArgument("patch side and K must be >= 1".into()));
        }
        let r_len = side * side;
        if d.dim() != (2 * r_len, 2 * k) || e.dim() != (2 * k, 2 * r_len) || alpha.len() != 2 * k {
            return Err(Error::Shape(format!(
                "expected D {}x{}, E {}x{}, alpha {}; got D {:?}, E {:?}, alpha {}",
                2 * r_len,
                2 * k,
                2 * k,
                2 * r_len,
                2 * k,
                d.dim(),
                e.dim(),
                alpha.len()
            )));
        }
        if d.iter().chain(e.iter()).chain(alpha.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged("refiner parameters".into()));
        }
        let p = Self {
            variant,
            side,
            k,
            d,
            e,
            alpha,
        };
        p.check_constraints()?;
        Ok(p)
    }

    /// Builds parameters after projecting `d`/`e` onto the variant's constraint set:
    /// cross blocks zeroed for individual variants, `D := Eᵀ` for identical ones.
    pub fn new_projected(
        variant: RefinerVariant,
        side: usize,
        k: usize,
        mut d: Array2<f64>,
        mut e: Array2<f64>,
        alpha: Array1<f64>,
    ) -> Result<Self> {
        let r_len = side * side;
        if e.dim() != (2 * k, 2 * r_len) {
            return Err(Error::Shape(format!("E has shape {:?}", e.dim())));
        }
        project(variant, side * side, k, &mut d, &mut e);
        Self::new(variant, side, k, d, e, alpha)
    }

    /// Gaussian(0, std²) filters, constant log-thresholds per material group.
    pub fn random<R: Rng + ?Sized>(
        variant: RefinerVariant,
        side: usize,
        k: usize,
        filter_std: f64,
        alpha_init: [f64; 2],
        rng: &mut R,
    ) -> Result<Self> {
        let r_len = side * side;
        let normal = Normal::new(0.0, filter_std)
            .map_err(|e| Error::InvalidArgument(format!("filter std: {e}")))?;
        let e = Array2::from_shape_simple_fn((2 * k, 2 * r_len), || normal.sample(rng));
        let d = if variant.is_identical() {
            Array2::zeros((2 * r_len, 2 * k))
        } else {
            Array2::from_shape_simple_fn((2 * r_len, 2 * k), || normal.sample(rng))
        };
        let alpha = Array1::from_shape_fn(2 * k, |i| alpha_init[i / k]);
        Self::new_projected(variant, side, k, d, e, alpha)
    }

    pub fn variant(&self) -> RefinerVariant {
        self.variant
    }

    /// Patch side `r`.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Patch length `R = r²`.
    pub fn patch_len(&self) -> usize {
        self.side * self.side
    }

    /// Filters per group per material.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> &Array2<f64> {
        &self.d
    }

    pub fn e(&self) -> &Array2<f64> {
        &self.e
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn thresholds(&self) -> Array1<f64> {
        self.alpha.mapv(f64::exp)
    }

    /// Reinterprets the same matrices under another variant tag. Fails if the
    /// matrices violate that variant's constraints.
    pub fn with_variant(&self, variant: RefinerVariant) -> Result<Self> {
        Self::new(
            variant,
            self.side,
            self.k,
            self.d.clone(),
            self.e.clone(),
            self.alpha.clone(),
        )
    }

    pub fn check_constraints(&self) -> Result<()> {
        let (r_len, k) = (self.patch_len(), self.k);
        if self.variant.is_individual() {
            let cross_zero = |m: ArrayView2<f64>| m.iter().all(|&v| v == 0.0);
            let ok = cross_zero(self.e.slice(s![0..k, r_len..]))
                && cross_zero(self.e.slice(s![k.., 0..r_len]))
                && cross_zero(self.d.slice(s![0..r_len, k..]))
                && cross_zero(self.d.slice(s![r_len.., 0..k]));
            if !ok {
                return Err(Error::Variant(format!(
                    "{} requires zero cross-material blocks",
                    self.variant
                )));
            }
        }
        if self.variant.is_identical() && self.d != self.e.t() {
            return Err(Error::Variant(format!(
                "{} requires the decoder tied to the encoder transpose",
                self.variant
            )));
        }
        Ok(())
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.d, &mut self.e, &mut self.alpha)
    }

    /// Re-applies the constraint projection after an in-place update.
    pub(crate) fn reproject(&mut self) {
        let (r_len, k) = (self.patch_len(), self.k);
        project(self.variant, r_len, k, &mut self.d, &mut self.e);
    }

    pub(crate) fn check_image(&self, grid: &ImageGrid) -> Result<()> {
        if self.side > grid.width() || self.side > grid.height() {
            return Err(Error::Geometry(format!(
                "patch side {} exceeds image {}x{}",
                self.side,
                grid.width(),
                grid.height()
            )));
        }
        Ok(())
    }
}

fn project(variant: RefinerVariant, r_len: usize, k: usize, d: &mut Array2<f64>, e: &mut Array2<f64>) {
    if variant.is_individual() {
        e.slice_mut(s![0..k, r_len..]).fill(0.0);
        e.slice_mut(s![k.., 0..r_len]).fill(0.0);
        if d.dim() == (2 * r_len, 2 * k) {
            d.slice_mut(s![0..r_len, k..]).fill(0.0);
            d.slice_mut(s![r_len.., 0..k]).fill(0.0);
        }
    }
    if variant.is_identical() {
        *d = e.t().to_owned();
    }
}

/// Soft-thresholding of a single value. Ties `|b| == a` map to zero.
#[inline]
pub fn shrink(b: f64, a: f64) -> f64 {
    if b > a {
        b - a
    } else if b < -a {
        b + a
    } else {
        0.0
    }
}

/// Elementwise `T_a(b)`.
pub fn soft_threshold(b: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.len() {
        return Err(Error::Shape(format!(
            "soft_threshold: {} values, {} thresholds",
            b.len(),
            a.len()
        )));
    }
    if let Some(i) = a.iter().position(|&t| !(t >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative threshold at {i}")));
    }
    Ok(b.iter().zip(a).map(|(&b, &a)| shrink(b, a)).collect())
}

/// Row-wise soft thresholding of hidden features in place.
pub(crate) fn shrink_rows(h: &mut Array2<f64>, thresholds: &Array1<f64>) {
    for (mut row, &t) in h.axis_iter_mut(Axis(0)).zip(thresholds) {
        row.mapv_inplace(|v| shrink(v, t));
    }
}

/// Periodic stride-1 patch geometry over a `width×height` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchExtractor {
    pub width: usize,
    pub height: usize,
    pub side: usize,
}

impl PatchExtractor {
    pub fn new(width: usize, height: usize, side: usize) -> Result<Self> {
        if side == 0 || side > width || side > height {
            return Err(Error::Geometry(format!(
                "patch side {side} does not fit a {width}x{height} image"
            )));
        }
        Ok(Self {
            width,
            height,
            side,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.side * self.side
    }

    pub fn num_patches(&self) -> usize {
        self.width * self.height
    }

    /// Raster index of tap `q` of the patch anchored at pixel `j`.
    #[inline]
    pub fn source_index(&self, j: usize, q: usize) -> usize {
        let (row, col) = (j / self.width, j % self.width);
        let (a, b) = (q / self.side, q % self.side);
        ((row + a) % self.height) * self.width + (col + b) % self.width
    }

    /// Writes `P_j x` for every `j` into rows `offset..offset+R` of `out`.
    pub fn extract_into(&self, x: &[f64], out: &mut Array2<f64>, row_offset: usize, col_offset: usize) {
        let r_len = self.patch_len();
        for j in 0..self.num_patches() {
            for q in 0..r_len {
                out[[row_offset + q, col_offset + j]] = x[self.source_index(j, q)];
            }
        }
    }

    /// `Σ_j P_jᵀ v_j` over rows `offset..offset+R` of `patches`, without normalization.
    pub fn place_sum(&self, patches: ArrayView2<f64>, row_offset: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_patches()];
        for j in 0..self.num_patches() {
            for q in 0..self.patch_len() {
                out[self.source_index(j, q)] += patches[[row_offset + q, j]];
            }
        }
        out
    }
}

fn check_pair(water: &MaterialImage, bone: &MaterialImage) -> Result<()> {
    water.grid().check_same_geometry(bone.grid(), "material pair")
}

/// Stacked patch matrix `[P_j x_water; P_j x_bone]`, one column per pixel in raster order.
pub fn extract_patches(water: &MaterialImage, bone: &MaterialImage, side: usize) -> Result<Array2<f64>> {
    check_pair(water, bone)?;
    let g = water.grid();
    let px = PatchExtractor::new(g.width(), g.height(), side)?;
    let r_len = px.patch_len();
    let mut out = Array2::zeros((2 * r_len, px.num_patches()));
    px.extract_into(water.data(), &mut out, 0, 0);
    px.extract_into(bone.data(), &mut out, r_len, 0);
    Ok(out)
}

/// `(1/R) Σ_j P_jᵀ` applied to each half of the stacked patch matrix.
pub fn aggregate_patches(patches: ArrayView2<f64>, template: &ImageGrid, side: usize) -> Result<(MaterialImage, MaterialImage)> {
    let px = PatchExtractor::new(template.width(), template.height(), side)?;
    let r_len = px.patch_len();
    if patches.dim() != (2 * r_len, px.num_patches()) {
        return Err(Error::Shape(format!(
            "expected {}x{} patch matrix, got {:?}",
            2 * r_len,
            px.num_patches(),
            patches.dim()
        )));
    }
    let scale = 1.0 / r_len as f64;
    let mut halves = [0, r_len].map(|off| {
        let mut v = px.place_sum(patches, off);
        v.iter_mut().for_each(|x| *x *= scale);
        v
    });
    let bone = std::mem::take(&mut halves[1]);
    let water = std::mem::take(&mut halves[0]);
    Ok((
        MaterialImage::new(template.with_data(water)?, Material::Water),
        MaterialImage::new(template.with_data(bone)?, Material::Bone),
    ))
}

/// `D T_{exp(α)}(E X)` for a stacked patch matrix `X`.
pub fn refine_patch_matrix(params: &RefinerParams, x: ArrayView2<f64>) -> Array2<f64> {
    let mut h = params.e.dot(&x);
    shrink_rows(&mut h, &params.thresholds());
    params.d.dot(&h)
}

/// Patch-form refiner evaluation (canonical path).
pub fn refine(params: &RefinerParams, water: &MaterialImage, bone: &MaterialImage) -> Result<(MaterialImage, MaterialImage)> {
    check_pair(water, bone)?;
    params.check_image(water.grid())?;
    let x = extract_patches(water, bone, params.side)?;
    let y = refine_patch_matrix(params, x.view());
    aggregate_patches(y.view(), water.grid(), params.side)
}

/// Filtering-form refiner evaluation; same map as [`refine`].
pub fn refine_conv(params: &RefinerParams, water: &MaterialImage, bone: &MaterialImage) -> Result<(MaterialImage, MaterialImage)> {
    check_pair(water, bone)?;
    params.check_image(water.grid())?;
    let g = water.grid();
    let (w, h, r) = (g.width(), g.height(), params.side);
    let (r_len, k) = (params.patch_len(), params.k);
    let inputs = [water.data(), bone.data()];
    let thresholds = params.thresholds();
    let n = w * h;

    let mut outputs = [vec![0.0; n], vec![0.0; n]];
    for group in 0..2 {
        for f in 0..k {
            let row = group * k + f;
            let mut feature = vec![0.0; n];
            for (m, x) in inputs.iter().enumerate() {
                let kernel = params.e.slice(s![row, m * r_len..(m + 1) * r_len]);
                if kernel.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let c = correlate_periodic(x, w, h, kernel.as_slice().unwrap(), r);
                feature.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
            }
            let t = thresholds[row];
            feature.iter_mut().for_each(|v| *v = shrink(*v, t));
            if feature.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (m, out) in outputs.iter_mut().enumerate() {
                let kernel: Vec<f64> = params
                    .d
                    .slice(s![m * r_len..(m + 1) * r_len, row])
                    .iter()
                    .map(|v| v / r_len as f64)
                    .collect();
                if kernel.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let c = convolve_periodic(&feature, w, h, &kernel, r);
                out.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
            }
        }
    }
    let [ow, ob] = outputs;
    Ok((
        MaterialImage::new(g.with_data(ow)?, Material::Water),
        MaterialImage::new(g.with_data(ob)?, Material::Bone),
    ))
}
