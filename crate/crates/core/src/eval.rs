//! RMSE over a region of interest, comparison tables and convergence curves.

use crate::error::{Error, Result};
use crate::image::{ImageGrid, MaterialImage, RegionOfInterest};

/// `sqrt(Σ_{j∈ROI} (x̂_j − x*_j)² / N_ROI)` in g/cm³.
pub fn rmse(estimate: &MaterialImage, truth: &MaterialImage, roi: &RegionOfInterest) -> Result<f64> {
    estimate.grid().check_same_geometry(truth.grid(), "rmse")?;
    roi.check_matches(truth.grid())?;
    let ss: f64 = estimate
        .data()
        .iter()
        .zip(truth.data())
        .zip(roi.mask())
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum();
    Ok((ss / roi.count() as f64).sqrt())
}

/// Tissue support (total density > 0) dilated by `radius` pixels (Euclidean).
pub fn tissue_roi(water: &MaterialImage, bone: &MaterialImage, radius: usize) -> Result<RegionOfInterest> {
    water.grid().check_same_geometry(bone.grid(), "roi")?;
    let (w, h) = (water.grid().width(), water.grid().height());
    let support: Vec<bool> = water
        .data()
        .iter()
        .zip(bone.data())
        .map(|(a, b)| a + b > 0.0)
        .collect();
    let r = radius as isize;
    let mut mask = vec![false; w * h];
    for row in 0..h as isize {
        for col in 0..w as isize {
            if !support[(row as usize) * w + col as usize] {
                continue;
            }
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr * dr + dc * dc > r * r {
                        continue;
                    }
                    let (rr, cc) = (row + dr, col + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        mask[rr as usize * w + cc as usize] = true;
                    }
                }
            }
        }
    }
    RegionOfInterest::new(w, h, mask)
}

/// Default evaluation ROI: tissue support dilated by 2 pixels.
pub fn default_roi(water: &MaterialImage, bone: &MaterialImage) -> Result<RegionOfInterest> {
    tissue_roi(water, bone, 2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    /// g/cm³
    pub rmse_water: f64,
    pub rmse_bone: f64,
}

/// Per-method RMSE table; CSV values are in 10⁻³ g/cm³.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,rmse_water_1e-3_g_cm3,rmse_bone_1e-3_g_cm3\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.3},{:.3}\n",
                r.method,
                r.rmse_water * 1e3,
                r.rmse_bone * 1e3
            ));
        }
        out
    }

    pub fn get(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Evaluates each method's (water, bone) result against the truth, in input order.
pub fn compare_methods(
    results: &[(String, (MaterialImage, MaterialImage))],
    truth: Option<(&MaterialImage, &MaterialImage)>,
    roi: &RegionOfInterest,
) -> Result<ComparisonTable> {
    let (tw, tb) = truth.ok_or_else(|| Error::InvalidArgument("ground truth is required".into()))?;
    let rows = results
        .iter()
        .map(|(name, (w, b))| {
            Ok(ComparisonRow {
                method: name.clone(),
                rmse_water: rmse(w, tw, roi)?,
                rmse_bone: rmse(b, tb, roi)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub rmse_water: f64,
    pub rmse_bone: f64,
}

/// Per-iteration RMSE of a sequence of iterates (iteration 0 first).
pub fn trace_curves(
    iterates: &[(MaterialImage, MaterialImage)],
    truth: (&MaterialImage, &MaterialImage),
    roi: &RegionOfInterest,
) -> Result<Vec<CurveRow>> {
    iterates
        .iter()
        .enumerate()
        .map(|(i, (w, b))| {
            Ok(CurveRow {
                iteration: i,
                rmse_water: rmse(w, truth.0, roi)?,
                rmse_bone: rmse(b, truth.1, roi)?,
            })
        })
        .collect()
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("iteration,rmse_water,rmse_bone\n");
    for r in rows {
        out.push_str(&format!("{},{:.9e},{:.9e}\n", r.iteration, r.rmse_water, r.rmse_bone));
    }
    out
}

/// Convenience for single-grid comparisons (e.g. attenuation images).
pub fn grid_rmse(a: &ImageGrid, b: &ImageGrid, roi: &RegionOfInterest) -> Result<f64> {
    let m = crate::image::Material::Water;
    rmse(&MaterialImage::new(a.clone(), m), &MaterialImage::new(b.clone(), m), roi)
}
