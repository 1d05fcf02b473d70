//! Synthetic water/bone phantoms and their noisy attenuation images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AttenuationPair, ImageGrid, Material, MaterialImage};
use crate::physics::{mat2_apply, DecompPhysics, Mat2};

/// Mass attenuation (cm²/g) at the (high, low) energies for (water, bone).
pub const DESK_A0: Mat2 = [[0.18, 0.28], [0.21, 0.45]];
/// Default noise level (cm⁻¹) of the desk attenuation images.
pub const DESK_SIGMAS: [f64; 2] = [2.5e-3, 5.8e-3];

/// Geometry of one primitive, in pixel coordinates (x = column, y = row,
/// pixel centers at integer coordinates).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Disk { cx: f64, cy: f64, radius: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Annulus { cx: f64, cy: f64, inner: f64, outer: f64 },
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    /// Approximate signed distance to the boundary, positive inside.
    fn inside_distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Disk { cx, cy, radius } => radius - (x - cx).hypot(y - cy),
            Shape::Ellipse { cx, cy, rx, ry } => {
                let rho = ((x - cx) / rx).hypot((y - cy) / ry);
                (1.0 - rho) * rx.min(ry)
            }
            Shape::Annulus { cx, cy, inner, outer } => {
                let r = (x - cx).hypot(y - cy);
                (outer - r).min(r - inner)
            }
            Shape::Rectangle { x0, y0, x1, y1 } => {
                (x - x0).min(x1 - x).min(y - y0).min(y1 - y)
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disk { cx, cy, radius } => (cx - radius, cy - radius, cx + radius, cy + radius),
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Annulus { cx, cy, outer, .. } => (cx - outer, cy - outer, cx + outer, cy + outer),
            Shape::Rectangle { x0, y0, x1, y1 } => (x0, y0, x1, y1),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Disk { radius, .. } => radius > 0.0,
            Shape::Ellipse { rx, ry, .. } => rx > 0.0 && ry > 0.0,
            Shape::Annulus { inner, outer, .. } => inner >= 0.0 && outer > inner,
            Shape::Rectangle { x0, y0, x1, y1 } => x1 > x0 && y1 > y0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate primitive {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub material: Material,
    /// g/cm³
    pub density: f64,
    /// Width in pixels of a linear edge ramp; hard edges when absent.
    #[serde(default)]
    pub edge_width: Option<f64>,
}

/// Phantom description; primitives are painted in order, later ones overwrite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    #[serde(default = "default_pixel_size")]
    pub pixel_size_mm: f64,
    #[serde(default)]
    pub seed: u64,
    /// Background (water, bone) densities.
    #[serde(default)]
    pub background: [f64; 2],
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

fn default_pixel_size() -> f64 {
    0.98
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidArgument("phantom size must be >= 1".into()));
        }
        if !(self.pixel_size_mm > 0.0) {
            return Err(Error::InvalidArgument("pixel size must be > 0".into()));
        }
        if self.background.iter().any(|&b| !(b >= 0.0)) {
            return Err(Error::InvalidArgument("background densities must be >= 0".into()));
        }
        for p in &self.primitives {
            p.shape.validate()?;
            if !(p.density >= 0.0) || !p.density.is_finite() {
                return Err(Error::InvalidArgument(format!("density {} must be >= 0", p.density)));
            }
            if let Some(w) = p.edge_width {
                if !(w > 0.0) {
                    return Err(Error::InvalidArgument("edge width must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Randomized body-like phantom: a soft-tissue ellipse with organ-like
    /// inclusions, a bone ring and scattered small bone disks. Two seeds give
    /// two draws from the same distribution.
    pub fn desk(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let mut prims = Vec::new();
        let rx = s * rng.random_range(0.38..0.45);
        let ry = s * rng.random_range(0.30..0.38);
        let (bcx, bcy) = (c + rng.random_range(-0.02..0.02) * s, c + rng.random_range(-0.02..0.02) * s);
        prims.push(Primitive {
            shape: Shape::Ellipse { cx: bcx, cy: bcy, rx, ry },
            material: Material::Water,
            density: rng.random_range(0.98..1.02),
            edge_width: None,
        });
        // Soft-tissue inclusions.
        for _ in 0..rng.random_range(3..6) {
            let (x, y) = point_in_ellipse(&mut rng, bcx, bcy, rx * 0.7, ry * 0.7);
            prims.push(Primitive {
                shape: Shape::Ellipse {
                    cx: x,
                    cy: y,
                    rx: s * rng.random_range(0.04..0.10),
                    ry: s * rng.random_range(0.04..0.10),
                },
                material: Material::Water,
                density: rng.random_range(0.85..1.15),
                edge_width: None,
            });
        }
        // Spine-like bone ring around a lower-density core.
        let (sx, sy) = (bcx + rng.random_range(-0.05..0.05) * s, bcy + ry * rng.random_range(0.45..0.6));
        let outer = s * rng.random_range(0.06..0.09);
        prims.push(Primitive {
            shape: Shape::Annulus { cx: sx, cy: sy, inner: outer * rng.random_range(0.45..0.65), outer },
            material: Material::Bone,
            density: rng.random_range(1.2..1.9),
            edge_width: None,
        });
        prims.push(Primitive {
            shape: Shape::Disk { cx: sx, cy: sy, radius: outer * 0.4 },
            material: Material::Bone,
            density: rng.random_range(0.4..0.8),
            edge_width: None,
        });
        // Rib-like small disks near the body outline.
        for _ in 0..rng.random_range(4..9) {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let f = rng.random_range(0.78..0.9);
            prims.push(Primitive {
                shape: Shape::Disk {
                    cx: bcx + f * rx * t.cos(),
                    cy: bcy + f * ry * t.sin(),
                    radius: s * rng.random_range(0.015..0.035),
                },
                material: Material::Bone,
                density: rng.random_range(0.4..1.9),
                edge_width: None,
            });
        }
        Self {
            size,
            pixel_size_mm: default_pixel_size(),
            seed,
            background: [0.0, 0.0],
            primitives: prims,
        }
    }
}

fn point_in_ellipse(rng: &mut ChaCha8Rng, cx: f64, cy: f64, rx: f64, ry: f64) -> (f64, f64) {
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(0.0f64..1.0).sqrt();
    (cx + r * rx * t.cos(), cy + r * ry * t.sin())
}

/// Outcome of rasterization, including primitives clipped by the grid edge.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub water: MaterialImage,
    pub bone: MaterialImage,
    /// Indices of primitives that extend past the grid.
    pub clipped: Vec<usize>,
}

/// Rasterizes a phantom; coverage is evaluated at pixel centers.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.size;
    let mut water = vec![spec.background[0]; n * n];
    let mut bone = vec![spec.background[1]; n * n];
    let mut clipped = Vec::new();
    let lim = n as f64 - 0.5;
    for (idx, p) in spec.primitives.iter().enumerate() {
        let (x0, y0, x1, y1) = p.shape.bounds();
        if x0 < -0.5 || y0 < -0.5 || x1 > lim || y1 > lim {
            clipped.push(idx);
        }
        let value = match p.material {
            Material::Water => [p.density, 0.0],
            Material::Bone => [0.0, p.density],
        };
        for row in 0..n {
            for col in 0..n {
                let d = p.shape.inside_distance(col as f64, row as f64);
                let cover = match p.edge_width {
                    None => {
                        if d >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Some(w) => (d / w + 0.5).clamp(0.0, 1.0),
                };
                if cover > 0.0 {
                    let j = row * n + col;
                    water[j] = (1.0 - cover) * water[j] + cover * value[0];
                    bone[j] = (1.0 - cover) * bone[j] + cover * value[1];
                }
            }
        }
    }
    let grid = |data| ImageGrid::new(n, n, spec.pixel_size_mm, data);
    Ok(Phantom {
        water: MaterialImage::new(grid(water)?, Material::Water),
        bone: MaterialImage::new(grid(bone)?, Material::Bone),
        clipped,
    })
}

/// Additive white Gaussian noise on each attenuation image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// cm⁻¹
    pub sigma_high: f64,
    pub sigma_low: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    /// Desk noise level with the given seed.
    pub fn desk(seed: u64) -> Self {
        Self {
            sigma_high: DESK_SIGMAS[0],
            sigma_low: DESK_SIGMAS[1],
            seed,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            sigma_high: 0.0,
            sigma_low: 0.0,
            seed: 0,
        }
    }

    /// Inverse variances, when both sigmas are positive.
    pub fn weights(&self) -> Option<[f64; 2]> {
        if self.sigma_high > 0.0 && self.sigma_low > 0.0 {
            Some([
                1.0 / (self.sigma_high * self.sigma_high),
                1.0 / (self.sigma_low * self.sigma_low),
            ])
        } else {
            None
        }
    }
}

/// `y_j = a0 x_j + n_j` with independent noise per pixel and energy.
/// Energy `e` draws from a ChaCha stream `(seed, e)` in raster order.
pub fn synthesize_measurements(
    water: &MaterialImage,
    bone: &MaterialImage,
    physics: &DecompPhysics,
    noise: &NoiseSpec,
) -> Result<AttenuationPair> {
    water.grid().check_same_geometry(bone.grid(), "phantom materials")?;
    if !(noise.sigma_high >= 0.0 && noise.sigma_low >= 0.0) {
        return Err(Error::InvalidArgument("noise sigmas must be >= 0".into()));
    }
    let n = water.grid().len();
    let mut high = Vec::with_capacity(n);
    let mut low = Vec::with_capacity(n);
    for (&w, &b) in water.data().iter().zip(bone.data()) {
        let y = mat2_apply(&physics.a0, [w, b]);
        high.push(y[0]);
        low.push(y[1]);
    }
    for (energy, (sigma, buf)) in [(noise.sigma_high, &mut high), (noise.sigma_low, &mut low)]
        .into_iter()
        .enumerate()
    {
        if sigma == 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        rng.set_stream(energy as u64);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in buf.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    AttenuationPair::new(water.grid().with_data(high)?, water.grid().with_data(low)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RegionOfInterest;
    use crate::physics::{direct_inversion, estimate_noise_variance};

    const A0: [[f64; 2]; 2] = [[0.2, 0.25], [0.25, 0.6]];

    #[test]
    fn empty_spec_is_background() {
        let spec = PhantomSpec {
            size: 8,
            pixel_size_mm: 1.0,
            seed: 0,
            background: [0.5, 0.1],
            primitives: vec![],
        };
        let p = generate_phantom(&spec).unwrap();
        assert!(p.water.data().iter().all(|&v| v == 0.5));
        assert!(p.bone.data().iter().all(|&v| v == 0.1));
    }

    fn disk_count(cx: f64, cy: f64, radius: f64) -> f64 {
        let spec = PhantomSpec {
            size: 64,
            pixel_size_mm: 1.0,
            seed: 0,
            background: [0.0, 0.0],
            primitives: vec![Primitive {
                shape: Shape::Disk { cx, cy, radius },
                material: Material::Water,
                density: 1.0,
                edge_width: None,
            }],
        };
        let p = generate_phantom(&spec).unwrap();
        assert!(p.clipped.is_empty());
        p.water.data().iter().filter(|&&v| v == 1.0).count() as f64
    }

    #[test]
    fn disk_area_matches_circle() {
        for r in 10..=30 {
            let radius = r as f64;
            let area = std::f64::consts::PI * radius * radius;
            let count = disk_count(31.5, 31.5, radius);
            assert!((count / area - 1.0).abs() <= 0.02, "r={radius}: {count} vs {area}");
        }
    }

    #[test]
    fn off_lattice_disks_stay_close_to_circle_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut total = 0.0;
        for _ in 0..100 {
            let radius = rng.random_range(10.0..30.0);
            let (cx, cy) = (rng.random_range(31.0..32.0), rng.random_range(31.0..32.0));
            let area = std::f64::consts::PI * radius * radius;
            let err = disk_count(cx, cy, radius) / area - 1.0;
            assert!(err.abs() <= 0.05, "r={radius} c=({cx},{cy}): {err}");
            total += err.abs();
        }
        assert!(total / 100.0 <= 0.01);
    }

    #[test]
    fn later_primitives_overwrite_and_clip_is_reported() {
        let spec = PhantomSpec {
            size: 16,
            pixel_size_mm: 1.0,
            seed: 0,
            background: [0.0, 0.0],
            primitives: vec![
                Primitive {
                    shape: Shape::Rectangle { x0: -4.0, y0: 0.0, x1: 10.0, y1: 10.0 },
                    material: Material::Water,
                    density: 1.0,
                    edge_width: None,
                },
                Primitive {
                    shape: Shape::Disk { cx: 5.0, cy: 5.0, radius: 2.0 },
                    material: Material::Bone,
                    density: 1.5,
                    edge_width: Some(1.0),
                },
            ],
        };
        let p = generate_phantom(&spec).unwrap();
        let j = 5 * 16 + 5;
        assert_eq!(p.water.data()[j], 0.0);
        assert_eq!(p.bone.data()[j], 1.5);
        assert_eq!(p.clipped, vec![0]);
        // Ramp midpoint sits on the boundary.
        let edge = 5 * 16 + 7;
        assert!((p.bone.data()[edge] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn desk_phantom_is_deterministic_and_in_range() {
        let a = generate_phantom(&PhantomSpec::desk(64, 3)).unwrap();
        let b = generate_phantom(&PhantomSpec::desk(64, 3)).unwrap();
        assert_eq!(a.water, b.water);
        assert_eq!(a.bone, b.bone);
        let c = generate_phantom(&PhantomSpec::desk(64, 4)).unwrap();
        assert_ne!(a.water, c.water);
        assert!(a.water.data().iter().all(|&v| (0.0..=1.2).contains(&v)));
        assert!(a.bone.data().iter().all(|&v| (0.0..=1.9).contains(&v)));
        assert!(a.bone.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = PhantomSpec::desk(32, 0);
        spec.primitives[0].density = -1.0;
        assert!(generate_phantom(&spec).is_err());
        let mut spec = PhantomSpec::desk(32, 0);
        spec.primitives.push(Primitive {
            shape: Shape::Annulus { cx: 1.0, cy: 1.0, inner: 3.0, outer: 2.0 },
            material: Material::Bone,
            density: 1.0,
            edge_width: None,
        });
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn noiseless_round_trip_is_exact() {
        let p = generate_phantom(&PhantomSpec::desk(32, 1)).unwrap();
        let physics = DecompPhysics::new(A0, [1.0, 1.0]).unwrap();
        let y = synthesize_measurements(&p.water, &p.bone, &physics, &NoiseSpec::noiseless()).unwrap();
        let (w, b) = direct_inversion(&y, &physics).unwrap();
        for (x, t) in w.data().iter().zip(p.water.data()).chain(b.data().iter().zip(p.bone.data())) {
            assert!((x - t).abs() <= 1e-12);
        }
        let scaled = DecompPhysics::new([[0.6, 0.75], [0.75, 1.8]], [1.0, 1.0]).unwrap();
        let y3 = synthesize_measurements(&p.water, &p.bone, &scaled, &NoiseSpec::noiseless()).unwrap();
        for (a, b) in y3.high().data().iter().zip(y.high().data()) {
            assert!((a - 3.0 * b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pure_noise_has_requested_spread() {
        let zero = MaterialImage::new(ImageGrid::zeros(100, 100, 1.0).unwrap(), Material::Water);
        let zb = MaterialImage::new(ImageGrid::zeros(100, 100, 1.0).unwrap(), Material::Bone);
        let physics = DecompPhysics::new(A0, [1.0, 1.0]).unwrap();
        let noise = NoiseSpec { sigma_high: 0.004, sigma_low: 0.009, seed: 5 };
        let y = synthesize_measurements(&zero, &zb, &physics, &noise).unwrap();
        let roi = RegionOfInterest::full(100, 100);
        for (grid, sigma) in [(y.high(), 0.004), (y.low(), 0.009)] {
            let std = estimate_noise_variance(grid, &roi).unwrap().sqrt();
            assert!((std / sigma - 1.0).abs() <= 0.1, "{std} vs {sigma}");
        }
        let again = synthesize_measurements(&zero, &zb, &physics, &noise).unwrap();
        assert_eq!(again, y);
        assert_eq!(noise.weights().unwrap()[0], 1.0 / (0.004 * 0.004));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = PhantomSpec::desk(48, 9);
        let text = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(text.contains("\"shape\":\"ellipse\""));
    }
}
