//! Self-checks run by `bcdnet verify`: random instances compared across
//! independent evaluation paths, with measured errors reported.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{AttenuationPair, ImageGrid, Material, MaterialImage};
use crate::physics::{direct_inversion, mbid_update, DecompPhysics};
use crate::refiner::{extract_patches, refine, refine_conv, RefinerParams, RefinerVariant};
use crate::training::{gradient, loss, GradientBatch, MiniBatch};

/// Outcome of one check suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &'static str, trials: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            trials,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<26} trials={:<5} max_err={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_error,
            self.tolerance
        )
    }
}

pub type GradientFn = fn(&RefinerParams, &MiniBatch) -> Result<GradientBatch>;

fn random_image_pair(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (MaterialImage, MaterialImage) {
    let mut img = |m| {
        let data = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        MaterialImage::new(ImageGrid::new(w, h, 1.0, data).expect("valid grid"), m)
    };
    (img(Material::Water), img(Material::Bone))
}

fn random_refiner(rng: &mut ChaCha8Rng, variant: RefinerVariant, side: usize, k: usize) -> RefinerParams {
    let alpha = rng.random_range(-2.5..0.0);
    RefinerParams::random(variant, side, k, 0.5, [alpha, alpha + 0.3], rng).expect("valid refiner")
}

fn random_geometry(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let side = [2, 3, 4][rng.random_range(0..3)];
    let k = [1, 2, 4][rng.random_range(0..3)];
    (rng.random_range(8..=16), rng.random_range(8..=16), side, k)
}

/// Filtering-form output against the patch form; max relative deviation.
pub fn check_conv_patch(trials: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (w, h, side, k) = random_geometry(&mut rng);
        let variant = RefinerVariant::ALL[t % 4];
        let params = random_refiner(&mut rng, variant, side, k);
        let (xw, xb) = random_image_pair(&mut rng, w, h);
        let a = refine(&params, &xw, &xb).expect("patch path");
        let b = refine_conv(&params, &xw, &xb).expect("conv path");
        let scale = a.0.data().iter().chain(a.1.data()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for (p, q) in a.0.data().iter().zip(b.0.data()).chain(a.1.data().iter().zip(b.1.data())) {
            worst = worst.max((p - q).abs() / scale);
        }
    }
    CheckReport::new("conv_patch_equivalence", trials, worst, 1e-9)
}

/// Image-domain refiner loss is bounded by the patch loss divided by `R`;
/// reports the largest violation relative to the patch loss (0 when the bound holds).
pub fn check_loss_bound(trials: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (w, h, side, k) = random_geometry(&mut rng);
        let params = random_refiner(&mut rng, RefinerVariant::DistinctCross, side, k);
        let target = random_image_pair(&mut rng, w, h);
        let input = random_image_pair(&mut rng, w, h);
        let (conv, patch) = bound_sides(&params, &target, &input);
        worst = worst.max((conv - patch).max(0.0) / patch.max(1e-300));
    }
    CheckReport::new("loss_bound", trials, worst, 1e-12)
}

/// `(‖x − R(x_in)‖², (1/R)‖X̃ − D T(E X̃_in)‖²_F)` for one image pair.
pub fn bound_sides(
    params: &RefinerParams,
    target: &(MaterialImage, MaterialImage),
    input: &(MaterialImage, MaterialImage),
) -> (f64, f64) {
    let out = refine_conv(params, &input.0, &input.1).expect("conv path");
    let conv: f64 = out
        .0
        .data()
        .iter()
        .zip(target.0.data())
        .chain(out.1.data().iter().zip(target.1.data()))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let xt = extract_patches(&target.0, &target.1, params.side()).expect("patches");
    let xi = extract_patches(&input.0, &input.1, params.side()).expect("patches");
    let n = xt.ncols() as f64;
    let patch = loss(params, xt.view(), xi.view()).expect("loss") * n / params.patch_len() as f64;
    (conv, patch)
}

/// Places every threshold in a gap of the pre-activation magnitudes so that
/// no entry sits within `margin` of its threshold.
pub fn separate_thresholds(params: &RefinerParams, input: &Array2<f64>, margin: f64, rng: &mut ChaCha8Rng) -> RefinerParams {
    let h = params.e().dot(input);
    let mut alpha = params.alpha().clone();
    for (row, a) in h.rows().into_iter().zip(alpha.iter_mut()) {
        let mut mags: Vec<f64> = row.iter().map(|v| v.abs()).collect();
        mags.push(0.0);
        mags.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let gaps: Vec<(f64, f64)> = mags
            .windows(2)
            .filter(|p| p[1] - p[0] > 2.0 * margin && p[0] + margin > 1e-2)
            .map(|p| (p[0] + margin, p[1] - margin))
            .chain(std::iter::once((mags[mags.len() - 1] + margin, mags[mags.len() - 1] + 1.0)))
            .collect();
        let (lo, hi) = gaps[rng.random_range(0..gaps.len())];
        *a = rng.random_range(lo..hi).ln();
    }
    RefinerParams::new(params.variant(), params.side(), params.k(), params.d().clone(), params.e().clone(), alpha)
        .expect("valid refiner")
}

/// Analytic subgradients against central differences for all four variants.
/// Each free parameter is perturbed through the variant's projection.
pub fn check_gradients(trials: usize, seed: u64, grad: GradientFn) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let variant = RefinerVariant::ALL[t % 4];
        let side = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let cols = rng.random_range(2..=6);
        let rows = 2 * side * side;
        let input = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0));
        let base = random_refiner(&mut rng, variant, side, k);
        let params = separate_thresholds(&base, &input, 1e-3, &mut rng);
        let batch = MiniBatch::new(target.clone(), input.clone()).expect("batch");
        let g = grad(&params, &batch).expect("gradient");
        worst = worst.max(gradient_error(&params, &g, &target, &input));
    }
    CheckReport::new("gradient_finite_difference", trials, worst, 1e-5)
}

fn gradient_error(params: &RefinerParams, g: &GradientBatch, target: &Array2<f64>, input: &Array2<f64>) -> f64 {
    let f = |d: Array2<f64>, e: Array2<f64>, a| {
        let p = RefinerParams::new_projected(params.variant(), params.side(), params.k(), d, e, a).expect("valid");
        loss(&p, target.view(), input.view()).expect("loss")
    };
    let h = 1e-4;
    // Five-point central stencil.
    let stencil = |at: &dyn Fn(f64) -> f64| (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
    let mut worst: f64 = 0.0;
    let mut cmp = |fd: f64, an: f64| worst = worst.max((fd - an).abs() / (fd.abs() + 1e-8));
    if !params.variant().is_identical() {
        for (r, c) in ndarray::indices(params.d().dim()) {
            let at = |s: f64| {
                let mut d = params.d().clone();
                d[[r, c]] += s;
                f(d, params.e().clone(), params.alpha().clone())
            };
            cmp(stencil(&at), g.gd[[r, c]]);
        }
    }
    for (r, c) in ndarray::indices(params.e().dim()) {
        let at = |s: f64| {
            let mut e = params.e().clone();
            e[[r, c]] += s;
            f(params.d().clone(), e, params.alpha().clone())
        };
        cmp(stencil(&at), g.ge[[r, c]]);
    }
    for i in 0..params.alpha().len() {
        let at = |s: f64| {
            let mut a = params.alpha().clone();
            a[i] += s;
            f(params.d().clone(), params.e().clone(), a)
        };
        cmp(stencil(&at), g.galpha[i]);
    }
    worst
}

/// A DistinctCross refiner holding another variant's constrained
/// parameters must give bit-identical outputs; reports mismatching pixels.
pub fn check_variant_specialization(trials: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let others = [
        RefinerVariant::IdenticalIndividual,
        RefinerVariant::DistinctIndividual,
        RefinerVariant::IdenticalCross,
    ];
    for t in 0..trials {
        let (w, h, side, k) = random_geometry(&mut rng);
        let variant = others[t % 3];
        let special = random_refiner(&mut rng, variant, side, k);
        let general = special.with_variant(RefinerVariant::DistinctCross).expect("relabel");
        let (xw, xb) = random_image_pair(&mut rng, w, h);
        let a = refine(&special, &xw, &xb).expect("refine");
        let b = refine(&general, &xw, &xb).expect("refine");
        mismatches += a
            .0
            .data()
            .iter()
            .zip(b.0.data())
            .chain(a.1.data().iter().zip(b.1.data()))
            .filter(|(p, q)| p.to_bits() != q.to_bits())
            .count();
    }
    CheckReport::new("variant_specialization", trials, mismatches as f64, 0.0)
}

struct MbidInstance {
    physics: DecompPhysics,
    y: AttenuationPair,
    z: (MaterialImage, MaterialImage),
    beta: f64,
}

fn mbid_instances(trials: usize, seed: u64) -> Vec<MbidInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let a0: [[f64; 2]; 2] = [
            [rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)],
            [rng.random_range(0.1..0.4), rng.random_range(0.4..0.9)],
        ];
        if (a0[0][0] * a0[1][1] - a0[0][1] * a0[1][0]).abs() < 1e-3 {
            continue;
        }
        let physics = DecompPhysics::new(a0, [rng.random_range(1.0..1e4), rng.random_range(1.0..1e4)]).expect("physics");
        let (w, h) = (rng.random_range(2..6), rng.random_range(2..6));
        let (gh, gl) = random_image_pair(&mut rng, w, h);
        let y = AttenuationPair::new(gh.into_grid(), gl.into_grid()).expect("pair");
        let z = random_image_pair(&mut rng, w, h);
        let beta = rng.random_range(0.1..1e3);
        out.push(MbidInstance { physics, y, z, beta });
    }
    out
}

/// Norm of the per-pixel cost gradient at the closed-form MBID solution,
/// scaled by `(‖a0ᵀW0a0‖ + 2β)(|x| + 1)`.
pub fn check_mbid_stationarity(trials: usize, seed: u64) -> CheckReport {
    let mut worst: f64 = 0.0;
    for inst in mbid_instances(trials, seed) {
        let MbidInstance { physics, y, z, beta } = &inst;
        let x = mbid_update(y, (&z.0, &z.1), physics, *beta).expect("mbid");
        let n = physics.normal_matrix();
        for j in 0..y.high().len() {
            let yj = [y.high().data()[j], y.low().data()[j]];
            let xj = [x.0.data()[j], x.1.data()[j]];
            let g = physics.data_fit_gradient(yj, xj);
            let gr = [
                g[0] + 2.0 * beta * (xj[0] - z.0.data()[j]),
                g[1] + 2.0 * beta * (xj[1] - z.1.data()[j]),
            ];
            let scale = (n[0][0].abs() + n[1][1].abs() + 2.0 * beta) * (xj[0].abs() + xj[1].abs() + 1.0);
            worst = worst.max(gr[0].hypot(gr[1]) / scale);
        }
    }
    CheckReport::new("mbid_stationarity", trials, worst, 1e-10)
}

/// β = 0 against direct inversion, relative per pixel.
pub fn check_mbid_zero_beta(trials: usize, seed: u64) -> CheckReport {
    let mut worst: f64 = 0.0;
    for inst in mbid_instances(trials, seed) {
        let di = direct_inversion(&inst.y, &inst.physics).expect("direct inversion");
        let x0 = mbid_update(&inst.y, (&inst.z.0, &inst.z.1), &inst.physics, 0.0).expect("mbid");
        for (p, q) in x0.0.data().iter().zip(di.0.data()).chain(x0.1.data().iter().zip(di.1.data())) {
            worst = worst.max((p - q).abs() / q.abs().max(1.0));
        }
    }
    CheckReport::new("mbid_zero_beta", trials, worst, 1e-12)
}

/// β = 1e12 pins the solution to the prior: `‖x − z‖ / ‖z‖`.
pub fn check_mbid_large_beta(trials: usize, seed: u64) -> CheckReport {
    let mut worst: f64 = 0.0;
    for inst in mbid_instances(trials, seed) {
        let z = &inst.z;
        let x = mbid_update(&inst.y, (&z.0, &z.1), &inst.physics, 1e12).expect("mbid");
        let num: f64 = x
            .0
            .data()
            .iter()
            .zip(z.0.data())
            .chain(x.1.data().iter().zip(z.1.data()))
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let den: f64 = z.0.data().iter().chain(z.1.data()).map(|v| v * v).sum();
        worst = worst.max((num / den).sqrt());
    }
    CheckReport::new("mbid_large_beta", trials, worst, 1e-6)
}

/// Runs every suite with `trials` instances each.
pub fn run_all(trials: usize, seed: u64) -> Vec<CheckReport> {
    run_all_with_gradient(trials, seed, gradient)
}

pub fn run_all_with_gradient(trials: usize, seed: u64, grad: GradientFn) -> Vec<CheckReport> {
    vec![
        check_conv_patch(trials, seed),
        check_loss_bound(trials, seed.wrapping_add(1)),
        check_gradients(trials, seed.wrapping_add(2), grad),
        check_variant_specialization(trials, seed.wrapping_add(3)),
        check_mbid_stationarity(trials, seed.wrapping_add(4)),
        check_mbid_zero_beta(trials, seed.wrapping_add(5)),
        check_mbid_large_beta(trials, seed.wrapping_add(6)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(20, 3) {
            assert!(r.passed, "{}", r.line());
        }
    }

    fn flipped(params: &RefinerParams, batch: &MiniBatch) -> Result<GradientBatch> {
        let mut g = gradient(params, batch)?;
        g.ge.mapv_inplace(|v| -v);
        Ok(g)
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let r = check_gradients(8, 1, flipped);
        assert!(!r.passed, "{}", r.line());
    }
}
