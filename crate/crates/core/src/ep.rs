//! DECT-EP baseline: WLS decomposition with an edge-preserving hyperbola
//! penalty on 8-neighbor differences, solved by monotone gradient descent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AttenuationPair, Material, MaterialImage};
use crate::physics::{sym2_eigenvalues, DecompPhysics};

/// 8-connected neighborhood offsets `(drow, dcol)`.
pub const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpConfig {
    /// Per-material (water, bone) penalty weights.
    pub beta: [f64; 2],
    /// Per-material hyperbola parameters, g/cm³.
    pub delta: [f64; 2],
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Maximum step halvings per iteration.
    #[serde(default = "default_backtracks")]
    pub max_backtracks: usize,
}

fn default_iterations() -> usize {
    500
}
fn default_backtracks() -> usize {
    40
}

impl Default for EpConfig {
    fn default() -> Self {
        Self::new([256.0, 2f64.powf(8.5)], [0.01, 0.02])
    }
}

impl EpConfig {
    pub fn new(beta: [f64; 2], delta: [f64; 2]) -> Self {
        Self {
            beta,
            delta,
            iterations: default_iterations(),
            max_backtracks: default_backtracks(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument(format!("EP beta must be >= 0, got {:?}", self.beta)));
        }
        if self.delta.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidArgument(format!("EP delta must be > 0, got {:?}", self.delta)));
        }
        Ok(())
    }
}

/// `ψ(t) = (δ²/3)(√(1 + 3(t/δ)²) − 1)`
pub fn ep_potential(t: f64, delta: f64) -> f64 {
    let u = t / delta;
    let s = 3.0 * u * u;
    delta * delta / 3.0 * (s / ((1.0 + s).sqrt() + 1.0))
}

/// `ψ'(t) = t / √(1 + 3(t/δ)²)`
pub fn ep_potential_derivative(t: f64, delta: f64) -> f64 {
    let u = t / delta;
    t / (1.0 + 3.0 * u * u).sqrt()
}

struct Layout {
    width: usize,
    height: usize,
}

impl Layout {
    fn neighbor(&self, j: usize, off: (isize, isize)) -> usize {
        let (row, col) = ((j / self.width) as isize, (j % self.width) as isize);
        let r = (row + off.0).rem_euclid(self.height as isize) as usize;
        let c = (col + off.1).rem_euclid(self.width as isize) as usize;
        r * self.width + c
    }
}

/// Full EP objective at `x = (water, bone)`.
pub fn ep_cost(y: &AttenuationPair, physics: &DecompPhysics, cfg: &EpConfig, x: [&[f64]; 2]) -> Result<f64> {
    cfg.validate()?;
    check_len(y, x)?;
    Ok(cost_unchecked(y, physics, cfg, x))
}

/// Gradient of [`ep_cost`].
pub fn ep_gradient(
    y: &AttenuationPair,
    physics: &DecompPhysics,
    cfg: &EpConfig,
    x: [&[f64]; 2],
) -> Result<[Vec<f64>; 2]> {
    cfg.validate()?;
    check_len(y, x)?;
    Ok(gradient_unchecked(y, physics, cfg, x))
}

fn check_len(y: &AttenuationPair, x: [&[f64]; 2]) -> Result<()> {
    let n = y.high().len();
    if x[0].len() != n || x[1].len() != n {
        return Err(Error::Geometry(format!(
            "EP iterate has {} / {} pixels, measurements have {n}",
            x[0].len(),
            x[1].len()
        )));
    }
    Ok(())
}

fn layout(y: &AttenuationPair) -> Layout {
    Layout {
        width: y.high().width(),
        height: y.high().height(),
    }
}

fn cost_unchecked(y: &AttenuationPair, physics: &DecompPhysics, cfg: &EpConfig, x: [&[f64]; 2]) -> f64 {
    let lay = layout(y);
    let (yh, yl) = (y.high().data(), y.low().data());
    let w = lay.width;
    let row_costs: Vec<f64> = (0..lay.height)
        .into_par_iter()
        .map(|row| {
            let mut acc = 0.0;
            for j in row * w..(row + 1) * w {
                acc += physics.data_fit([yh[j], yl[j]], [x[0][j], x[1][j]]);
                for m in 0..2 {
                    if cfg.beta[m] == 0.0 {
                        continue;
                    }
                    let mut reg = 0.0;
                    for &off in &NEIGHBORS {
                        reg += ep_potential(x[m][j] - x[m][lay.neighbor(j, off)], cfg.delta[m]);
                    }
                    acc += cfg.beta[m] * reg;
                }
            }
            acc
        })
        .collect();
    row_costs.iter().sum()
}

fn gradient_unchecked(y: &AttenuationPair, physics: &DecompPhysics, cfg: &EpConfig, x: [&[f64]; 2]) -> [Vec<f64>; 2] {
    let lay = layout(y);
    let (yh, yl) = (y.high().data(), y.low().data());
    let g: Vec<[f64; 2]> = (0..yh.len())
        .into_par_iter()
        .map(|j| {
            let mut gj = physics.data_fit_gradient([yh[j], yl[j]], [x[0][j], x[1][j]]);
            for m in 0..2 {
                if cfg.beta[m] == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for &(dr, dc) in &NEIGHBORS {
                    // j appears as the center of its own pairs and as the
                    // neighbor of the pixel at j - off.
                    let fwd = lay.neighbor(j, (dr, dc));
                    let back = lay.neighbor(j, (-dr, -dc));
                    acc += ep_potential_derivative(x[m][j] - x[m][fwd], cfg.delta[m]);
                    acc -= ep_potential_derivative(x[m][back] - x[m][j], cfg.delta[m]);
                }
                gj[m] += cfg.beta[m] * acc;
            }
            gj
        })
        .collect();
    let (gw, gb) = g.into_iter().map(|[a, b]| (a, b)).unzip();
    [gw, gb]
}

#[derive(Clone, Debug)]
pub struct EpResult {
    pub water: MaterialImage,
    pub bone: MaterialImage,
    /// Cost at the initial point followed by one entry per iteration.
    pub cost_history: Vec<f64>,
}

/// Lipschitz bound for the objective's gradient: data term plus the
/// Gershgorin bound `4·R_EP·β_m` of the penalty Hessian (ψ'' ≤ 1).
pub fn ep_lipschitz(physics: &DecompPhysics, cfg: &EpConfig) -> f64 {
    let data = sym2_eigenvalues(&physics.normal_matrix())[1];
    let beta_max = cfg.beta[0].max(cfg.beta[1]);
    data + 4.0 * NEIGHBORS.len() as f64 * beta_max
}

/// Gradient descent from `x0` with step `1/L̂`, halving the step whenever
/// the cost would increase, so the recorded cost never goes up.
pub fn ep_decompose(
    y: &AttenuationPair,
    physics: &DecompPhysics,
    cfg: &EpConfig,
    x0: (&MaterialImage, &MaterialImage),
) -> Result<EpResult> {
    cfg.validate()?;
    physics.validate()?;
    y.high().check_same_geometry(x0.0.grid(), "EP initial water")?;
    y.high().check_same_geometry(x0.1.grid(), "EP initial bone")?;
    let mut xw = x0.0.data().to_vec();
    let mut xb = x0.1.data().to_vec();
    let mut cost = cost_unchecked(y, physics, cfg, [&xw, &xb]);
    if !cost.is_finite() {
        return Err(Error::Diverged("EP cost at the initial point".into()));
    }
    let base_step = 1.0 / ep_lipschitz(physics, cfg);
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    history.push(cost);
    let mut cw = vec![0.0; xw.len()];
    let mut cb = vec![0.0; xb.len()];
    for it in 0..cfg.iterations {
        let [gw, gb] = gradient_unchecked(y, physics, cfg, [&xw, &xb]);
        let mut step = base_step;
        for _ in 0..=cfg.max_backtracks {
            for j in 0..xw.len() {
                cw[j] = xw[j] - step * gw[j];
                cb[j] = xb[j] - step * gb[j];
            }
            let c = cost_unchecked(y, physics, cfg, [&cw, &cb]);
            if !c.is_finite() {
                return Err(Error::Diverged(format!("EP cost at iteration {}", it + 1)));
            }
            if c <= cost {
                std::mem::swap(&mut xw, &mut cw);
                std::mem::swap(&mut xb, &mut cb);
                cost = c;
                break;
            }
            step *= 0.5;
        }
        history.push(cost);
    }
    let grid = y.high();
    Ok(EpResult {
        water: MaterialImage::new(grid.with_data(xw)?, Material::Water),
        bone: MaterialImage::new(grid.with_data(xb)?, Material::Bone),
        cost_history: history,
    })
}

pub fn cost_csv(history: &[f64]) -> String {
    let mut out = String::from("iteration,cost\n");
    for (i, c) in history.iter().enumerate() {
        out.push_str(&format!("{i},{c:.17e}\n"));
    }
    out
}
