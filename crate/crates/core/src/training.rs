//! Patch-based refiner training: loss, hand-derived subgradients, Adam.
//!
//! With `H = E X_prev`, `Z = T_{exp(α)}(H)` and residual `Res = X − D Z`:
//!
//! ```text
//! loss   = (1/B) ‖Res‖²_F
//! ∂/∂D   = −(2/B) Res Zᵀ
//! ∂/∂E   = −(2/B) (Dᵀ Res ⊙ 1{|H| > exp(α)}) X_prevᵀ
//! ∂/∂α   =  (2/B) (Dᵀ Res ⊙ exp(α) ⊙ sign(Z)) 1
//! ```
//!
//! For the tied decoder `D = Eᵀ` the encoder gradient picks up the decoder's
//! contribution as a second term, `−(2/B) Z Resᵀ`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refiner::{shrink_rows, RefinerParams, RefinerVariant};

/// Columns per gradient work unit; fixed so sums do not depend on thread count.
const GRAD_CHUNK: usize = 256;
/// Columns per streaming loss evaluation block.
const LOSS_CHUNK: usize = 4096;

/// Paired target/input patch matrices (`2R × P`).
#[derive(Clone, Debug)]
pub struct TrainingCorpus {
    target: Array2<f64>,
    input: Array2<f64>,
}

impl TrainingCorpus {
    pub fn new(target: Array2<f64>, input: Array2<f64>) -> Result<Self> {
        if target.dim() != input.dim() {
            return Err(Error::Shape(format!(
                "target {:?} vs input {:?}",
                target.dim(),
                input.dim()
            )));
        }
        if target.ncols() == 0 || target.nrows() == 0 || target.nrows() % 2 != 0 {
            return Err(Error::Shape(format!("corpus shape {:?}", target.dim())));
        }
        Ok(Self { target, input })
    }

    /// Concatenates per-image patch matrices column-wise.
    pub fn from_parts(parts: &[(Array2<f64>, Array2<f64>)]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty training corpus".into()));
        }
        let targets: Vec<_> = parts.iter().map(|(t, _)| t.view()).collect();
        let inputs: Vec<_> = parts.iter().map(|(_, i)| i.view()).collect();
        let cat = |v: &[ArrayView2<f64>]| {
            ndarray::concatenate(Axis(1), v).map_err(|e| Error::Shape(e.to_string()))
        };
        Self::new(cat(&targets)?, cat(&inputs)?)
    }

    pub fn target(&self) -> &Array2<f64> {
        &self.target
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.input
    }

    /// Number of patch pairs `P`.
    pub fn len(&self) -> usize {
        self.target.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacked patch length `2R`.
    pub fn rows(&self) -> usize {
        self.target.nrows()
    }

    pub fn batch(&self, columns: &[usize]) -> MiniBatch {
        MiniBatch {
            target: self.target.select(Axis(1), columns),
            input: self.input.select(Axis(1), columns),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub target: Array2<f64>,
    pub input: Array2<f64>,
}

impl MiniBatch {
    pub fn new(target: Array2<f64>, input: Array2<f64>) -> Result<Self> {
        if target.dim() != input.dim() || target.ncols() == 0 {
            return Err(Error::Shape(format!(
                "mini-batch target {:?} vs input {:?}",
                target.dim(),
                input.dim()
            )));
        }
        Ok(Self { target, input })
    }

    pub fn size(&self) -> usize {
        self.target.ncols()
    }
}

fn default_batch_size() -> usize {
    10_000
}
fn default_epochs() -> usize {
    50
}
fn default_lr0() -> f64 {
    3e-4
}
fn default_lr_decay() -> f64 {
    0.9
}
fn default_lr_period() -> usize {
    5
}
fn default_filter_std() -> f64 {
    0.1
}

/// Optimizer and initialization settings for one refiner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    #[serde(default = "default_lr_period")]
    pub lr_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial log-thresholds for the (water, bone) groups. `None` picks
    /// `ln 0.88` for both groups in cross variants and `(ln 0.88, ln 0.8)` otherwise.
    #[serde(default)]
    pub alpha_init: Option<[f64; 2]>,
    #[serde(default = "default_filter_std")]
    pub filter_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lr0: default_lr0(),
            lr_decay: default_lr_decay(),
            lr_period: default_lr_period(),
            seed: 0,
            alpha_init: None,
            filter_init_std: default_filter_std(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            problems.push(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            problems.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.lr_period == 0 {
            problems.push("lr_period must be >= 1".to_string());
        }
        if !(self.filter_init_std > 0.0 && self.filter_init_std.is_finite()) {
            problems.push(format!("filter_init_std must be > 0, got {}", self.filter_init_std));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    pub fn alpha_init_for(&self, variant: RefinerVariant) -> [f64; 2] {
        self.alpha_init.unwrap_or(if variant.is_individual() {
            [0.88f64.ln(), 0.8f64.ln()]
        } else {
            [0.88f64.ln(), 0.88f64.ln()]
        })
    }

    /// Step size during 0-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_period) as i32)
    }
}

/// Subgradients for one mini-batch, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBatch {
    pub gd: Array2<f64>,
    pub ge: Array2<f64>,
    pub galpha: Array1<f64>,
}

impl GradientBatch {
    fn zeros_like(params: &RefinerParams) -> Self {
        Self {
            gd: Array2::zeros(params.d().dim()),
            ge: Array2::zeros(params.e().dim()),
            galpha: Array1::zeros(params.alpha().len()),
        }
    }

    fn add_assign(&mut self, other: &GradientBatch) {
        self.gd += &other.gd;
        self.ge += &other.ge;
        self.galpha += &other.galpha;
    }

    fn scale(&mut self, c: f64) {
        self.gd *= c;
        self.ge *= c;
        self.galpha *= c;
    }

    pub fn is_finite(&self) -> bool {
        self.gd
            .iter()
            .chain(self.ge.iter())
            .chain(self.galpha.iter())
            .all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.gd
            .iter()
            .chain(self.ge.iter())
            .chain(self.galpha.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_shapes(params: &RefinerParams, target: ArrayView2<f64>, input: ArrayView2<f64>) -> Result<()> {
    let rows = 2 * params.patch_len();
    if target.nrows() != rows || input.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "refiner expects {rows}-row patches, got target {:?} input {:?}",
            target.dim(),
            input.dim()
        )));
    }
    Ok(())
}

/// Unnormalized squared residual `‖X − D T(E X_prev)‖²_F`, accumulated in column blocks.
fn residual_sq(params: &RefinerParams, target: ArrayView2<f64>, input: ArrayView2<f64>) -> f64 {
    let thresholds = params.thresholds();
    let n = target.ncols();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + LOSS_CHUNK).min(n);
        let mut h = params.e().dot(&input.slice(s![.., start..end]));
        shrink_rows(&mut h, &thresholds);
        let mut res = params.d().dot(&h);
        res.zip_mut_with(&target.slice(s![.., start..end]), |r, &x| *r = x - *r);
        total += res.iter().map(|v| v * v).sum::<f64>();
        start = end;
    }
    total
}

/// `(1/P) ‖X̃ − D T_{exp(α)}(E X̃_prev)‖²_F`.
pub fn loss(params: &RefinerParams, target: ArrayView2<f64>, input: ArrayView2<f64>) -> Result<f64> {
    check_shapes(params, target, input)?;
    if target.ncols() == 0 {
        return Err(Error::Shape("empty patch matrix".into()));
    }
    Ok(residual_sq(params, target, input) / target.ncols() as f64)
}

pub fn corpus_loss(params: &RefinerParams, corpus: &TrainingCorpus) -> Result<f64> {
    loss(params, corpus.target().view(), corpus.input().view())
}

/// Unscaled gradient sums over a column block; caller applies `2/B`.
fn gradient_sums(params: &RefinerParams, target: ArrayView2<f64>, input: ArrayView2<f64>, tied: bool) -> GradientBatch {
    let thresholds = params.thresholds();
    let h = params.e().dot(&input);
    let mut z = h.clone();
    shrink_rows(&mut z, &thresholds);
    let mut res = params.d().dot(&z);
    res.zip_mut_with(&target, |r, &x| *r = x - *r);
    // Dᵀ Res; equals E Res when tied.
    let back = params.d().t().dot(&res);

    let mut masked = back.clone();
    Zip::from(masked.rows_mut())
        .and(h.rows())
        .and(&thresholds)
        .for_each(|mut mrow, hrow, &t| {
            mrow.zip_mut_with(&hrow, |g, &hv| {
                if hv.abs() <= t {
                    *g = 0.0;
                }
            })
        });
    let mut ge = masked.dot(&input.t());
    ge.mapv_inplace(|v| -v);

    let mut galpha = Array1::zeros(thresholds.len());
    for (i, ((brow, zrow), &t)) in back.rows().into_iter().zip(z.rows()).zip(&thresholds).enumerate() {
        let mut acc = 0.0;
        for (&g, &zv) in brow.iter().zip(zrow.iter()) {
            if zv > 0.0 {
                acc += g;
            } else if zv < 0.0 {
                acc -= g;
            }
        }
        galpha[i] = acc * t;
    }

    let decoder_grad = {
        let mut g = res.dot(&z.t());
        g.mapv_inplace(|v| -v);
        g
    };
    if tied {
        ge += &decoder_grad.t();
        GradientBatch {
            gd: Array2::zeros(params.d().dim()),
            ge,
            galpha,
        }
    } else {
        GradientBatch {
            gd: decoder_grad,
            ge,
            galpha,
        }
    }
}

fn batch_gradient(params: &RefinerParams, batch: &MiniBatch, tied: bool) -> Result<GradientBatch> {
    check_shapes(params, batch.target.view(), batch.input.view())?;
    let b = batch.size();
    if b == 0 {
        return Err(Error::Shape("empty mini-batch".into()));
    }
    let starts: Vec<usize> = (0..b).step_by(GRAD_CHUNK).collect();
    let partials: Vec<GradientBatch> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + GRAD_CHUNK).min(b);
            gradient_sums(
                params,
                batch.target.slice(s![.., start..end]),
                batch.input.slice(s![.., start..end]),
                tied,
            )
        })
        .collect();
    let mut total = GradientBatch::zeros_like(params);
    for p in &partials {
        total.add_assign(p);
    }
    total.scale(2.0 / b as f64);
    mask_cross_blocks(params, &mut total);
    Ok(total)
}

/// Zeroes gradient entries of parameters the variant pins to zero.
fn mask_cross_blocks(params: &RefinerParams, g: &mut GradientBatch) {
    if !params.variant().is_individual() {
        return;
    }
    let (r_len, k) = (params.patch_len(), params.k());
    g.ge.slice_mut(s![0..k, r_len..]).fill(0.0);
    g.ge.slice_mut(s![k.., 0..r_len]).fill(0.0);
    g.gd.slice_mut(s![0..r_len, k..]).fill(0.0);
    g.gd.slice_mut(s![r_len.., 0..k]).fill(0.0);
}

/// Subgradients for free decoder variants (distinct cross / distinct individual).
pub fn grad_distinct(params: &RefinerParams, batch: &MiniBatch) -> Result<GradientBatch> {
    if params.variant().is_identical() {
        return Err(Error::Variant(format!(
            "grad_distinct called with {}",
            params.variant()
        )));
    }
    batch_gradient(params, batch, false)
}

/// Subgradients for tied decoder variants (identical cross / identical individual).
/// `gd` is all zeros; the decoder's contribution is folded into `ge`.
pub fn grad_identical(params: &RefinerParams, batch: &MiniBatch) -> Result<GradientBatch> {
    if !params.variant().is_identical() {
        return Err(Error::Variant(format!(
            "grad_identical called with {}",
            params.variant()
        )));
    }
    batch_gradient(params, batch, true)
}

/// Dispatches to the gradient routine matching the variant.
pub fn gradient(params: &RefinerParams, batch: &MiniBatch) -> Result<GradientBatch> {
    if params.variant().is_identical() {
        grad_identical(params, batch)
    } else {
        grad_distinct(params, batch)
    }
}

/// Column-index batches for one epoch: a seeded permutation of `0..p` cut into
/// chunks of `b` (the last may be short).
pub fn sample_batches(p: usize, b: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if b == 0 || b > p {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} must be in 1..={p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(&mut rng);
    Ok(perm.chunks(b).map(<[usize]>::to_vec).collect())
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: RefinerParams,
    /// Row 0 is the loss at initialization; then one row per epoch.
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.curve[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().unwrap().loss
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,step,loss,learning_rate\n");
    for p in curve {
        out.push_str(&format!("{},{},{:.17e},{:.17e}\n", p.epoch, p.step, p.loss, p.learning_rate));
    }
    out
}

fn patch_side(rows: usize) -> Result<usize> {
    let r_len = rows / 2;
    let side = (r_len as f64).sqrt().round() as usize;
    if side * side != r_len || side == 0 {
        return Err(Error::Shape(format!(
            "patch length {r_len} is not a square"
        )));
    }
    Ok(side)
}

/// Trains one refiner from a fresh seeded initialization with Adam.
pub fn train_refiner(
    corpus: &TrainingCorpus,
    variant: RefinerVariant,
    k: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let side = patch_side(corpus.rows())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = RefinerParams::random(
        variant,
        side,
        k,
        cfg.filter_init_std,
        cfg.alpha_init_for(variant),
        &mut init_rng,
    )?;
    let p = corpus.len();
    let batch_size = cfg.batch_size.min(p);

    let (nd, ne, na) = (params.d().len(), params.e().len(), params.alpha().len());
    let mut adam = Adam::new(nd + ne + na);
    let mut flat = vec![0.0; nd + ne + na];
    let mut flat_grad = vec![0.0; nd + ne + na];

    let mut curve = vec![CurvePoint {
        epoch: 0,
        step: 0,
        loss: checked_loss(&params, corpus, 0)?,
        learning_rate: cfg.learning_rate(0),
    }];
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        for cols in sample_batches(p, batch_size, cfg.seed, epoch)? {
            let batch = corpus.batch(&cols);
            let g = gradient(&params, &batch)?;
            if !g.is_finite() {
                return Err(Error::Diverged(format!(
                    "gradient at epoch {} step {step}",
                    epoch + 1
                )));
            }
            {
                let (d, e, a) = params.parts_mut();
                pack(&mut flat, d, e, a);
                pack_grad(&mut flat_grad, &g);
                adam.step(&mut flat, &flat_grad, lr);
                unpack(&flat, d, e, a);
            }
            params.reproject();
            step += 1;
        }
        curve.push(CurvePoint {
            epoch: epoch + 1,
            step,
            loss: checked_loss(&params, corpus, epoch + 1)?,
            learning_rate: lr,
        });
    }
    params.check_constraints()?;
    Ok(TrainOutcome { params, curve })
}

fn checked_loss(params: &RefinerParams, corpus: &TrainingCorpus, epoch: usize) -> Result<f64> {
    let l = corpus_loss(params, corpus)?;
    if !l.is_finite() {
        return Err(Error::Diverged(format!("training loss after epoch {epoch}")));
    }
    Ok(l)
}

fn pack(flat: &mut [f64], d: &Array2<f64>, e: &Array2<f64>, a: &Array1<f64>) {
    for (dst, src) in flat.iter_mut().zip(d.iter().chain(e.iter()).chain(a.iter())) {
        *dst = *src;
    }
}

fn pack_grad(flat: &mut [f64], g: &GradientBatch) {
    for (dst, src) in flat
        .iter_mut()
        .zip(g.gd.iter().chain(g.ge.iter()).chain(g.galpha.iter()))
    {
        *dst = *src;
    }
}

fn unpack(flat: &[f64], d: &mut Array2<f64>, e: &mut Array2<f64>, a: &mut Array1<f64>) {
    for (dst, src) in d
        .iter_mut()
        .chain(e.iter_mut())
        .chain(a.iter_mut())
        .zip(flat)
    {
        *dst = *src;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Elementwise loss, written without matrix products.
    fn brute_loss(p: &RefinerParams, x: &Array2<f64>, xp: &Array2<f64>) -> f64 {
        let (rows, cols) = x.dim();
        let hidden = p.e().nrows();
        let mut total = 0.0;
        for b in 0..cols {
            let mut z = vec![0.0; hidden];
            for (i, zi) in z.iter_mut().enumerate() {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += p.e()[[i, r]] * xp[[r, b]];
                }
                let t = p.alpha()[i].exp();
                *zi = if acc.abs() > t { acc - t * acc.signum() } else { 0.0 };
            }
            for r in 0..rows {
                let mut out = 0.0;
                for (i, zi) in z.iter().enumerate() {
                    out += p.d()[[r, i]] * zi;
                }
                total += (x[[r, b]] - out).powi(2);
            }
        }
        total / cols as f64
    }

    fn random_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> MiniBatch {
        MiniBatch::new(
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0)),
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = RefinerParams::random(RefinerVariant::DistinctCross, 2, 2, 0.3, [-1.0, -1.0], &mut rng).unwrap();
        let batch = random_batch(8, 5, &mut rng);
        let l = loss(&p, batch.target.view(), batch.input.view()).unwrap();
        assert!((l - brute_loss(&p, &batch.target, &batch.input)).abs() <= 1e-12 * l.max(1.0));

        p.parts_mut().1.fill(0.0);
        let l = loss(&p, batch.target.view(), batch.input.view()).unwrap();
        let energy = batch.target.iter().map(|v| v * v).sum::<f64>() / 5.0;
        assert!((l - energy).abs() < 1e-14);
        let zero = Array2::zeros((8, 5));
        assert_eq!(loss(&p, zero.view(), batch.input.view()).unwrap(), 0.0);
        assert!(loss(&p, Array2::zeros((6, 5)).view(), Array2::zeros((6, 5)).view()).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in RefinerVariant::ALL {
            let p = RefinerParams::random(variant, 2, 2, 0.4, [-2.0, -2.0], &mut rng).unwrap();
            let input = Array2::from_shape_simple_fn((8, 6), || rng.random_range(-1.0..1.0));
            let target = crate::refiner::refine_patch_matrix(&p, input.view());
            let g = gradient(&p, &MiniBatch::new(target, input).unwrap()).unwrap();
            assert!(g.max_abs() < 1e-14, "{variant}: {}", g.max_abs());
        }
    }

    #[test]
    fn dead_network_has_no_decoder_or_threshold_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = RefinerParams::random(RefinerVariant::DistinctCross, 2, 3, 0.4, [-2.0, -2.0], &mut rng).unwrap();
        p.parts_mut().1.fill(0.0);
        let g = grad_distinct(&p, &random_batch(8, 7, &mut rng)).unwrap();
        assert!(g.gd.iter().all(|&v| v == 0.0));
        assert!(g.galpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_identical_gradient_matches_hand_derivation() {
        // R = 1, K = 1 per material, individual: per material loss (x − e·T(e·u))².
        let e_w = 1.3;
        let e_b = -0.7;
        let alpha = [(-0.5f64), (-1.0f64)];
        let mut e = Array2::zeros((2, 2));
        e[[0, 0]] = e_w;
        e[[1, 1]] = e_b;
        let p = RefinerParams::new_projected(
            RefinerVariant::IdenticalIndividual,
            1,
            1,
            Array2::zeros((2, 2)),
            e,
            Array1::from(alpha.to_vec()),
        )
        .unwrap();
        let (x, u) = ([0.9, -0.2], [1.1, 0.8]);
        let batch = MiniBatch::new(
            Array2::from_shape_vec((2, 1), x.to_vec()).unwrap(),
            Array2::from_shape_vec((2, 1), u.to_vec()).unwrap(),
        )
        .unwrap();
        let g = grad_identical(&p, &batch).unwrap();
        for (m, ev) in [e_w, e_b].into_iter().enumerate() {
            let t = alpha[m].exp();
            let h = ev * u[m];
            assert!(h.abs() > t);
            let s = h.signum();
            let zv = h - t * s;
            let res = x[m] - ev * zv;
            // d/de of (x − e (e u − t s))² = −2 res (2 e u − t s)
            let de = -2.0 * res * (2.0 * ev * u[m] - t * s);
            // d/dα: −2 res · e · (−t s)
            let da = 2.0 * res * ev * t * s;
            assert!((g.ge[[m, m]] - de).abs() < 1e-14, "{} vs {de}", g.ge[[m, m]]);
            assert!((g.galpha[m] - da).abs() < 1e-14);
        }
        assert_eq!(g.ge[[0, 1]], 0.0);
        assert!(g.gd.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variant_dispatch_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_batch(8, 3, &mut rng);
        let dc = RefinerParams::random(RefinerVariant::DistinctCross, 2, 1, 0.1, [0.0, 0.0], &mut rng).unwrap();
        let ic = RefinerParams::random(RefinerVariant::IdenticalCross, 2, 1, 0.1, [0.0, 0.0], &mut rng).unwrap();
        assert!(matches!(grad_identical(&dc, &b), Err(Error::Variant(_))));
        assert!(matches!(grad_distinct(&ic, &b), Err(Error::Variant(_))));
    }

    #[test]
    fn individual_gradient_has_zero_cross_blocks_and_matches_per_material_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (side, k) = (2, 3);
        let r_len = side * side;
        let p = RefinerParams::random(RefinerVariant::DistinctIndividual, side, k, 0.5, [-2.0, -2.0], &mut rng).unwrap();
        let batch = random_batch(2 * r_len, 9, &mut rng);
        let g = grad_distinct(&p, &batch).unwrap();
        assert!(g.ge.slice(s![0..k, r_len..]).iter().all(|&v| v == 0.0));
        assert!(g.gd.slice(s![r_len.., 0..k]).iter().all(|&v| v == 0.0));
        for m in 0..2 {
            let rows = m * r_len..(m + 1) * r_len;
            let hid = m * k..(m + 1) * k;
            let dm = p.d().slice(s![rows.clone(), hid.clone()]).to_owned();
            let em = p.e().slice(s![hid.clone(), rows.clone()]).to_owned();
            let xm = batch.target.slice(s![rows.clone(), ..]).to_owned();
            let xpm = batch.input.slice(s![rows.clone(), ..]).to_owned();
            let t: Vec<f64> = p.alpha().slice(s![hid.clone()]).iter().map(|a| a.exp()).collect();
            let hm = em.dot(&xpm);
            let zm = Array2::from_shape_fn(hm.dim(), |(i, j)| crate::refiner::shrink(hm[[i, j]], t[i]));
            let res = &xm - &dm.dot(&zm);
            let gd = res.dot(&zm.t()) * (-2.0 / 9.0);
            let back = dm.t().dot(&res);
            let ind = Array2::from_shape_fn(hm.dim(), |(i, j)| if hm[[i, j]].abs() > t[i] { 1.0 } else { 0.0 });
            let ge = (&back * &ind).dot(&xpm.t()) * (-2.0 / 9.0);
            let sz = zm.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
            let ga: Vec<f64> = (0..k)
                .map(|i| (0..9).map(|j| back[[i, j]] * t[i] * sz[[i, j]]).sum::<f64>() * 2.0 / 9.0)
                .collect();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
            assert!(g.gd.slice(s![rows.clone(), hid.clone()]).iter().zip(gd.iter()).all(|(a, b)| close(*a, *b)));
            assert!(g.ge.slice(s![hid.clone(), rows.clone()]).iter().zip(ge.iter()).all(|(a, b)| close(*a, *b)));
            assert!(g.galpha.slice(s![hid]).iter().zip(&ga).all(|(a, b)| close(*a, *b)));
        }
    }

    #[test]
    fn sampler_contract() {
        let a = sample_batches(4, 2, 7, 0).unwrap();
        assert_eq!(a, sample_batches(4, 2, 7, 0).unwrap());
        assert_eq!(a.len(), 2);
        let all = sample_batches(5, 5, 1, 3).unwrap();
        assert_eq!(all.len(), 1);
        let mut cols = all[0].clone();
        cols.sort();
        assert_eq!(cols, vec![0, 1, 2, 3, 4]);
        let mut union: Vec<usize> = sample_batches(10, 3, 2, 1).unwrap().concat();
        union.sort();
        assert_eq!(union, (0..10).collect::<Vec<_>>());
        assert_eq!(sample_batches(10, 3, 2, 1).unwrap().last().unwrap().len(), 1);
        assert!(sample_batches(3, 4, 0, 0).is_err());
        assert_ne!(sample_batches(50, 50, 2, 0).unwrap(), sample_batches(50, 50, 2, 1).unwrap());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 3e-4);
        assert_eq!(cfg.learning_rate(4), 3e-4);
        assert!((cfg.learning_rate(5) - 2.7e-4).abs() < 1e-18);
        assert!((cfg.learning_rate(12) - 3e-4 * 0.81).abs() < 1e-18);
        assert!(TrainConfig { lr_decay: 1.5, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut adam = Adam::new(3);
        let mut x = vec![1.0, 1.0, 1.0];
        adam.step(&mut x, &[2.0, -0.5, 0.0], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-7);
        assert!((x[1] - 1.1).abs() < 1e-7);
        assert_eq!(x[2], 1.0);
    }

    #[test]
    fn loss_is_column_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = RefinerParams::random(RefinerVariant::DistinctCross, 2, 2, 0.4, [-1.0, -1.0], &mut rng).unwrap();
        let b = random_batch(8, 11, &mut rng);
        let mut perm: Vec<usize> = (0..11).collect();
        perm.shuffle(&mut rng);
        let l1 = loss(&p, b.target.view(), b.input.view()).unwrap();
        let l2 = loss(&p, b.target.select(Axis(1), &perm).view(), b.input.select(Axis(1), &perm).view()).unwrap();
        assert!((l1 - l2).abs() <= 1e-13 * l1);
    }

    fn clean_corpus(rng: &mut ChaCha8Rng, p: usize) -> TrainingCorpus {
        let x = Array2::from_shape_simple_fn((8, p), || rng.random_range(-1.0..1.0));
        TrainingCorpus::new(x.clone(), x).unwrap()
    }

    #[test]
    fn training_descends_on_clean_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let corpus = clean_corpus(&mut rng, 300);
        for variant in RefinerVariant::ALL {
            let cfg = TrainConfig { batch_size: 50, epochs: 5, lr0: 1e-2, seed: 3, ..TrainConfig::default() };
            let out = train_refiner(&corpus, variant, 2, &cfg).unwrap();
            assert!(out.final_loss() <= out.initial_loss(), "{variant}");
            assert_eq!(out.curve.len(), 6);
            assert_eq!(out.curve.last().unwrap().step, 30);
            assert!(out.params.check_constraints().is_ok());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let corpus = clean_corpus(&mut rng, 600);
        let cfg = TrainConfig { batch_size: 300, epochs: 2, lr0: 1e-3, seed: 99, ..TrainConfig::default() };
        let a = train_refiner(&corpus, RefinerVariant::DistinctCross, 2, &cfg).unwrap();
        let b = train_refiner(&corpus, RefinerVariant::DistinctCross, 2, &cfg).unwrap();
        let bits = |p: &RefinerParams| p.d().iter().chain(p.e().iter()).chain(p.alpha().iter()).map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.params), bits(&b.params));
    }

    #[test]
    fn curve_csv_header() {
        let csv = curve_csv(&[CurvePoint { epoch: 0, step: 0, loss: 1.0, learning_rate: 0.1 }]);
        assert!(csv.starts_with("epoch,step,loss,learning_rate\n0,0,"));
    }
}
