//! BCD-Net: alternating learned refinement and closed-form MBID updates.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{default_roi, rmse, trace_curves, CurveRow};
use crate::image::{AttenuationPair, MaterialImage, RegionOfInterest};
use crate::physics::{direct_inversion, mbid_update, DecompPhysics};
use crate::refiner::{extract_patches, refine, RefinerParams, RefinerVariant};
use crate::training::{train_refiner, CurvePoint, TrainConfig, TrainingCorpus};

pub const MODEL_MAGIC: &[u8; 4] = b"BCDN";
pub const MODEL_VERSION: u32 = 1;

fn default_side() -> usize {
    4
}
fn default_k() -> usize {
    16
}
fn default_iterations() -> usize {
    5
}

/// Everything needed to train a model; hashed into the model's provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcdNetConfig {
    pub variant: RefinerVariant,
    /// Patch side `r`.
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub beta: f64,
    #[serde(default)]
    pub train: TrainConfig,
}

impl BcdNetConfig {
    /// Settings for 128×128 desk phantoms at the default noise level.
    pub fn desk(variant: RefinerVariant) -> Self {
        Self {
            variant,
            side: 4,
            k: 16,
            iterations: 5,
            beta: 1000.0,
            train: TrainConfig {
                batch_size: 16,
                epochs: 10,
                lr0: 1e-3,
                alpha_init: Some([0.3f64.ln(), 0.3f64.ln()]),
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.side == 0 {
            problems.push("side must be >= 1".to_string());
        }
        if self.k == 0 {
            problems.push("k must be >= 1".to_string());
        }
        if self.iterations == 0 {
            problems.push("iterations must be >= 1".to_string());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            problems.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if let Err(Error::InvalidArgument(msg)) = self.train.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Seed for the refiner trained at 1-based iteration `i`.
    pub fn iteration_seed(&self, i: usize) -> u64 {
        self.train.seed.wrapping_add(i as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcdNetModel {
    variant: RefinerVariant,
    side: usize,
    k: usize,
    beta: f64,
    iterations: Vec<RefinerParams>,
    provenance: Provenance,
}

impl BcdNetModel {
    pub fn new(beta: f64, iterations: Vec<RefinerParams>, provenance: Provenance) -> Result<Self> {
        let first = iterations
            .first()
            .ok_or_else(|| Error::InvalidArgument("a model needs at least one iteration".into()))?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        let (variant, side, k) = (first.variant(), first.side(), first.k());
        for (i, p) in iterations.iter().enumerate() {
            if p.variant() != variant || p.side() != side || p.k() != k {
                return Err(Error::Variant(format!(
                    "iteration {} is {} r={} K={}, expected {} r={side} K={k}",
                    i + 1,
                    p.variant(),
                    p.side(),
                    p.k(),
                    variant
                )));
            }
        }
        Ok(Self {
            variant,
            side,
            k,
            beta,
            iterations,
            provenance,
        })
    }

    pub fn variant(&self) -> RefinerVariant {
        self.variant
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn iterations(&self) -> &[RefinerParams] {
        &self.iterations
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

/// One training example: reference materials and the measured attenuation pair.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub water: MaterialImage,
    pub bone: MaterialImage,
    pub y: AttenuationPair,
}

/// Iterates `x⁽⁰⁾ … x⁽ᴵ⁾` of one decomposition.
#[derive(Clone, Debug)]
pub struct DecompositionTrace {
    pub iterates: Vec<(MaterialImage, MaterialImage)>,
}

impl DecompositionTrace {
    pub fn final_images(&self) -> &(MaterialImage, MaterialImage) {
        self.iterates.last().expect("trace holds x0")
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn rmse_curve(&self, truth: (&MaterialImage, &MaterialImage), roi: &RegionOfInterest) -> Result<Vec<CurveRow>> {
        trace_curves(&self.iterates, truth, roi)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: BcdNetModel,
    /// Training curve of each iteration's refiner.
    pub curves: Vec<Vec<CurvePoint>>,
    /// Mean training-set RMSE (water, bone) of `x⁽ⁱ⁾`, `i = 0..=I`.
    pub training_rmse: Vec<[f64; 2]>,
}

fn mean_rmse(pairs: &[TrainingPair], xs: &[(MaterialImage, MaterialImage)], rois: &[RegionOfInterest]) -> Result<[f64; 2]> {
    let mut acc = [0.0; 2];
    for ((p, x), roi) in pairs.iter().zip(xs).zip(rois) {
        acc[0] += rmse(&x.0, &p.water, roi)?;
        acc[1] += rmse(&x.1, &p.bone, roi)?;
    }
    let n = pairs.len() as f64;
    Ok([acc[0] / n, acc[1] / n])
}

fn check_finite(x: &(MaterialImage, MaterialImage), iteration: usize) -> Result<()> {
    if x.0.data().iter().chain(x.1.data()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite iterate at iteration {iteration}")))
    }
}

/// Trains `I` refiners in sequence; each one learns to map the current
/// iterates of every training pair to the references, then all pairs are
/// refined and passed through one MBID step.
pub fn train_model(pairs: &[TrainingPair], physics: &DecompPhysics, cfg: &BcdNetConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    physics.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("at least one training pair is required".into()));
    }
    for p in pairs {
        p.water.grid().check_same_geometry(p.bone.grid(), "training references")?;
        p.water.grid().check_same_geometry(p.y.high(), "training measurements")?;
    }
    let rois = pairs
        .iter()
        .map(|p| default_roi(&p.water, &p.bone))
        .collect::<Result<Vec<_>>>()?;
    let targets = pairs
        .iter()
        .map(|p| extract_patches(&p.water, &p.bone, cfg.side))
        .collect::<Result<Vec<_>>>()?;

    let mut xs = pairs
        .iter()
        .map(|p| direct_inversion(&p.y, physics))
        .collect::<Result<Vec<_>>>()?;
    for x in &xs {
        check_finite(x, 0)?;
    }
    let mut training_rmse = vec![mean_rmse(pairs, &xs, &rois)?];
    let mut params = Vec::with_capacity(cfg.iterations);
    let mut curves = Vec::with_capacity(cfg.iterations);

    for i in 1..=cfg.iterations {
        let parts = targets
            .iter()
            .zip(&xs)
            .map(|(t, x)| Ok((t.clone(), extract_patches(&x.0, &x.1, cfg.side)?)))
            .collect::<Result<Vec<_>>>()?;
        let corpus = TrainingCorpus::from_parts(&parts)?;
        drop(parts);
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.iteration_seed(i);
        let outcome = train_refiner(&corpus, cfg.variant, cfg.k, &tcfg)
            .map_err(|e| annotate(e, i))?;
        drop(corpus);
        xs = pairs
            .par_iter()
            .zip(xs.par_iter())
            .map(|(p, x)| {
                let z = refine(&outcome.params, &x.0, &x.1)?;
                mbid_update(&p.y, (&z.0, &z.1), physics, cfg.beta)
            })
            .collect::<Result<Vec<_>>>()?;
        for x in &xs {
            check_finite(x, i)?;
        }
        training_rmse.push(mean_rmse(pairs, &xs, &rois)?);
        params.push(outcome.params);
        curves.push(outcome.curve);
    }
    let model = BcdNetModel::new(
        cfg.beta,
        params,
        Provenance {
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
        },
    )?;
    Ok(TrainedModel {
        model,
        curves,
        training_rmse,
    })
}

fn annotate(e: Error, iteration: usize) -> Error {
    match e {
        Error::Diverged(msg) => Error::Diverged(format!("iteration {iteration}: {msg}")),
        other => other,
    }
}

/// Runs a trained model on new measurements, optionally with a different β.
pub fn apply_model(
    model: &BcdNetModel,
    y: &AttenuationPair,
    physics: &DecompPhysics,
    beta_override: Option<f64>,
) -> Result<DecompositionTrace> {
    physics.validate()?;
    let beta = beta_override.unwrap_or(model.beta);
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let mut iterates = Vec::with_capacity(model.iterations.len() + 1);
    let x0 = direct_inversion(y, physics)?;
    check_finite(&x0, 0)?;
    iterates.push(x0);
    for (i, params) in model.iterations.iter().enumerate() {
        let x = iterates.last().unwrap();
        let z = refine(params, &x.0, &x.1)?;
        let next = mbid_update(y, (&z.0, &z.1), physics, beta)?;
        check_finite(&next, i + 1)?;
        iterates.push(next);
    }
    Ok(DecompositionTrace { iterates })
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    variant: RefinerVariant,
    side: usize,
    k: usize,
    iterations: usize,
    beta: f64,
    provenance: Provenance,
}

/// Serializes a model into the BCDN byte layout.
pub fn model_bytes(model: &BcdNetModel) -> Vec<u8> {
    let meta = Metadata {
        variant: model.variant,
        side: model.side,
        k: model.k,
        iterations: model.iterations.len(),
        beta: model.beta,
        provenance: model.provenance.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.iterations {
        for v in p.d().iter().chain(p.e().iter()).chain(p.alpha().iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// SHA-256 of the serialized model, hex encoded.
pub fn model_hash(model: &BcdNetModel) -> String {
    hex::encode(Sha256::digest(model_bytes(model)))
}

pub fn save_model(model: &BcdNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BcdNetModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<BcdNetModel> {
    if bytes.len() < 12 {
        return Err(Error::Format("model file is shorter than its header".into()));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("not a BCDN model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json_end = 12usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("model metadata is truncated".into()))?;
    let meta: Metadata = serde_json::from_slice(&bytes[12..json_end])?;
    if meta.side == 0 || meta.k == 0 || meta.iterations == 0 {
        return Err(Error::Format("model metadata has zero-sized geometry".into()));
    }
    let r_len = meta.side * meta.side;
    let per_iter = 2 * r_len * 2 * meta.k * 2 + 2 * meta.k;
    let expected = per_iter * meta.iterations * 8;
    let payload = &bytes[json_end..];
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
    let mut iterations = Vec::with_capacity(meta.iterations);
    for _ in 0..meta.iterations {
        let d = Array2::from_shape_vec((2 * r_len, 2 * meta.k), take(4 * r_len * meta.k))
            .map_err(|e| Error::Format(e.to_string()))?;
        let e = Array2::from_shape_vec((2 * meta.k, 2 * r_len), take(4 * r_len * meta.k))
            .map_err(|e| Error::Format(e.to_string()))?;
        let alpha = Array1::from(take(2 * meta.k));
        iterations.push(RefinerParams::new(meta.variant, meta.side, meta.k, d, e, alpha)?);
    }
    BcdNetModel::new(meta.beta, iterations, meta.provenance)
}

/// Per-iteration training RMSE as CSV.
pub fn training_rmse_csv(rows: &[[f64; 2]]) -> String {
    let mut out = String::from("iteration,rmse_water,rmse_bone\n");
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!("{i},{:.9e},{:.9e}\n", r[0], r[1]));
    }
    out
}
