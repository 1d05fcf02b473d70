use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bcdnet_core::bcdnet::{
    apply_model, load_model, model_hash, save_model, train_model, training_rmse_csv, BcdNetConfig, TrainingPair,
};
use bcdnet_core::ep::{cost_csv, ep_decompose, EpConfig};
use bcdnet_core::eval::{compare_methods, curves_csv, default_roi};
use bcdnet_core::image::{
    read_image, read_mask, render_png, write_image, write_image_as, write_text, AttenuationPair, Material,
    MaterialImage, RegionOfInterest, Semantic,
};
use bcdnet_core::phantom::{generate_phantom, synthesize_measurements, NoiseSpec, PhantomSpec, DESK_A0};
use bcdnet_core::physics::{direct_inversion, DecompPhysics};
use bcdnet_core::training::curve_csv;
use bcdnet_core::verify;

const WATER_WINDOW: (f64, f64) = (0.7, 1.3);
const BONE_WINDOW: (f64, f64) = (0.0, 0.8);

/// Dual-energy CT material decomposition with BCD-Net.
#[derive(Parser)]
#[command(name = "bcdnet", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "BCDNET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom and its noisy attenuation pair.
    Phantom(PhantomArgs),
    /// Train a BCD-Net model from a JSON config.
    Train(TrainArgs),
    /// Decompose an attenuation pair with a trained model.
    Decompose(DecomposeArgs),
    /// Decompose with the edge-preserving regularized baseline.
    BaselineEp(EpArgs),
    /// Compare decompositions against ground truth.
    Eval(EvalArgs),
    /// Run the built-in consistency checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// `default` for the randomized desk phantom, or a JSON spec file.
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 2.5e-3)]
    sigma_high: f64,
    #[arg(long, default_value_t = 5.8e-3)]
    sigma_low: f64,
    /// Noise seed; defaults to `seed + 1000`.
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory with y_high.matf, y_low.matf and manifest.json.
    #[arg(long)]
    input: PathBuf,
    /// Physics JSON overriding the input manifest.
    #[arg(long)]
    physics: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    /// Write water.png / bone.png at the standard display windows.
    #[arg(long)]
    emit_png: bool,
    /// Write every iterate as MATF.
    #[arg(long)]
    snapshots: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    physics: Option<PathBuf>,
    /// Defaults to 2^8.
    #[arg(long)]
    beta_water: Option<f64>,
    /// Defaults to 2^8.5.
    #[arg(long)]
    beta_bone: Option<f64>,
    /// Defaults to 0.01 g/cm³.
    #[arg(long)]
    delta_water: Option<f64>,
    /// Defaults to 0.02 g/cm³.
    #[arg(long)]
    delta_bone: Option<f64>,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long)]
    emit_png: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory with ground-truth water.matf and bone.matf.
    #[arg(long)]
    truth: PathBuf,
    /// `name=DIR` with water.matf and bone.matf; repeatable, order kept.
    #[arg(long = "method", required = true)]
    methods: Vec<String>,
    /// Mask MATF; defaults to the dilated tissue support.
    #[arg(long)]
    roi: Option<PathBuf>,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail (exit 1) if any water RMSE exceeds this, in 1e-3 g/cm³.
    #[arg(long)]
    max_water: Option<f64>,
    #[arg(long)]
    max_bone: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: PhantomSpec,
    noise: NoiseSpec,
    physics: DecompPhysics,
    clipped_primitives: Vec<usize>,
    files: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    model: BcdNetConfig,
    /// Phantom directories (water, bone, y_high, y_low MATF files).
    pairs: Vec<PathBuf>,
    /// Overrides the physics recorded in the first pair's manifest.
    #[serde(default)]
    physics: Option<DecompPhysics>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Decompose(a) => cmd_decompose(a).map(|_| true),
        Command::BaselineEp(a) => cmd_ep(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => Ok(cmd_verify(a)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_spec(spec: &str, size: usize, seed: u64) -> Result<PhantomSpec> {
    if spec == "default" {
        return Ok(PhantomSpec::desk(size, seed));
    }
    let text = std::fs::read_to_string(spec).with_context(|| format!("cannot read spec {spec}"))?;
    let mut parsed: PhantomSpec =
        serde_json::from_str(&text).with_context(|| format!("malformed phantom spec {spec}"))?;
    parsed.seed = seed;
    Ok(parsed)
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let spec = resolve_spec(&a.spec, a.size, a.seed)?;
    let phantom = generate_phantom(&spec)?;
    for idx in &phantom.clipped {
        eprintln!("warning: primitive {idx} extends past the grid and was clipped");
    }
    let noise = NoiseSpec {
        sigma_high: a.sigma_high,
        sigma_low: a.sigma_low,
        seed: a.noise_seed.unwrap_or(a.seed.wrapping_add(1000)),
    };
    let weights = noise.weights().unwrap_or([1.0, 1.0]);
    let physics = DecompPhysics::new(DESK_A0, weights)?;
    let y = synthesize_measurements(&phantom.water, &phantom.bone, &physics, &noise)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_image(phantom.water.grid(), a.out.join("water.matf"))?;
    write_image(phantom.bone.grid(), a.out.join("bone.matf"))?;
    write_image_as(y.high(), Semantic::Attenuation, a.out.join("y_high.matf"))?;
    write_image_as(y.low(), Semantic::Attenuation, a.out.join("y_low.matf"))?;
    let manifest = Manifest {
        spec,
        noise,
        physics,
        clipped_primitives: phantom.clipped,
        files: ["water.matf", "bone.matf", "y_high.matf", "y_low.matf"].map(String::from).to_vec(),
    };
    write_text(&a.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote phantom to {}", a.out.display());
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("missing input file {}", path.display());
    }
    Ok(())
}

fn read_materials(dir: &Path) -> Result<(MaterialImage, MaterialImage)> {
    let (w, b) = (dir.join("water.matf"), dir.join("bone.matf"));
    require(&w)?;
    require(&b)?;
    Ok((
        MaterialImage::new(read_image(&w)?, Material::Water),
        MaterialImage::new(read_image(&b)?, Material::Bone),
    ))
}

fn read_measurements(dir: &Path) -> Result<AttenuationPair> {
    let (h, l) = (dir.join("y_high.matf"), dir.join("y_low.matf"));
    require(&h)?;
    require(&l)?;
    Ok(AttenuationPair::new(read_image(&h)?, read_image(&l)?)?)
}

fn read_physics(dir: &Path, explicit: Option<&Path>) -> Result<DecompPhysics> {
    if let Some(p) = explicit {
        require(p)?;
        let text = std::fs::read_to_string(p)?;
        let physics: DecompPhysics =
            serde_json::from_str(&text).with_context(|| format!("malformed physics file {}", p.display()))?;
        physics.validate()?;
        return Ok(physics);
    }
    let m = dir.join("manifest.json");
    require(&m)?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&m)?)
        .with_context(|| format!("malformed manifest {}", m.display()))?;
    Ok(manifest.physics)
}

fn load_train_file(path: &Path) -> Result<TrainFile> {
    require(path)?;
    let text = std::fs::read_to_string(path)?;
    let tf: TrainFile =
        serde_json::from_str(&text).with_context(|| format!("config {} does not match the schema", path.display()))?;
    let mut problems = Vec::new();
    if let Err(e) = tf.model.validate() {
        problems.push(e.to_string());
    }
    if tf.pairs.is_empty() {
        problems.push("pairs: at least one training pair is required".to_string());
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for dir in &tf.pairs {
        let dir = base.join(dir);
        for f in ["water.matf", "bone.matf", "y_high.matf", "y_low.matf"] {
            if !dir.join(f).is_file() {
                problems.push(format!("missing input file {}", dir.join(f).display()));
            }
        }
        if tf.physics.is_none() && !dir.join("manifest.json").is_file() {
            problems.push(format!("missing input file {}", dir.join("manifest.json").display()));
        }
    }
    if !problems.is_empty() {
        bail!("invalid config {}:\n  {}", path.display(), problems.join("\n  "));
    }
    Ok(tf)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let tf = load_train_file(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let dirs: Vec<PathBuf> = tf.pairs.iter().map(|d| base.join(d)).collect();
    let physics = match &tf.physics {
        Some(p) => p.clone(),
        None => read_physics(&dirs[0], None)?,
    };
    let pairs = dirs
        .iter()
        .map(|d| {
            let (water, bone) = read_materials(d)?;
            Ok(TrainingPair {
                water,
                bone,
                y: read_measurements(d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let trained = train_model(&pairs, &physics, &tf.model)?;
    std::fs::create_dir_all(&a.out)?;
    save_model(&trained.model, a.out.join("model.bcdn"))?;
    for (i, c) in trained.curves.iter().enumerate() {
        write_text(&a.out.join(format!("curve_iter{}.csv", i + 1)), &curve_csv(c))?;
    }
    write_text(&a.out.join("training_rmse.csv"), &training_rmse_csv(&trained.training_rmse))?;
    let captured = serde_json::json!({
        "model": tf.model,
        "physics": physics,
        "pairs": tf.pairs,
        "config_hash": tf.model.hash(),
    });
    write_text(&a.out.join("config.json"), &serde_json::to_string_pretty(&captured)?)?;
    println!("model {}", model_hash(&trained.model));
    Ok(())
}

fn write_outputs(out: &Path, water: &MaterialImage, bone: &MaterialImage, png: bool) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_image(water.grid(), out.join("water.matf"))?;
    write_image(bone.grid(), out.join("bone.matf"))?;
    if png {
        render_png(water.grid(), WATER_WINDOW.0, WATER_WINDOW.1, out.join("water.png"))?;
        render_png(bone.grid(), BONE_WINDOW.0, BONE_WINDOW.1, out.join("bone.png"))?;
    }
    Ok(())
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    require(&a.model)?;
    let model = load_model(&a.model)?;
    let y = read_measurements(&a.input)?;
    let physics = read_physics(&a.input, a.physics.as_deref())?;
    let trace = apply_model(&model, &y, &physics, a.beta)?;
    let (w, b) = trace.final_images();
    write_outputs(&a.out, w, b, a.emit_png)?;
    if a.snapshots {
        for (i, (w, b)) in trace.iterates.iter().enumerate() {
            write_image(w.grid(), a.out.join(format!("water_iter{i}.matf")))?;
            write_image(b.grid(), a.out.join(format!("bone_iter{i}.matf")))?;
        }
    }
    if a.input.join("water.matf").is_file() && a.input.join("bone.matf").is_file() {
        let (tw, tb) = read_materials(&a.input)?;
        let roi = default_roi(&tw, &tb)?;
        let rows = trace.rmse_curve((&tw, &tb), &roi)?;
        write_text(&a.out.join("trace.csv"), &curves_csv(&rows))?;
    }
    println!("wrote decomposition to {}", a.out.display());
    Ok(())
}

fn cmd_ep(a: EpArgs) -> Result<()> {
    let y = read_measurements(&a.input)?;
    let physics = read_physics(&a.input, a.physics.as_deref())?;
    let d = EpConfig::default();
    let cfg = EpConfig {
        beta: [a.beta_water.unwrap_or(d.beta[0]), a.beta_bone.unwrap_or(d.beta[1])],
        delta: [a.delta_water.unwrap_or(d.delta[0]), a.delta_bone.unwrap_or(d.delta[1])],
        iterations: a.iters,
        ..d
    };
    let (w0, b0) = direct_inversion(&y, &physics)?;
    let result = ep_decompose(&y, &physics, &cfg, (&w0, &b0))?;
    write_outputs(&a.out, &result.water, &result.bone, a.emit_png)?;
    write_text(&a.out.join("cost.csv"), &cost_csv(&result.cost_history))?;
    println!("wrote EP decomposition to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let (tw, tb) = read_materials(&a.truth)?;
    let roi: RegionOfInterest = match &a.roi {
        Some(p) => {
            require(p)?;
            read_mask(p)?
        }
        None => default_roi(&tw, &tb)?,
    };
    let mut results = Vec::new();
    for m in &a.methods {
        let (name, dir) = m
            .split_once('=')
            .with_context(|| format!("method `{m}` must look like name=DIR"))?;
        results.push((name.to_string(), read_materials(Path::new(dir))?));
    }
    let table = compare_methods(&results, Some((&tw, &tb)), &roi)?;
    let csv = table.to_csv();
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    let mut ok = true;
    for row in &table.rows {
        if a.max_water.is_some_and(|t| row.rmse_water * 1e3 > t) {
            eprintln!("{}: water RMSE {:.3}e-3 above threshold", row.method, row.rmse_water * 1e3);
            ok = false;
        }
        if a.max_bone.is_some_and(|t| row.rmse_bone * 1e3 > t) {
            eprintln!("{}: bone RMSE {:.3}e-3 above threshold", row.method, row.rmse_bone * 1e3);
            ok = false;
        }
    }
    Ok(ok)
}

fn cmd_verify(a: VerifyArgs) -> bool {
    let reports = verify::run_all(a.trials, a.seed);
    for r in &reports {
        println!("{}", r.line());
    }
    reports.iter().all(|r| r.passed)
}
