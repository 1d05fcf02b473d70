use bcdnet_core::bcdnet::{apply_model, load_model, model_bytes, save_model, train_model, BcdNetConfig, TrainingPair};
use bcdnet_core::eval::{default_roi, rmse};
use bcdnet_core::phantom::{generate_phantom, synthesize_measurements, NoiseSpec, PhantomSpec, DESK_A0};
use bcdnet_core::physics::{direct_inversion, DecompPhysics};
use bcdnet_core::refiner::RefinerVariant;

fn case(seed: u64, size: usize, physics: &DecompPhysics, noise: &NoiseSpec) -> TrainingPair {
    let p = generate_phantom(&PhantomSpec::desk(size, seed)).unwrap();
    let y = synthesize_measurements(&p.water, &p.bone, physics, noise).unwrap();
    TrainingPair { water: p.water, bone: p.bone, y }
}

fn small(variant: RefinerVariant) -> BcdNetConfig {
    let mut cfg = BcdNetConfig::desk(variant);
    cfg.side = 3;
    cfg.k = 4;
    cfg.iterations = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 64;
    cfg
}

#[test]
fn noiseless_small_beta_stays_exact() {
    let physics = DecompPhysics::new(DESK_A0, [1.0, 1.0]).unwrap();
    let pairs: Vec<_> = [1, 2].iter().map(|&s| case(s, 32, &physics, &NoiseSpec::noiseless())).collect();
    let mut cfg = small(RefinerVariant::DistinctCross);
    cfg.beta = 1e-9;
    let trained = train_model(&pairs, &physics, &cfg).unwrap();
    let test = case(3, 32, &physics, &NoiseSpec::noiseless());
    let trace = apply_model(&trained.model, &test.y, &physics, None).unwrap();
    let roi = default_roi(&test.water, &test.bone).unwrap();
    let (w, b) = trace.final_images();
    assert!(rmse(w, &test.water, &roi).unwrap() <= 1e-3);
    assert!(rmse(b, &test.bone, &roi).unwrap() <= 1e-3);
}

#[test]
fn trace_has_one_entry_per_iteration_plus_start() {
    let physics = DecompPhysics::from_noise_sigmas(DESK_A0, 2.5e-3, 5.8e-3).unwrap();
    let pairs = vec![case(1, 24, &physics, &NoiseSpec::desk(1001))];
    let trained = train_model(&pairs, &physics, &small(RefinerVariant::IdenticalCross)).unwrap();
    assert_eq!(trained.training_rmse.len(), 3);
    assert_eq!(trained.curves.len(), 2);
    let trace = apply_model(&trained.model, &pairs[0].y, &physics, None).unwrap();
    assert_eq!(trace.len(), 3);
    let (dw, _) = direct_inversion(&pairs[0].y, &physics).unwrap();
    assert_eq!(trace.iterates[0].0.data(), dw.data());
}

#[test]
fn saved_model_reproduces_decomposition() {
    let physics = DecompPhysics::from_noise_sigmas(DESK_A0, 2.5e-3, 5.8e-3).unwrap();
    let pairs = vec![case(1, 24, &physics, &NoiseSpec::desk(1001))];
    let trained = train_model(&pairs, &physics, &small(RefinerVariant::DistinctIndividual)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bcdn");
    save_model(&trained.model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(model_bytes(&loaded), model_bytes(&trained.model));
    let a = apply_model(&trained.model, &pairs[0].y, &physics, None).unwrap();
    let b = apply_model(&loaded, &pairs[0].y, &physics, None).unwrap();
    assert_eq!(a.final_images().0.data(), b.final_images().0.data());
    assert_eq!(a.final_images().1.data(), b.final_images().1.data());
}
