use kvlock::config::RunConfig;
use kvlock::guidance::Toggles;
use kvlock::kv_bank::{KvBank, BANK_MAGIC};
use kvlock::mask::{PixelMask, MASK_MAGIC};
use kvlock::pipeline::{ablation_scene, build_model, lock_check, EditInputs, Engine};
use kvlock::video::{Video, VIDEO_MAGIC};
use kvlock::weights::{WeightFile, WEIGHTS_MAGIC};
use kvlock::{KvLockError, Model, Model64};

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.calibration.samples = 6;
    cfg.scene.frames = 9;
    cfg.scene.height = 32;
    cfg.scene.width = 32;
    cfg
}

#[test]
fn files_start_with_their_magic() {
    let cfg = small();
    let tmp = tempfile::tempdir().unwrap();
    let scene = ablation_scene::<f32>(&cfg, 1).unwrap();
    let model: Model = build_model(&cfg).unwrap();
    let engine = Engine::new(&cfg, model.clone()).unwrap();
    let bank = engine.cache(&cfg, &EditInputs::from_scene(&scene, cfg.model.hidden)).unwrap();

    let paths = ["v.bin", "m.bin", "w.bin", "b.bin"].map(|n| tmp.path().join(n));
    scene.video.save(&paths[0]).unwrap();
    scene.mask.save(&paths[1]).unwrap();
    model.to_weight_file().save(&paths[2]).unwrap();
    bank.save(&paths[3]).unwrap();
    for (p, magic) in paths.iter().zip([VIDEO_MAGIC, MASK_MAGIC, WEIGHTS_MAGIC, BANK_MAGIC]) {
        assert_eq!(&std::fs::read(p).unwrap()[..8], magic);
    }

    assert_eq!(Video::<f32>::load(&paths[0]).unwrap(), scene.video);
    assert_eq!(PixelMask::load(&paths[1]).unwrap(), scene.mask);
    assert_eq!(Model::from_weight_file(&WeightFile::load(&paths[2]).unwrap()).unwrap(), model);
    assert_eq!(KvBank::<f32>::load(&paths[3], model.hash(), engine.schedule.hash()).unwrap(), bank);
}

#[test]
fn bank_from_other_model_is_rejected() {
    let cfg = small();
    let scene = ablation_scene::<f32>(&cfg, 0).unwrap();
    let inputs = EditInputs::from_scene(&scene, cfg.model.hidden);
    let a = Engine::new(&cfg, build_model::<f32>(&cfg).unwrap()).unwrap();
    let other = RunConfig { seed: 99, ..small() };
    let b = Engine::new(&other, build_model::<f32>(&other).unwrap()).unwrap();
    let bank = b.cache(&other, &inputs).unwrap();
    let err = a.edit(&cfg, &Toggles::default(), &inputs, &bank).unwrap_err();
    assert!(matches!(err, KvLockError::Compatibility(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn double_precision_lock_is_exact() {
    let cfg = small();
    let model: Model64 = build_model(&cfg).unwrap();
    let engine = Engine::new(&cfg, model).unwrap();
    let scene = ablation_scene::<f64>(&cfg, 2).unwrap();
    let inputs = EditInputs::from_scene(&scene, cfg.model.hidden);
    let bank = engine.cache(&cfg, &inputs).unwrap();
    let rep = lock_check(&cfg, &engine, &inputs, &bank).unwrap();
    assert_eq!(rep.steps, cfg.detector.kappa);
    assert!(rep.attention <= 1e-12 && rep.x0 <= 1e-10, "{rep:?}");
}

#[test]
fn edit_trace_covers_every_step() {
    let cfg = small();
    let engine = Engine::new(&cfg, build_model::<f32>(&cfg).unwrap()).unwrap();
    let scene = ablation_scene::<f32>(&cfg, 3).unwrap();
    let inputs = EditInputs::from_scene(&scene, cfg.model.hidden);
    let bank = engine.cache(&cfg, &inputs).unwrap();
    let out = engine.edit(&cfg, &Toggles::default(), &inputs, &bank).unwrap();
    assert_eq!(out.trace.len(), cfg.schedule.steps);
    assert_eq!(out.video.dims(), scene.video.dims());
    let window_start = cfg.schedule.steps - cfg.detector.kappa;
    for r in &out.trace {
        if r.step < window_start {
            assert_eq!(r.alpha, 0.0);
            assert!(!r.flag);
        }
        assert!((0.0..=1.0).contains(&r.alpha));
    }
    assert!(out.scores.ssim.is_finite());
}
