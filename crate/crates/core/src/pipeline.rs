//! End-to-end runs: caching pass, guided editing, ablation matrix, toy
//! hallucination experiment and report generation.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{multi_head_attention, InjectionPlan, KvEntry};
use crate::config::RunConfig;
use crate::error::{KvLockError, Result};
use crate::guidance::{cfg_step, GuidanceConfig, StepInputs, Toggles};
use crate::hallucination::{fusion_rate, masked_reduce, TrajectoryWindow};
use crate::io::write_file;
use crate::kv_bank::{build_bank, write_memory_report, KvBank};
use crate::mask::{aggregate_temporal, project_to_tokens, LatentMask, PixelMask, ToyEncoder, TokenMask};
use crate::metrics::{background_scores, RegionScore};
use crate::model::{CalibrationSample, DitLite};
use crate::rng::{derive_seed, stream};
use crate::scalar::Real;
use crate::scheduler::NoiseSchedule;
use crate::synthetic::{make_synthetic_video, prompt_embedding, Scene, SceneSpec};
use crate::tensor::Latent4D;
use crate::toy::{
    sample_and_classify, separation, suppression, AnalyticDenoiser, MlpDenoiser, SeparationSummary,
    SuppressionSummary, ToyGuidance, ToyTrajectory,
};
use crate::video::Video;
use crate::weights::WeightFile;

/// Worker pool sized by `KVLOCK_THREADS` (all cores when unset or invalid).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var("KVLOCK_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| KvLockError::Config(format!("cannot start worker pool: {e}")))
}

pub fn schedule<T: Real>(cfg: &RunConfig) -> Result<NoiseSchedule<T>> {
    let s = &cfg.schedule;
    NoiseSchedule::linear(s.train_steps, s.beta_min, s.beta_max, s.steps)
}

pub fn encoder<T: Real>(cfg: &RunConfig) -> Result<ToyEncoder<T>> {
    ToyEncoder::new(cfg.model.channels, cfg.compression, &mut stream(cfg.seed, "encoder"))
}

/// Seeded DiT-lite with its readout fitted on noised synthetic scenes. A
/// share of the samples see the KV of an independently noised pass over the
/// same scene, so the readout learns to use locked source content.
pub fn build_model<T: Real>(cfg: &RunConfig) -> Result<DitLite<T>> {
    let sched = schedule::<T>(cfg)?;
    let mut model = DitLite::seeded(cfg.model, &mut stream(cfg.seed, "weights"))?.with_noise_levels(&sched);
    let enc = encoder::<T>(cfg)?;
    let mut rng = stream(cfg.seed, "calibration");
    let mut samples = Vec::with_capacity(cfg.calibration.samples);
    for i in 0..cfg.calibration.samples {
        let spec = SceneSpec {
            radius: rng.random_range(0.1..0.3),
            ..cfg.scene
        };
        let scene: Scene<T> = make_synthetic_video(derive_seed(cfg.seed, &format!("calibration_scene{i}")), &spec)?;
        let z0 = enc.encode(&scene.video)?;
        let t = rng.random_range(1..=cfg.schedule.train_steps);
        let eps = Latent4D::randn(z0.shape(), &mut rng);
        let x_t = sched.forward_noise(&z0, t, &eps)?;
        let prompt = if rng.random_bool(0.5) { &scene.source_prompt } else { &scene.target_prompt };
        let cond = if rng.random_bool(0.2) {
            Array1::zeros(cfg.model.hidden)
        } else {
            prompt_embedding(prompt, cfg.model.hidden)
        };
        let source_kv = if rng.random_bool(cfg.calibration.locked) {
            let src = sched.forward_noise(&z0, t, &Latent4D::randn(z0.shape(), &mut rng))?;
            let cond_src = prompt_embedding(&scene.source_prompt, cfg.model.hidden);
            let (_, trace) = model.forward_traced(&src, t, &cond_src)?;
            Some(
                trace
                    .layers
                    .into_iter()
                    .map(|r| KvEntry {
                        keys: r.keys,
                        values: r.values,
                    })
                    .collect(),
            )
        } else {
            None
        };
        samples.push(CalibrationSample {
            x_t,
            t,
            cond,
            x0: z0,
            source_kv,
        });
    }
    let mse = model.calibrate_readout(&samples, cfg.calibration.ridge)?;
    log::info!("readout calibrated on {} scenes, clean-sample mse {mse:.5}", samples.len());
    Ok(model)
}

/// Everything an edit needs besides the bank.
#[derive(Debug, Clone)]
pub struct EditInputs<T> {
    pub video: Video<T>,
    pub mask: PixelMask,
    pub cond_src: Array1<T>,
    pub cond_tgt: Array1<T>,
}

impl<T: Real> EditInputs<T> {
    pub fn from_scene(scene: &Scene<T>, hidden: usize) -> Self {
        Self {
            video: scene.video.clone(),
            mask: scene.mask.clone(),
            cond_src: prompt_embedding(&scene.source_prompt, hidden),
            cond_tgt: prompt_embedding(&scene.target_prompt, hidden),
        }
    }
}

/// Model, schedule and encoder shared by all runs of one configuration.
pub struct Engine<T> {
    pub model: DitLite<T>,
    pub schedule: NoiseSchedule<T>,
    pub encoder: ToyEncoder<T>,
}

/// Noise shared by the caching pass and the edit's starting point.
pub fn shared_noise<T: Real>(seed: u64, shape: crate::tensor::Shape4) -> Latent4D<T> {
    Latent4D::randn(shape, &mut stream(seed, "shared_noise"))
}

impl<T: Real> Engine<T> {
    pub fn new(cfg: &RunConfig, model: DitLite<T>) -> Result<Self> {
        Ok(Self {
            model,
            schedule: schedule(cfg)?,
            encoder: encoder(cfg)?,
        })
    }

    pub fn masks(&self, cfg: &RunConfig, mask: &PixelMask) -> Result<(LatentMask, TokenMask)> {
        let lmask = aggregate_temporal(mask, cfg.compression)?;
        let tmask = project_to_tokens(&lmask, cfg.model.patch)?;
        Ok((lmask, tmask))
    }

    pub fn cache(&self, cfg: &RunConfig, inputs: &EditInputs<T>) -> Result<KvBank<T>> {
        let z0 = self.encoder.encode(&inputs.video)?;
        let eps = shared_noise(cfg.seed, z0.shape());
        build_bank(&z0, &self.schedule, &self.model, &inputs.cond_src, &eps)
    }

    /// Guided sampling with background KV injection and variance tracking.
    pub fn edit(
        &self,
        cfg: &RunConfig,
        toggles: &Toggles,
        inputs: &EditInputs<T>,
        bank: &KvBank<T>,
    ) -> Result<EditOutcome<T>> {
        toggles.validate()?;
        bank.check_compatible(self.model.hash(), self.schedule.hash())?;
        let z0 = self.encoder.encode(&inputs.video)?;
        let (lmask, tmask) = self.masks(cfg, &inputs.mask)?;
        if tmask.len() != bank.meta().tokens {
            return Err(KvLockError::Compatibility(format!(
                "mask projects to {} tokens, bank holds {}",
                tmask.len(),
                bank.meta().tokens
            )));
        }
        let det_mask = if toggles.global_detection {
            LatentMask::ones(lmask.grid())
        } else {
            lmask.clone()
        };
        let channels = z0.shape().0;
        let mut window = TrajectoryWindow::<T>::with_support(cfg.detector.window, det_mask.support(channels))?;
        let eps_shared = shared_noise::<T>(cfg.seed, z0.shape());
        let steps = self.schedule.steps();
        let mut x = self.schedule.forward_noise(&z0, self.schedule.timestep(0), &eps_shared)?;
        let null = Array1::zeros(cfg.model.hidden);
        let mut noise_rng = stream(cfg.seed, "noise");
        let mut trace = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = self.schedule.timestep(k);
            let in_window = cfg.detector.in_window(k, steps);
            let sigma2 = window.variance();
            let alpha = match toggles.fixed_alpha {
                Some(a) if in_window => T::lit(a),
                Some(_) => T::zero(),
                None if toggles.kv_schedule => fusion_rate(sigma2, &cfg.detector, in_window),
                None => T::zero(),
            };
            let plan = InjectionPlan {
                token_mask: &tmask,
                alpha,
                active: in_window && alpha > T::zero(),
            };
            let step_inputs = StepInputs {
                step: k,
                t,
                cond: &inputs.cond_tgt,
                null_cond: &null,
                bank: Some(bank),
                plan: &plan,
                sigma2,
                in_window,
            };
            let (eps, state) = cfg_step(&self.model, &x, &step_inputs, &cfg.guidance, toggles)?;
            let x0 = self.schedule.predict_x0(&x, t, &eps)?;
            window.push(&masked_reduce(std::slice::from_ref(&x0), &det_mask)?)?;
            trace.push(StepRecord {
                step: k,
                t,
                sigma2: sigma2.map(|v| v.as_f64()),
                alpha: alpha.as_f64(),
                flag: state.flag,
                s_star: state.s_star.as_f64(),
                omega: state.omega.as_f64(),
            });
            let noise = Latent4D::randn(x.shape(), &mut noise_rng);
            x = self.schedule.reverse_step(&x, k, &eps, &noise)?;
            if !x.is_finite() {
                return Err(KvLockError::Numeric(format!("latent diverged at step {k} (t = {t})")));
            }
        }
        let frames = inputs.video.frames();
        let edited = self.encoder.decode(&x, frames)?;
        let reference = self.encoder.decode(&z0, frames)?;
        let scores = background_scores(&edited, &reference, &inputs.mask)?;
        Ok(EditOutcome {
            latent: x,
            video: edited,
            trace,
            scores,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub sigma2: Option<f64>,
    pub alpha: f64,
    pub flag: bool,
    pub s_star: f64,
    pub omega: f64,
}

#[derive(Debug, Clone)]
pub struct EditOutcome<T> {
    pub latent: Latent4D<T>,
    pub video: Video<T>,
    pub trace: Vec<StepRecord>,
    pub scores: RegionScore,
}

impl<T> EditOutcome<T> {
    pub fn flags(&self) -> usize {
        self.trace.iter().filter(|r| r.flag).count()
    }
}

/// Worst deviations found by [`lock_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockReport {
    pub steps: usize,
    /// Locked attention outputs against the caching pass.
    pub attention: f64,
    /// Locked attention on a divergent input against a direct recompute from the bank.
    pub recompute: f64,
    /// Guided `x̂₀` against the caching pass `x̂₀`.
    pub x0: f64,
    pub softmax: f64,
}

/// Replays the final κ steps of the source trajectory with every token in the
/// background, α = 1, source conditioning and guidance reduced to the
/// conditional branch, and measures how far the locked passes drift from the
/// caching pass.
pub fn lock_check<T: Real>(cfg: &RunConfig, engine: &Engine<T>, inputs: &EditInputs<T>, bank: &KvBank<T>) -> Result<LockReport> {
    let z0 = engine.encoder.encode(&inputs.video)?;
    let eps_shared = shared_noise::<T>(cfg.seed, z0.shape());
    let tokens = bank.meta().tokens;
    let background = TokenMask::zeros(tokens);
    let plan = InjectionPlan {
        token_mask: &background,
        alpha: T::one(),
        active: true,
    };
    let guidance = GuidanceConfig {
        omega0: 1.0,
        ..cfg.guidance
    };
    let toggles = Toggles {
        s_star: false,
        omega_schedule: false,
        kv_schedule: false,
        fixed_alpha: Some(1.0),
        global_detection: false,
    };
    let heads = engine.model.config().heads;
    let steps = engine.schedule.steps();
    let mut rep = LockReport {
        steps: 0,
        attention: 0.0,
        recompute: 0.0,
        x0: 0.0,
        softmax: 0.0,
    };
    let mut rng = stream(cfg.seed, "lock_probe");
    for k in (0..steps).filter(|&k| cfg.detector.in_window(k, steps)) {
        let t = engine.schedule.timestep(k);
        let x_t = engine.schedule.forward_noise(&z0, t, &eps_shared)?;
        let (eps_src, src) = engine.model.forward_traced(&x_t, t, &inputs.cond_src)?;
        let (_, locked) = engine
            .model
            .controlled_forward_traced(&x_t, t, k, &inputs.cond_src, Some(bank), &plan)?;
        for (a, b) in src.layers.iter().zip(&locked.layers) {
            rep.attention = rep.attention.max(max_abs(&a.attn_out, &b.attn_out));
            rep.softmax = rep.softmax.max(b.softmax_err.as_f64());
        }
        // A perturbed input still attends only to cached keys and values.
        let probe = x_t.zip_map(&Latent4D::randn(x_t.shape(), &mut rng), |a, b| a + T::lit(0.5) * b)?;
        let (_, div) = engine
            .model
            .controlled_forward_traced(&probe, t, k, &inputs.cond_src, Some(bank), &plan)?;
        for (l, rec) in div.layers.iter().enumerate() {
            let entry = bank.entry(k, l).ok_or_else(|| KvLockError::Integrity(format!("missing entry {k}/{l}")))?;
            let q = rec.hidden.dot(&engine.model.blocks[l].w_q);
            let (direct, _) = multi_head_attention(&q, &entry.keys, &entry.values, heads)?;
            rep.recompute = rep.recompute.max(max_abs(&direct, &rec.attn_out));
        }
        let null = Array1::zeros(cfg.model.hidden);
        let step_inputs = StepInputs {
            step: k,
            t,
            cond: &inputs.cond_src,
            null_cond: &null,
            bank: Some(bank),
            plan: &plan,
            sigma2: None,
            in_window: true,
        };
        let (eps, _) = cfg_step(&engine.model, &x_t, &step_inputs, &guidance, &toggles)?;
        let x0 = engine.schedule.predict_x0(&x_t, t, &eps)?;
        let x0_src = engine.schedule.predict_x0(&x_t, t, &eps_src)?;
        rep.x0 = rep.x0.max(x0.max_abs_diff(&x0_src)?.as_f64());
        rep.steps += 1;
    }
    Ok(rep)
}

fn max_abs<T: Real>(a: &ndarray::Array2<T>, b: &ndarray::Array2<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs().as_f64())
        .fold(0.0, f64::max)
}

/// Named toggle settings, one per ablation row.
pub fn ablation_arms() -> Vec<(&'static str, Toggles)> {
    let arm = |kv, omega, s_star| Toggles {
        s_star,
        omega_schedule: omega,
        kv_schedule: kv,
        fixed_alpha: None,
        global_detection: false,
    };
    vec![
        ("variance_kv_only", arm(true, false, false)),
        ("cfg_omega_only", arm(false, true, false)),
        ("cfg_s_star_only", arm(false, false, true)),
        ("cfg_s_star_and_omega", arm(false, true, true)),
        ("variance_kv_and_omega", arm(true, true, false)),
        ("variance_kv_and_s_star", arm(true, false, true)),
        (
            "fixed_fusion_0.5",
            Toggles {
                fixed_alpha: Some(0.5),
                ..Toggles::default()
            },
        ),
        (
            "global_detection",
            Toggles {
                global_detection: true,
                ..Toggles::default()
            },
        ),
        ("full_model", Toggles::default()),
    ]
}

/// Blob radius of ablation scene `i`; the first two are the small-foreground scenes.
pub fn ablation_radius(i: usize) -> f64 {
    0.12 + 0.03 * (i % 5) as f64
}

pub fn ablation_scene<T: Real>(cfg: &RunConfig, i: usize) -> Result<Scene<T>> {
    let spec = SceneSpec {
        radius: ablation_radius(i),
        ..cfg.scene
    };
    make_synthetic_video(derive_seed(cfg.seed, &format!("ablation_scene{i}")), &spec)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub scene: usize,
    pub radius: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub flags: Option<usize>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub arm: String,
    pub scenes_ok: usize,
    pub ssim_mean: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub flags_mean: Option<f64>,
    pub status: String,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Runs every selected arm on every scene. Arm failures become rows with a
/// failure status instead of aborting the matrix.
pub fn run_ablation<T: Real>(cfg: &RunConfig, engine: &Engine<T>) -> Result<(Vec<AblationRow>, Vec<AblationSummary>)> {
    let arms: Vec<(&str, Toggles)> = match &cfg.ablate_arms {
        None => ablation_arms(),
        Some(names) => {
            let all = ablation_arms();
            names
                .iter()
                .map(|n| {
                    all.iter()
                        .find(|(a, _)| a == n)
                        .copied()
                        .ok_or_else(|| KvLockError::Config(format!("unknown ablation arm {n:?}")))
                })
                .collect::<Result<_>>()?
        }
    };
    if arms.is_empty() || cfg.ablate_scenes == 0 {
        return Err(KvLockError::Config("ablation matrix is empty".into()));
    }
    let scenes: Vec<(EditInputs<T>, KvBank<T>)> = (0..cfg.ablate_scenes)
        .into_par_iter()
        .map(|i| {
            let scene = ablation_scene::<T>(cfg, i)?;
            let inputs = EditInputs::from_scene(&scene, cfg.model.hidden);
            let bank = engine.cache(cfg, &inputs)?;
            Ok((inputs, bank))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..scenes.len()).map(move |s| (a, s)))
        .collect();
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&(a, s)| {
            let (name, toggles) = arms[a];
            let (inputs, bank) = &scenes[s];
            let mut row = AblationRow {
                arm: name.to_string(),
                scene: s,
                radius: ablation_radius(s),
                ssim: None,
                psnr: None,
                flags: None,
                status: "ok".into(),
            };
            match engine.edit(cfg, &toggles, inputs, bank) {
                Ok(out) => {
                    row.ssim = Some(out.scores.ssim);
                    row.psnr = finite(out.scores.psnr);
                    row.flags = Some(out.flags());
                }
                Err(e) => row.status = format!("failed: {e}"),
            }
            row
        })
        .collect();
    let summary = arms
        .iter()
        .map(|(name, _)| {
            let ok: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == *name && r.status == "ok").collect();
            let mean = |f: &dyn Fn(&AblationRow) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let failed = scenes.len() - ok.len();
            AblationSummary {
                arm: name.to_string(),
                scenes_ok: ok.len(),
                ssim_mean: mean(&|r| r.ssim),
                psnr_mean: mean(&|r| r.psnr),
                flags_mean: mean(&|r| r.flags.map(|f| f as f64)),
                status: if failed == 0 { "ok".into() } else { format!("{failed} scene(s) failed") },
            }
        })
        .collect();
    Ok((rows, summary))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| KvLockError::Csv(e.into_error().into()))?;
    write_file(path, &bytes)
}

fn resolve(explicit: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join(name))
}

/// Video, mask and prompts for `cache`/`edit`: loaded from the configured
/// paths, or the seed's synthetic scene when no video path is given.
pub fn load_inputs<T: Real>(cfg: &RunConfig, allow_synthesis: bool) -> Result<(EditInputs<T>, bool)> {
    let out = cfg.out_dir();
    let synthetic = || make_synthetic_video::<T>(derive_seed(cfg.seed, "scene"), &cfg.scene);
    let (video, mask, src, tgt, synthesized) = match (&cfg.paths.video, &cfg.paths.mask) {
        (Some(v), Some(m)) => (
            Video::load(v)?,
            PixelMask::load(m)?,
            "source video".to_string(),
            "edited video".to_string(),
            false,
        ),
        (Some(_), None) | (None, Some(_)) => {
            return Err(KvLockError::Config("paths.video and paths.mask must be given together".into()))
        }
        (None, None) if allow_synthesis => {
            let s = synthetic()?;
            (s.video, s.mask, s.source_prompt, s.target_prompt, true)
        }
        (None, None) => {
            let s = synthetic()?;
            (
                Video::load(&out.join("video.bin"))?,
                PixelMask::load(&out.join("mask.bin"))?,
                s.source_prompt,
                s.target_prompt,
                false,
            )
        }
    };
    if video.dims() != mask.dims() {
        return Err(KvLockError::Shape(format!(
            "video {:?} and mask {:?} differ in shape",
            video.dims(),
            mask.dims()
        )));
    }
    let hidden = cfg.model.hidden;
    let src = cfg.prompts.source.clone().unwrap_or(src);
    let tgt = cfg.prompts.target.clone().unwrap_or(tgt);
    Ok((
        EditInputs {
            video,
            mask,
            cond_src: prompt_embedding(&src, hidden),
            cond_tgt: prompt_embedding(&tgt, hidden),
        },
        synthesized,
    ))
}

pub fn load_model<T: Real>(path: &Path) -> Result<DitLite<T>> {
    DitLite::from_weight_file(&WeightFile::load(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheOutcome {
    pub bank_path: PathBuf,
    pub bank_hash: u64,
    pub entries: usize,
    pub report_csv: String,
}

/// `cache`: writes the source assets (when synthesised), the weights and the bank.
pub fn cmd_cache(cfg: &RunConfig) -> Result<CacheOutcome> {
    let out = cfg.out_dir();
    let (inputs, synthesized) = load_inputs::<f32>(cfg, true)?;
    if synthesized {
        inputs.video.save(&out.join("video.bin"))?;
        inputs.mask.save(&out.join("mask.bin"))?;
    }
    let model = match &cfg.paths.weights {
        Some(p) => load_model::<f32>(p)?,
        None => {
            let m = build_model::<f32>(cfg)?;
            m.to_weight_file().save(&out.join("weights.bin"))?;
            m
        }
    };
    let engine = Engine::new(cfg, model)?;
    let bank = engine.cache(cfg, &inputs)?;
    let bank_path = resolve(&cfg.paths.bank, &out, "bank.bin");
    let bytes = bank.to_bytes();
    write_file(&bank_path, &bytes)?;
    let mut csv = Vec::new();
    write_memory_report(&bank.memory_report(), &mut csv)?;
    write_file(&out.join("bank_memory.csv"), &csv)?;
    Ok(CacheOutcome {
        bank_path,
        bank_hash: crate::io::hash64(&bytes),
        entries: bank.len(),
        report_csv: String::from_utf8(csv).expect("csv is UTF-8"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditSummary {
    pub ssim: f64,
    /// `None` when source and edit agree exactly on the background.
    pub psnr: Option<f64>,
    pub background_pixels: usize,
    pub ssim_windows: usize,
    pub flags: usize,
    pub steps: usize,
}

/// `edit`: guided, injected sampling against a compatible bank.
pub fn cmd_edit(cfg: &RunConfig) -> Result<EditSummary> {
    let out = cfg.out_dir();
    let (inputs, _) = load_inputs::<f32>(cfg, false)?;
    let model = load_model::<f32>(&resolve(&cfg.paths.weights, &out, "weights.bin"))?;
    let engine = Engine::new(cfg, model)?;
    let bank = KvBank::load(
        &resolve(&cfg.paths.bank, &out, "bank.bin"),
        engine.model.hash(),
        engine.schedule.hash(),
    )?;
    let outcome = engine.edit(cfg, &cfg.toggles, &inputs, &bank)?;
    outcome.video.save(&out.join("edited.bin"))?;
    write_csv(&out.join("trace.csv"), &outcome.trace)?;
    let summary = EditSummary {
        ssim: outcome.scores.ssim,
        psnr: finite(outcome.scores.psnr),
        background_pixels: outcome.scores.pixels,
        ssim_windows: outcome.scores.windows,
        flags: outcome.flags(),
        steps: outcome.trace.len(),
    };
    let json = serde_json::to_vec_pretty(&summary).expect("summary serialises");
    write_file(&out.join("summary.json"), &json)?;
    Ok(summary)
}

/// `ablate`: the ablation matrix on freshly calibrated weights.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationSummary>> {
    let out = cfg.out_dir();
    let model = match &cfg.paths.weights {
        Some(p) => load_model::<f32>(p)?,
        None => build_model::<f32>(cfg)?,
    };
    let engine = Engine::new(cfg, model)?;
    let (rows, summary) = run_ablation(cfg, &engine)?;
    write_csv(&out.join("ablation_scenes.csv"), &rows)?;
    write_csv(&out.join("ablation.csv"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyRow {
    pub seed: u64,
    pub arm: String,
    pub samples: usize,
    pub hallucinated: usize,
    pub auc: Option<f64>,
    pub median_hal_hallucinated: Option<f64>,
    pub median_hal_in_support: Option<f64>,
    pub flagged: Option<usize>,
    pub remaining_constant: Option<usize>,
    pub remaining_scheduled: Option<usize>,
    pub reduction: Option<f64>,
    pub final_loss: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ToyTrajectoryRow {
    trajectory: usize,
    label: usize,
    final_x: f64,
    hal: f64,
    in_support: bool,
    final_sigma2: Option<f64>,
    flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ToyTraceRow {
    arm: &'static str,
    trajectory: usize,
    step: usize,
    sigma2: Option<f64>,
    omega: f64,
    flag: bool,
}

/// Results of the toy experiment for one training seed.
#[derive(Debug, Clone)]
pub struct ToySeedResult {
    pub seed: u64,
    pub final_loss: f64,
    pub trained: SeparationSummary,
    pub analytic: SeparationSummary,
    pub suppression: SuppressionSummary,
    pub unconditional: Vec<ToyTrajectory>,
    pub constant: Vec<ToyTrajectory>,
    pub scheduled: Vec<ToyTrajectory>,
}

pub fn run_toy_seed(cfg: &RunConfig, seed: u64) -> Result<ToySeedResult> {
    let toy = &cfg.toy;
    toy.validate()?;
    let sched = toy.schedule()?;
    let (model, report) = toy.train_model(seed)?;
    let n = toy.trajectories;
    let mlp = MlpDenoiser {
        model: &model,
        train_steps: sched.train_steps(),
    };
    let analytic = AnalyticDenoiser {
        spec: &toy.mixture,
        schedule: &sched,
    };
    let guided = |dynamic| ToyGuidance::Guided {
        config: toy.guidance,
        dynamic,
    };
    let run = |d: &dyn crate::toy::Denoiser1d, g| sample_and_classify(d, &toy.mixture, &sched, n, &toy.detector, g, seed);
    let unconditional = run(&mlp, ToyGuidance::Unconditional)?;
    let control = run(&analytic, ToyGuidance::Unconditional)?;
    let constant = run(&mlp, guided(false))?;
    let scheduled = run(&mlp, guided(true))?;
    Ok(ToySeedResult {
        seed,
        final_loss: report.final_loss,
        trained: separation(&unconditional),
        analytic: separation(&control),
        suppression: suppression(&constant, &scheduled, toy.detector.tau)?,
        unconditional,
        constant,
        scheduled,
    })
}

fn separation_row(seed: u64, arm: &str, s: &SeparationSummary, loss: Option<f64>) -> ToyRow {
    ToyRow {
        seed,
        arm: arm.into(),
        samples: s.samples,
        hallucinated: s.hallucinated,
        auc: s.auc,
        median_hal_hallucinated: s.median_hal_hallucinated,
        median_hal_in_support: s.median_hal_in_support,
        flagged: None,
        remaining_constant: None,
        remaining_scheduled: None,
        reduction: None,
        final_loss: loss,
        note: if s.auc.is_none() { "insufficient positives".into() } else { String::new() },
    }
}

/// `toy`: trains the 1-D denoiser per seed and writes separation and
/// suppression summaries plus per-trajectory records.
pub fn cmd_toy(cfg: &RunConfig) -> Result<Vec<ToyRow>> {
    let out = cfg.out_dir();
    if cfg.toy_seeds.is_empty() {
        return Err(KvLockError::Config("toy.seeds is empty".into()));
    }
    let results: Vec<ToySeedResult> = cfg
        .toy_seeds
        .par_iter()
        .map(|&seed| run_toy_seed(cfg, seed))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for r in &results {
        rows.push(separation_row(r.seed, "trained", &r.trained, Some(r.final_loss)));
        rows.push(separation_row(r.seed, "analytic", &r.analytic, None));
        let s = &r.suppression;
        rows.push(ToyRow {
            seed: r.seed,
            arm: "scheduling".into(),
            samples: r.constant.len(),
            hallucinated: r.constant.iter().filter(|t| !t.in_support).count(),
            auc: None,
            median_hal_hallucinated: None,
            median_hal_in_support: None,
            flagged: Some(s.flagged),
            remaining_constant: Some(s.remaining_constant),
            remaining_scheduled: Some(s.remaining_scheduled),
            reduction: s.relative_reduction(),
            final_loss: None,
            note: if s.remaining_constant == 0 { "nothing to suppress".into() } else { String::new() },
        });
        let traj = |v: &[ToyTrajectory]| -> Vec<ToyTrajectoryRow> {
            v.iter()
                .enumerate()
                .map(|(i, t)| ToyTrajectoryRow {
                    trajectory: i,
                    label: t.label,
                    final_x: t.final_x,
                    hal: t.hal,
                    in_support: t.in_support,
                    final_sigma2: t.final_sigma2,
                    flagged: t.flagged,
                })
                .collect()
        };
        write_csv(&out.join(format!("toy_seed{}_trajectories.csv", r.seed)), &traj(&r.unconditional))?;
        let mut trace = Vec::new();
        for (arm, set) in [("constant", &r.constant), ("scheduled", &r.scheduled)] {
            for (i, t) in set.iter().enumerate() {
                for s in t.steps.iter().filter(|s| s.sigma2.is_some()) {
                    trace.push(ToyTraceRow {
                        arm,
                        trajectory: i,
                        step: s.step,
                        sigma2: s.sigma2,
                        omega: s.omega,
                        flag: s.flag,
                    });
                }
            }
        }
        write_csv(&out.join(format!("toy_seed{}_variance.csv", r.seed)), &trace)?;
    }
    write_csv(&out.join("toy_summary.csv"), &rows)?;
    Ok(rows)
}

/// `report`: collects whatever run outputs exist in the output directory
/// into `report.md`.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let mut text = String::from("# kvlock run report\n");
    let mut found = false;
    let summary = out.join("summary.json");
    if summary.exists() {
        found = true;
        let raw = crate::io::read_file(&summary, "summary")?;
        let v: serde_json::Value = serde_json::from_slice(&raw)
            .map_err(|e| KvLockError::corrupt(&summary, e.to_string()))?;
        text.push_str("\n## Edit\n\n");
        for key in ["ssim", "psnr", "flags", "steps", "background_pixels"] {
            text.push_str(&format!("- {key}: {}\n", v.get(key).unwrap_or(&serde_json::Value::Null)));
        }
    }
    for (file, title) in [
        ("bank_memory.csv", "KV bank memory"),
        ("ablation.csv", "Ablation"),
        ("toy_summary.csv", "Toy hallucination experiment"),
    ] {
        let path = out.join(file);
        if !path.exists() {
            continue;
        }
        found = true;
        text.push_str(&format!("\n## {title}\n\n"));
        text.push_str(&markdown_table(&path)?);
    }
    if !found {
        return Err(KvLockError::NotFound {
            what: "run outputs",
            path: out,
        });
    }
    write_file(&out.join("report.md"), text.as_bytes())?;
    Ok(text)
}

fn markdown_table(path: &Path) -> Result<String> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut s = format!("| {} |\n|{}\n", headers.join(" | "), " --- |".repeat(headers.len()));
    for rec in r.records() {
        let rec = rec?;
        s.push_str(&format!("| {} |\n", rec.iter().collect::<Vec<_>>().join(" | ")));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.schedule.steps = 24;
        cfg.detector.kappa = 12;
        cfg.guidance.kappa = 12;
        cfg.calibration.samples = 8;
        cfg.ablate_scenes = 2;
        cfg
    }

    #[test]
    fn arms_cover_every_row() {
        let arms = ablation_arms();
        assert_eq!(arms.len(), 9);
        assert_eq!(arms.last().unwrap().1, Toggles::default());
        assert!(arms.iter().any(|(_, t)| t.fixed_alpha == Some(0.5)));
        assert!(arms.iter().any(|(_, t)| t.global_detection));
    }

    #[test]
    fn edit_runs_and_is_deterministic() {
        let cfg = small_cfg();
        let engine = Engine::new(&cfg, build_model::<f32>(&cfg).unwrap()).unwrap();
        let scene = ablation_scene::<f32>(&cfg, 0).unwrap();
        let inputs = EditInputs::from_scene(&scene, cfg.model.hidden);
        let bank = engine.cache(&cfg, &inputs).unwrap();
        let a = engine.edit(&cfg, &Toggles::default(), &inputs, &bank).unwrap();
        let b = engine.edit(&cfg, &Toggles::default(), &inputs, &bank).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 24);
        for r in &a.trace[..12] {
            assert_eq!(r.alpha, 0.0);
            assert_eq!(r.omega, 5.0);
            assert!(!r.flag);
        }
        assert!(a.scores.ssim.is_finite());
    }

    #[test]
    fn lock_holds_on_small_config() {
        let cfg = small_cfg();
        let engine = Engine::new(&cfg, build_model::<f32>(&cfg).unwrap()).unwrap();
        let scene = ablation_scene::<f32>(&cfg, 1).unwrap();
        let inputs = EditInputs::from_scene(&scene, cfg.model.hidden);
        let bank = engine.cache(&cfg, &inputs).unwrap();
        let rep = lock_check(&cfg, &engine, &inputs, &bank).unwrap();
        assert_eq!(rep.steps, 12);
        assert!(rep.attention <= 1e-6 && rep.recompute <= 1e-6 && rep.x0 <= 1e-4, "{rep:?}");
    }

    #[test]
    fn empty_arm_list_is_error() {
        let mut cfg = small_cfg();
        cfg.ablate_arms = Some(vec![]);
        let engine = Engine::new(&cfg, build_model::<f32>(&cfg).unwrap()).unwrap();
        assert!(matches!(run_ablation(&cfg, &engine), Err(KvLockError::Config(_))));
        cfg.ablate_arms = Some(vec!["nope".into()]);
        assert!(run_ablation(&cfg, &engine).is_err());
    }

    #[test]
    fn mismatched_bank_is_rejected() {
        let cfg = small_cfg();
        let engine = Engine::new(&cfg, build_model::<f32>(&cfg).unwrap()).unwrap();
        let scene = ablation_scene::<f32>(&cfg, 0).unwrap();
        let inputs = EditInputs::from_scene(&scene, cfg.model.hidden);
        let bank = engine.cache(&cfg, &inputs).unwrap();
        let mut other = cfg.clone();
        other.seed = 99;
        let engine2 = Engine::new(&other, build_model::<f32>(&other).unwrap()).unwrap();
        assert!(matches!(
            engine2.edit(&other, &Toggles::default(), &inputs, &bank),
            Err(KvLockError::Compatibility(_))
        ));
    }
}
