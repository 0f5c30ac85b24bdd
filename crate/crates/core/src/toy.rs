//! One-dimensional Gaussian-mixture diffusion testbed.
//!
//! A tiny MLP trained on a narrow two-mode mixture smooths the score between
//! the modes and produces samples in the near-zero-density gap. The exact
//! mixture score gives a hallucination-free control.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{KvLockError, Result};
use crate::hallucination::{hal_metric, DetectorConfig, TrajectoryWindow};
use crate::guidance::dynamic_omega;
use crate::guidance::GuidanceConfig;
use crate::rng::{indexed_stream, normal, stream};
use crate::scalar::Real;
use crate::scheduler::NoiseSchedule;
use crate::weights::{ModelKind, TensorCursor, WeightFile};

/// Density at or below this fraction of the peak density is outside the support.
pub const SUPPORT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub centers: Vec<f64>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            centers: vec![-1.0, 1.0],
            std: 0.05,
            weights: vec![0.5, 0.5],
        }
    }
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + (2.0 * std::f64::consts::PI * var).ln())
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if self.centers.len() < 2
            || self.centers.len() != self.weights.len()
            || !(self.std > 0.0)
            || self.weights.iter().any(|&w| w < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(KvLockError::Config(format!("invalid mixture {self:?}")));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.centers.len()
    }

    pub fn density(&self, x: f64) -> f64 {
        let var = self.std * self.std;
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(&c, &w)| w * log_normal_pdf(x, c, var).exp())
            .sum()
    }

    /// Peak density, searched on a fine grid around the centres.
    pub fn max_density(&self) -> f64 {
        let mut best: f64 = 0.0;
        for &c in &self.centers {
            for i in -200..=200 {
                best = best.max(self.density(c + self.std * i as f64 / 100.0));
            }
        }
        best
    }

    pub fn in_support(&self, x: f64, max_density: f64) -> bool {
        self.density(x) > SUPPORT_EPS * max_density
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut mode = self.modes() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                mode = i;
                break;
            }
        }
        (mode, self.centers[mode] + self.std * normal::<f64, R>(rng))
    }
}

/// Exact noise prediction for the noised mixture marginal at timestep `t`:
/// `ε̂ = −√(1−ᾱₜ)·∇ log qₜ(x)`. With `class = Some(i)` only mode `i` is used.
pub fn analytic_eps<T: Real>(x: f64, t: usize, spec: &MixtureSpec, schedule: &NoiseSchedule<T>, class: Option<usize>) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?.as_f64();
    let var = ab * spec.std * spec.std + 1.0 - ab;
    let sa = ab.sqrt();
    let comps: Vec<(f64, f64)> = spec
        .centers
        .iter()
        .zip(&spec.weights)
        .enumerate()
        .filter(|(i, _)| class.is_none_or(|c| c == *i))
        .map(|(_, (&c, &w))| (w.ln() + log_normal_pdf(x, sa * c, var), -(x - sa * c) / var))
        .collect();
    let top = comps.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (lw, score) in comps {
        let r = (lw - top).exp();
        num += r * score;
        den += r;
    }
    Ok(-(1.0 - ab).sqrt() * num / den)
}

/// Conditioning label of the toy denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub time_features: usize,
    pub classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            time_features: 8,
            classes: 2,
        }
    }
}

impl MlpConfig {
    pub fn inputs(&self) -> usize {
        1 + self.time_features + self.classes + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Dense<T> {
    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

/// `x, time features, one-hot label → tanh → tanh → ε̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp<T> {
    config: MlpConfig,
    pub layers: Vec<Dense<T>>,
}

struct Activations<T> {
    input: Array2<T>,
    a1: Array2<T>,
    a2: Array2<T>,
    out: Array1<T>,
}

impl<T: Real> TinyMlp<T> {
    pub fn seeded<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 || config.classes == 0 || config.time_features % 2 != 0 {
            return Err(KvLockError::Config(format!("invalid MLP config {config:?}")));
        }
        let dims = [config.inputs(), config.hidden, config.hidden, 1];
        let layers = dims
            .windows(2)
            .map(|d| {
                let scale = 1.0 / (d[0] as f64).sqrt();
                Dense {
                    w: Array2::from_shape_simple_fn((d[0], d[1]), || {
                        T::from_disk((normal::<f64, R>(rng) * scale) as f32)
                    }),
                    b: Array1::zeros(d[1]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    /// Input rows for a batch.
    pub fn features(&self, x: &[T], t_frac: &[f64], labels: &[Label]) -> Result<Array2<T>> {
        let n = x.len();
        if t_frac.len() != n || labels.len() != n {
            return Err(KvLockError::Shape(format!(
                "batch of {n} values with {} timesteps and {} labels",
                t_frac.len(),
                labels.len()
            )));
        }
        let c = &self.config;
        let mut m = Array2::zeros((n, c.inputs()));
        let half = c.time_features / 2;
        for i in 0..n {
            m[[i, 0]] = x[i];
            for j in 0..half {
                let f = std::f64::consts::PI * 0.5 * (1u64 << j) as f64 * t_frac[i];
                m[[i, 1 + j]] = T::lit(f.sin());
                m[[i, 1 + half + j]] = T::lit(f.cos());
            }
            let slot = match labels[i] {
                Label::Class(k) if k < c.classes => k,
                Label::Class(k) => {
                    return Err(KvLockError::Index(format!("label {k} outside {} classes", c.classes)))
                }
                Label::Null => c.classes,
            };
            m[[i, 1 + c.time_features + slot]] = T::one();
        }
        Ok(m)
    }

    fn activations(&self, input: Array2<T>) -> Activations<T> {
        let a1 = (input.dot(&self.layers[0].w) + &self.layers[0].b).mapv(|v| v.tanh());
        let a2 = (a1.dot(&self.layers[1].w) + &self.layers[1].b).mapv(|v| v.tanh());
        let out = (a2.dot(&self.layers[2].w) + &self.layers[2].b).column(0).to_owned();
        Activations { input, a1, a2, out }
    }

    pub fn forward(&self, input: Array2<T>) -> Array1<T> {
        self.activations(input).out
    }

    /// Mean squared error against `target` and its parameter gradients.
    pub fn loss_and_grad(&self, input: Array2<T>, target: &Array1<T>) -> (T, Vec<Dense<T>>) {
        let act = self.activations(input);
        let n = T::lit(target.len() as f64);
        let resid = &act.out - target;
        let loss = resid.dot(&resid) / n;
        let dy = resid.mapv(|r| T::lit(2.0) * r / n).insert_axis(Axis(1));
        let g3 = Dense {
            w: act.a2.t().dot(&dy),
            b: dy.sum_axis(Axis(0)),
        };
        let dz2 = dy.dot(&self.layers[2].w.t()) * act.a2.mapv(|a| T::one() - a * a);
        let g2 = Dense {
            w: act.a1.t().dot(&dz2),
            b: dz2.sum_axis(Axis(0)),
        };
        let dz1 = dz2.dot(&self.layers[1].w.t()) * act.a1.mapv(|a| T::one() - a * a);
        let g1 = Dense {
            w: act.input.t().dot(&dz1),
            b: dz1.sum_axis(Axis(0)),
        };
        (loss, vec![g1, g2, g3])
    }

    pub fn eps(&self, x: &[T], t_frac: f64, labels: &[Label]) -> Result<Array1<T>> {
        let tf = vec![t_frac; x.len()];
        Ok(self.forward(self.features(x, &tf, labels)?))
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let c = &self.config;
        let mut f = WeightFile::new(
            ModelKind::TinyMlp,
            vec![c.hidden as u32, c.time_features as u32, c.classes as u32],
        );
        for l in &self.layers {
            f.push_matrix(&l.w);
            f.push_vector(&l.b);
        }
        f
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if file.kind != ModelKind::TinyMlp || file.meta.len() != 3 {
            return Err(KvLockError::Compatibility("expected tiny MLP weights".into()));
        }
        let config = MlpConfig {
            hidden: file.meta[0] as usize,
            time_features: file.meta[1] as usize,
            classes: file.meta[2] as usize,
        };
        let dims = [config.inputs(), config.hidden, config.hidden, 1];
        let mut cur = TensorCursor::new(file);
        let mut layers = Vec::new();
        for d in dims.windows(2) {
            layers.push(Dense {
                w: cur.matrix(d[0], d[1])?,
                b: cur.vector(d[1])?,
            });
        }
        cur.finish()?;
        Ok(Self { config, layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Probability of replacing the class label by the null label.
    pub null_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            null_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the last 100 steps.
    pub final_loss: f64,
}

/// Trains the ε-prediction objective with SGD and momentum.
pub fn train_toy_denoiser<T: Real>(
    model: &mut TinyMlp<T>,
    spec: &MixtureSpec,
    schedule: &NoiseSchedule<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    spec.validate()?;
    let mut rng = stream(seed, "toy_train");
    let mut velocity: Vec<Dense<T>> = model.layers.iter().map(Dense::zeros_like).collect();
    let big_t = schedule.train_steps();
    let (lr, mu) = (T::lit(cfg.learning_rate), T::lit(cfg.momentum));
    let mut recent = std::collections::VecDeque::with_capacity(100);
    for step in 0..cfg.steps {
        let mut x = Vec::with_capacity(cfg.batch);
        let mut tf = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        let mut target = Array1::zeros(cfg.batch);
        for i in 0..cfg.batch {
            let (mode, x0) = spec.sample(&mut rng);
            let t = rng.random_range(1..=big_t);
            let e: f64 = normal(&mut rng);
            let ab = schedule.alpha_bar(t)?.as_f64();
            x.push(T::lit(ab.sqrt() * x0 + (1.0 - ab).sqrt() * e));
            tf.push(t as f64 / big_t as f64);
            let null: f64 = rng.random();
            labels.push(if null < cfg.null_prob { Label::Null } else { Label::Class(mode) });
            target[i] = T::lit(e);
        }
        let input = model.features(&x, &tf, &labels)?;
        let (loss, grads) = model.loss_and_grad(input, &target);
        if !loss.is_finite() {
            return Err(KvLockError::Training {
                seed,
                step,
                reason: "loss is not finite".into(),
            });
        }
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(loss.as_f64());
        for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
            v.w.zip_mut_with(&g.w, |v, &g| *v = mu * *v - lr * g);
            v.b.zip_mut_with(&g.b, |v, &g| *v = mu * *v - lr * g);
            layer.w += &v.w;
            layer.b += &v.b;
        }
    }
    let final_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    Ok(TrainReport { final_loss })
}

/// Noise predictor driving the 1-D sampler.
pub trait Denoiser1d: Sync {
    fn eps(&self, x: &[f64], t: usize, labels: &[Label]) -> Result<Vec<f64>>;
}

pub struct AnalyticDenoiser<'a> {
    pub spec: &'a MixtureSpec,
    pub schedule: &'a NoiseSchedule<f64>,
}

impl Denoiser1d for AnalyticDenoiser<'_> {
    fn eps(&self, x: &[f64], t: usize, labels: &[Label]) -> Result<Vec<f64>> {
        x.iter()
            .zip(labels)
            .map(|(&v, l)| {
                let class = match l {
                    Label::Class(c) => Some(*c),
                    Label::Null => None,
                };
                analytic_eps(v, t, self.spec, self.schedule, class)
            })
            .collect()
    }
}

pub struct MlpDenoiser<'a, T> {
    pub model: &'a TinyMlp<T>,
    pub train_steps: usize,
}

impl<T: Real> Denoiser1d for MlpDenoiser<'_, T> {
    fn eps(&self, x: &[f64], t: usize, labels: &[Label]) -> Result<Vec<f64>> {
        let xs: Vec<T> = x.iter().map(|&v| T::lit(v)).collect();
        let out = self.model.eps(&xs, t as f64 / self.train_steps as f64, labels)?;
        Ok(out.iter().map(|v| v.as_f64()).collect())
    }
}

/// How the 1-D sampler combines predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyGuidance {
    /// Null label only.
    Unconditional,
    /// Classifier-free guidance towards each trajectory's label, optionally
    /// with the variance-driven scale.
    Guided { config: GuidanceConfig, dynamic: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrajectory {
    pub label: usize,
    pub final_x: f64,
    /// `x̂₀` at each step of the final κ window.
    pub x0_trace: Vec<f64>,
    pub hal: f64,
    pub in_support: bool,
    /// Window variance after the last step.
    pub final_sigma2: Option<f64>,
    /// Flag fired at any step inside the window.
    pub flagged: bool,
    /// `(step, σ², ω, flag)` per sampling step.
    pub steps: Vec<ToyStep>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStep {
    pub step: usize,
    pub sigma2: Option<f64>,
    pub omega: f64,
    pub flag: bool,
}

/// Runs `n` reverse trajectories in lockstep. Trajectory `i` draws its label
/// and noise from its own sub-stream of `seed`, so arms sharing a seed share
/// noise.
pub fn sample_and_classify(
    denoiser: &dyn Denoiser1d,
    spec: &MixtureSpec,
    schedule: &NoiseSchedule<f64>,
    n: usize,
    detector: &DetectorConfig,
    guidance: ToyGuidance,
    seed: u64,
) -> Result<Vec<ToyTrajectory>> {
    detector.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let k_steps = schedule.steps();
    let mut labels = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = indexed_stream(seed, "toy_sample", i as u64);
        labels.push(rng.random_range(0..spec.modes()));
        noise.push((0..=k_steps).map(|_| normal::<f64, _>(&mut rng)).collect::<Vec<_>>());
    }
    let cond: Vec<Label> = labels.iter().map(|&l| Label::Class(l)).collect();
    let null = vec![Label::Null; n];
    let mut x: Vec<f64> = noise.iter().map(|z| z[0]).collect();
    let mut windows: Vec<TrajectoryWindow<f64>> = (0..n)
        .map(|_| TrajectoryWindow::new(detector.window))
        .collect::<Result<_>>()?;
    let mut traces = vec![Vec::with_capacity(detector.kappa); n];
    let mut steps = vec![Vec::with_capacity(k_steps); n];
    let mut flagged = vec![false; n];
    for k in 0..k_steps {
        let t = schedule.timestep(k);
        let in_window = detector.in_window(k, k_steps);
        let ab = schedule.alpha_bar(t)?;
        let eps_u = denoiser.eps(&x, t, &null)?;
        let (eps, omegas): (Vec<f64>, Vec<f64>) = match guidance {
            ToyGuidance::Unconditional => (eps_u, vec![1.0; n]),
            ToyGuidance::Guided { config, dynamic } => {
                let eps_c = denoiser.eps(&x, t, &cond)?;
                (0..n)
                    .map(|i| {
                        let omega = match windows[i].variance() {
                            Some(s2) if dynamic => dynamic_omega(s2, &config, in_window, true),
                            _ => config.omega0,
                        };
                        ((1.0 - omega) * eps_u[i] + omega * eps_c[i], omega)
                    })
                    .unzip()
            }
        };
        let t_prev = schedule.next_timestep(k);
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let sigma = if t_prev == 0 { 0.0 } else { beta.sqrt() };
        for i in 0..n {
            let sigma2 = windows[i].variance();
            let flag = matches!(sigma2, Some(s) if in_window && s > detector.tau);
            flagged[i] |= flag;
            steps[i].push(ToyStep {
                step: k,
                sigma2,
                omega: omegas[i],
                flag,
            });
            let x0 = (x[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt();
            if in_window {
                windows[i].push(&[x0])?;
                traces[i].push(x0);
            }
            x[i] = (x[i] - beta / (1.0 - ab).sqrt() * eps[i]) / alpha.sqrt() + sigma * noise[i][k + 1];
            if !x[i].is_finite() {
                return Err(KvLockError::Numeric(format!(
                    "toy trajectory {i} diverged at step {k}"
                )));
            }
        }
    }
    let peak = spec.max_density();
    (0..n)
        .map(|i| {
            Ok(ToyTrajectory {
                label: labels[i],
                final_x: x[i],
                hal: hal_metric(&traces[i].iter().map(|&v| [v]).collect::<Vec<_>>())?,
                in_support: spec.in_support(x[i], peak),
                final_sigma2: windows[i].variance(),
                flagged: flagged[i],
                x0_trace: std::mem::take(&mut traces[i]),
                steps: std::mem::take(&mut steps[i]),
            })
        })
        .collect()
}

/// Settings of the 1-D hallucination experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub mixture: MixtureSpec,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub sampling_steps: usize,
    pub trajectories: usize,
    pub detector: DetectorConfig,
    pub guidance: GuidanceConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec::default(),
            mlp: MlpConfig::default(),
            train: TrainConfig::default(),
            sampling_steps: 200,
            trajectories: 2000,
            detector: DetectorConfig {
                tau: 0.01,
                kappa: 30,
                window: 10,
            },
            guidance: GuidanceConfig {
                omega0: 0.6,
                b: 2.0,
                tau: 0.01,
                kappa: 30,
                eps_div: 1e-8,
            },
        }
    }
}

impl ToyConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::linear(1000, 1e-4, 0.02, self.sampling_steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.detector.validate()?;
        self.guidance.validate()?;
        if self.sampling_steps < self.detector.kappa {
            return Err(KvLockError::Config(format!(
                "toy sampler has {} steps, fewer than the {}-step window",
                self.sampling_steps, self.detector.kappa
            )));
        }
        Ok(())
    }

    pub fn train_model(&self, seed: u64) -> Result<(TinyMlp<f64>, TrainReport)> {
        let mut model = TinyMlp::seeded(self.mlp, &mut stream(seed, "toy_weights"))?;
        let report = train_toy_denoiser(&mut model, &self.mixture, &self.schedule()?, &self.train, seed)?;
        Ok((model, report))
    }
}

/// Separation of hallucinated from in-support samples by Hal metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationSummary {
    pub samples: usize,
    pub hallucinated: usize,
    /// `None` when either class is empty.
    pub auc: Option<f64>,
    pub median_hal_hallucinated: Option<f64>,
    pub median_hal_in_support: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn separation(trajectories: &[ToyTrajectory]) -> SeparationSummary {
    let pos: Vec<bool> = trajectories.iter().map(|t| !t.in_support).collect();
    let hal: Vec<f64> = trajectories.iter().map(|t| t.hal).collect();
    SeparationSummary {
        samples: trajectories.len(),
        hallucinated: pos.iter().filter(|&&p| p).count(),
        auc: roc_auc(&hal, &pos),
        median_hal_hallucinated: median(trajectories.iter().filter(|t| !t.in_support).map(|t| t.hal).collect()),
        median_hal_in_support: median(trajectories.iter().filter(|t| t.in_support).map(|t| t.hal).collect()),
    }
}

/// Effect of the variance-driven scale on trajectories the constant-scale arm flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuppressionSummary {
    pub flagged: usize,
    /// Flagged trajectories whose final window variance stays above `τ`.
    pub remaining_constant: usize,
    pub remaining_scheduled: usize,
}

impl SuppressionSummary {
    /// `1 − scheduled/constant`; `None` when the constant arm leaves nothing to suppress.
    pub fn relative_reduction(&self) -> Option<f64> {
        (self.remaining_constant > 0)
            .then(|| 1.0 - self.remaining_scheduled as f64 / self.remaining_constant as f64)
    }
}

/// Runs the guided sampler with constant and with scheduled `ω` on the same
/// seed and compares the trajectories flagged by the constant arm.
pub fn suppression(
    constant: &[ToyTrajectory],
    scheduled: &[ToyTrajectory],
    tau: f64,
) -> Result<SuppressionSummary> {
    if constant.len() != scheduled.len() {
        return Err(KvLockError::Shape("arms differ in trajectory count".into()));
    }
    let flagged: Vec<usize> = (0..constant.len()).filter(|&i| constant[i].flagged).collect();
    let remaining = |arm: &[ToyTrajectory]| {
        flagged
            .iter()
            .filter(|&&i| matches!(arm[i].final_sigma2, Some(s) if s > tau))
            .count()
    };
    Ok(SuppressionSummary {
        flagged: flagged.len(),
        remaining_constant: remaining(constant),
        remaining_scheduled: remaining(scheduled),
    })
}

/// Probability that a random positive scores above a random negative, with
/// ties counted half. `None` when either class is empty.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}
