//! DiT-lite: a miniature diffusion transformer whose self-attention layers
//! expose their pre-attention hidden states and accept KV injection.
//!
//! Forward pass: patchify `(C, T, h, w)` into `N` tokens, embed, then `L`
//! pre-norm blocks (conditioning added per block, multi-head self-attention,
//! GELU MLP), and a linear readout of the clean sample from the final
//! normalised hidden state plus noise-level-scaled input patches. The clean
//! estimate is converted to a noise prediction with the stored `ᾱ` table.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::attention::{mix_kv, multi_head_attention, InjectionPlan, KvEntry};
use crate::error::{KvLockError, Result};
use crate::kv_bank::KvBank;
use crate::linalg::solve_spd;
use crate::mask::{PatchSize, TokenMask};
use crate::rng::normal;
use crate::scalar::Real;
use crate::scheduler::NoiseSchedule;
use crate::tensor::{Latent4D, Shape4};
use crate::weights::{ModelKind, TensorCursor, WeightFile};

const LN_EPS: f64 = 1e-5;

/// Scale of the token position codes.
const POS_SCALE: f64 = 6.0;
/// Gain of the tied query/key projections; sharpens attention towards matching tokens.
const QK_GAIN: f64 = 2.0;
/// Fixed seed of the position codes, independent of the run seed.
const POS_SEED: u64 = 77;

/// Prior variances of the skip-path gains `√ᾱ / (ᾱ·v + 1 − ᾱ)`.
const SKIP_VARIANCES: [f64; 4] = [10.0, 1.0, 0.1, 0.01];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DitConfig {
    pub channels: usize,
    pub patch: PatchSize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            patch: PatchSize::default(),
            hidden: 32,
            heads: 2,
            layers: 4,
            mlp_hidden: 64,
        }
    }
}

impl DitConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch.volume()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return Err(KvLockError::Config("model sizes must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(KvLockError::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.patch.volume() == 0 {
            return Err(KvLockError::Config("patch size must be positive".into()));
        }
        Ok(())
    }

    fn meta(&self, table: usize) -> Vec<u32> {
        [
            self.channels,
            self.patch.t,
            self.patch.h,
            self.patch.w,
            self.hidden,
            self.heads,
            self.layers,
            self.mlp_hidden,
            table,
        ]
        .iter()
        .map(|&v| v as u32)
        .collect()
    }

    fn from_meta(meta: &[u32]) -> Result<(Self, usize)> {
        if meta.len() != 9 {
            return Err(KvLockError::Integrity(format!(
                "DiT header has {} fields, expected 9",
                meta.len()
            )));
        }
        let m: Vec<usize> = meta.iter().map(|&v| v as usize).collect();
        let cfg = Self {
            channels: m[0],
            patch: PatchSize {
                t: m[1],
                h: m[2],
                w: m[3],
            },
            hidden: m[4],
            heads: m[5],
            layers: m[6],
            mlp_hidden: m[7],
        };
        cfg.validate()?;
        if m[8] == 0 {
            return Err(KvLockError::Integrity("DiT noise table is empty".into()));
        }
        Ok((cfg, m[8]))
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub w_cond: Array2<T>,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
    pub w_mlp1: Array2<T>,
    pub b_mlp1: Array1<T>,
    pub w_mlp2: Array2<T>,
    pub b_mlp2: Array1<T>,
}

/// What one layer saw and produced during a recorded forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord<T> {
    /// Normalised pre-attention hidden state `h^(ℓ)`, `N × hidden`.
    pub hidden: Array2<T>,
    /// Keys and values actually attended to (after any mixing).
    pub keys: Array2<T>,
    pub values: Array2<T>,
    /// Concatenated head outputs before the output projection.
    pub attn_out: Array2<T>,
    /// Largest `|Σ softmax row − 1|` over all heads.
    pub softmax_err: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerRecord<T>>,
}

/// Per-layer cached KV mixed into one forward pass.
struct Injection<'a, T> {
    entries: &'a [KvEntry<T>],
    plan: &'a InjectionPlan<'a, T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitLite<T> {
    config: DitConfig,
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub w_out: Array2<T>,
    pub w_skip: Array2<T>,
    pub b_out: Array1<T>,
    /// `ᾱ_t` for `t = 1..=T`.
    pub alpha_bars: Array1<T>,
}

fn seeded_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<T> {
    // Rounded through f32 so a saved and reloaded model is bit-identical.
    Array2::from_shape_simple_fn((rows, cols), || T::from_disk((normal::<f64, R>(rng) * scale) as f32))
}

fn disk_table<T: Real>(v: &[T]) -> Array1<T> {
    v.iter().map(|&a| T::from_disk(a.to_disk())).collect()
}

pub fn layer_norm<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    let n = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    T::lit(0.5) * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

/// Sinusoidal embedding of a scalar position into `dim` features.
pub fn sinusoidal<T: Real>(position: f64, dim: usize) -> Array1<T> {
    let half = dim / 2;
    Array1::from_shape_fn(dim, |i| {
        let k = (i % half.max(1)) as f64;
        let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
        let v = if i < half {
            (position * freq).sin()
        } else {
            (position * freq).cos()
        };
        T::lit(v)
    })
}

/// Random Gaussian code per token index. Identical for every model and seed.
pub fn position_codes<T: Real>(tokens: usize, dim: usize) -> Array2<T> {
    let mut r = crate::rng::stream(POS_SEED, "position");
    let codes: Array2<f64> = crate::rng::normal_array((tokens, dim), &mut r);
    codes.mapv(|v| T::lit(v * POS_SCALE))
}

impl<T: Real> DitLite<T> {
    pub fn seeded<R: Rng + ?Sized>(config: DitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, m, p) = (config.hidden, config.mlp_hidden, config.patch_dim());
        let inv = |fan: usize| 1.0 / (fan as f64).sqrt();
        let w_in = seeded_matrix(p, h, inv(p), rng);
        let b_in = Array1::zeros(h);
        let blocks = (0..config.layers)
            .map(|_| {
                let w_cond = seeded_matrix(h, h, inv(h), rng);
                // Tied query/key projections: tokens attend to similar tokens.
                let w_q: Array2<T> = seeded_matrix(h, h, QK_GAIN * inv(h), rng);
                Block {
                w_cond,
                w_k: w_q.clone(),
                w_q,
                w_v: seeded_matrix(h, h, inv(h), rng),
                w_o: seeded_matrix(h, h, 0.5 * inv(h), rng),
                w_mlp1: seeded_matrix(h, m, inv(h), rng),
                b_mlp1: Array1::zeros(m),
                w_mlp2: seeded_matrix(m, h, 0.5 * inv(m), rng),
                b_mlp2: Array1::zeros(h),
            }})
            .collect();
        let w_out = Array2::zeros(((config.layers + 1) * h, p));
        let default = NoiseSchedule::<T>::linear(1000, 1e-4, 0.02, 1)?;
        Ok(Self {
            config,
            w_in,
            b_in,
            blocks,
            w_out,
            w_skip: Array2::zeros((SKIP_VARIANCES.len() * (p + 1), p)),
            b_out: Array1::zeros(p),
            alpha_bars: disk_table(default.alpha_bars()),
        })
    }

    /// Replaces the `ᾱ` table with the training schedule's.
    pub fn with_noise_levels(mut self, schedule: &NoiseSchedule<T>) -> Self {
        self.alpha_bars = disk_table(schedule.alpha_bars());
        self
    }

    /// Trunk features per token: final hidden state plus every layer's attention output.
    pub fn readout_width(&self) -> usize {
        (self.config.layers + 1) * self.config.hidden
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        if t == 0 || t > self.alpha_bars.len() {
            return Err(KvLockError::Index(format!(
                "timestep {t} outside 1..={}",
                self.alpha_bars.len()
            )));
        }
        Ok(self.alpha_bars[t - 1])
    }

    fn skip_gains(&self, t: usize) -> Result<Vec<T>> {
        let ab = self.alpha_bar(t)?.as_f64();
        Ok(SKIP_VARIANCES
            .iter()
            .map(|v| T::lit(ab.sqrt() / (ab * v + 1.0 - ab)))
            .collect())
    }

    pub fn config(&self) -> &DitConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Full concatenated K/V width cached per layer.
    pub fn kv_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn tokens_for(&self, shape: Shape4) -> Result<usize> {
        let p = self.config.patch;
        let (c, t, h, w) = shape;
        if c != self.config.channels || t % p.t != 0 || h % p.h != 0 || w % p.w != 0 {
            return Err(KvLockError::Shape(format!(
                "latent {shape:?} incompatible with {} channels and patch {p:?}",
                self.config.channels
            )));
        }
        Ok((t / p.t) * (h / p.h) * (w / p.w))
    }

    /// `(C, T, h, w)` → `N × (C·p_t·p_h·p_w)`, tokens in temporal-major, row-major order.
    pub fn patchify(&self, x: &Latent4D<T>) -> Result<Array2<T>> {
        let n = self.tokens_for(x.shape())?;
        let p = self.config.patch;
        let (c, _, h, w) = x.shape();
        let (gh, gw) = (h / p.h, w / p.w);
        let a = x.array();
        let mut out = Array2::<T>::zeros((n, self.config.patch_dim()));
        for (idx, mut row) in out.rows_mut().into_iter().enumerate() {
            let (tt, rem) = (idx / (gh * gw), idx % (gh * gw));
            let (ii, jj) = (rem / gw, rem % gw);
            let mut f = 0;
            for ch in 0..c {
                for dt in 0..p.t {
                    for di in 0..p.h {
                        for dj in 0..p.w {
                            row[f] = a[[ch, tt * p.t + dt, ii * p.h + di, jj * p.w + dj]];
                            f += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn unpatchify(&self, tokens: &Array2<T>, shape: Shape4) -> Result<Latent4D<T>> {
        let n = self.tokens_for(shape)?;
        if tokens.dim() != (n, self.config.patch_dim()) {
            return Err(KvLockError::Shape(format!(
                "token matrix {:?} does not match latent {shape:?}",
                tokens.dim()
            )));
        }
        let p = self.config.patch;
        let (c, _, h, w) = shape;
        let (gh, gw) = (h / p.h, w / p.w);
        let mut out = Latent4D::zeros(shape);
        let a = out.array_mut();
        for (idx, row) in tokens.rows().into_iter().enumerate() {
            let (tt, rem) = (idx / (gh * gw), idx % (gh * gw));
            let (ii, jj) = (rem / gw, rem % gw);
            let mut f = 0;
            for ch in 0..c {
                for dt in 0..p.t {
                    for di in 0..p.h {
                        for dj in 0..p.w {
                            a[[ch, tt * p.t + dt, ii * p.h + di, jj * p.w + dj]] = row[f];
                            f += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Timestep embedding plus conditioning vector.
    fn conditioning(&self, t: usize, cond: &Array1<T>) -> Result<Array1<T>> {
        if cond.len() != self.config.hidden {
            return Err(KvLockError::Shape(format!(
                "conditioning vector has {} entries, model width {}",
                cond.len(),
                self.config.hidden
            )));
        }
        Ok(sinusoidal::<T>(t as f64, self.config.hidden) + cond)
    }

    /// Runs the blocks and returns `[LN(x_L) | attn_1 | … | attn_L]` per token.
    fn trunk(
        &self,
        tokens: &Array2<T>,
        t: usize,
        cond: &Array1<T>,
        injection: Option<&Injection<'_, T>>,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Array2<T>> {
        let n = tokens.nrows();
        let c = self.conditioning(t, cond)?;
        let mut outputs = Vec::with_capacity(self.blocks.len() + 1);
        let mut x = tokens.dot(&self.w_in) + &self.b_in;
        x += &position_codes::<T>(n, self.config.hidden);
        for (l, block) in self.blocks.iter().enumerate() {
            x += &c.dot(&block.w_cond);
            let h = layer_norm(&x);
            let q = h.dot(&block.w_q);
            let mut k = h.dot(&block.w_k);
            let mut v = h.dot(&block.w_v);
            if let Some(inj) = injection {
                if inj.plan.active && inj.plan.alpha > T::zero() {
                    let entry: &KvEntry<T> = inj.entries.get(l).ok_or_else(|| {
                        KvLockError::Integrity(format!("no cached KV for layer {l}"))
                    })?;
                    if entry.tokens() != n {
                        return Err(KvLockError::Compatibility(format!(
                            "bank holds {} tokens, model sequence has {n}",
                            entry.tokens()
                        )));
                    }
                    (k, v) = mix_kv(&k, &v, entry, inj.plan)?;
                }
            }
            let (attn, softmax_err) = multi_head_attention(&q, &k, &v, self.config.heads)
                .map_err(|e| match e {
                    KvLockError::Numeric(m) => {
                        KvLockError::Numeric(format!("{m} at layer {l}, timestep {t}"))
                    }
                    other => other,
                })?;
            x += &attn.dot(&block.w_o);
            outputs.push(attn.clone());
            let mut mid = layer_norm(&x).dot(&block.w_mlp1) + &block.b_mlp1;
            mid.mapv_inplace(gelu);
            x += &(mid.dot(&block.w_mlp2) + &block.b_mlp2);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(KvLockError::Numeric(format!(
                    "non-finite hidden state after layer {l}, timestep {t}"
                )));
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.layers.push(LayerRecord {
                    hidden: h,
                    keys: k,
                    values: v,
                    attn_out: attn,
                    softmax_err,
                });
            }
        }
        outputs.insert(0, layer_norm(&x));
        let views: Vec<_> = outputs.iter().map(|m| m.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("equal row counts"))
    }

    /// `[x·g_v | √ᾱ·g_v]` for every prior variance `v`.
    fn skip_features(&self, tokens: &Array2<T>, t: usize) -> Result<Array2<T>> {
        let gains = self.skip_gains(t)?;
        let root = self.alpha_bar(t)?.sqrt();
        let mut views: Vec<Array2<T>> = gains.iter().map(|&g| tokens.mapv(|v| v * g)).collect();
        views.push(Array2::from_shape_fn((tokens.nrows(), gains.len()), |(_, j)| root * gains[j]));
        let views: Vec<_> = views.iter().map(|v| v.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("equal row counts"))
    }

    /// Clean-sample estimate per token.
    fn readout(&self, final_hidden: &Array2<T>, tokens: &Array2<T>, t: usize) -> Result<Array2<T>> {
        let g = self.trunk_gain(t)?;
        let learned = (final_hidden.dot(&self.w_out) + &self.b_out).mapv(|v| v * g);
        Ok(learned + self.skip_features(tokens, t)?.dot(&self.w_skip))
    }

    /// Weight on the learned part of the readout; vanishes as the noise does.
    fn trunk_gain(&self, t: usize) -> Result<T> {
        Ok((T::one() - self.alpha_bar(t)?).sqrt())
    }

    fn to_eps(&self, x_t: &Array2<T>, x0: &Array2<T>, t: usize) -> Result<Array2<T>> {
        let ab = self.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (T::one() - ab).sqrt());
        if !(s > T::zero()) {
            return Err(KvLockError::Singularity(format!("ᾱ({t}) = 1, noise undefined")));
        }
        let mut eps = x_t.clone();
        eps.zip_mut_with(x0, |e, &c| *e = (*e - a * c) / s);
        Ok(eps)
    }

    fn run(
        &self,
        x_t: &Latent4D<T>,
        t: usize,
        cond: &Array1<T>,
        injection: Option<&Injection<'_, T>>,
        record: bool,
    ) -> Result<(Latent4D<T>, Option<ForwardTrace<T>>)> {
        let tokens = self.patchify(x_t)?;
        let mut trace = record.then(|| ForwardTrace {
            layers: Vec::with_capacity(self.blocks.len()),
        });
        let fin = self.trunk(&tokens, t, cond, injection, trace.as_mut())?;
        let x0 = self.readout(&fin, &tokens, t)?;
        let eps = self.unpatchify(&self.to_eps(&tokens, &x0, t)?, x_t.shape())?;
        Ok((eps, trace))
    }

    /// Hook-free noise prediction `ε̂(x_t, t, cond)`.
    pub fn forward(&self, x_t: &Latent4D<T>, t: usize, cond: &Array1<T>) -> Result<Latent4D<T>> {
        Ok(self.run(x_t, t, cond, None, false)?.0)
    }

    pub fn forward_traced(
        &self,
        x_t: &Latent4D<T>,
        t: usize,
        cond: &Array1<T>,
    ) -> Result<(Latent4D<T>, ForwardTrace<T>)> {
        let (eps, trace) = self.run(x_t, t, cond, None, true)?;
        Ok((eps, trace.expect("recording requested")))
    }

    /// Forward pass with cached KV mixed into every self-attention layer when
    /// the plan is active. `step` indexes the bank's sampling step.
    pub fn controlled_forward(
        &self,
        x_t: &Latent4D<T>,
        t: usize,
        step: usize,
        cond: &Array1<T>,
        bank: Option<&KvBank<T>>,
        plan: &InjectionPlan<'_, T>,
    ) -> Result<Latent4D<T>> {
        Ok(self.controlled(x_t, t, step, cond, bank, plan, false)?.0)
    }

    pub fn controlled_forward_traced(
        &self,
        x_t: &Latent4D<T>,
        t: usize,
        step: usize,
        cond: &Array1<T>,
        bank: Option<&KvBank<T>>,
        plan: &InjectionPlan<'_, T>,
    ) -> Result<(Latent4D<T>, ForwardTrace<T>)> {
        let (eps, trace) = self.controlled(x_t, t, step, cond, bank, plan, true)?;
        Ok((eps, trace.expect("recording requested")))
    }

    #[allow(clippy::too_many_arguments)]
    fn controlled(
        &self,
        x_t: &Latent4D<T>,
        t: usize,
        step: usize,
        cond: &Array1<T>,
        bank: Option<&KvBank<T>>,
        plan: &InjectionPlan<'_, T>,
        record: bool,
    ) -> Result<(Latent4D<T>, Option<ForwardTrace<T>>)> {
        plan.validate()?;
        if !plan.active {
            return self.run(x_t, t, cond, None, record);
        }
        let bank = bank.ok_or_else(|| {
            KvLockError::Integrity("injection active but no KV bank supplied".into())
        })?;
        let entries = bank.step_entries(step).ok_or_else(|| {
            KvLockError::Integrity(format!("bank has no entries for step {step}"))
        })?;
        let injection = Injection { entries, plan };
        self.run(x_t, t, cond, Some(&injection), record)
    }

    /// Features seen by the readout: `[LN(x_L) | gain-scaled patches | 1]` per
    /// token, with `kv` (one entry per layer) fully replacing every token's
    /// keys and values when given.
    pub fn readout_features(
        &self,
        x_t: &Latent4D<T>,
        t: usize,
        cond: &Array1<T>,
        kv: Option<&[KvEntry<T>]>,
    ) -> Result<Array2<f64>> {
        let tokens = self.patchify(x_t)?;
        let locked = TokenMask::zeros(tokens.nrows());
        let plan = InjectionPlan {
            token_mask: &locked,
            alpha: T::one(),
            active: true,
        };
        let injection = kv.map(|entries| Injection { entries, plan: &plan });
        let fin = self.trunk(&tokens, t, cond, injection.as_ref(), None)?;
        let skip = self.skip_features(&tokens, t)?;
        let g = self.trunk_gain(t)?.as_f64();
        let (n, h, q) = (tokens.nrows(), fin.ncols(), skip.ncols());
        let mut f = Array2::<f64>::zeros((n, h + q + 1));
        for i in 0..n {
            for j in 0..h {
                f[[i, j]] = g * fin[[i, j]].as_f64();
            }
            for j in 0..q {
                f[[i, h + j]] = skip[[i, j]].as_f64();
            }
            f[[i, h + q]] = g;
        }
        Ok(f)
    }

    /// Fits the linear readout (`w_out`, `w_skip`, `b_out`) by ridge regression
    /// of the clean sample on [`Self::readout_features`]. Returns the mean
    /// squared clean-sample error.
    pub fn calibrate_readout(&mut self, samples: &[CalibrationSample<T>], ridge: f64) -> Result<f64> {
        if samples.is_empty() {
            return Err(KvLockError::Config("readout calibration needs samples".into()));
        }
        let (h, p) = (self.readout_width(), self.config.patch_dim());
        let q = SKIP_VARIANCES.len() * (p + 1);
        let nf = h + q + 1;
        let mut gram = Array2::<f64>::zeros((nf, nf));
        let mut rhs = Array2::<f64>::zeros((nf, p));
        let mut rows = 0usize;
        for s in samples {
            let f = self.readout_features(&s.x_t, s.t, &s.cond, s.source_kv.as_deref())?;
            let y = self.patchify(&s.x0)?.mapv(|v| v.as_f64());
            gram += &f.t().dot(&f);
            rhs += &f.t().dot(&y);
            rows += f.nrows();
        }
        // Penalty relative to each feature's own energy, so the fit does not
        // depend on feature scale.
        for i in 0..nf - 1 {
            gram[[i, i]] += ridge * gram[[i, i]].max(1e-12);
        }
        let _ = rows;
        let w = solve_spd(&gram, &rhs)?;
        let round = |v: f64| T::from_disk(v as f32);
        self.w_out = w.slice(ndarray::s![0..h, ..]).mapv(round);
        self.w_skip = w.slice(ndarray::s![h..h + q, ..]).mapv(round);
        self.b_out = w.row(h + q).mapv(round);
        let mut sse = 0.0;
        let mut count = 0usize;
        for s in samples {
            let f = self.readout_features(&s.x_t, s.t, &s.cond, s.source_kv.as_deref())?;
            let y = self.patchify(&s.x0)?.mapv(|v| v.as_f64());
            let pred = f.dot(&w);
            sse += (&pred - &y).mapv(|d| d * d).sum();
            count += y.len();
        }
        Ok(sse / count as f64)
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut f = WeightFile::new(ModelKind::DitLite, self.config.meta(self.alpha_bars.len()));
        f.push_matrix(&self.w_in);
        f.push_vector(&self.b_in);
        for b in &self.blocks {
            for m in [&b.w_cond, &b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_mlp1] {
                f.push_matrix(m);
            }
            f.push_vector(&b.b_mlp1);
            f.push_matrix(&b.w_mlp2);
            f.push_vector(&b.b_mlp2);
        }
        f.push_matrix(&self.w_out);
        f.push_matrix(&self.w_skip);
        f.push_vector(&self.b_out);
        f.push_vector(&self.alpha_bars);
        f
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if file.kind != ModelKind::DitLite {
            return Err(KvLockError::Compatibility(format!(
                "expected DiT-lite weights, found {:?}",
                file.kind
            )));
        }
        let (config, table) = DitConfig::from_meta(&file.meta)?;
        let (h, m, p) = (config.hidden, config.mlp_hidden, config.patch_dim());
        let mut cur = TensorCursor::new(file);
        let w_in = cur.matrix(p, h)?;
        let b_in = cur.vector(h)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                w_cond: cur.matrix(h, h)?,
                w_q: cur.matrix(h, h)?,
                w_k: cur.matrix(h, h)?,
                w_v: cur.matrix(h, h)?,
                w_o: cur.matrix(h, h)?,
                w_mlp1: cur.matrix(h, m)?,
                b_mlp1: cur.vector(m)?,
                w_mlp2: cur.matrix(m, h)?,
                b_mlp2: cur.vector(h)?,
            });
        }
        let w_out = cur.matrix((config.layers + 1) * h, p)?;
        let w_skip = cur.matrix(SKIP_VARIANCES.len() * (p + 1), p)?;
        let b_out = cur.vector(p)?;
        let alpha_bars: Array1<T> = cur.vector(table)?;
        cur.finish()?;
        if alpha_bars.iter().any(|a| !(*a > T::zero() && *a < T::one())) {
            return Err(KvLockError::Integrity("DiT noise table outside (0, 1)".into()));
        }
        Ok(Self {
            config,
            w_in,
            b_in,
            blocks,
            w_out,
            w_skip,
            b_out,
            alpha_bars,
        })
    }

    /// Digest of the serialised weights.
    pub fn hash(&self) -> u64 {
        self.to_weight_file().hash()
    }
}

/// One `(x_t, t, cond) → x₀` example for readout calibration, optionally
/// with cached per-layer KV locked in for every token.
#[derive(Debug, Clone)]
pub struct CalibrationSample<T> {
    pub x_t: Latent4D<T>,
    pub t: usize,
    pub cond: Array1<T>,
    pub x0: Latent4D<T>,
    pub source_kv: Option<Vec<KvEntry<T>>>,
}

/// Mean over rows; used by tests comparing attention outputs.
pub fn column_mean<T: Real>(m: &Array2<T>) -> Array1<T> {
    m.mean_axis(Axis(0)).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> DitLite<f64> {
        let cfg = DitConfig {
            channels: 4,
            hidden: 8,
            heads: 2,
            layers: 2,
            mlp_hidden: 12,
            ..DitConfig::default()
        };
        DitLite::seeded(cfg, &mut stream(1, "weights")).unwrap()
    }

    #[test]
    fn patchify_round_trip() {
        let m = small();
        let x = Latent4D::randn((4, 2, 4, 6), &mut stream(2, "x"));
        let tok = m.patchify(&x).unwrap();
        assert_eq!(tok.dim(), (2 * 2 * 3, 16));
        assert_eq!(m.unpatchify(&tok, x.shape()).unwrap(), x);
        assert!(m.patchify(&Latent4D::zeros((4, 2, 3, 6))).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let m = small();
        let x = Latent4D::randn((4, 2, 4, 4), &mut stream(3, "x"));
        let cond = Array1::from_elem(8, 0.1);
        let a = m.forward(&x, 500, &cond).unwrap();
        let b = m.forward(&x, 500, &cond).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_ne!(a, m.forward(&x, 100, &cond).unwrap());
        assert!(m.forward(&x, 1, &Array1::zeros(7)).is_err());
    }

    #[test]
    fn inactive_plan_is_transparent() {
        let m = small();
        let x = Latent4D::randn((4, 1, 4, 4), &mut stream(4, "x"));
        let cond = Array1::zeros(8);
        let mask = TokenMask::zeros(4);
        let plan = InjectionPlan::inactive(&mask);
        let a = m.forward(&x, 10, &cond).unwrap();
        let b = m.controlled_forward(&x, 10, 0, &cond, None, &plan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn active_plan_without_bank_is_integrity_error() {
        let m = small();
        let x = Latent4D::zeros((4, 1, 4, 4));
        let mask = TokenMask::zeros(4);
        let plan = InjectionPlan {
            token_mask: &mask,
            alpha: 0.5,
            active: true,
        };
        let r = m.controlled_forward(&x, 10, 0, &Array1::zeros(8), None, &plan);
        assert!(matches!(r, Err(KvLockError::Integrity(_))));
    }

    #[test]
    fn traced_forward_records_every_layer() {
        let m = small();
        let x = Latent4D::randn((4, 1, 4, 4), &mut stream(5, "x"));
        let (eps, trace) = m.forward_traced(&x, 300, &Array1::zeros(8)).unwrap();
        assert_eq!(eps, m.forward(&x, 300, &Array1::zeros(8)).unwrap());
        assert_eq!(trace.layers.len(), 2);
        for rec in &trace.layers {
            assert_eq!(rec.keys.dim(), (4, 8));
            assert!(rec.softmax_err < 1e-12);
            // Pre-norm: every hidden row has zero mean.
            for row in rec.hidden.rows() {
                assert!(row.sum().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dit.bin");
        let m = small();
        m.to_weight_file().save(&path).unwrap();
        let back = DitLite::<f64>::from_weight_file(&WeightFile::load(&path).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }

    #[test]
    fn calibration_reduces_error_below_identity_guess() {
        let mut m = small();
        let mut rng = stream(6, "calib");
        let samples: Vec<_> = (0..40)
            .map(|i| {
                let x0 = Latent4D::randn((4, 1, 4, 4), &mut rng).map(|v| 0.3 * v);
                let eps = Latent4D::randn((4, 1, 4, 4), &mut rng);
                let t = 1 + 20 * (i % 40);
                let ab = m.alpha_bar(t).unwrap();
                let x_t = x0.zip_map(&eps, |a, e| ab.sqrt() * a + (1.0 - ab).sqrt() * e).unwrap();
                CalibrationSample {
                    x_t,
                    t,
                    cond: Array1::zeros(8),
                    x0,
                    source_kv: None,
                }
            })
            .collect();
        let mse = m.calibrate_readout(&samples, 1e-4).unwrap();
        // Predicting zero gives MSE ≈ 0.09.
        assert!(mse < 0.05, "{mse}");
    }
}
