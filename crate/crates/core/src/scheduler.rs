//! Discrete DDPM noise schedule: forward marginal, clean-sample prediction
//! and the ancestral reverse update over a strided set of sampling steps.

use crate::error::{KvLockError, Result};
use crate::io::hash64;
use crate::scalar::Real;
use crate::tensor::Latent4D;

/// Linear-β DDPM schedule with `K` sampling steps.
///
/// Timesteps are 1-based (`1..=T_train`); timestep 0 denotes the clean sample
/// with `ᾱ₀ = 1`. `sampling_steps` is stored in denoising order (decreasing).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
    sampling_steps: Vec<usize>,
}

impl<T: Real> NoiseSchedule<T> {
    /// Linear β from `beta_min` to `beta_max` over `train_steps`, with `k`
    /// sampling steps evenly strided over `[1, train_steps]`.
    pub fn linear(train_steps: usize, beta_min: f64, beta_max: f64, k: usize) -> Result<Self> {
        if train_steps == 0 {
            return Err(KvLockError::Config("train_steps must be positive".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(KvLockError::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas = (0..train_steps)
            .map(|i| {
                let frac = if train_steps == 1 {
                    0.0
                } else {
                    i as f64 / (train_steps - 1) as f64
                };
                T::lit(beta_min + frac * (beta_max - beta_min))
            })
            .collect();
        Self::from_betas(betas, strided_steps(train_steps, k)?)
    }

    /// Builds a schedule from explicit betas (timestep `t` uses `betas[t-1]`).
    pub fn from_betas(betas: Vec<T>, sampling_steps: Vec<usize>) -> Result<Self> {
        if betas.is_empty() {
            return Err(KvLockError::Config("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > T::zero() && b < T::one())) {
            return Err(KvLockError::Config(format!("beta {b} outside (0, 1)")));
        }
        let n = betas.len();
        if sampling_steps.is_empty()
            || sampling_steps.iter().any(|&t| t == 0 || t > n)
            || sampling_steps.windows(2).any(|w| w[0] <= w[1])
        {
            return Err(KvLockError::Config(
                "sampling steps must be strictly decreasing timesteps in [1, T]".into(),
            ));
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = T::one();
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sampling_steps,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    /// Timesteps in denoising order `t₁ > t₂ > … > t_K`.
    pub fn sampling_steps(&self) -> &[usize] {
        &self.sampling_steps
    }

    pub fn num_sampling_steps(&self) -> usize {
        self.sampling_steps.len()
    }

    /// Number of sampling steps `K`.
    pub fn steps(&self) -> usize {
        self.sampling_steps.len()
    }

    /// Timestep `t_k` of sampling step index `k`.
    pub fn timestep(&self, k: usize) -> usize {
        self.sampling_steps[k]
    }

    /// Timestep visited after step index `k`, or 0 after the last one.
    pub fn next_timestep(&self, k: usize) -> usize {
        self.sampling_steps.get(k + 1).copied().unwrap_or(0)
    }

    /// `ᾱₜ`, with `ᾱ₀ = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        match t {
            0 => Ok(T::one()),
            t if t <= self.betas.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(KvLockError::Index(format!(
                "timestep {t} outside [0, {}]",
                self.betas.len()
            ))),
        }
    }

    /// Signal-to-noise ratio `ᾱₜ / (1 − ᾱₜ)` for `t ≥ 1`.
    pub fn snr(&self, t: usize) -> Result<T> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (T::one() - ab))
    }

    /// `√ᾱₜ·x0 + √(1−ᾱₜ)·eps`.
    pub fn forward_noise(&self, x0: &Latent4D<T>, t: usize, eps: &Latent4D<T>) -> Result<Latent4D<T>> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// `x̂₀ = (x_t − √(1−ᾱₜ)·ε̂) / √ᾱₜ`.
    pub fn predict_x0(&self, x_t: &Latent4D<T>, t: usize, eps_hat: &Latent4D<T>) -> Result<Latent4D<T>> {
        let ab = self.alpha_bar(t)?;
        if ab <= T::zero() {
            return Err(KvLockError::Singularity(format!(
                "alpha_bar({t}) = 0, clean sample undefined"
            )));
        }
        let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
        x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
    }

    /// One ancestral step from timestep `t` down to `t_prev < t`.
    ///
    /// With `α' = ᾱₜ/ᾱ_{t_prev}` and `β' = 1 − α'`:
    /// `μ = (x_t − β'/√(1−ᾱₜ)·ε̂)/√α'` and the result is `μ + σ·noise`, where
    /// `σ² = β'` and `σ = 0` when `t_prev = 0`. For `t_prev = t − 1` this is
    /// the textbook single-step DDPM update.
    pub fn reverse_step_between(
        &self,
        x_t: &Latent4D<T>,
        t: usize,
        t_prev: usize,
        eps_hat: &Latent4D<T>,
        noise: &Latent4D<T>,
    ) -> Result<Latent4D<T>> {
        if t == 0 || t_prev >= t {
            return Err(KvLockError::Index(format!(
                "reverse step needs t > t_prev, got {t} -> {t_prev}"
            )));
        }
        x_t.ensure_same_shape(eps_hat, "reverse step eps")?;
        x_t.ensure_same_shape(noise, "reverse step noise")?;
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        let alpha = ab / ab_prev;
        let beta = T::one() - alpha;
        let coef = beta / (T::one() - ab).sqrt();
        let inv_sqrt_alpha = T::one() / alpha.sqrt();
        let sigma = if t_prev == 0 { T::zero() } else { beta.sqrt() };
        let mut out = x_t.clone();
        ndarray::Zip::from(out.array_mut())
            .and(eps_hat.array())
            .and(noise.array())
            .for_each(|x, &e, &z| *x = (*x - coef * e) * inv_sqrt_alpha + sigma * z);
        Ok(out)
    }

    /// Reverse update for sampling step index `k` (`t_k → t_{k+1}`).
    pub fn reverse_step(
        &self,
        x_t: &Latent4D<T>,
        k: usize,
        eps_hat: &Latent4D<T>,
        noise: &Latent4D<T>,
    ) -> Result<Latent4D<T>> {
        let t = *self.sampling_steps.get(k).ok_or_else(|| {
            KvLockError::Index(format!(
                "sampling step {k} outside 0..{}",
                self.sampling_steps.len()
            ))
        })?;
        self.reverse_step_between(x_t, t, self.next_timestep(k), eps_hat, noise)
    }

    /// Stable 64-bit digest of betas and sampling steps.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.betas.len() * 8 + self.sampling_steps.len() * 8);
        for b in &self.betas {
            bytes.extend_from_slice(&b.as_f64().to_le_bytes());
        }
        for &t in &self.sampling_steps {
            bytes.extend_from_slice(&(t as u64).to_le_bytes());
        }
        hash64(&bytes)
    }
}

/// `K` timesteps evenly strided over `[1, T]`, returned in decreasing order.
pub fn strided_steps(train_steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > train_steps {
        return Err(KvLockError::Config(format!(
            "need 1 <= K <= T_train, got K={k}, T_train={train_steps}"
        )));
    }
    let mut steps: Vec<usize> = if k == 1 {
        vec![train_steps]
    } else {
        (0..k)
            .map(|i| 1 + ((i * (train_steps - 1)) as f64 / (k - 1) as f64).round() as usize)
            .collect()
    };
    steps.dedup();
    debug_assert_eq!(steps.len(), k);
    steps.reverse();
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn default_schedule() -> NoiseSchedule<f64> {
        NoiseSchedule::linear(1000, 1e-4, 0.02, 50).unwrap()
    }

    #[test]
    fn default_schedule_shape() {
        let s = default_schedule();
        assert_eq!(s.num_sampling_steps(), 50);
        assert_eq!(s.sampling_steps()[0], 1000);
        assert_eq!(*s.sampling_steps().last().unwrap(), 1);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.sampling_steps().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn full_stride_visits_every_timestep() {
        let s = NoiseSchedule::<f64>::linear(30, 1e-4, 0.02, 30).unwrap();
        let expected: Vec<usize> = (1..=30).rev().collect();
        assert_eq!(s.sampling_steps(), expected.as_slice());
    }

    #[test]
    fn alpha_bar_matches_direct_product_loop() {
        let s = default_schedule();
        // Independent product over the linear betas.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert_abs_diff_eq!(s.alpha_bar(1000).unwrap(), prod, epsilon = 1e-15);
        assert!(prod < 1e-4 && prod > 0.0);
        assert!(s.alpha_bar(1).unwrap() > 0.9998);
    }

    #[test]
    fn config_errors() {
        assert!(NoiseSchedule::<f64>::linear(1000, 0.0, 0.02, 50).is_err());
        assert!(NoiseSchedule::<f64>::linear(1000, 0.03, 0.02, 50).is_err());
        assert!(NoiseSchedule::<f64>::linear(1000, 1e-4, 1.0, 50).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 1e-4, 0.02, 11).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        // betas = [0.75] gives alpha_bar(1) = 0.25.
        let s = NoiseSchedule::<f64>::from_betas(vec![0.75], vec![1]).unwrap();
        let ones = Latent4D::filled((1, 1, 2, 2), 1.0);
        let out = s.forward_noise(&ones, 1, &ones).unwrap();
        for &v in out.as_slice() {
            assert_abs_diff_eq!(v, 1.3660254037844386, epsilon = 1e-12);
        }
        // alpha_bar(0) = 1 is the identity.
        let x0 = Latent4D::from_vec((1, 1, 1, 3), vec![0.3, -2.0, 5.0]).unwrap();
        let e = Latent4D::filled((1, 1, 1, 3), 9.0);
        assert_eq!(s.forward_noise(&x0, 0, &e).unwrap(), x0);
        // Zero signal.
        let z = Latent4D::zeros((1, 1, 1, 3));
        let out = s.forward_noise(&z, 1, &e).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.75f64.sqrt() * 9.0).abs() < 1e-12));
        // Errors.
        assert!(matches!(s.forward_noise(&x0, 2, &e), Err(KvLockError::Index(_))));
        assert!(matches!(s.forward_noise(&ones, 1, &e), Err(KvLockError::Shape(_))));
    }

    #[test]
    fn predict_x0_examples() {
        let s = NoiseSchedule::<f64>::from_betas(vec![0.75], vec![1]).unwrap();
        let ones = Latent4D::filled((1, 1, 2, 2), 1.0);
        let xt = s.forward_noise(&ones, 1, &ones).unwrap();
        let x0 = s.predict_x0(&xt, 1, &ones).unwrap();
        assert!(x0.max_abs_diff(&ones).unwrap() < 1e-12);
        let zero = Latent4D::zeros((1, 1, 2, 2));
        let x0 = s.predict_x0(&xt, 1, &zero).unwrap();
        assert!(x0.as_slice().iter().all(|&v| (v - 1.3660254037844386 / 0.5).abs() < 1e-12));
    }

    #[test]
    fn predict_x0_refuses_zero_alpha_bar() {
        // Underflow drives alpha_bar to exactly zero.
        let s = NoiseSchedule::<f32>::from_betas(vec![0.999_999; 20], vec![20]).unwrap();
        assert_eq!(s.alpha_bar(20).unwrap(), 0.0);
        let z = Latent4D::<f32>::zeros((1, 1, 1, 1));
        assert!(matches!(s.predict_x0(&z, 20, &z), Err(KvLockError::Singularity(_))));
    }

    #[test]
    fn reverse_step_hand_evaluated() {
        let s = NoiseSchedule::<f64>::from_betas(vec![0.1, 0.2], vec![2, 1]).unwrap();
        let one = |v: f64| Latent4D::from_vec((1, 1, 1, 1), vec![v]).unwrap();
        // Intermediate step t=2 -> t=1: alpha' = 0.72/0.9 = 0.8.
        let x = s.reverse_step(&one(1.0), 0, &one(0.5), &one(1.0)).unwrap();
        let mu = (1.0 - 0.2 / 0.28f64.sqrt() * 0.5) / 0.8f64.sqrt();
        assert_abs_diff_eq!(x.as_slice()[0], mu + 0.2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(mu, 0.906_744_6, epsilon = 1e-6);
        // Final step with the true eps lands on the clean sample.
        let xt = 0.9f64.sqrt() * 0.5 + 0.1f64.sqrt() * 0.3;
        let x = s.reverse_step(&one(xt), 1, &one(0.3), &one(7.0)).unwrap();
        assert_abs_diff_eq!(x.as_slice()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn reverse_step_zero_inputs_and_determinism() {
        let s = default_schedule();
        let z = Latent4D::<f64>::zeros((2, 1, 2, 2));
        let mut rng = crate::rng::stream(3, "t");
        let noise = Latent4D::randn((2, 1, 2, 2), &mut rng);
        let k = 10;
        let t = s.sampling_steps()[k];
        let t_prev = s.next_timestep(k);
        let sigma = (1.0 - s.alpha_bar(t).unwrap() / s.alpha_bar(t_prev).unwrap()).sqrt();
        let out = s.reverse_step(&z, k, &z, &noise).unwrap();
        assert!(out.max_abs_diff(&noise.map(|v| v * sigma)).unwrap() < 1e-14);
        let again = s.reverse_step(&z, k, &z, &noise).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn snr_strictly_decreasing() {
        let s = default_schedule();
        let snr: Vec<f64> = (1..=1000).map(|t| s.snr(t).unwrap()).collect();
        assert!(snr.windows(2).all(|w| w[1] < w[0]));
    }

    proptest! {
        #[test]
        fn round_trip_recovers_x0(
            vals in proptest::collection::vec(-3.0f64..3.0, 8),
            noise in proptest::collection::vec(-3.0f64..3.0, 8),
            t in 1usize..=1000,
        ) {
            let s = default_schedule();
            let x0 = Latent4D::from_vec((2, 1, 2, 2), vals).unwrap();
            let e = Latent4D::from_vec((2, 1, 2, 2), noise).unwrap();
            let back = s.predict_x0(&s.forward_noise(&x0, t, &e).unwrap(), t, &e).unwrap();
            for (a, b) in back.as_slice().iter().zip(x0.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
