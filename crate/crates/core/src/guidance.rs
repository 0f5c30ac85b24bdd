//! Classifier-free guidance with a projected unconditional branch and a
//! variance-driven guidance scale.

use ndarray::Array1;

use crate::attention::InjectionPlan;
use crate::error::{KvLockError, Result};
use crate::kv_bank::KvBank;
use crate::model::DitLite;
use crate::scalar::Real;
use crate::tensor::Latent4D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub omega0: f64,
    /// Clamp boundary on `σ²/τ`.
    pub b: f64,
    pub tau: f64,
    pub kappa: usize,
    pub eps_div: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega0: 5.0,
            b: 2.0,
            tau: 0.01,
            kappa: 20,
            eps_div: 1e-8,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.omega0 > 0.0
            && self.b >= 1.0
            && self.tau > 0.0
            && self.eps_div > 0.0
            && self.kappa > 0
            && [self.omega0, self.b, self.tau, self.eps_div].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(KvLockError::Config(format!("invalid guidance config {self:?}")))
        }
    }
}

/// Switches for the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Toggles {
    /// Projected scale on the unconditional branch; `s = 1` when off.
    pub s_star: bool,
    /// Variance-driven `ω`; constant `ω₀` when off.
    pub omega_schedule: bool,
    /// Variance-driven fusion rate for KV injection.
    pub kv_schedule: bool,
    /// Constant fusion rate overriding the schedule.
    pub fixed_alpha: Option<f64>,
    /// Detector reads the whole latent instead of the masked region.
    pub global_detection: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            s_star: true,
            omega_schedule: true,
            kv_schedule: true,
            fixed_alpha: None,
            global_detection: false,
        }
    }
}

impl Toggles {
    pub fn validate(&self) -> Result<()> {
        match self.fixed_alpha {
            Some(a) if !(0.0..=1.0).contains(&a) => Err(KvLockError::Config(format!(
                "fixed_alpha must lie in [0, 1], got {a}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceState<T> {
    pub step: usize,
    pub s_star: T,
    pub omega: T,
    pub flag: bool,
    pub sigma2: Option<T>,
}

/// `s* = ⟨c, u⟩ / (‖u‖² + ε)`.
pub fn optimal_scale<T: Real>(eps_cond: &Latent4D<T>, eps_uncond: &Latent4D<T>, eps_div: f64) -> Result<T> {
    let num = eps_cond.dot(eps_uncond)?;
    Ok(num / (eps_uncond.norm_sq() + T::lit(eps_div)))
}

/// `(1 − ω)·s·u + ω·c`.
pub fn guided_noise<T: Real>(
    eps_cond: &Latent4D<T>,
    eps_uncond: &Latent4D<T>,
    s: T,
    omega: T,
) -> Result<Latent4D<T>> {
    let a = (T::one() - omega) * s;
    eps_cond.zip_map(eps_uncond, |c, u| a * u + omega * c)
}

/// `ω₀·clamp(σ²/τ, 0, b)` when risk is detected inside a full window,
/// otherwise `ω₀`.
pub fn dynamic_omega<T: Real>(sigma2: T, cfg: &GuidanceConfig, in_window: bool, window_full: bool) -> T {
    let omega0 = T::lit(cfg.omega0);
    let tau = T::lit(cfg.tau);
    if in_window && window_full && sigma2 >= tau {
        omega0 * (sigma2 / tau).clamp_to(T::zero(), T::lit(cfg.b))
    } else {
        omega0
    }
}

/// Inputs shared by both branches of one guided step.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a, T> {
    pub step: usize,
    pub t: usize,
    pub cond: &'a Array1<T>,
    pub null_cond: &'a Array1<T>,
    pub bank: Option<&'a KvBank<T>>,
    pub plan: &'a InjectionPlan<'a, T>,
    /// Detector variance before this step's update.
    pub sigma2: Option<T>,
    pub in_window: bool,
}

/// Runs the conditional and unconditional passes (both under the same
/// injection plan) and combines them.
pub fn cfg_step<T: Real>(
    model: &DitLite<T>,
    x_t: &Latent4D<T>,
    inputs: &StepInputs<'_, T>,
    cfg: &GuidanceConfig,
    toggles: &Toggles,
) -> Result<(Latent4D<T>, GuidanceState<T>)> {
    let eps_c = model.controlled_forward(x_t, inputs.t, inputs.step, inputs.cond, inputs.bank, inputs.plan)?;
    let eps_u = model.controlled_forward(x_t, inputs.t, inputs.step, inputs.null_cond, inputs.bank, inputs.plan)?;
    let s_star = optimal_scale(&eps_c, &eps_u, cfg.eps_div)?;
    if !s_star.is_finite() {
        return Err(KvLockError::Numeric(format!("non-finite s* at step {}", inputs.step)));
    }
    let s = if toggles.s_star { s_star } else { T::one() };
    let flag = matches!(inputs.sigma2, Some(v) if inputs.in_window && v > T::lit(cfg.tau));
    let omega = match inputs.sigma2 {
        Some(v) if toggles.omega_schedule => dynamic_omega(v, cfg, inputs.in_window, true),
        _ => T::lit(cfg.omega0),
    };
    let eps = guided_noise(&eps_c, &eps_u, s, omega)?;
    Ok((
        eps,
        GuidanceState {
            step: inputs.step,
            s_star,
            omega,
            flag,
            sigma2: inputs.sigma2,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::TokenMask;
    use crate::model::DitConfig;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Latent4D<f64> {
        Latent4D::filled((1, 1, 1, 1), v)
    }

    fn grid_argmin(c: &Latent4D<f64>, u: &Latent4D<f64>) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=100_000 {
            let s = -5.0 + 1e-4 * i as f64;
            let loss = c.zip_map(u, |a, b| a - s * b).unwrap().norm_sq();
            if loss < best.0 {
                best = (loss, s);
            }
        }
        best.1
    }

    #[test]
    fn scale_examples() {
        let e = Latent4D::<f64>::randn((2, 1, 2, 2), &mut stream(1, "e"));
        assert_relative_eq!(optimal_scale(&e, &e, 1e-8).unwrap(), 1.0, epsilon = 1e-6);
        let a = Latent4D::from_vec((1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let b = Latent4D::from_vec((1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(optimal_scale(&a, &b, 1e-8).unwrap(), 0.0);
        let twice = e.map(|v| 2.0 * v);
        let s = optimal_scale(&twice, &e, 1e-8).unwrap();
        assert_relative_eq!(s, 2.0, epsilon = 1e-6);
        assert!((s - grid_argmin(&twice, &e)).abs() <= 1e-3);
    }

    #[test]
    fn zero_uncond_is_guarded() {
        let s = optimal_scale(&scalar(1.0), &scalar(0.0), 1e-8).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn guided_examples() {
        let g = guided_noise(&scalar(3.0), &scalar(2.0), 0.5, 5.0).unwrap();
        assert_relative_eq!(g.as_slice()[0], 11.0, epsilon = 1e-12);
        let c = Latent4D::<f64>::randn((1, 1, 2, 2), &mut stream(2, "c"));
        let u = Latent4D::<f64>::randn((1, 1, 2, 2), &mut stream(2, "u"));
        assert_eq!(guided_noise(&c, &u, 0.3, 1.0).unwrap(), c);
        assert_eq!(guided_noise(&c, &u, -7.0, 1.0).unwrap(), c);
        let vanilla = c.zip_map(&u, |a, b| b + 2.0 * (a - b)).unwrap();
        let g = guided_noise(&c, &u, 1.0, 2.0).unwrap();
        assert!(g.max_abs_diff(&vanilla).unwrap() < 1e-12);
    }

    #[test]
    fn omega_examples() {
        let cfg = GuidanceConfig::default();
        assert_eq!(dynamic_omega(0.005, &cfg, true, true), 5.0);
        assert_relative_eq!(dynamic_omega(0.02, &cfg, true, true), 10.0, epsilon = 1e-12);
        assert_relative_eq!(dynamic_omega(1.0, &cfg, true, true), 10.0, epsilon = 1e-12);
        assert_eq!(dynamic_omega(1.0, &cfg, false, true), 5.0);
        assert_eq!(dynamic_omega(1.0, &cfg, true, false), 5.0);
    }

    #[test]
    fn chained_scalar_example() {
        let cfg = GuidanceConfig::default();
        let (c, u) = (scalar(3.0), scalar(2.0));
        let s = optimal_scale(&c, &u, cfg.eps_div).unwrap();
        assert_relative_eq!(s, 1.5, epsilon = 1e-8);
        let omega = dynamic_omega(0.02, &cfg, true, true);
        // In one dimension s*·u reproduces c, so the result is c for any ω.
        let g = guided_noise(&c, &u, s, omega).unwrap();
        assert_relative_eq!(g.as_slice()[0], 3.0, epsilon = 1e-6);
    }

    fn tiny_model() -> DitLite<f64> {
        let cfg = DitConfig {
            channels: 4,
            hidden: 8,
            heads: 2,
            layers: 1,
            mlp_hidden: 8,
            ..DitConfig::default()
        };
        DitLite::seeded(cfg, &mut stream(3, "w")).unwrap()
    }

    #[test]
    fn degenerate_conditioning() {
        let m = tiny_model();
        let x = Latent4D::randn((4, 1, 4, 4), &mut stream(3, "x"));
        let cond = Array1::from_elem(8, 0.2);
        let mask = TokenMask::zeros(4);
        let plan = InjectionPlan::inactive(&mask);
        let inputs = StepInputs {
            step: 3,
            t: 400,
            cond: &cond,
            null_cond: &cond,
            bank: None,
            plan: &plan,
            sigma2: Some(0.5),
            in_window: true,
        };
        let (eps, st) = cfg_step(&m, &x, &inputs, &GuidanceConfig::default(), &Toggles::default()).unwrap();
        let eps_c = m.forward(&x, 400, &cond).unwrap();
        assert_relative_eq!(st.s_star, 1.0, epsilon = 1e-6);
        assert!(eps.max_abs_diff(&eps_c).unwrap() < 1e-6);
        assert!(st.flag);
        assert_relative_eq!(st.omega, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn outside_window_keeps_base_scale() {
        let m = tiny_model();
        let x = Latent4D::randn((4, 1, 4, 4), &mut stream(4, "x"));
        let cond = Array1::from_elem(8, 0.2);
        let null = Array1::zeros(8);
        let mask = TokenMask::zeros(4);
        let plan = InjectionPlan::inactive(&mask);
        for sigma2 in [None, Some(0.0), Some(5.0)] {
            let inputs = StepInputs {
                step: 0,
                t: 900,
                cond: &cond,
                null_cond: &null,
                bank: None,
                plan: &plan,
                sigma2,
                in_window: false,
            };
            let (_, st) = cfg_step(&m, &x, &inputs, &GuidanceConfig::default(), &Toggles::default()).unwrap();
            assert_eq!(st.omega, 5.0);
            assert!(!st.flag);
        }
    }

    proptest! {
        #[test]
        fn scale_is_least_squares_minimiser(seed in any::<u64>()) {
            let mut rng = stream(seed, "ls");
            let c = Latent4D::<f64>::randn((2, 1, 2, 3), &mut rng);
            let u = Latent4D::<f64>::randn((2, 1, 2, 3), &mut rng).map(|v| 0.5 * v);
            let s = optimal_scale(&c, &u, 1e-8).unwrap();
            let loss = |s: f64| c.zip_map(&u, |a, b| a - s * b).unwrap().norm_sq();
            prop_assert!(loss(s) <= loss(s + 0.01) && loss(s) <= loss(s - 0.01));
            if s.abs() < 4.9 {
                prop_assert!((s - grid_argmin(&c, &u)).abs() <= 1e-3);
            }
        }

        #[test]
        fn guided_error_bound(seed in any::<u64>(), omega in 0.0f64..1.5) {
            let mut rng = stream(seed, "bound");
            let shape = (4, 2, 4, 4);
            let c = Latent4D::<f64>::randn(shape, &mut rng);
            let u = Latent4D::<f64>::randn(shape, &mut rng);
            let e_t = Latent4D::<f64>::randn(shape, &mut rng);
            let s = optimal_scale(&c, &u, 1e-8).unwrap();
            let g = guided_noise(&c, &u, s, omega).unwrap();
            let lhs = g.zip_map(&e_t, |a, b| a - b).unwrap().norm_sq();
            let resid = c.zip_map(&u, |a, b| a - s * b).unwrap().norm_sq();
            let rhs = c.norm_sq() + e_t.norm_sq() + (1.0 + omega) * resid;
            prop_assert!(lhs <= rhs, "{} > {}", lhs, rhs);
        }

        #[test]
        fn omega_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = GuidanceConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (wl, wh) = (dynamic_omega(lo, &cfg, true, true), dynamic_omega(hi, &cfg, true, true));
            prop_assert!(wl <= wh);
            prop_assert!((cfg.omega0..=cfg.b * cfg.omega0).contains(&wh));
        }

        #[test]
        fn unit_omega_ignores_scale(s1 in -10.0f64..10.0, s2 in -10.0f64..10.0, seed in any::<u64>()) {
            let mut rng = stream(seed, "s");
            let c = Latent4D::<f64>::randn((1, 1, 2, 2), &mut rng);
            let u = Latent4D::<f64>::randn((1, 1, 2, 2), &mut rng);
            prop_assert_eq!(guided_noise(&c, &u, s1, 1.0).unwrap(), guided_noise(&c, &u, s2, 1.0).unwrap());
        }
    }
}
