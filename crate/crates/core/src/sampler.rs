//! Reverse-process sampling: guided noise prediction, ancestral and deterministic
//! stepping, and cross-modality translation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, ModalityIndicator};
use crate::conditioning::{condition, ConditionBatch};
use crate::denoiser::EpsModel;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    BetaTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub guidance_weight: f64,
    pub sigma_mode: SigmaMode,
    /// Deterministic sub-sequence length; `None` runs ancestral sampling over every step.
    pub ddim_steps: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_weight: 1.0,
            sigma_mode: SigmaMode::BetaTilde,
            ddim_steps: Some(25),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            return Err(Error::Config(format!(
                "guidance_weight must be non-negative, got {}",
                self.guidance_weight
            )));
        }
        if let Some(s) = self.ddim_steps {
            if s == 0 || s > timesteps {
                return Err(Error::Config(format!("ddim_steps {s} outside [1, {timesteps}]")));
            }
        }
        Ok(())
    }
}

/// `(1 + w) eps(x_t, t, c, e) - w eps(x_t, t, c, null)`. With `w = 0` only the
/// conditional branch is evaluated; otherwise both branches share one batched call.
pub fn guided_eps<F: Scalar, M: EpsModel<F> + ?Sized>(
    model: &M,
    x_t: &Tensor<F>,
    t: &[usize],
    cond: Option<&Tensor<F>>,
    e_target: ModalityIndicator,
    omega: f64,
) -> Result<Tensor<F>> {
    if !e_target.is_data_modality() {
        return Err(Error::Contract("guidance target must be visible or infrared".into()));
    }
    let n = x_t.dim(0);
    if omega == 0.0 {
        return model.predict_eps(x_t, t, cond, &vec![e_target; n]);
    }
    let x2 = Tensor::stack(&[x_t, x_t])?;
    let t2: Vec<usize> = t.iter().chain(t).copied().collect();
    let c2 = cond.map(|c| Tensor::stack(&[c, c])).transpose()?;
    let mut e2 = vec![e_target; n];
    e2.extend(std::iter::repeat_n(ModalityIndicator::Null, n));
    let both = model.predict_eps(&x2, &t2, c2.as_ref(), &e2)?;
    let half = x_t.numel();
    let (ec, eu) = both.data().split_at(half);
    let (a, b) = (F::of(1.0 + omega), F::of(omega));
    let data = ec.iter().zip(eu).map(|(&c, &u)| a * c - b * u).collect();
    Tensor::from_vec(x_t.shape(), data)
}

pub fn sigma(sched: &NoiseSchedule, t: usize, mode: SigmaMode) -> f64 {
    match mode {
        SigmaMode::Beta => sched.beta(t).sqrt(),
        SigmaMode::BetaTilde => sched.posterior_variance(t).sqrt(),
    }
}

/// One ancestral step from `t` to `t - 1`; no noise is added at `t = 1`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step<F: Scalar, M: EpsModel<F> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_t: &Tensor<F>,
    t: usize,
    cond: Option<&Tensor<F>>,
    e_target: ModalityIndicator,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    sched.check(t)?;
    let n = x_t.dim(0);
    let ts = vec![t; n];
    let eps = guided_eps(model, x_t, &ts, cond, e_target, cfg.guidance_weight)?;
    let mean = sched.mean_from_eps(x_t, &ts, &eps)?;
    if t == 1 {
        return Ok(mean);
    }
    let s = F::of(sigma(sched, t, cfg.sigma_mode));
    let z = standard_normal(x_t.shape(), rng);
    mean.zip_map(&z, |m, z| m + s * z)
}

/// Evenly spaced timesteps `round(k * start / steps)` for `k = 1..=steps`, strictly
/// increasing and ending at `start`.
pub fn ddim_timesteps(start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > start {
        return Err(Error::Config(format!("ddim_steps {steps} outside [1, {start}]")));
    }
    Ok((1..=steps)
        .map(|k| ((k as f64 * start as f64 / steps as f64).round() as usize).max(1))
        .collect())
}

/// One deterministic update from `t` to `t_prev` (`t_prev = 0` means the clean image).
#[allow(clippy::too_many_arguments)]
pub fn ddim_update<F: Scalar, M: EpsModel<F> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_t: &Tensor<F>,
    t: usize,
    t_prev: usize,
    cond: Option<&Tensor<F>>,
    e_target: ModalityIndicator,
    omega: f64,
) -> Result<Tensor<F>> {
    let n = x_t.dim(0);
    let eps = guided_eps(model, x_t, &vec![t; n], cond, e_target, omega)?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip_map(&eps, |x, e| {
        let (x, e) = (x.as_f64(), e.as_f64());
        let x0 = (x - sb * e) / sa;
        F::of(pa * x0 + pb * e)
    })
}

fn clip<F: Scalar>(x: Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(-F::one()).min(F::one()))
}

/// Runs the deterministic sampler from `x_start` at timestep `start` down to 0.
#[allow(clippy::too_many_arguments)]
pub fn ddim_from<F: Scalar, M: EpsModel<F> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_start: Tensor<F>,
    start: usize,
    steps: usize,
    cond: Option<&Tensor<F>>,
    e_target: ModalityIndicator,
    omega: f64,
) -> Result<Tensor<F>> {
    let seq = ddim_timesteps(start, steps)?;
    let mut x = x_start;
    for k in (0..seq.len()).rev() {
        let prev = if k == 0 { 0 } else { seq[k - 1] };
        x = ddim_update(model, sched, &x, seq[k], prev, cond, e_target, omega)?;
    }
    Ok(x)
}

/// Ancestral sampling from `x_start` at timestep `start` down to 0.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_from<F: Scalar, M: EpsModel<F> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_start: Tensor<F>,
    start: usize,
    cond: Option<&Tensor<F>>,
    e_target: ModalityIndicator,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let mut x = x_start;
    for t in (1..=start).rev() {
        x = ddpm_step(model, sched, &x, t, cond, e_target, cfg, rng)?;
    }
    Ok(x)
}

#[allow(clippy::too_many_arguments)]
fn run_chain<F: Scalar, M: EpsModel<F> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_start: Tensor<F>,
    start: usize,
    cond: Option<&Tensor<F>>,
    e_target: ModalityIndicator,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let out = match cfg.ddim_steps {
        Some(steps) => {
            let steps = steps.min(start);
            ddim_from(model, sched, x_start, start, steps, cond, e_target, cfg.guidance_weight)?
        }
        None => ddpm_from(model, sched, x_start, start, cond, e_target, cfg, rng)?,
    };
    Ok(clip(out))
}

/// Samples `shape` (`[N, C, H, W]`) from fresh noise towards modality `e_target`,
/// guided by `cond` (`[N, 1, H, W]`, or `None` for the indicator-only model). The
/// result is clipped to `[-1, 1]`.
pub fn sample_tensor<F: Scalar, M: EpsModel<F> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    shape: &[usize],
    cond: Option<&Tensor<F>>,
    e_target: ModalityIndicator,
    cfg: &SamplerConfig,
) -> Result<Tensor<F>> {
    cfg.validate(sched.timesteps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_t = standard_normal(shape, &mut rng);
    run_chain(model, sched, x_t, sched.timesteps(), cond, e_target, cfg, &mut rng)
}

/// [`sample_tensor`] on `f32`, tagged with the target modality.
pub fn ddim_sample<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    shape: &[usize],
    cond: Option<&Tensor<f32>>,
    e_target: ModalityIndicator,
    cfg: &SamplerConfig,
) -> Result<ImageBatch> {
    let x = sample_tensor(model, sched, shape, cond, e_target, cfg)?;
    ImageBatch::new(x, vec![e_target; shape[0]])
}

/// Translated batch plus the condition it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub images: ImageBatch,
    pub condition: Option<ConditionBatch>,
}

fn check_target(x_src: &ImageBatch, target: ModalityIndicator) -> Result<()> {
    if !target.is_data_modality() {
        return Err(Error::Contract("translation target must be visible or infrared".into()));
    }
    if x_src.modality.contains(&target) {
        return Err(Error::Contract(format!("source batch already contains {target} images")));
    }
    Ok(())
}

/// Condition from the source, fresh Gaussian start, flipped indicator.
pub fn translate<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_src: &ImageBatch,
    target: ModalityIndicator,
    cfg: &SamplerConfig,
) -> Result<Translation> {
    check_target(x_src, target)?;
    let cb = model.condition_filter().map(|f| condition(x_src, &f)).transpose()?;
    let images = ddim_sample(model, sched, x_src.data.shape(), cb.as_ref().map(|c| &c.data), target, cfg)?;
    Ok(Translation { images, condition: cb })
}

/// Baseline without a condition image: noise the source to `t_start` (half the
/// schedule by default) and denoise with the flipped indicator.
pub fn partial_noise_translate<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_src: &ImageBatch,
    target: ModalityIndicator,
    t_start: Option<usize>,
    cfg: &SamplerConfig,
) -> Result<ImageBatch> {
    check_target(x_src, target)?;
    if model.condition_filter().is_some() {
        return Err(Error::Config(
            "partial-noise translation needs a model trained without a condition input".into(),
        ));
    }
    cfg.validate(sched.timesteps())?;
    let start = t_start.unwrap_or(sched.timesteps() / 2);
    if start > sched.timesteps() {
        return Err(Error::TimestepRange {
            t: start,
            max: sched.timesteps(),
        });
    }
    let n = x_src.len();
    if start == 0 {
        return ImageBatch::new(x_src.data.clone(), vec![target; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = standard_normal(x_src.data.shape(), &mut rng);
    let x_t = sched.forward_noise(&x_src.data, &vec![start; n], &eps)?;
    let x = run_chain(model, sched, x_t, start, None, target, cfg, &mut rng)?;
    ImageBatch::new(x, vec![target; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::ModalityIndicator::{Infrared, Null, Visible};
    use crate::conditioning::FilterConfig;
    use std::cell::RefCell;

    /// Constant predictions per branch: `cond` for data indicators, `uncond` for null.
    struct Branches {
        cond: f32,
        uncond: f32,
        filter: Option<FilterConfig>,
    }

    impl EpsModel for Branches {
        fn predict_eps(&self, x: &Tensor<f32>, _: &[usize], _: Option<&Tensor<f32>>, e: &[ModalityIndicator]) -> Result<Tensor<f32>> {
            let mut out = Tensor::zeros(x.shape());
            for (i, &m) in e.iter().enumerate() {
                let v = if m == Null { self.uncond } else { self.cond };
                out.item_mut(i).fill(v);
            }
            Ok(out)
        }
        fn condition_filter(&self) -> Option<FilterConfig> {
            self.filter
        }
    }

    /// Returns the noise that maps a fixed `x0` to the given `x_t`.
    struct Perfect<F> {
        x0: Tensor<F>,
        sched: NoiseSchedule,
        calls: RefCell<usize>,
    }

    impl<F: Scalar> EpsModel<F> for Perfect<F> {
        fn predict_eps(&self, x: &Tensor<F>, t: &[usize], _: Option<&Tensor<F>>, _: &[ModalityIndicator]) -> Result<Tensor<F>> {
            *self.calls.borrow_mut() += 1;
            let mut out = Tensor::zeros(x.shape());
            let per = self.x0.dim(0);
            for (i, &ti) in t.iter().enumerate().take(x.dim(0)) {
                let ab = self.sched.alpha_bar(ti);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                for ((o, &xt), &x0) in out.item_mut(i).iter_mut().zip(x.item(i)).zip(self.x0.item(i % per)) {
                    *o = F::of((xt.as_f64() - sa * x0.as_f64()) / sb);
                }
            }
            Ok(out)
        }
        fn condition_filter(&self) -> Option<FilterConfig> {
            None
        }
    }

    fn sched() -> NoiseSchedule {
        crate::schedule::ScheduleConfig::default().build().unwrap()
    }

    fn x0<F: Scalar>(seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        standard_normal::<F, _>(&[2, 3, 4, 6], &mut rng).map(|v| (F::of(0.5) * v).max(-F::one()).min(F::one()))
    }

    #[test]
    fn guidance_reduces_to_the_conditional_branch_at_zero_weight() {
        let m = Branches { cond: 0.2, uncond: 0.6, filter: None };
        let x = Tensor::zeros(&[2, 3, 4, 4]);
        let out = guided_eps(&m, &x, &[5, 5], None, Visible, 0.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn guidance_at_unit_weight_matches_hand_value() {
        let m = Branches { cond: 0.2, uncond: 0.6, filter: None };
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let out = guided_eps(&m, &x, &[5], None, Infrared, 1.0).unwrap();
        assert!(out.data().iter().all(|&v| (v + 0.2).abs() < 1e-7));
    }

    #[test]
    fn guidance_rejects_null_target() {
        let m = Branches { cond: 0.0, uncond: 0.0, filter: None };
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(matches!(guided_eps(&m, &x, &[1], None, Null, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn final_ddpm_step_is_the_mean() {
        let m = Branches { cond: 0.3, uncond: -0.1, filter: None };
        let s = sched();
        let x = x0(1);
        let cfg = SamplerConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = ddpm_step(&m, &s, &x, 1, None, Visible, &cfg, &mut r1).unwrap();
        let b = ddpm_step(&m, &s, &x, 1, None, Visible, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
        let eps = guided_eps(&m, &x, &[1, 1], None, Visible, 1.0).unwrap();
        assert_eq!(a, s.mean_from_eps(&x, &[1, 1], &eps).unwrap());
    }

    #[test]
    fn sigma_modes_match_hand_formulas() {
        let s = sched();
        let t = 10;
        let beta = 1.0 - s.alpha(t);
        assert!((sigma(&s, t, SigmaMode::Beta) - beta.sqrt()).abs() < 1e-15);
        let tilde = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * beta;
        assert!((sigma(&s, t, SigmaMode::BetaTilde) - tilde.sqrt()).abs() < 1e-15);
        // with alpha_1 = 1 the posterior variance at t = 2 vanishes since abar_1 = abar_0
        let flat = NoiseSchedule::from_alphas(vec![1.0, 0.9, 0.8]).unwrap();
        assert_eq!(sigma(&flat, 2, SigmaMode::BetaTilde), 0.0);
        assert!((sigma(&flat, 2, SigmaMode::Beta) - 0.1f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ddim_timesteps_are_increasing_and_end_at_start() {
        for (start, steps) in [(1000, 25), (1000, 1000), (500, 7), (10, 3), (1, 1)] {
            let seq = ddim_timesteps(start, steps).unwrap();
            assert_eq!(seq.len(), steps);
            assert_eq!(*seq.last().unwrap(), start);
            assert!(seq.windows(2).all(|w| w[0] < w[1]));
            assert!(seq[0] >= 1);
        }
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn perfect_predictor_recovers_x0() {
        let s = sched();
        let target = x0::<f64>(4);
        let m = Perfect { x0: target.clone(), sched: s.clone(), calls: RefCell::new(0) };
        for steps in [1, 2, 25, 100, 1000] {
            let cfg = SamplerConfig { ddim_steps: Some(steps), guidance_weight: 0.0, seed: 3, ..SamplerConfig::default() };
            let out = sample_tensor(&m, &s, target.shape(), None, Visible, &cfg).unwrap();
            let err = out.zip_map(&target, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-5, "{steps} steps: {err}");
        }
    }

    #[test]
    fn full_length_ddim_agrees_with_noise_free_ddpm() {
        let s = sched();
        let target = x0::<f64>(6);
        let m = Perfect { x0: target.clone(), sched: s.clone(), calls: RefCell::new(0) };
        let cfg = SamplerConfig { ddim_steps: Some(s.timesteps()), guidance_weight: 0.0, seed: 2, ..SamplerConfig::default() };
        let ddim = sample_tensor(&m, &s, target.shape(), None, Visible, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut x = standard_normal::<f64, _>(target.shape(), &mut rng);
        for t in (1..=s.timesteps()).rev() {
            let ts = [t, t];
            let eps = guided_eps(&m, &x, &ts, None, Visible, 0.0).unwrap();
            x = s.mean_from_eps(&x, &ts, &eps).unwrap();
        }
        let diff = ddim.zip_map(&clip(x), |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn single_step_schedule_collapses_to_ddpm() {
        let s = NoiseSchedule::linear(1, 0.9, 0.9).unwrap();
        let m = Branches { cond: 0.25, uncond: 0.5, filter: None };
        let cfg = SamplerConfig { ddim_steps: Some(1), ..SamplerConfig::default() };
        let shape = [2, 3, 4, 4];
        let ddim = ddim_sample(&m, &s, &shape, None, Infrared, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let x_t = standard_normal(&shape, &mut rng);
        let step = ddpm_step(&m, &s, &x_t, 1, None, Infrared, &cfg, &mut rng).unwrap();
        let diff = ddim.data.zip_map(&clip(step), |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn samplers_are_seed_deterministic_and_clipped() {
        let s = NoiseSchedule::linear(20, 0.99, 0.9).unwrap();
        let m = Branches { cond: 0.1, uncond: -0.4, filter: None };
        for ddim_steps in [Some(5), None] {
            let cfg = SamplerConfig { ddim_steps, seed: 11, ..SamplerConfig::default() };
            let a = ddim_sample(&m, &s, &[2, 3, 4, 4], None, Visible, &cfg).unwrap();
            let b = ddim_sample(&m, &s, &[2, 3, 4, 4], None, Visible, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let other = SamplerConfig { seed: 12, ..cfg };
            assert_ne!(a, ddim_sample(&m, &s, &[2, 3, 4, 4], None, Visible, &other).unwrap());
        }
    }

    #[test]
    fn too_many_ddim_steps_is_a_config_error() {
        let s = NoiseSchedule::linear(10, 0.99, 0.9).unwrap();
        let m = Branches { cond: 0.0, uncond: 0.0, filter: None };
        let cfg = SamplerConfig { ddim_steps: Some(11), ..SamplerConfig::default() };
        assert!(matches!(ddim_sample(&m, &s, &[1, 3, 2, 2], None, Visible, &cfg), Err(Error::Config(_))));
    }

    fn src_batch() -> ImageBatch {
        ImageBatch::new(x0(5), vec![Visible, Visible]).unwrap()
    }

    #[test]
    fn translation_contracts() {
        let s = NoiseSchedule::linear(10, 0.99, 0.9).unwrap();
        let with_c = Branches { cond: 0.0, uncond: 0.0, filter: Some(FilterConfig::default()) };
        let cfg = SamplerConfig { ddim_steps: Some(2), ..SamplerConfig::default() };
        assert!(matches!(translate(&with_c, &s, &src_batch(), Null, &cfg), Err(Error::Contract(_))));
        assert!(matches!(translate(&with_c, &s, &src_batch(), Visible, &cfg), Err(Error::Contract(_))));
        let out = translate(&with_c, &s, &src_batch(), Infrared, &cfg).unwrap();
        assert_eq!(out.images.modality, vec![Infrared; 2]);
        assert_eq!(out.condition.unwrap().data.shape(), &[2, 1, 4, 6]);
        assert!(matches!(
            partial_noise_translate(&with_c, &s, &src_batch(), Infrared, None, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_noise_at_zero_returns_source() {
        let s = sched();
        let m = Branches { cond: 0.3, uncond: 0.3, filter: None };
        let src = src_batch();
        let out = partial_noise_translate(&m, &s, &src, Infrared, Some(0), &SamplerConfig::default()).unwrap();
        assert_eq!(out.data, src.data);
        assert_eq!(out.modality, vec![Infrared; 2]);
    }

    #[test]
    fn partial_noise_from_full_noise_matches_generation_up_to_residual_signal() {
        // starting at T keeps sqrt(abar_T) of the source, which the perfect predictor removes
        let s = sched();
        let target = x0::<f32>(8);
        let m = Perfect { x0: target.clone(), sched: s.clone(), calls: RefCell::new(0) };
        let cfg = SamplerConfig { guidance_weight: 0.0, ..SamplerConfig::default() };
        let src = ImageBatch::new(x0(9), vec![Visible; 2]).unwrap();
        let a = partial_noise_translate(&m, &s, &src, Infrared, Some(s.timesteps()), &cfg).unwrap();
        let b = ddim_sample(&m, &s, target.shape(), None, Infrared, &cfg).unwrap();
        let diff = a.data.zip_map(&b.data, |x, y| (x - y).abs()).unwrap().max_abs();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn guided_path_batches_both_branches_in_one_call() {
        let s = sched();
        let m = Perfect { x0: x0::<f32>(1), sched: s.clone(), calls: RefCell::new(0) };
        let cfg = SamplerConfig { ddim_steps: Some(5), ..SamplerConfig::default() };
        ddim_sample(&m, &s, &[2, 3, 4, 6], None, Visible, &cfg).unwrap();
        assert_eq!(*m.calls.borrow(), 5);
    }

    /// Scales `x_t` by `cond` for data indicators and by `uncond` for null.
    struct Scaled {
        cond: f32,
        uncond: f32,
    }

    impl EpsModel for Scaled {
        fn predict_eps(&self, x: &Tensor<f32>, _: &[usize], _: Option<&Tensor<f32>>, e: &[ModalityIndicator]) -> Result<Tensor<f32>> {
            let mut out = x.clone();
            for (i, &m) in e.iter().enumerate() {
                let k = if m == Null { self.uncond } else { self.cond };
                out.item_mut(i).iter_mut().for_each(|v| *v *= k);
            }
            Ok(out)
        }
        fn condition_filter(&self) -> Option<FilterConfig> {
            None
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn guidance_is_affine_in_omega(
            cond in -2.0f32..2.0,
            uncond in -2.0f32..2.0,
            omega in 0.0f64..8.0,
            seed in 0u64..1000,
        ) {
            let m = Scaled { cond, uncond };
            let x = x0::<f32>(seed);
            let t = [3, 7];
            let g = |w: f64| guided_eps(&m, &x, &t, None, Infrared, w).unwrap();
            let (g0, g1, gw) = (g(0.0), g(1.0), g(omega));
            proptest::prop_assert_eq!(&g0, &m.predict_eps(&x, &t, None, &[Infrared; 2]).unwrap());
            for ((a, b), w) in g0.data().iter().zip(g1.data()).zip(gw.data()) {
                let want = *a as f64 + omega * (*b as f64 - *a as f64);
                proptest::prop_assert!((*w as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()));
            }
        }

        #[test]
        fn every_sampler_path_is_deterministic_and_in_range(
            cond in -3.0f32..3.0,
            uncond in -3.0f32..3.0,
            omega in 0.0f64..4.0,
            seed in 0u64..1_000_000,
            ddim in proptest::option::of(1usize..20),
        ) {
            let s = NoiseSchedule::linear(20, 0.99, 0.9).unwrap();
            let m = Scaled { cond, uncond };
            let cfg = SamplerConfig { ddim_steps: ddim, seed, guidance_weight: omega, ..SamplerConfig::default() };
            let a = ddim_sample(&m, &s, &[2, 3, 4, 6], None, Visible, &cfg).unwrap();
            proptest::prop_assert_eq!(&a, &ddim_sample(&m, &s, &[2, 3, 4, 6], None, Visible, &cfg).unwrap());
            proptest::prop_assert!(a.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let b = translate(&m, &s, &src_batch(), Infrared, &cfg).unwrap().images;
            proptest::prop_assert_eq!(&b, &translate(&m, &s, &src_batch(), Infrared, &cfg).unwrap().images);
            proptest::prop_assert!(b.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
