//! Noise schedule, forward noising, the x0-prediction training objective,
//! DDIM steps and Langevin correction over `N×16` feature arrays.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `t = 0` meaning clean data
//! (`ᾱ_0 = 1`).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{GaussianSet, FEATURE_DIM};
use crate::nn::denoiser::DenoiserWeights;
use crate::nn::tape::Tape;
use crate::nn::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidRange("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.num_steps() {
            return Err(Error::InvalidTimestep {
                t,
                lo: 1,
                hi: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// The `β̄_t` that scales guidance. Read as `1 − ᾱ_t`; swap here to change
    /// the interpretation everywhere.
    pub fn beta_bar(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar(t)
    }
}

/// Anything that predicts `x̂₀` from `(x_t, t)` on `n×16` arrays.
pub trait X0Model {
    fn predict_x0(&self, x_t: &[f64], n: usize, t: usize) -> Result<Vec<f64>>;
}

/// An [`X0Model`] that can also pull a cotangent back through the prediction.
pub trait X0ModelVjp: X0Model {
    /// Returns `(x̂₀, (∂x̂₀/∂x_t)ᵀ · grad_x0)`.
    fn predict_x0_vjp(&self, x_t: &[f64], n: usize, t: usize, grad_x0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Trained weights paired with the schedule they were trained under.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a, T: Scalar> {
    pub weights: &'a DenoiserWeights<T>,
    pub schedule: &'a NoiseSchedule,
}

impl<'a, T: Scalar> Denoiser<'a, T> {
    pub fn new(weights: &'a DenoiserWeights<T>, schedule: &'a NoiseSchedule) -> Self {
        Self { weights, schedule }
    }

    fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.schedule.num_steps() {
            return Err(Error::InvalidTimestep {
                t,
                lo: 1,
                hi: self.schedule.num_steps(),
            });
        }
        Ok(self.schedule.alpha_bar(t))
    }
}

impl<T: Scalar> X0Model for Denoiser<'_, T> {
    fn predict_x0(&self, x_t: &[f64], n: usize, t: usize) -> Result<Vec<f64>> {
        self.weights.denoise(x_t, n, t, self.alpha_bar(t)?)
    }
}

impl<T: Scalar> X0ModelVjp for Denoiser<'_, T> {
    fn predict_x0_vjp(&self, x_t: &[f64], n: usize, t: usize, grad_x0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.weights.denoise_vjp(x_t, n, t, self.alpha_bar(t)?, grad_x0)
    }
}

/// Independent stream `stream` of the ChaCha8 generator seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·noise`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    if x0.len() != noise.len() {
        return Err(Error::ShapeMismatch("noise must match x0".into()));
    }
    let a = schedule.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &e)| sa * x + sb * e).collect())
}

/// Mean of `|x₀ − pred|` over active rows and all channels, with its gradient
/// with respect to `pred`.
pub fn masked_l1(pred: &[f64], x0: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != x0.len() || x0.len() != mask.len() * FEATURE_DIM {
        return Err(Error::ShapeMismatch("prediction, target and mask disagree".into()));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::AllMasked);
    }
    let count = (active * FEATURE_DIM) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in r * FEATURE_DIM..(r + 1) * FEATURE_DIM {
            let d = pred[c] - x0[c];
            loss += d.abs();
            grad[c] = if d > 0.0 {
                1.0 / count
            } else if d < 0.0 {
                -1.0 / count
            } else {
                0.0
            };
        }
    }
    Ok((loss / count, grad))
}

#[derive(Debug, Clone)]
pub struct TrainingLoss<T> {
    pub loss: f64,
    /// One gradient per weight tensor, in parameter order.
    pub grads: Vec<Vec<T>>,
}

/// L1 x0-prediction objective on one set, with weight gradients.
pub fn training_loss<T: Scalar>(
    weights: &DenoiserWeights<T>,
    schedule: &NoiseSchedule,
    x0: &GaussianSet,
    t: usize,
    noise: &[f64],
) -> Result<TrainingLoss<T>> {
    let n = x0.len();
    let x_t = q_sample(schedule, x0.features(), t, noise)?;
    let x_t: Vec<T> = x_t.into_iter().map(T::from_f64).collect();
    let mut tape = Tape::new();
    let graph = weights.forward(&mut tape, &x_t, n, t, schedule.alpha_bar(t), false, true)?;
    let pred = tape.value(graph.output).to_f64_vec();
    let (loss, grad) = masked_l1(&pred, x0.features(), x0.mask())?;
    let seed: Vec<T> = grad.into_iter().map(T::from_f64).collect();
    let mut g = tape.backward(graph.output, Some(&seed))?;
    let grads = graph
        .params
        .iter()
        .zip(&weights.params)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![T::zero(); p.len()]))
        .collect();
    Ok(TrainingLoss { loss, grads })
}

/// `ε̂ = (x_t − √ᾱ_t·x̂₀)/√(1−ᾱ_t)`.
pub fn predicted_noise(schedule: &NoiseSchedule, x_t: &[f64], x0_hat: &[f64], t: usize) -> Vec<f64> {
    let a = schedule.alpha_bar(t);
    let (sa, inv) = (a.sqrt(), 1.0 / (1.0 - a).sqrt());
    x_t.iter().zip(x0_hat).map(|(&x, &x0)| (x - sa * x0) * inv).collect()
}

/// DDIM update from a given `x̂₀`. Draws noise only when `σ > 0`.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    if t_prev > t {
        return Err(Error::InvalidTimestep { t: t_prev, lo: 0, hi: t });
    }
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t_prev);
    let eps = predicted_noise(schedule, x_t, x0_hat, t);
    let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).max(0.0).sqrt();
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let sp = a_prev.sqrt();
    let mut out: Vec<f64> = x0_hat.iter().zip(&eps).map(|(&x0, &e)| sp * x0 + dir * e).collect();
    if sigma > 0.0 {
        for v in &mut out {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    Ok(out)
}

pub fn ddim_step(
    model: &impl X0Model,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    n: usize,
    t: usize,
    t_prev: usize,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    let x0_hat = model.predict_x0(x_t, n, t)?;
    ddim_update(schedule, x_t, &x0_hat, t, t_prev, eta, rng)
}

/// Langevin move given `x̂₀`: `x + s·ŝ + √(2s)·z`, `ŝ = −ε̂/√(1−ᾱ_t)`.
pub fn langevin_update(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    step_size: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    if step_size == 0.0 {
        return Ok(x_t.to_vec());
    }
    let inv = 1.0 / (1.0 - schedule.alpha_bar(t)).sqrt();
    let noise_scale = (2.0 * step_size).sqrt();
    let eps = predicted_noise(schedule, x_t, x0_hat, t);
    Ok(x_t
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| {
            let z: f64 = StandardNormal.sample(rng);
            x - step_size * e * inv + noise_scale * z
        })
        .collect())
}

pub fn langevin_correct(
    model: &impl X0Model,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    n: usize,
    t: usize,
    step_size: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    let x0_hat = model.predict_x0(x_t, n, t)?;
    langevin_update(schedule, x_t, &x0_hat, t, step_size, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    pub corrector_steps: usize,
    /// Corrector step is `corrector_step_size · (1 − ᾱ_t)`.
    pub corrector_step_size: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            eta: 0.0,
            corrector_steps: 1,
            corrector_step_size: 0.1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > schedule.num_steps() {
            return Err(Error::Config(format!(
                "ddim_steps must be in [1, {}], got {}",
                schedule.num_steps(),
                self.ddim_steps
            )));
        }
        if !(self.eta >= 0.0) || !(self.corrector_step_size > 0.0) {
            return Err(Error::Config("eta must be >= 0 and corrector_step_size > 0".into()));
        }
        Ok(())
    }

    pub fn corrector_step(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        self.corrector_step_size * (1.0 - schedule.alpha_bar(t))
    }
}

/// Descending timesteps `T = t_S > … > t_0 = 0`, `t_i = round(T·i/S)`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut ts: Vec<usize> = (0..=steps)
        .rev()
        .map(|i| ((total * i) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Unguided DDIM sampling (with optional Langevin correctors between steps).
pub fn sample_unconditional(
    model: &impl X0Model,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n: usize,
) -> Result<GaussianSet> {
    config.validate(schedule)?;
    let mut rng = rng_stream(config.seed, 0);
    let mut x = standard_normal(&mut rng, n * FEATURE_DIM);
    let ts = ddim_timesteps(schedule.num_steps(), config.ddim_steps);
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        x = ddim_step(model, schedule, &x, n, t, t_prev, config.eta, &mut rng)?;
        if t_prev > 0 {
            let step = config.corrector_step(schedule, t_prev);
            for _ in 0..config.corrector_steps {
                x = langevin_correct(model, schedule, &x, n, t_prev, step, &mut rng)?;
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    GaussianSet::from_features(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_1000() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    /// Predicts a fixed x0 regardless of input.
    struct Fixed(Vec<f64>);

    impl X0Model for Fixed {
        fn predict_x0(&self, _x: &[f64], _n: usize, _t: usize) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn schedule_examples() {
        let s = linear_1000();
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-18);
        assert!(s.alpha_bar(1000) < 1e-4 && s.alpha_bar(1000) > 3e-5);
        assert!((1..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
        let one = make_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(one.alpha_bar(1), 0.5);
        assert!(matches!(make_schedule(10, 1e-4, 1.0, ScheduleKind::Linear), Err(Error::InvalidRange(_))));
        assert!(make_schedule(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = linear_1000();
        let noise = [0.3, -1.2, 2.0];
        let x = q_sample(&s, &[0.0; 3], 400, &noise).unwrap();
        for (a, e) in x.iter().zip(noise) {
            assert!((a - s.beta_bar(400).sqrt() * e).abs() < 1e-15);
        }
        assert!(matches!(q_sample(&s, &[0.0], 0, &[0.0]), Err(Error::InvalidTimestep { .. })));
        assert!(q_sample(&s, &[0.0], 1001, &[0.0]).is_err());
    }

    #[test]
    fn masked_l1_examples() {
        let x0 = vec![1.0; 32];
        let (loss, _) = masked_l1(&x0, &x0, &[true, true]).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, grad) = masked_l1(&vec![0.0; 32], &x0, &[true, true]).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.iter().all(|&g| g == -1.0 / 32.0));
        let mut pred = vec![0.0; 32];
        pred[16..].iter_mut().for_each(|v| *v = 2.0);
        let (loss, grad) = masked_l1(&pred, &[0.0; 32], &[true, false]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(matches!(masked_l1(&pred, &x0, &[false, false]), Err(Error::AllMasked)));
    }

    #[test]
    fn ddim_examples() {
        let s = linear_1000();
        let x0: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.0).collect();
        let model = Fixed(x0.clone());
        let mut rng = rng_stream(1, 0);
        let x_t = standard_normal(&mut rng, 32);
        let out = ddim_step(&model, &s, &x_t, 2, 700, 0, 0.0, &mut rng).unwrap();
        assert_eq!(out, x0);
        let a = ddim_step(&model, &s, &x_t, 2, 700, 300, 0.0, &mut rng_stream(1, 0)).unwrap();
        let b = ddim_step(&model, &s, &x_t, 2, 700, 300, 0.0, &mut rng_stream(99, 3)).unwrap();
        assert_eq!(a, b);
        let same = ddim_step(&model, &s, &x_t, 2, 700, 700, 0.0, &mut rng).unwrap();
        for (p, q) in same.iter().zip(&x_t) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(ddim_step(&model, &s, &x_t, 2, 700, 701, 0.0, &mut rng).is_err());
    }

    #[test]
    fn langevin_examples() {
        let s = linear_1000();
        let x0 = vec![0.5; 16];
        let model = Fixed(x0.clone());
        let mut rng = rng_stream(2, 0);
        let x_t = standard_normal(&mut rng, 16);
        assert_eq!(langevin_correct(&model, &s, &x_t, 1, 10, 0.0, &mut rng).unwrap(), x_t);
        let at: Vec<f64> = x0.iter().map(|v| v * s.alpha_bar(10).sqrt()).collect();
        let moved = langevin_correct(&model, &s, &at, 1, 10, 0.01, &mut rng_stream(3, 0)).unwrap();
        let mut r = rng_stream(3, 0);
        for (m, a) in moved.iter().zip(&at) {
            let z: f64 = StandardNormal.sample(&mut r);
            assert!((m - a - 0.02f64.sqrt() * z).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_striding() {
        assert_eq!(ddim_timesteps(10, 10), (0..=10).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(1000, 4), vec![1000, 750, 500, 250, 0]);
        assert_eq!(ddim_timesteps(10, 3), vec![10, 7, 3, 0]);
    }

    #[test]
    fn perfect_model_recovers_datapoint() {
        let s = linear_1000();
        let x0: Vec<f64> = (0..48).map(|i| (i as f64).sin()).collect();
        let model = Fixed(x0.clone());
        for steps in [1, 7, 50] {
            let cfg = SamplerConfig {
                ddim_steps: steps,
                corrector_steps: 0,
                ..Default::default()
            };
            let set = sample_unconditional(&model, &s, &cfg, 3).unwrap();
            let err = set.features().iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "steps {steps}: {err}");
        }
    }
}
