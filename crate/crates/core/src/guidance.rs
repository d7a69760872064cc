//! View-guided sampling: render the current `x̂₀` into each evidence camera,
//! compare against the observed view, pull the image-space error back to
//! `x_t` and bias the DDIM trajectory with it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::diffusion::{
    ddim_timesteps, ddim_update, langevin_update, rng_stream, standard_normal, NoiseSchedule, SamplerConfig,
    X0ModelVjp,
};
use crate::error::{Error, Result};
use crate::gaussians::{GaussianSet, FEATURE_DIM};
use crate::image::ImageBuffer;
use crate::render::{render, render_backward, RenderGradients};

/// One observed view `y₀` with its object mask and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEvidence {
    pub image: ImageBuffer,
    pub camera: Camera,
    pub weight: f64,
}

impl ViewEvidence {
    pub fn new(image: ImageBuffer, camera: Camera, weight: f64) -> Result<Self> {
        if image.mask.is_none() {
            return Err(Error::Config("evidence image needs an object mask".into()));
        }
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::ShapeMismatch(format!(
                "evidence image {}x{} but camera {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!("evidence weight must be positive, got {weight}")));
        }
        camera.validate()?;
        Ok(Self { image, camera, weight })
    }

    pub fn mask(&self) -> &[bool] {
        self.image.mask.as_deref().expect("validated on construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    MaskedMse,
    MaskedL1,
    /// L1 over every pixel; the mask only sets the alpha target.
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// `∂x̂₀/∂x_t ≈ I`.
    #[default]
    StraightThrough,
    /// Backpropagate through the denoiser.
    FullChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lambda_gd: f64,
    pub loss: LossKind,
    pub mode: GradientMode,
    /// Bound on the root-mean-square row norm of the guidance gradient.
    pub clip_norm: f64,
    /// Recompute guidance before each Langevin corrector.
    pub corrector_guidance: bool,
    pub background: [f64; 3],
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_gd: 30.0,
            loss: LossKind::MaskedMse,
            mode: GradientMode::StraightThrough,
            clip_norm: 1.0,
            corrector_guidance: false,
            background: [0.0; 3],
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gd >= 0.0 && self.lambda_gd.is_finite()) {
            return Err(Error::Config(format!("lambda_gd must be finite and >= 0, got {}", self.lambda_gd)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

pub const ALPHA_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    pub loss: f64,
    /// `H×W×3`.
    pub grad_rgb: Vec<f64>,
    /// `H×W`.
    pub grad_alpha: Vec<f64>,
}

/// Color error (mean over the `3m` masked channel values, or all `3p` for `L1`) plus
/// `0.5 · mean((alpha − mask)²)` over all pixels.
pub fn image_loss(rendered: &ImageBuffer, evidence: &ViewEvidence, kind: LossKind) -> Result<ImageLoss> {
    let target = &evidence.image;
    if !rendered.same_size(target) {
        return Err(Error::ShapeMismatch(format!(
            "render {}x{} vs evidence {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let mask = evidence.mask();
    let m = mask.iter().filter(|&&v| v).count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let p = rendered.pixel_count();
    let full = kind == LossKind::L1;
    let denom = 3.0 * if full { p } else { m } as f64;
    let mut loss = 0.0;
    let mut grad_rgb = vec![0.0; p * 3];
    let mut grad_alpha = vec![0.0; p];
    for i in 0..p {
        if mask[i] || full {
            for c in i * 3..i * 3 + 3 {
                let d = rendered.rgb[c] - target.rgb[c];
                match kind {
                    LossKind::MaskedMse => {
                        loss += d * d / denom;
                        grad_rgb[c] = 2.0 * d / denom;
                    }
                    LossKind::MaskedL1 | LossKind::L1 => {
                        loss += d.abs() / denom;
                        grad_rgb[c] = if d == 0.0 { 0.0 } else { d.signum() / denom };
                    }
                }
            }
        }
        let target_alpha = if mask[i] { 1.0 } else { 0.0 };
        let d = rendered.alpha[i] - target_alpha;
        loss += ALPHA_WEIGHT * d * d / p as f64;
        grad_alpha[i] = 2.0 * ALPHA_WEIGHT * d / p as f64;
    }
    Ok(ImageLoss {
        loss,
        grad_rgb,
        grad_alpha,
    })
}

/// Per-view image loss and renderer gradients, in view order.
pub fn view_gradients(
    set: &GaussianSet,
    evidence: &[ViewEvidence],
    kind: LossKind,
    background: [f64; 3],
) -> Result<Vec<(f64, RenderGradients)>> {
    evidence
        .par_iter()
        .map(|v| {
            let out = render(set, &v.camera, background);
            let l = image_loss(&out.image, v, kind)?;
            let g = render_backward(&out, set, &v.camera, &l.grad_rgb, Some(&l.grad_alpha))?;
            Ok((l.loss, g))
        })
        .collect()
}

/// Weighted image loss of a feature array over every view, with its gradient
/// with respect to the features.
pub fn evidence_loss(features: &[f64], evidence: &[ViewEvidence], config: &GuidanceConfig) -> Result<(f64, Vec<f64>)> {
    let set = GaussianSet::from_features(features.to_vec())?;
    let per_view = view_gradients(&set, evidence, config.loss, config.background)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; features.len()];
    for (v, (l, g)) in evidence.iter().zip(per_view) {
        loss += v.weight * l;
        for (a, b) in grad.iter_mut().zip(g.features) {
            *a += v.weight * b;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub x0_hat: Vec<f64>,
    /// `∇_{x_t}` of the weighted loss (identity Jacobian in straight-through mode).
    pub grad_xt: Vec<f64>,
}

/// Unscaled guidance gradient: the weighted image loss at `x̂₀(x_t)` and its
/// gradient with respect to `x_t`.
pub fn loss_gradient(
    model: &impl X0ModelVjp,
    x_t: &[f64],
    n: usize,
    t: usize,
    evidence: &[ViewEvidence],
    config: &GuidanceConfig,
) -> Result<LossGradient> {
    if evidence.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, got: 0 });
    }
    let x0_hat = model.predict_x0(x_t, n, t)?;
    if x0_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let (loss, grad_x0) = evidence_loss(&x0_hat, evidence, config)?;
    let grad_xt = match config.mode {
        GradientMode::StraightThrough => grad_x0,
        GradientMode::FullChain => model.predict_x0_vjp(x_t, n, t, &grad_x0)?.1,
    };
    Ok(LossGradient { loss, x0_hat, grad_xt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GuidanceStats {
    pub steps: usize,
    /// Steps whose gradient was non-finite and replaced by zero.
    pub skipped: usize,
    pub clipped: usize,
}

/// `−(1−β̄_t)/(2β̄_t) · ∇_{x_t} L`, clipped to an RMS row norm of `clip_norm`.
/// Non-finite gradients become zero and are counted as skipped.
pub fn guided_gradient(
    model: &impl X0ModelVjp,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    n: usize,
    t: usize,
    evidence: &[ViewEvidence],
    config: &GuidanceConfig,
    stats: &mut GuidanceStats,
) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    stats.steps += 1;
    let lg = match loss_gradient(model, x_t, n, t, evidence, config) {
        Ok(lg) => lg,
        Err(Error::NonFiniteGradient) => {
            stats.skipped += 1;
            return Ok(vec![0.0; x_t.len()]);
        }
        Err(e) => return Err(e),
    };
    let bb = schedule.beta_bar(t);
    let coef = -(1.0 - bb) / (2.0 * bb);
    let mut grad: Vec<f64> = lg.grad_xt.iter().map(|g| coef * g).collect();
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        stats.skipped += 1;
        return Ok(vec![0.0; x_t.len()]);
    }
    let limit = config.clip_norm * (n as f64).sqrt();
    if norm > limit {
        stats.clipped += 1;
        let s = limit / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    Ok(grad)
}

/// `x̃_t = x_t + λ·β̄_t/√(1−β̄_t)·grad`. Identity when `λ = 0`.
fn apply_guidance(
    model: &impl X0ModelVjp,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    n: usize,
    t: usize,
    evidence: &[ViewEvidence],
    config: &GuidanceConfig,
    stats: &mut GuidanceStats,
) -> Result<Vec<f64>> {
    if config.lambda_gd == 0.0 {
        return Ok(x_t.to_vec());
    }
    let grad = guided_gradient(model, schedule, x_t, n, t, evidence, config, stats)?;
    let bb = schedule.beta_bar(t);
    let step = config.lambda_gd * bb / (1.0 - bb).sqrt();
    Ok(x_t
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| if g == 0.0 { x } else { x + step * g })
        .collect())
}

/// Guided DDIM step followed by the configured Langevin correctors.
#[allow(clippy::too_many_arguments)]
pub fn guided_ddim_step(
    model: &impl X0ModelVjp,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    n: usize,
    t: usize,
    t_prev: usize,
    evidence: &[ViewEvidence],
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    rng: &mut impl Rng,
    stats: &mut GuidanceStats,
) -> Result<Vec<f64>> {
    let guided = apply_guidance(model, schedule, x_t, n, t, evidence, guidance, stats)?;
    let x0_hat = model.predict_x0(&guided, n, t)?;
    let mut x = ddim_update(schedule, &guided, &x0_hat, t, t_prev, sampler.eta, rng)?;
    if t_prev > 0 {
        let step = sampler.corrector_step(schedule, t_prev);
        for _ in 0..sampler.corrector_steps {
            if guidance.corrector_guidance {
                x = apply_guidance(model, schedule, &x, n, t_prev, evidence, guidance, stats)?;
            }
            let x0_hat = model.predict_x0(&x, n, t_prev)?;
            x = langevin_update(schedule, &x, &x0_hat, t_prev, step, rng)?;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub set: GaussianSet,
    pub stats: GuidanceStats,
}

/// Full guided sampling from `x_T ~ N(0, I)`. Uses the same random stream as
/// [`crate::diffusion::sample_unconditional`], so `λ = 0` reproduces it.
pub fn reconstruct(
    model: &impl X0ModelVjp,
    schedule: &NoiseSchedule,
    evidence: &[ViewEvidence],
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    n: usize,
) -> Result<Reconstruction> {
    if evidence.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, got: 0 });
    }
    sampler.validate(schedule)?;
    guidance.validate()?;
    let mut stats = GuidanceStats::default();
    let mut rng = rng_stream(sampler.seed, 0);
    let mut x = standard_normal(&mut rng, n * FEATURE_DIM);
    let ts = ddim_timesteps(schedule.num_steps(), sampler.ddim_steps);
    for pair in ts.windows(2) {
        x = guided_ddim_step(
            model, schedule, &x, n, pair[0], pair[1], evidence, sampler, guidance, &mut rng, &mut stats,
        )?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(Reconstruction {
        set: GaussianSet::from_features(x)?,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, sample_unconditional, ScheduleKind, X0Model};
    use crate::gaussians::logit;
    use nalgebra::Vector3;

    /// `x̂₀ = base + x_t · k` with a closed-form VJP.
    struct Affine {
        base: Vec<f64>,
        k: f64,
    }

    impl X0Model for Affine {
        fn predict_x0(&self, x: &[f64], _n: usize, _t: usize) -> Result<Vec<f64>> {
            Ok(self.base.iter().zip(x).map(|(b, v)| b + self.k * v).collect())
        }
    }

    impl X0ModelVjp for Affine {
        fn predict_x0_vjp(&self, x: &[f64], n: usize, t: usize, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((self.predict_x0(x, n, t)?, g.iter().map(|v| v * self.k).collect()))
        }
    }

    fn camera() -> Camera {
        Camera::orbit(Vector3::zeros(), 2.5, 0.3, 0.2, 40.0, 24, 24).unwrap()
    }

    fn scene() -> Vec<f64> {
        let mut f = Vec::new();
        for (i, p) in [[0.0, 0.0, 0.0], [0.15, -0.1, 0.05], [-0.1, 0.12, -0.08]].iter().enumerate() {
            f.extend_from_slice(p);
            f.extend_from_slice(&[(0.12f64).ln(), (0.08f64).ln(), (0.1f64).ln()]);
            f.extend_from_slice(&[1.0, 0.1 * i as f64, 0.0, 0.0, 1.0, 0.2]);
            f.push(logit(0.7));
            f.extend_from_slice(&[0.8, 0.3 + 0.2 * i as f64, 0.2]);
        }
        f
    }

    fn evidence_from(features: &[f64], cam: &Camera) -> ViewEvidence {
        let set = GaussianSet::from_features(features.to_vec()).unwrap();
        let out = render(&set, cam, [0.0; 3]);
        let mask = out.image.alpha_mask(0.5);
        ViewEvidence::new(out.image.with_mask(mask), cam.clone(), 1.0).unwrap()
    }

    #[test]
    fn image_loss_examples() {
        let cam = camera();
        let ev = evidence_from(&scene(), &cam);
        let exact = ImageBuffer {
            alpha: ev.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            ..ev.image.clone()
        };
        let ev_exact = ViewEvidence::new(exact.clone(), cam.clone(), 1.0).unwrap();
        let l = image_loss(&exact, &ev_exact, LossKind::MaskedMse).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.grad_rgb.iter().chain(&l.grad_alpha).all(|&g| g == 0.0));

        let delta = 0.1;
        let mut shifted = exact.clone();
        for (i, &m) in ev_exact.mask().iter().enumerate() {
            if m {
                shifted.rgb[i * 3 + 1] += delta;
            }
        }
        let m = ev_exact.mask().iter().filter(|&&v| v).count() as f64;
        let l = image_loss(&shifted, &ev_exact, LossKind::MaskedMse).unwrap();
        assert!((l.loss - delta * delta / 3.0).abs() < 1e-12);
        for (i, &mk) in ev_exact.mask().iter().enumerate() {
            let g = l.grad_rgb[i * 3 + 1];
            let expected = if mk { 2.0 * delta / (3.0 * m) } else { 0.0 };
            assert!((g - expected).abs() < 1e-15);
        }

        let empty = ViewEvidence::new(exact.clone().with_mask(vec![false; 576]), cam, 1.0).unwrap();
        assert!(matches!(image_loss(&exact, &empty, LossKind::MaskedMse), Err(Error::EmptyMask)));
    }

    #[test]
    fn straight_through_is_scaled_render_gradient() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let cam = camera();
        let truth = scene();
        let ev = vec![evidence_from(&truth, &cam)];
        let mut shifted = truth.clone();
        shifted[0] += 0.05;
        shifted[14] -= 0.2;
        let model = Affine {
            base: shifted.clone(),
            k: 0.0,
        };
        let cfg = GuidanceConfig {
            clip_norm: 1e9,
            ..Default::default()
        };
        let t = 300;
        let mut stats = GuidanceStats::default();
        let g = guided_gradient(&model, &s, &vec![0.0; 48], 3, t, &ev, &cfg, &mut stats).unwrap();
        let set = GaussianSet::from_features(shifted).unwrap();
        let out = render(&set, &cam, [0.0; 3]);
        let l = image_loss(&out.image, &ev[0], LossKind::MaskedMse).unwrap();
        let rg = render_backward(&out, &set, &cam, &l.grad_rgb, Some(&l.grad_alpha)).unwrap();
        let bb = s.beta_bar(t);
        for (a, b) in g.iter().zip(&rg.features) {
            assert_eq!(*a, -(1.0 - bb) / (2.0 * bb) * b);
        }
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_gradient_leaves_the_step_unchanged() {
        let s = make_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let cam = camera();
        let ev = vec![evidence_from(&scene(), &cam)];
        // every ellipsoid sits behind the camera, so nothing receives gradient
        let mut hidden = scene();
        let behind = cam.center() * 2.0;
        for r in 0..3 {
            hidden[r * 16..r * 16 + 3].copy_from_slice(behind.as_slice());
        }
        let model = Affine { base: hidden, k: 0.0 };
        let sampler = SamplerConfig {
            eta: 0.3,
            ..Default::default()
        };
        let x_t = vec![0.3; 48];
        let mut stats = GuidanceStats::default();
        let g = guided_gradient(&model, &s, &x_t, 3, 40, &ev, &GuidanceConfig::default(), &mut stats).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let run = |lambda_gd| {
            let cfg = GuidanceConfig {
                lambda_gd,
                ..Default::default()
            };
            let mut stats = GuidanceStats::default();
            guided_ddim_step(&model, &s, &x_t, 3, 40, 30, &ev, &sampler, &cfg, &mut rng_stream(5, 0), &mut stats)
                .unwrap()
        };
        assert_eq!(run(100.0), run(0.0));
    }

    #[test]
    fn lambda_zero_matches_unguided_sampler() {
        let s = make_schedule(200, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let cam = camera();
        let truth = scene();
        let ev = vec![evidence_from(&truth, &cam)];
        let model = Affine { base: truth, k: 0.5 };
        let sampler = SamplerConfig {
            ddim_steps: 20,
            eta: 0.5,
            seed: 11,
            ..Default::default()
        };
        let guided = reconstruct(
            &model,
            &s,
            &ev,
            &sampler,
            &GuidanceConfig {
                lambda_gd: 0.0,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let plain = sample_unconditional(&model, &s, &sampler, 3).unwrap();
        assert_eq!(guided.set.features(), plain.features());
    }

    #[test]
    fn missing_evidence_is_rejected() {
        let s = make_schedule(10, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let model = Affine {
            base: vec![0.0; 16],
            k: 1.0,
        };
        let r = reconstruct(&model, &s, &[], &SamplerConfig::default(), &GuidanceConfig::default(), 1);
        assert!(matches!(r, Err(Error::InsufficientViews { .. })));
    }
}
