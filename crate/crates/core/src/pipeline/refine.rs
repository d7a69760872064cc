//! Polish-and-reuse reconstruction: guided sampling, then repeated
//! multi-view refinement against the evidence plus polished synthetic views.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::diffusion::{rng_stream, NoiseSchedule, SamplerConfig, X0ModelVjp};
use crate::error::{Error, Result};
use crate::fitting::{refine_multiview, FitConfig};
use crate::gaussians::GaussianSet;
use crate::guidance::{reconstruct, GuidanceConfig, GuidanceStats, ViewEvidence};
use crate::image::ImageBuffer;
use crate::pipeline::dataset::render_views;
use crate::pipeline::scene::RigConfig;

/// Post-processes a rendered synthetic view before it is reused as evidence.
pub trait Polisher: Sync {
    fn polish(&self, image: &ImageBuffer, camera: &Camera) -> ImageBuffer;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPolisher;

impl Polisher for IdentityPolisher {
    fn polish(&self, image: &ImageBuffer, _camera: &Camera) -> ImageBuffer {
        image.clone()
    }
}

/// Separable Gaussian blur of the rgb channels; alpha and mask pass through.
#[derive(Debug, Clone, Copy)]
pub struct GaussianBlurPolisher {
    pub sigma: f64,
}

impl Polisher for GaussianBlurPolisher {
    fn polish(&self, image: &ImageBuffer, _camera: &Camera) -> ImageBuffer {
        if self.sigma <= 0.0 {
            return image.clone();
        }
        let r = (3.0 * self.sigma).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r)
            .map(|d| (-((d * d) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let (w, h) = (image.width as isize, image.height as isize);
        let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0; 3];
                    let mut norm = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let d = k as isize - r;
                        let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                        if sx < 0 || sy < 0 || sx >= w || sy >= h {
                            continue;
                        }
                        let i = ((sy * w + sx) * 3) as usize;
                        for c in 0..3 {
                            acc[c] += kv * src[i + c];
                        }
                        norm += kv;
                    }
                    let o = ((y * w + x) * 3) as usize;
                    for c in 0..3 {
                        out[o + c] = acc[c] / norm;
                    }
                }
            }
            out
        };
        let mut out = image.clone();
        out.rgb = pass(&pass(&image.rgb, true), false);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolisherKind {
    #[default]
    Identity,
    GaussianBlur {
        sigma: f64,
    },
}

impl PolisherKind {
    pub fn build(&self) -> Box<dyn Polisher> {
        match *self {
            PolisherKind::Identity => Box::new(IdentityPolisher),
            PolisherKind::GaussianBlur { sigma } => Box::new(GaussianBlurPolisher { sigma }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Total rounds `R`; round 1 is guided sampling.
    pub rounds: usize,
    pub synthetic_views: usize,
    pub synthetic_weight: f64,
    pub polisher: PolisherKind,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            synthetic_views: 8,
            synthetic_weight: 0.5,
            polisher: PolisherKind::Identity,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub set: GaussianSet,
    /// Result after each round.
    pub rounds: Vec<GaussianSet>,
    pub guidance: GuidanceStats,
    /// Synthetic views used in the last refinement round.
    pub synthetic: Vec<ViewEvidence>,
}

/// Renders polished synthetic ring views of `set`. Masks come from the
/// rendered alpha.
pub fn synthetic_views(
    set: &GaussianSet,
    rig: &RigConfig,
    count: usize,
    weight: f64,
    background: [f64; 3],
    polisher: &dyn Polisher,
) -> Result<Vec<ViewEvidence>> {
    let cams = rig.ring(count, 0.0)?;
    render_views(set, &cams, background, weight)?
        .into_iter()
        .map(|v| {
            let polished = polisher.polish(&v.image, &v.camera);
            let polished = ImageBuffer {
                mask: v.image.mask.clone(),
                alpha: v.image.alpha.clone(),
                ..polished
            };
            ViewEvidence::new(polished, v.camera, weight)
        })
        .collect()
}

/// Round 1 runs guided sampling on the evidence; each later round refines
/// the previous result on the evidence (weight unchanged) plus synthetic
/// views rendered from that result and polished. Synthetic views from older
/// rounds are replaced, never accumulated.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_with_refinement(
    model: &impl X0ModelVjp,
    schedule: &NoiseSchedule,
    evidence: &[ViewEvidence],
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    fit: &FitConfig,
    refine: &RefineConfig,
    rig: &RigConfig,
    polisher: &dyn Polisher,
    n: usize,
) -> Result<RefinementResult> {
    if refine.rounds == 0 {
        return Err(Error::Config("refinement needs at least one round".into()));
    }
    let first = reconstruct(model, schedule, evidence, sampler, guidance, n)?;
    let mut set = first.set;
    let mut rounds = vec![set.clone()];
    let mut synthetic = Vec::new();
    for round in 1..refine.rounds {
        synthetic = synthetic_views(
            &set,
            rig,
            refine.synthetic_views,
            refine.synthetic_weight,
            guidance.background,
            polisher,
        )?;
        let mut views = evidence.to_vec();
        views.extend(synthetic.iter().cloned());
        let fit = FitConfig {
            background: guidance.background,
            ..*fit
        };
        let mut rng = rng_stream(sampler.seed, 1000 + round as u64);
        set = refine_multiview(&set, &views, &fit, &mut rng)?.0;
        rounds.push(set.clone());
    }
    Ok(RefinementResult {
        set,
        rounds,
        guidance: first.stats,
        synthetic,
    })
}
