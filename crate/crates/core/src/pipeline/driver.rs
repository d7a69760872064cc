//! Whole-dataset operations shared by the CLI and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::diffusion::{rng_stream, NoiseSchedule, SamplerConfig, X0ModelVjp};
use crate::error::{Error, Result};
use crate::fitting::{fit_scene, FitConfig, FitStats};
use crate::gaussians::{save_gaussians, GaussianSet};
use crate::guidance::{GuidanceConfig, ViewEvidence};
use crate::image::{load_png, save_mask_png, save_png};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::dataset::{list_scenes, SceneData};
use crate::pipeline::eval::{fingerprint, reconstruction_cloud, EvalReport, SceneMetrics};
use crate::pipeline::metrics::{psnr, ssim};
use crate::pipeline::refine::{reconstruct_with_refinement, RefinementResult};
use crate::pointcloud::{load_point_cloud, save_point_cloud};
use crate::render::render;

/// Ring indices used as evidence for 1- and 2-view reconstruction.
pub fn evidence_indices(views: usize, ring_len: usize) -> Vec<usize> {
    match views {
        0 => vec![],
        1 => vec![0],
        k => (0..k).map(|i| i * ring_len / k).collect(),
    }
}

pub fn evidence_views(scene: &SceneData, views: usize) -> Result<Vec<ViewEvidence>> {
    if views == 0 || views > scene.ring.len() {
        return Err(Error::InsufficientViews {
            needed: views.max(1),
            got: scene.ring.len(),
        });
    }
    Ok(evidence_indices(views, scene.ring.len())
        .into_iter()
        .map(|i| scene.ring[i].clone())
        .collect())
}

/// Mean PSNR of `set` rendered at each evidence camera against that view.
pub fn input_view_psnr(set: &GaussianSet, views: &[ViewEvidence], background: [f64; 3]) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        total += psnr(&render(set, &v.camera, background).image, &v.image, None)?;
    }
    Ok(total / views.len().max(1) as f64)
}

/// Fits every scene from its first `views` ring views. Scene `i` uses RNG
/// stream `i` of `seed`.
pub fn fit_scenes(scenes: &[SceneData], views: usize, config: &FitConfig, seed: u64) -> Result<Vec<(GaussianSet, FitStats)>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let v: Vec<ViewEvidence> = s.ring.iter().take(views).cloned().collect();
            fit_scene(&v, config, &mut rng_stream(seed, i as u64))
        })
        .collect()
}

/// Reconstructs a scene from `views` ring views with the full refinement loop.
pub fn reconstruct_scene(
    model: &impl X0ModelVjp,
    schedule: &NoiseSchedule,
    scene: &SceneData,
    views: usize,
    config: &PipelineConfig,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<RefinementResult> {
    let evidence = evidence_views(scene, views)?;
    let polisher = config.refine.polisher.build();
    reconstruct_with_refinement(
        model,
        schedule,
        &evidence,
        sampler,
        guidance,
        &config.fit,
        &config.refine,
        &config.dataset.rig,
        polisher.as_ref(),
        config.denoiser.point_count,
    )
}

/// Writes a prediction in the dataset layout: held-out renders, the set in
/// the normalized frame and its point cloud in the scene frame (`points.bin`).
pub fn write_prediction(dir: &Path, set: &GaussianSet, scene: &SceneData, config: &PipelineConfig) -> Result<()> {
    for sub in ["views", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, v) in scene.held_out.iter().enumerate() {
        let img = render(set, &v.camera, config.eval.background).image;
        save_png(dir.join("views").join(format!("held_{i:02}.png")), &img)?;
        save_mask_png(
            dir.join("masks").join(format!("held_{i:02}.png")),
            img.width,
            img.height,
            &img.alpha_mask(0.5),
        )?;
    }
    save_gaussians(dir.join("gaussians.bin"), set)?;
    let inverse = scene.transform.inverse();
    let cloud = reconstruction_cloud(set, config.eval.opacity_threshold).map(|p| inverse.apply_point(p));
    save_point_cloud(dir.join("points.bin"), &cloud)?;
    let t = dir.join("transform.txt");
    fs::write(&t, scene.transform.to_text()).map_err(|e| Error::io(&t, e))
}

fn held_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let views = dir.join("views");
    let mut out: Vec<PathBuf> = fs::read_dir(&views)
        .map_err(|e| Error::io(&views, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("held_")))
        .collect();
    out.sort();
    Ok(out)
}

/// Compares a prediction directory against a dataset directory file by file:
/// held-out PNGs for PSNR/SSIM, point clouds for Chamfer/F-score. The
/// prediction cloud is `points.bin`, or `gt_points.bin` if absent.
pub fn evaluate_dirs(pred_root: &Path, gt_root: &Path, config: &PipelineConfig, seeds: Vec<u64>) -> Result<EvalReport> {
    let mut scenes = Vec::new();
    for gt_dir in list_scenes(gt_root)? {
        let id = gt_dir.file_name().unwrap().to_string_lossy().into_owned();
        let pred_dir = pred_root.join("scenes").join(&id);
        let gt_imgs = held_images(&gt_dir)?;
        if gt_imgs.is_empty() {
            return Err(Error::InsufficientViews { needed: 1, got: 0 });
        }
        let (mut p, mut s) = (0.0, 0.0);
        for g in &gt_imgs {
            let a = load_png(pred_dir.join("views").join(g.file_name().unwrap()))?;
            let b = load_png(g)?;
            p += psnr(&a, &b, None)?;
            s += ssim(&a, &b)?;
        }
        let pred_points = if pred_dir.join("points.bin").exists() {
            pred_dir.join("points.bin")
        } else {
            pred_dir.join("gt_points.bin")
        };
        let (chamfer, fscore) = crate::pipeline::eval::cloud_metrics(
            &load_point_cloud(pred_points)?,
            &load_point_cloud(gt_dir.join("gt_points.bin"))?,
            config.eval.tau,
        )?;
        let n = gt_imgs.len() as f64;
        scenes.push((
            id,
            SceneMetrics {
                psnr: p / n,
                ssim: s / n,
                chamfer,
                fscore,
            },
        ));
    }
    EvalReport::new(scenes, fingerprint(&config.to_toml()), seeds)
}
