//! Per-scene and aggregate evaluation of reconstructions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussians::{extract_point_cloud, GaussianSet};
use crate::guidance::ViewEvidence;
use crate::pipeline::dataset::SceneData;
use crate::pipeline::metrics::{bbox_normalize, chamfer, fscore, psnr, ssim};
use crate::pointcloud::PointCloud;
use crate::render::render;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tau: f64,
    /// Ellipsoids below this opacity are left out of the point cloud.
    pub opacity_threshold: f64,
    pub background: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            opacity_threshold: 0.1,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub chamfer: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<(String, SceneMetrics)>,
    pub aggregate: SceneMetrics,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

/// Hex SHA-256 of a resolved configuration text.
pub fn fingerprint(config_text: &str) -> String {
    Sha256::digest(config_text.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Active ellipsoid centres above the opacity threshold, or every active
/// centre if none pass.
pub fn reconstruction_cloud(set: &GaussianSet, opacity_threshold: f64) -> PointCloud {
    let cloud = extract_point_cloud(set, opacity_threshold);
    if cloud.is_empty() {
        extract_point_cloud(set, 0.0)
    } else {
        cloud
    }
}

/// Mean PSNR and SSIM of `set` rendered against each view.
pub fn view_metrics(set: &GaussianSet, views: &[ViewEvidence], background: [f64; 3]) -> Result<(f64, f64)> {
    if views.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, got: 0 });
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for v in views {
        let img = render(set, &v.camera, background).image;
        p += psnr(&img, &v.image, None)?;
        s += ssim(&img, &v.image)?;
    }
    Ok((p / views.len() as f64, s / views.len() as f64))
}

/// Chamfer and F-score of a point cloud against ground truth after bbox
/// normalization.
pub fn cloud_metrics(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<(f64, f64)> {
    let (p, g) = bbox_normalize(pred, gt)?;
    Ok((chamfer(&p, &g)?, fscore(&p, &g, tau)?))
}

/// Image metrics on the held-out views and geometry metrics against the
/// scene-frame ground-truth surface. `set` is in the normalized frame.
pub fn evaluate_scene(set: &GaussianSet, scene: &SceneData, config: &EvalConfig) -> Result<SceneMetrics> {
    let (psnr, ssim) = view_metrics(set, &scene.held_out, config.background)?;
    let inverse = scene.transform.inverse();
    let cloud = reconstruction_cloud(set, config.opacity_threshold).map(|p| inverse.apply_point(p));
    let (chamfer, fscore) = cloud_metrics(&cloud, &scene.gt_points, config.tau)?;
    Ok(SceneMetrics {
        psnr,
        ssim,
        chamfer,
        fscore,
    })
}

impl EvalReport {
    pub fn new(scenes: Vec<(String, SceneMetrics)>, fingerprint: String, seeds: Vec<u64>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::EmptySet);
        }
        let n = scenes.len() as f64;
        let mean = |f: fn(&SceneMetrics) -> f64| scenes.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let aggregate = SceneMetrics {
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            chamfer: mean(|m| m.chamfer),
            fscore: mean(|m| m.fscore),
        };
        Ok(Self {
            scenes,
            aggregate,
            fingerprint,
            seeds,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>9} {:>7} {:>9} {:>8}\n", "scene", "psnr", "ssim", "chamfer", "fscore");
        let row = |s: &mut String, id: &str, m: &SceneMetrics| {
            let _ = writeln!(
                s,
                "{id:<12} {:>9.3} {:>7.4} {:>9.5} {:>8.4}",
                m.psnr, m.ssim, m.chamfer, m.fscore
            );
        };
        for (id, m) in &self.scenes {
            row(&mut s, id, m);
        }
        row(&mut s, "mean", &self.aggregate);
        s
    }

    /// One `key=value` line per scene plus an aggregate line.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, id: &str, m: &SceneMetrics| {
            let _ = writeln!(
                s,
                "scene={id} psnr={} ssim={} chamfer={} fscore={}",
                m.psnr, m.ssim, m.chamfer, m.fscore
            );
        };
        for (id, m) in &self.scenes {
            line(&mut s, id, m);
        }
        line(&mut s, "mean", &self.aggregate);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "fingerprint={} seeds={}", self.fingerprint, seeds.join(","));
        s
    }
}
