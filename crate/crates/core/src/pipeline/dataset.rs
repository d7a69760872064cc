//! Toy-corpus generation and on-disk scene layout.
//!
//! ```text
//! <root>/scenes/<id>/views/{ring,held}_XX.png
//!                   /masks/{ring,held}_XX.png
//!                   /cameras/{ring,held}_XX.txt
//!                   /gt_points.bin      surface samples, scene frame
//!                   /gaussians.bin      analytic set, normalized frame
//!                   /transform.txt      scene frame -> normalized frame
//!                   /spec.toml
//! ```
//!
//! Cameras and views live in the normalized frame.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{load_camera, save_camera, Camera};
use crate::diffusion::rng_stream;
use crate::error::{Error, Result};
use crate::gaussians::{load_gaussians, save_gaussians, GaussianSet};
use crate::guidance::ViewEvidence;
use crate::image::{load_mask_png, load_png, save_mask_png, save_png, ImageBuffer};
use crate::pipeline::scene::{random_scene, surface_gaussians, RigConfig, SceneSpec, Similarity};
use crate::pointcloud::{load_point_cloud, save_point_cloud, PointCloud};
use crate::render::render;

pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub points_per_scene: usize,
    pub gt_points: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub rig: RigConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 50,
            points_per_scene: 256,
            gt_points: 4096,
            seed: 0,
            background: [0.0; 3],
            rig: RigConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub id: String,
    pub spec: Option<SceneSpec>,
    /// Ground-truth set in the normalized frame.
    pub gaussians: GaussianSet,
    pub transform: Similarity,
    pub ring: Vec<ViewEvidence>,
    pub held_out: Vec<ViewEvidence>,
    /// Surface samples in the scene frame.
    pub gt_points: PointCloud,
}

impl SceneData {
    /// Ground-truth surface samples in the normalized frame.
    pub fn gt_points_normalized(&self) -> PointCloud {
        self.gt_points.map(|p| self.transform.apply_point(p))
    }
}

pub fn scene_id(index: usize) -> String {
    format!("{index:04}")
}

/// Renders `set` from each camera; the mask is `alpha > 0.5`.
pub fn render_views(set: &GaussianSet, cameras: &[Camera], background: [f64; 3], weight: f64) -> Result<Vec<ViewEvidence>> {
    cameras
        .par_iter()
        .map(|cam| {
            let img = render(set, cam, background).image;
            let mask = img.alpha_mask(MASK_THRESHOLD);
            ViewEvidence::new(img.with_mask(mask), cam.clone(), weight)
        })
        .collect()
}

/// Builds scene `index` of the corpus from its own RNG stream.
pub fn synthesize_scene(index: usize, config: &DatasetConfig) -> Result<SceneData> {
    let mut rng = rng_stream(config.seed, index as u64);
    let spec = random_scene(index as u64, &mut rng);
    scene_from_spec(scene_id(index), spec, config, &mut rng)
}

pub fn scene_from_spec(id: String, spec: SceneSpec, config: &DatasetConfig, rng: &mut impl rand::Rng) -> Result<SceneData> {
    let raw = surface_gaussians(&spec, config.points_per_scene, rng)?;
    let transform = Similarity::normalizing(&raw)?;
    let gaussians = transform.apply_set(&raw);
    let gt_points = spec.surface_points(config.gt_points, rng)?;
    let ring = render_views(&gaussians, &config.rig.ring(config.rig.ring_views, 0.0)?, config.background, 1.0)?;
    let held_out = render_views(&gaussians, &config.rig.held_out()?, config.background, 1.0)?;
    Ok(SceneData {
        id,
        spec: Some(spec),
        gaussians,
        transform,
        ring,
        held_out,
        gt_points,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_views(dir: &Path, prefix: &str, views: &[ViewEvidence]) -> Result<()> {
    for (i, v) in views.iter().enumerate() {
        let name = format!("{prefix}_{i:02}");
        save_png(dir.join("views").join(format!("{name}.png")), &v.image)?;
        save_mask_png(
            dir.join("masks").join(format!("{name}.png")),
            v.image.width,
            v.image.height,
            v.mask(),
        )?;
        save_camera(dir.join("cameras").join(format!("{name}.txt")), &v.camera)?;
    }
    Ok(())
}

pub fn save_scene(dir: &Path, scene: &SceneData) -> Result<()> {
    for sub in ["views", "masks", "cameras"] {
        create_dir(&dir.join(sub))?;
    }
    write_views(dir, "ring", &scene.ring)?;
    write_views(dir, "held", &scene.held_out)?;
    save_point_cloud(dir.join("gt_points.bin"), &scene.gt_points)?;
    save_gaussians(dir.join("gaussians.bin"), &scene.gaussians)?;
    let t = dir.join("transform.txt");
    fs::write(&t, scene.transform.to_text()).map_err(|e| Error::io(&t, e))?;
    if let Some(spec) = &scene.spec {
        let p = dir.join("spec.toml");
        let text = toml::to_string(spec).map_err(|e| Error::format(&p, e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Loads one posed view; the mask file is required.
pub fn load_view(image: &Path, mask: &Path, camera: &Path, weight: f64) -> Result<ViewEvidence> {
    let img = load_png(image)?;
    let (w, h, m) = load_mask_png(mask)?;
    if (w, h) != (img.width, img.height) {
        return Err(Error::format(mask, format!("mask is {w}x{h}, image is {}x{}", img.width, img.height)));
    }
    let mut img: ImageBuffer = img.with_mask(m);
    img.alpha = img.mask.as_ref().unwrap().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    ViewEvidence::new(img, load_camera(camera)?, weight)
}

fn read_views(dir: &Path, prefix: &str) -> Result<Vec<ViewEvidence>> {
    let mut out = Vec::new();
    for i in 0.. {
        let name = format!("{prefix}_{i:02}");
        let image = dir.join("views").join(format!("{name}.png"));
        if !image.exists() {
            break;
        }
        out.push(load_view(
            &image,
            &dir.join("masks").join(format!("{name}.png")),
            &dir.join("cameras").join(format!("{name}.txt")),
            1.0,
        )?);
    }
    Ok(out)
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let t = dir.join("transform.txt");
    let text = fs::read_to_string(&t).map_err(|e| Error::io(&t, e))?;
    let transform = Similarity::from_text(&text).map_err(|m| Error::format(&t, m))?;
    let spec_path = dir.join("spec.toml");
    let spec = if spec_path.exists() {
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        Some(toml::from_str(&text).map_err(|e| Error::format(&spec_path, e.to_string()))?)
    } else {
        None
    };
    Ok(SceneData {
        id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        spec,
        gaussians: load_gaussians(dir.join("gaussians.bin"))?,
        transform,
        ring: read_views(dir, "ring")?,
        held_out: read_views(dir, "held")?,
        gt_points: load_point_cloud(dir.join("gt_points.bin"))?,
    })
}

pub fn scenes_dir(root: &Path) -> PathBuf {
    root.join("scenes")
}

/// Writes `config.num_scenes` scenes under `<root>/scenes`.
pub fn generate_dataset(root: &Path, config: &DatasetConfig) -> Result<Vec<SceneData>> {
    let scenes: Vec<SceneData> = (0..config.num_scenes)
        .into_par_iter()
        .map(|i| synthesize_scene(i, config))
        .collect::<Result<_>>()?;
    for s in &scenes {
        save_scene(&scenes_dir(root).join(&s.id), s)?;
    }
    Ok(scenes)
}

/// Scene directories under `<root>/scenes`, sorted by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = scenes_dir(root);
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Ground-truth sets of every scene, in name order.
pub fn load_gaussian_sets(root: &Path) -> Result<Vec<GaussianSet>> {
    list_scenes(root)?
        .iter()
        .map(|d| load_gaussians(d.join("gaussians.bin")))
        .collect()
}
