//! Tile-based splatting rasterizer with an analytic backward pass.
//!
//! Forward: every active ellipsoid is projected with the EWA approximation,
//! sorted front-to-back by camera depth (ties broken by source index), binned
//! into 16×16 tiles, and alpha-blended per pixel:
//!
//! ```text
//! C(p) = Σ_i c_i σ_i Π_{j<i} (1 - σ_j) + T_final · background
//! σ_i  = min(0.99, α_i · exp(-½ (p - μ_i)ᵀ Σ_i⁻¹ (p - μ_i)))
//! ```
//!
//! Terms with σ below 1/255 are skipped and a pixel stops once its
//! transmittance drops under 1e-4. Pixel `(x, y)` is sampled at `(x + ½, y + ½)`.
//!
//! The forward pass keeps, for every pixel, the ordered list of blended terms
//! (splat, σ, transmittance before the term); [`render_backward`] replays them
//! back-to-front and chains the result through projection and activation to all
//! sixteen raw channels.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{
    activate_row, activate_scale, activate_scale_grad, logistic, rotation6_backward, rotation6_decode,
    ActivatedGaussian, GaussianSet, COLOR, FEATURE_DIM, LOG_SCALE, OPACITY, ROTATION,
};
use crate::image::ImageBuffer;

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space low-pass added to every projected covariance (pixels²).
pub const COV2D_DILATION: f64 = 0.3;
pub const SIGMA_MAX: f64 = 0.99;
pub const SIGMA_SKIP: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    /// Symmetric 2×2 as `(xx, xy, yy)`, dilation included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d` as `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source_index: usize,
    /// Screen radius used for tile binning.
    pub radius: f64,
}

impl ProjectedGaussian {
    #[inline]
    fn power_at(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [a, b, c] = self.conic;
        (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy), dx, dy)
    }
}

/// Projects one activated ellipsoid; `None` when it is behind the near plane or
/// its 3σ footprint misses the viewport.
pub fn project(g: &ActivatedGaussian, cam: &Camera, source_index: usize) -> Option<ProjectedGaussian> {
    let t = cam.to_camera(&g.position);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let mean2d = cam.project_point(&t);
    let jac = projection_jacobian(cam, &t);
    let w = cam.rotation;
    let cov = jac * w * g.cov3d * w.transpose() * jac.transpose();
    let cov2d = [
        cov[(0, 0)] + COV2D_DILATION,
        0.5 * (cov[(0, 1)] + cov[(1, 0)]),
        cov[(1, 1)] + COV2D_DILATION,
    ];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let mid = 0.5 * (cov2d[0] + cov2d[2]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let sigma_px = lambda_max.sqrt();
    let extent = 3.0 * sigma_px;
    if mean2d[0] + extent < 0.0
        || mean2d[0] - extent > cam.width as f64
        || mean2d[1] + extent < 0.0
        || mean2d[1] - extent > cam.height as f64
    {
        return None;
    }
    // Beyond 3σ a splat can still reach the skip threshold when α > 255·e^{-4.5};
    // widen the binning radius so every term the blend would keep is binned.
    let reach = if g.opacity * 255.0 > 1.0 {
        (2.0 * (255.0 * g.opacity).ln()).sqrt().max(3.0)
    } else {
        3.0
    };
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        depth: t.z,
        color: g.color,
        opacity: g.opacity,
        source_index,
        radius: reach * sigma_px,
    })
}

fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Projects all active, non-degenerate ellipsoids and sorts them front to back.
pub fn project_set(set: &GaussianSet, cam: &Camera) -> Vec<ProjectedGaussian> {
    let mut projected: Vec<ProjectedGaussian> = (0..set.len())
        .filter(|&i| set.is_active(i))
        .filter_map(|i| {
            let g = activate_row(set.row(i)).ok()?;
            project(&g, cam, i)
        })
        .collect();
    projected.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.source_index.cmp(&b.source_index))
    });
    projected
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendRecord {
    /// Index into the tile's splat list.
    pub local: u32,
    pub sigma: f64,
    pub transmittance_before: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    pub background: [f64; 3],
    /// Depth-sorted projected splats.
    pub projected: Vec<ProjectedGaussian>,
    /// Per tile (row-major), indices into `projected` in blend order.
    pub tile_splats: Vec<Vec<u32>>,
    /// Per pixel, the `[start, end)` range of its records in `records`.
    pub pixel_ranges: Vec<(u32, u32)>,
    pub records: Vec<BlendRecord>,
    tiles_x: usize,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn pixel_records(&self, x: usize, y: usize) -> &[BlendRecord] {
        let (s, e) = self.pixel_ranges[y * self.image.width + x];
        &self.records[s as usize..e as usize]
    }

    /// Source ellipsoid index of a record belonging to pixel `(x, y)`.
    pub fn record_source(&self, x: usize, y: usize, rec: &BlendRecord) -> usize {
        let tile = (y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE;
        self.projected[self.tile_splats[tile][rec.local as usize] as usize].source_index
    }
}

fn bin_tiles(projected: &[ProjectedGaussian], width: usize, height: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in projected.iter().enumerate() {
        if p.opacity * 255.0 <= 1.0 {
            continue;
        }
        // pixel centers covered by [mean - r, mean + r]
        let x0 = ((p.mean2d[0] - p.radius - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((p.mean2d[1] - p.radius - 0.5).ceil().max(0.0)) as usize;
        let x1 = (p.mean2d[0] + p.radius - 0.5).floor();
        let y1 = (p.mean2d[1] + p.radius - 0.5).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(width - 1);
        let y1 = (y1 as usize).min(height - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (tiles_x, tiles)
}

struct TileResult {
    /// (pixel index, rgb, alpha, records)
    pixels: Vec<(usize, [f64; 3], f64, Vec<BlendRecord>)>,
}

fn render_tile(
    tile: usize,
    tiles_x: usize,
    splats: &[u32],
    projected: &[ProjectedGaussian],
    width: usize,
    height: usize,
    background: [f64; 3],
) -> TileResult {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let mut pixels = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
    for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
        for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let mut records = Vec::new();
            for (local, &k) in splats.iter().enumerate() {
                let p = &projected[k as usize];
                let (power, _, _) = p.power_at(px, py);
                let raw = p.opacity * power.exp();
                let clamped = raw > SIGMA_MAX;
                let sigma = if clamped { SIGMA_MAX } else { raw };
                if sigma < SIGMA_SKIP {
                    continue;
                }
                for c in 0..3 {
                    rgb[c] += p.color[c] * sigma * t;
                }
                records.push(BlendRecord {
                    local: local as u32,
                    sigma,
                    transmittance_before: t,
                    clamped,
                });
                t *= 1.0 - sigma;
                if t < TRANSMITTANCE_STOP {
                    break;
                }
            }
            for c in 0..3 {
                rgb[c] += t * background[c];
            }
            pixels.push((y * width + x, rgb, 1.0 - t, records));
        }
    }
    TileResult { pixels }
}

/// Renders active ellipsoids of `set` through `cam` over a constant background.
pub fn render(set: &GaussianSet, cam: &Camera, background: [f64; 3]) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let projected = project_set(set, cam);
    let (tiles_x, tile_splats) = bin_tiles(&projected, w, h);
    let results: Vec<TileResult> = tile_splats
        .par_iter()
        .enumerate()
        .map(|(tile, splats)| render_tile(tile, tiles_x, splats, &projected, w, h, background))
        .collect();

    let mut image = ImageBuffer::new(w, h);
    let mut pixel_ranges = vec![(0u32, 0u32); w * h];
    let total: usize = results
        .iter()
        .flat_map(|r| r.pixels.iter())
        .map(|p| p.3.len())
        .sum();
    let mut records = Vec::with_capacity(total);
    for result in results {
        for (idx, rgb, alpha, recs) in result.pixels {
            image.rgb[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
            image.alpha[idx] = alpha;
            let start = records.len() as u32;
            records.extend(recs);
            pixel_ranges[idx] = (start, records.len() as u32);
        }
    }
    RenderOutput {
        image,
        background,
        projected,
        tile_splats,
        pixel_ranges,
        records,
        tiles_x,
    }
}

/// Direct per-pixel evaluation over all projected splats: no tiles, no σ skip,
/// no early termination. Reference for [`render`].
pub fn render_brute_force(set: &GaussianSet, cam: &Camera, background: [f64; 3]) -> ImageBuffer {
    let projected = project_set(set, cam);
    let mut image = ImageBuffer::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let idx = y * cam.width + x;
            for p in &projected {
                let (power, _, _) = p.power_at(px, py);
                let sigma = (p.opacity * power.exp()).min(SIGMA_MAX);
                for c in 0..3 {
                    image.rgb[idx * 3 + c] += p.color[c] * sigma * t;
                }
                t *= 1.0 - sigma;
            }
            for c in 0..3 {
                image.rgb[idx * 3 + c] += t * background[c];
            }
            image.alpha[idx] = 1.0 - t;
        }
    }
    image
}

/// Gradients of a scalar loss with respect to the raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    /// `N×16`, zero for masked or culled ellipsoids.
    pub features: Vec<f64>,
    /// Screen-space gradient of each ellipsoid's projected mean.
    pub mean2d: Vec<[f64; 2]>,
    /// Whether the ellipsoid survived projection.
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Backpropagates `grad_rgb` (`H×W×3`) and optionally `grad_alpha` (`H×W`)
/// through the blend recorded in `out`.
pub fn render_backward(
    out: &RenderOutput,
    set: &GaussianSet,
    cam: &Camera,
    grad_rgb: &[f64],
    grad_alpha: Option<&[f64]>,
) -> Result<RenderGradients> {
    let (w, h) = (out.width(), out.height());
    if grad_rgb.len() != w * h * 3 {
        return Err(Error::ShapeMismatch(format!(
            "grad image has {} values, expected {}",
            grad_rgb.len(),
            w * h * 3
        )));
    }
    if let Some(ga) = grad_alpha {
        if ga.len() != w * h {
            return Err(Error::ShapeMismatch(format!(
                "alpha gradient has {} values, expected {}",
                ga.len(),
                w * h
            )));
        }
    }
    if cam.width != w || cam.height != h {
        return Err(Error::ShapeMismatch("camera does not match render size".into()));
    }

    let tiles_x = out.tiles_x;
    let per_tile: Vec<Vec<SplatGrad>> = out
        .tile_splats
        .par_iter()
        .enumerate()
        .map(|(tile, splats)| {
            let mut acc = vec![SplatGrad::default(); splats.len()];
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let idx = y * w + x;
                    let g = [grad_rgb[idx * 3], grad_rgb[idx * 3 + 1], grad_rgb[idx * 3 + 2]];
                    let ga = grad_alpha.map_or(0.0, |a| a[idx]);
                    if g == [0.0; 3] && ga == 0.0 {
                        continue;
                    }
                    let recs = out.pixel_records(x, y);
                    let t_final = 1.0 - out.image.alpha[idx];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // contribution of everything behind the current term
                    let mut behind = [
                        t_final * out.background[0],
                        t_final * out.background[1],
                        t_final * out.background[2],
                    ];
                    for rec in recs.iter().rev() {
                        let splat = &out.projected[splats[rec.local as usize] as usize];
                        let (sigma, t_i) = (rec.sigma, rec.transmittance_before);
                        let a = &mut acc[rec.local as usize];
                        let one_minus = 1.0 - sigma;
                        let mut g_sigma = 0.0;
                        for c in 0..3 {
                            a.color[c] += g[c] * sigma * t_i;
                            g_sigma += g[c] * (splat.color[c] * t_i - behind[c] / one_minus);
                            behind[c] += splat.color[c] * sigma * t_i;
                        }
                        g_sigma += ga * t_final / one_minus;
                        if rec.clamped {
                            continue;
                        }
                        let (power, dx, dy) = splat.power_at(px, py);
                        let gauss = power.exp();
                        a.opacity += g_sigma * gauss;
                        let g_power = g_sigma * sigma;
                        let [ca, cb, cc] = splat.conic;
                        a.mean[0] += g_power * (ca * dx + cb * dy);
                        a.mean[1] += g_power * (cb * dx + cc * dy);
                        a.conic[0] += g_power * (-0.5 * dx * dx);
                        a.conic[1] += g_power * (-dx * dy);
                        a.conic[2] += g_power * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); out.projected.len()];
    for (splats, acc) in out.tile_splats.iter().zip(&per_tile) {
        for (&k, g) in splats.iter().zip(acc) {
            splat_grads[k as usize].add(g);
        }
    }

    let n = set.len();
    let mut grads = RenderGradients {
        features: vec![0.0; n * FEATURE_DIM],
        mean2d: vec![[0.0; 2]; n],
        visible: vec![false; n],
    };
    let rows: Vec<(usize, [f64; FEATURE_DIM])> = out
        .projected
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(p, g)| (p.source_index, splat_to_features(set.row(p.source_index), p, g, cam)))
        .collect();
    for ((src, row), (p, g)) in rows.into_iter().zip(out.projected.iter().zip(&splat_grads)) {
        debug_assert_eq!(src, p.source_index);
        grads.features[src * FEATURE_DIM..(src + 1) * FEATURE_DIM].copy_from_slice(&row);
        grads.mean2d[src] = g.mean;
        grads.visible[src] = true;
    }
    Ok(grads)
}

/// Chains splat-level gradients through EWA projection and activations.
fn splat_to_features(row: &[f64], p: &ProjectedGaussian, g: &SplatGrad, cam: &Camera) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];

    for (k, c) in COLOR.enumerate() {
        if (0.0..=1.0).contains(&row[c]) {
            out[c] = g.color[k];
        }
    }
    let alpha = logistic(row[OPACITY]);
    out[OPACITY] = g.opacity * alpha * (1.0 - alpha);

    // conic = cov2d⁻¹  ⇒  dL/dcov2d = -Q · dL/dQ · Q with the off-diagonal split evenly
    let q = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_q = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov2d = -(q * g_q * q);

    let decode = rotation6_decode(&row[ROTATION]).expect("projected splats have valid rotations");
    let rot = decode.matrix;
    let s = Vector3::new(
        activate_scale(row[3]),
        activate_scale(row[4]),
        activate_scale(row[5]),
    );
    let d = Matrix3::from_diagonal(&s.component_mul(&s));
    let sigma3 = rot * d * rot.transpose();
    let w = cam.rotation;
    let mean = Vector3::new(row[0], row[1], row[2]);
    let t = cam.to_camera(&mean);
    let jac = projection_jacobian(cam, &t);
    let m = w * sigma3 * w.transpose();

    // cov2d = J M Jᵀ (+ dilation)
    let g_m = jac.transpose() * g_cov2d * jac;
    let g_jac: Matrix2x3<f64> = 2.0 * g_cov2d * jac * m;
    let g_sigma3 = w.transpose() * g_m * w;
    let g_rot = 2.0 * g_sigma3 * rot * d;
    let rs = rot.transpose() * g_sigma3 * rot;
    for k in 0..3 {
        let g_s = 2.0 * s[k] * rs[(k, k)];
        out[LOG_SCALE.start + k] = g_s * activate_scale_grad(row[LOG_SCALE.start + k]);
    }
    let g_r6 = rotation6_backward(&decode, &g_rot);
    out[ROTATION].copy_from_slice(&g_r6);

    // camera-space mean: through the projected center and through J
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let gm = Vector2::new(g.mean[0], g.mean[1]);
    let mut g_t = Vector3::new(
        gm.x * cam.fx * iz,
        gm.y * cam.fy * iz,
        -gm.x * cam.fx * t.x * iz2 - gm.y * cam.fy * t.y * iz2,
    );
    g_t.x += g_jac[(0, 2)] * (-cam.fx * iz2);
    g_t.y += g_jac[(1, 2)] * (-cam.fy * iz2);
    g_t.z += g_jac[(0, 0)] * (-cam.fx * iz2)
        + g_jac[(1, 1)] * (-cam.fy * iz2)
        + g_jac[(0, 2)] * (2.0 * cam.fx * t.x * iz2 * iz)
        + g_jac[(1, 2)] * (2.0 * cam.fy * t.y * iz2 * iz);
    let g_mean = w.transpose() * g_t;
    out[0] = g_mean.x;
    out[1] = g_mean.y;
    out[2] = g_mean.z;
    out
}
