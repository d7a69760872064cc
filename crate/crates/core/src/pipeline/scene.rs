//! Procedural scenes built from analytic primitives and their surface-aligned
//! Gaussian sets.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{logit, GaussianSet, FEATURE_DIM};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub color: [f64; 3],
    /// Standard deviation of per-ellipsoid color jitter.
    pub color_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        appearance: Appearance,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        /// Axis-angle rotation.
        rotation: [f64; 3],
        appearance: Appearance,
    },
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
        appearance: Appearance,
    },
    Composite {
        parts: Vec<Primitive>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

/// A surface point with its outward normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub appearance: Appearance,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Primitive {
    fn leaves<'a>(&'a self, out: &mut Vec<&'a Primitive>) {
        match self {
            Primitive::Composite { parts } => parts.iter().for_each(|p| p.leaves(out)),
            leaf => out.push(leaf),
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Box { half_extents: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Capsule { a, b, radius, .. } => {
                2.0 * PI * radius * (v3(*b) - v3(*a)).norm() + 4.0 * PI * radius * radius
            }
            Primitive::Composite { parts } => parts.iter().map(Primitive::area).sum(),
        }
    }

    /// Area-uniform surface sample of a leaf primitive.
    fn sample_leaf(&self, rng: &mut impl Rng) -> SurfaceSample {
        match *self {
            Primitive::Sphere {
                center,
                radius,
                appearance,
            } => {
                let n = random_unit(rng);
                SurfaceSample {
                    point: v3(center) + radius * n,
                    normal: n,
                    appearance,
                }
            }
            Primitive::Box {
                center,
                half_extents: h,
                rotation,
                appearance,
            } => {
                let rot = Rotation3::new(v3(rotation));
                let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = faces.iter().sum();
                let mut u = rng.random_range(0.0..total);
                let mut axis = 2;
                for (k, &f) in faces.iter().enumerate() {
                    if u < f {
                        axis = k;
                        break;
                    }
                    u -= f;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut local = Vector3::zeros();
                for k in 0..3 {
                    local[k] = if k == axis { sign * h[k] } else { rng.random_range(-h[k]..h[k]) };
                }
                let mut normal = Vector3::zeros();
                normal[axis] = sign;
                SurfaceSample {
                    point: v3(center) + rot * local,
                    normal: rot * normal,
                    appearance,
                }
            }
            Primitive::Capsule {
                a,
                b,
                radius,
                appearance,
            } => {
                let (a, b) = (v3(a), v3(b));
                let axis = b - a;
                let len = axis.norm();
                let dir = if len > 0.0 { axis / len } else { Vector3::y() };
                let side = 2.0 * PI * radius * len;
                let caps = 4.0 * PI * radius * radius;
                if rng.random_range(0.0..side + caps) < side {
                    let (u, w) = orthonormal_pair(&dir);
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let n = theta.cos() * u + theta.sin() * w;
                    SurfaceSample {
                        point: a + rng.random_range(0.0..1.0) * axis + radius * n,
                        normal: n,
                        appearance,
                    }
                } else {
                    let n = random_unit(rng);
                    let base = if n.dot(&dir) >= 0.0 { b } else { a };
                    SurfaceSample {
                        point: base + radius * n,
                        normal: n,
                        appearance,
                    }
                }
            }
            Primitive::Composite { .. } => unreachable!("composites are flattened before sampling"),
        }
    }
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn orthonormal_pair(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

impl SceneSpec {
    fn leaves(&self) -> Vec<&Primitive> {
        let mut out = Vec::new();
        self.primitives.iter().for_each(|p| p.leaves(&mut out));
        out
    }

    pub fn area(&self) -> f64 {
        self.primitives.iter().map(Primitive::area).sum()
    }

    /// `count` area-uniform surface samples; leaf shares use largest remainders
    /// so the split is deterministic.
    pub fn sample_surface(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<SurfaceSample>> {
        let leaves = self.leaves();
        let total = self.area();
        if leaves.is_empty() || !(total > 0.0) {
            return Err(Error::EmptySet);
        }
        let exact: Vec<f64> = leaves.iter().map(|l| l.area() / total * count as f64).collect();
        let mut shares: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..leaves.len()).collect();
        order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())).then(i.cmp(&j)));
        let missing = count - shares.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            shares[i] += 1;
        }
        let mut out = Vec::with_capacity(count);
        for (leaf, &k) in leaves.iter().zip(&shares) {
            for _ in 0..k {
                out.push(leaf.sample_leaf(rng));
            }
        }
        Ok(out)
    }

    /// Surface point cloud in the spec's own frame.
    pub fn surface_points(&self, count: usize, rng: &mut impl Rng) -> Result<PointCloud> {
        Ok(PointCloud::new(
            self.sample_surface(count, rng)?
                .iter()
                .map(|s| [s.point.x, s.point.y, s.point.z])
                .collect(),
        ))
    }
}

/// Ratio of tangent standard deviation to mean sample spacing.
pub const TANGENT_SCALE: f64 = 0.6;
/// Ratio of normal-axis to tangent standard deviation.
pub const NORMAL_RATIO: f64 = 0.2;
pub const SURFACE_OPACITY: f64 = 0.9;

/// Surface-aligned Gaussians: tangent-plane rotation, thin along the normal.
pub fn surface_gaussians(spec: &SceneSpec, count: usize, rng: &mut impl Rng) -> Result<GaussianSet> {
    let samples = spec.sample_surface(count, rng)?;
    let spacing = (spec.area() / count as f64).sqrt();
    let tangent = TANGENT_SCALE * spacing;
    let normal = NORMAL_RATIO * tangent;
    let mut features = Vec::with_capacity(count * FEATURE_DIM);
    for s in &samples {
        let (u, w) = orthonormal_pair(&s.normal);
        let theta = rng.random_range(0.0..2.0 * PI);
        let t1 = theta.cos() * u + theta.sin() * w;
        let t2 = s.normal.cross(&t1);
        features.extend(s.point.iter());
        features.extend([tangent.ln(), tangent.ln(), normal.ln()]);
        features.extend(t1.iter());
        features.extend(t2.iter());
        features.push(logit(SURFACE_OPACITY));
        for c in 0..3 {
            let z: f64 = StandardNormal.sample(rng);
            features.push((s.appearance.color[c] + s.appearance.color_noise * z).clamp(0.0, 1.0));
        }
    }
    GaussianSet::from_features(features)
}

/// `x ↦ scale·x + translation`, mapping a scene to zero-mean positions with a
/// fixed position RMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub translation: [f64; 3],
}

pub const TARGET_RMS: f64 = 0.5;

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translation: [0.0; 3],
        }
    }

    /// Normalizing transform of the active rows of `set`.
    pub fn normalizing(set: &GaussianSet) -> Result<Self> {
        let rows: Vec<usize> = (0..set.len()).filter(|&i| set.is_active(i)).collect();
        if rows.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut mean = [0.0; 3];
        for &i in &rows {
            for k in 0..3 {
                mean[k] += set.row(i)[k] / rows.len() as f64;
            }
        }
        let ms: f64 = rows
            .iter()
            .map(|&i| (0..3).map(|k| (set.row(i)[k] - mean[k]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / rows.len() as f64;
        let scale = if ms > 0.0 { TARGET_RMS / ms.sqrt() } else { 1.0 };
        Ok(Self {
            scale,
            translation: [-scale * mean[0], -scale * mean[1], -scale * mean[2]],
        })
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.scale * p[0] + self.translation[0],
            self.scale * p[1] + self.translation[1],
            self.scale * p[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let s = 1.0 / self.scale;
        Self {
            scale: s,
            translation: [-s * self.translation[0], -s * self.translation[1], -s * self.translation[2]],
        }
    }

    /// Moves positions and shifts log-scales by `ln(scale)`; rotations are untouched.
    pub fn apply_set(&self, set: &GaussianSet) -> GaussianSet {
        let mut out = set.clone();
        let ls = self.scale.ln();
        for i in 0..out.len() {
            let row = out.row_mut(i);
            let p = self.apply_point([row[0], row[1], row[2]]);
            row[..3].copy_from_slice(&p);
            for v in &mut row[3..6] {
                *v += ls;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        format!(
            "scale = {:?}\ntranslation = {:?} {:?} {:?}\n",
            self.scale, self.translation[0], self.translation[1], self.translation[2]
        )
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut scale = None;
        let mut translation = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("malformed line `{line}`"))?;
            let nums: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse::<f64>).collect();
            let nums = nums.map_err(|e| format!("bad number in `{line}`: {e}"))?;
            match (k.trim(), nums.as_slice()) {
                ("scale", [s]) => scale = Some(*s),
                ("translation", [x, y, z]) => translation = Some([*x, *y, *z]),
                _ => return Err(format!("unexpected entry `{line}`")),
            }
        }
        Ok(Self {
            scale: scale.ok_or("missing scale")?,
            translation: translation.ok_or("missing translation")?,
        })
    }
}

/// Camera layout shared by datagen and the refinement loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub radius: f64,
    /// Degrees.
    pub ring_elevation: f64,
    pub ring_views: usize,
    pub held_out_views: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 88.0,
            radius: 3.0,
            ring_elevation: 20.0,
            ring_views: 12,
            held_out_views: 4,
        }
    }
}

impl RigConfig {
    /// `count` cameras evenly spaced in azimuth at the ring elevation.
    pub fn ring(&self, count: usize, azimuth_offset_deg: f64) -> Result<Vec<Camera>> {
        (0..count)
            .map(|i| {
                let az = (azimuth_offset_deg + 360.0 * i as f64 / count as f64).to_radians();
                Camera::orbit(
                    Vector3::zeros(),
                    self.radius,
                    az,
                    self.ring_elevation.to_radians(),
                    self.focal,
                    self.width,
                    self.height,
                )
            })
            .collect()
    }

    /// Novel views between ring azimuths, alternating above and below the ring.
    pub fn held_out(&self) -> Result<Vec<Camera>> {
        (0..self.held_out_views)
            .map(|i| {
                let az = (45.0 + 360.0 * i as f64 / self.held_out_views.max(1) as f64).to_radians();
                let el: f64 = if i % 2 == 0 { 40.0 } else { 5.0 };
                Camera::orbit(
                    Vector3::zeros(),
                    self.radius,
                    az,
                    el.to_radians(),
                    self.focal,
                    self.width,
                    self.height,
                )
            })
            .collect()
    }
}

fn uniform3(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn random_appearance(rng: &mut impl Rng) -> Appearance {
    Appearance {
        color: uniform3(rng, 0.15, 0.95),
        color_noise: rng.random_range(0.0..0.05),
    }
}

fn random_leaf(rng: &mut impl Rng, offset: [f64; 3], size: f64) -> Primitive {
    match rng.random_range(0..3) {
        0 => Primitive::Sphere {
            center: offset,
            radius: size * rng.random_range(0.5..0.8),
            appearance: random_appearance(rng),
        },
        1 => {
            let he = uniform3(rng, 0.25 * size, 0.6 * size);
            Primitive::Box {
                center: offset,
                half_extents: he,
                rotation: uniform3(rng, -0.8, 0.8),
                appearance: random_appearance(rng),
            }
        }
        _ => {
            let dir = random_unit(rng) * size * rng.random_range(0.3..0.6);
            let c = v3(offset);
            Primitive::Capsule {
                a: (c - dir).into(),
                b: (c + dir).into(),
                radius: size * rng.random_range(0.2..0.35),
                appearance: random_appearance(rng),
            }
        }
    }
}

/// Toy-corpus distribution: a single primitive, or (30%) a two-part composite.
pub fn random_scene(seed: u64, rng: &mut impl Rng) -> SceneSpec {
    let primitive = if rng.random_bool(0.3) {
        let d = random_unit(rng) * 0.35;
        Primitive::Composite {
            parts: vec![
                random_leaf(rng, (-d).into(), 0.7),
                random_leaf(rng, d.into(), 0.6),
            ],
        }
    } else {
        random_leaf(rng, [0.0; 3], 1.0)
    };
    SceneSpec {
        primitives: vec![primitive],
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::rng_stream;
    use crate::gaussians::activate_row;

    fn unit_sphere() -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive::Sphere {
                center: [0.2, -0.1, 0.3],
                radius: 0.5,
                appearance: Appearance {
                    color: [0.8, 0.2, 0.1],
                    color_noise: 0.0,
                },
            }],
            seed: 0,
        }
    }

    #[test]
    fn sphere_points_lie_on_the_surface() {
        let cloud = unit_sphere().surface_points(4096, &mut rng_stream(1, 0)).unwrap();
        assert_eq!(cloud.len(), 4096);
        for p in cloud.points() {
            let r = ((p[0] - 0.2).powi(2) + (p[1] + 0.1).powi(2) + (p[2] - 0.3).powi(2)).sqrt();
            assert!((r - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn surface_samples_respect_area_shares() {
        let spec = SceneSpec {
            primitives: vec![Primitive::Composite {
                parts: vec![
                    Primitive::Sphere {
                        center: [0.0; 3],
                        radius: 1.0,
                        appearance: unit_appearance(),
                    },
                    Primitive::Sphere {
                        center: [3.0, 0.0, 0.0],
                        radius: 2.0,
                        appearance: unit_appearance(),
                    },
                ],
            }],
            seed: 0,
        };
        let s = spec.sample_surface(100, &mut rng_stream(2, 0)).unwrap();
        assert_eq!(s.iter().filter(|p| p.point.norm() < 1.0 + 1e-9).count(), 20);
    }

    fn unit_appearance() -> Appearance {
        Appearance {
            color: [0.5; 3],
            color_noise: 0.0,
        }
    }

    #[test]
    fn box_and_capsule_samples_are_on_their_surfaces() {
        let mut rng = rng_stream(3, 0);
        let bx = Primitive::Box {
            center: [0.1, 0.2, 0.3],
            half_extents: [0.3, 0.2, 0.1],
            rotation: [0.3, -0.2, 0.5],
            appearance: unit_appearance(),
        };
        let rot = Rotation3::new(Vector3::new(0.3, -0.2, 0.5));
        for _ in 0..200 {
            let s = bx.sample_leaf(&mut rng);
            let local = rot.inverse() * (s.point - Vector3::new(0.1, 0.2, 0.3));
            let on_face = (0..3).any(|k| (local[k].abs() - [0.3, 0.2, 0.1][k]).abs() < 1e-12);
            assert!(on_face && (0..3).all(|k| local[k].abs() <= [0.3, 0.2, 0.1][k] + 1e-12));
        }
        let cap = Primitive::Capsule {
            a: [0.0, -0.3, 0.0],
            b: [0.0, 0.3, 0.0],
            radius: 0.2,
            appearance: unit_appearance(),
        };
        for _ in 0..200 {
            let s = cap.sample_leaf(&mut rng);
            let y = s.point.y.clamp(-0.3, 0.3);
            let d = (s.point - Vector3::new(0.0, y, 0.0)).norm();
            assert!((d - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn surface_gaussians_are_tangent_aligned() {
        let spec = unit_sphere();
        let set = surface_gaussians(&spec, 256, &mut rng_stream(4, 0)).unwrap();
        assert_eq!(set.len(), 256);
        for i in 0..set.len() {
            let g = activate_row(set.row(i)).unwrap();
            let radial = (g.position - Vector3::new(0.2, -0.1, 0.3)).normalize();
            let along = (radial.transpose() * g.cov3d * radial)[0];
            let eig = g.cov3d.symmetric_eigenvalues();
            assert!((along - eig.min()).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_reaches_target_rms() {
        let set = surface_gaussians(&unit_sphere(), 256, &mut rng_stream(5, 0)).unwrap();
        let sim = Similarity::normalizing(&set).unwrap();
        let norm = sim.apply_set(&set);
        let mut mean = [0.0; 3];
        let mut ms = 0.0;
        for i in 0..norm.len() {
            for k in 0..3 {
                mean[k] += norm.row(i)[k] / 256.0;
                ms += norm.row(i)[k].powi(2) / 256.0;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!((ms.sqrt() - TARGET_RMS).abs() < 1e-12);
        assert!((norm.row(0)[3] - set.row(0)[3] - sim.scale.ln()).abs() < 1e-12);
        let back = Similarity::from_text(&sim.to_text()).unwrap();
        assert_eq!(back, sim);
        let p = sim.inverse().apply_point(sim.apply_point([0.3, -0.7, 1.1]));
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] + 0.7).abs() < 1e-12 && (p[2] - 1.1).abs() < 1e-12);
    }
}
