//! Pinhole cameras with a world-to-camera rigid transform.
//!
//! Camera space follows the usual computer-vision convention: +x right, +y down,
//! +z forward. A world point `p` maps to `rotation * p + translation`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidRange("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidRange("image size must be positive".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        let det = self.rotation.determinant();
        if !(ortho < 1e-9 && (det - 1.0).abs() < 1e-9) {
            return Err(Error::InvalidRange(format!(
                "rotation is not a proper orthonormal matrix (orthogonality error {ortho:e}, det {det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidRange("non-finite camera parameter".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidRange("look_at up vector is parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    /// Camera on a ring around `center` at the given azimuth/elevation (radians), world +y up.
    pub fn orbit(
        center: Vector3<f64>,
        radius: f64,
        azimuth: f64,
        elevation: f64,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye = center
            + radius
                * Vector3::new(
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                    elevation.cos() * azimuth.cos(),
                );
        Camera::look_at(eye, center, Vector3::new(0.0, 1.0, 0.0), focal, width, height)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates of a camera-space point (no visibility test).
    pub fn project_point(&self, t: &Vector3<f64>) -> [f64; 2] {
        [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fx = {:?}", self.fx);
        let _ = writeln!(s, "fy = {:?}", self.fy);
        let _ = writeln!(s, "cx = {:?}", self.cx);
        let _ = writeln!(s, "cy = {:?}", self.cy);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let r = &self.rotation;
        let rot: Vec<String> = (0..3)
            .flat_map(|i| (0..3).map(move |j| format!("{:?}", r[(i, j)])))
            .collect();
        let _ = writeln!(s, "rotation = {}", rot.join(" "));
        let t = &self.translation;
        let _ = writeln!(s, "translation = {:?} {:?} {:?}", t.x, t.y, t.z);
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width = None;
        let mut height = None;
        let mut rotation = None;
        let mut translation = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", lineno + 1))?;
            let nums = || -> std::result::Result<Vec<f64>, String> {
                value
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 1)))
                    .collect()
            };
            let scalar = || -> std::result::Result<f64, String> {
                match nums()?.as_slice() {
                    [v] => Ok(*v),
                    _ => Err(format!("line {}: expected one number", lineno + 1)),
                }
            };
            let int = || -> std::result::Result<usize, String> {
                value
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| format!("line {}: {e}", lineno + 1))
            };
            match key.trim() {
                "fx" => fx = Some(scalar()?),
                "fy" => fy = Some(scalar()?),
                "cx" => cx = Some(scalar()?),
                "cy" => cy = Some(scalar()?),
                "width" => width = Some(int()?),
                "height" => height = Some(int()?),
                "rotation" => {
                    let v = nums()?;
                    if v.len() != 9 {
                        return Err(format!("line {}: rotation needs 9 entries", lineno + 1));
                    }
                    rotation = Some(Matrix3::from_row_slice(&v));
                }
                "translation" => {
                    let v = nums()?;
                    if v.len() != 3 {
                        return Err(format!("line {}: translation needs 3 entries", lineno + 1));
                    }
                    translation = Some(Vector3::new(v[0], v[1], v[2]));
                }
                other => return Err(format!("line {}: unknown key `{other}`", lineno + 1)),
            }
        }
        let missing = |name: &str| format!("missing key `{name}`");
        Camera::new(
            fx.ok_or_else(|| missing("fx"))?,
            fy.ok_or_else(|| missing("fy"))?,
            cx.ok_or_else(|| missing("cx"))?,
            cy.ok_or_else(|| missing("cy"))?,
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
            rotation.ok_or_else(|| missing("rotation"))?,
            translation.ok_or_else(|| missing("translation"))?,
        )
        .map_err(|e| e.to_string())
    }
}

pub fn save_camera(path: impl AsRef<Path>, cam: &Camera) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cam.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Camera::from_text(&text).map_err(|msg| Error::format(path, msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::orbit(Vector3::zeros(), 3.0, 0.7, 0.35, 80.0, 64, 48).unwrap();
        let t = cam.to_camera(&Vector3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12);
        assert!((t.z - 3.0).abs() < 1e-12);
        let [u, v] = cam.project_point(&t);
        assert!((u - 32.0).abs() < 1e-9 && (v - 24.0).abs() < 1e-9);
        // world up projects towards the top of the image
        let up = cam.to_camera(&Vector3::new(0.0, 0.5, 0.0));
        assert!(cam.project_point(&up)[1] < 24.0);
        assert!((cam.center() - Vector3::new(3.0 * 0.35f64.cos() * 0.7f64.sin(), 3.0 * 0.35f64.sin(), 3.0 * 0.35f64.cos() * 0.7f64.cos())).norm() < 1e-12);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let cam = Camera::orbit(Vector3::new(0.1, -0.2, 0.3), 2.7, 1.3, -0.2, 91.5, 64, 64).unwrap();
        let back = Camera::from_text(&cam.to_text()).unwrap();
        assert_eq!(cam, back);
    }

    #[test]
    fn rejects_invalid_cameras() {
        let bad_rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Camera::new(10.0, 10.0, 0.0, 0.0, 4, 4, bad_rot, Vector3::zeros()).is_err());
        assert!(Camera::new(0.0, 10.0, 0.0, 0.0, 4, 4, Matrix3::identity(), Vector3::zeros()).is_err());
        assert!(Camera::new(10.0, 10.0, 0.0, 0.0, 0, 4, Matrix3::identity(), Vector3::zeros()).is_err());
        assert!(Camera::from_text("fx = 1\n").is_err());
    }
}
