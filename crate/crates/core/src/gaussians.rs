//! Gaussian-ellipsoid sets in raw (diffusion-space) form and their activation
//! into render-space parameters.
//!
//! Each ellipsoid is a 16-wide row:
//!
//! | range   | channel         |
//! |---------|-----------------|
//! | 0..3    | position        |
//! | 3..6    | log std-dev     |
//! | 6..12   | 6D rotation     |
//! | 12      | opacity logit   |
//! | 13..16  | raw RGB         |

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const FEATURE_DIM: usize = 16;
pub const POSITION: std::ops::Range<usize> = 0..3;
pub const LOG_SCALE: std::ops::Range<usize> = 3..6;
pub const ROTATION: std::ops::Range<usize> = 6..12;
pub const OPACITY: usize = 12;
pub const COLOR: std::ops::Range<usize> = 13..16;

/// Activated per-axis standard deviations are clamped into this range (world units).
pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 1.0;

const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    features: Vec<f64>,
    mask: Vec<bool>,
}

impl GaussianSet {
    /// Builds a set from a row-major `N×16` feature block with every row active.
    pub fn from_features(features: Vec<f64>) -> Result<Self> {
        if features.len() % FEATURE_DIM != 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature block of length {} is not a multiple of {FEATURE_DIM}",
                features.len()
            )));
        }
        let n = features.len() / FEATURE_DIM;
        Self::with_mask(features, vec![true; n])
    }

    pub fn with_mask(features: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if features.len() != mask.len() * FEATURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} mask entries",
                features.len(),
                mask.len()
            )));
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "non-finite feature at row {} channel {}",
                bad / FEATURE_DIM,
                bad % FEATURE_DIM
            )));
        }
        Ok(Self { features, mask })
    }

    pub fn empty() -> Self {
        Self {
            features: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Mutable access to the feature block. Callers must keep entries finite.
    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn into_features(self) -> Vec<f64> {
        self.features
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn push_row(&mut self, row: &[f64], active: bool) {
        assert_eq!(row.len(), FEATURE_DIM);
        self.features.extend_from_slice(row);
        self.mask.push(active);
    }

    /// Keeps the rows for which `keep` returns true, preserving order.
    pub fn retain_rows(&mut self, mut keep: impl FnMut(usize, &[f64]) -> bool) {
        let mut features = Vec::with_capacity(self.features.len());
        let mut mask = Vec::with_capacity(self.mask.len());
        for i in 0..self.len() {
            if keep(i, self.row(i)) {
                features.extend_from_slice(self.row(i));
                mask.push(self.mask[i]);
            }
        }
        self.features = features;
        self.mask = mask;
    }

    pub fn select_rows(&self, rows: &[usize]) -> GaussianSet {
        let mut out = GaussianSet::empty();
        for &i in rows {
            out.push_row(self.row(i), self.mask[i]);
        }
        out
    }

    pub fn activate(&self, index: usize) -> Result<ActivatedGaussian> {
        activate_row(self.row(index))
    }

    pub fn opacity(&self, index: usize) -> f64 {
        logistic(self.row(index)[OPACITY])
    }

    pub fn max_scale(&self, index: usize) -> f64 {
        let r = self.row(index);
        LOG_SCALE
            .map(|c| activate_scale(r[c]))
            .fold(f64::MIN, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussian {
    pub position: Vector3<f64>,
    pub cov3d: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn activate_scale(log_scale: f64) -> f64 {
    log_scale.exp().clamp(SCALE_MIN, SCALE_MAX)
}

/// Derivative of [`activate_scale`]; zero where the clamp is active.
pub fn activate_scale_grad(log_scale: f64) -> f64 {
    let s = log_scale.exp();
    if (SCALE_MIN..=SCALE_MAX).contains(&s) {
        s
    } else {
        0.0
    }
}

/// Intermediate values of the 6D rotation decoding, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Rotation6Decode {
    pub matrix: Matrix3<f64>,
    a_norm: f64,
    u_norm: f64,
    b: Vector3<f64>,
}

/// Decodes a continuous 6D rotation: normalize the first 3-vector, Gram-Schmidt
/// the second against it, and complete with the cross product (columns).
pub fn rotation6_to_matrix(r6: &[f64]) -> Result<Matrix3<f64>> {
    rotation6_decode(r6).map(|d| d.matrix)
}

pub fn rotation6_decode(r6: &[f64]) -> Result<Rotation6Decode> {
    assert_eq!(r6.len(), 6);
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    let a_norm = a.norm();
    if !(a_norm > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation("first vector has zero length"));
    }
    let c1 = a / a_norm;
    let u = b - c1 * c1.dot(&b);
    let u_norm = u.norm();
    if !(u_norm > DEGENERATE_EPS * b.norm().max(1.0)) {
        return Err(Error::DegenerateRotation("second vector is parallel to the first"));
    }
    let c2 = u / u_norm;
    let c3 = c1.cross(&c2);
    Ok(Rotation6Decode {
        matrix: Matrix3::from_columns(&[c1, c2, c3]),
        a_norm,
        u_norm,
        b,
    })
}

/// Pulls a gradient on the decoded matrix back to the 6 raw entries.
pub fn rotation6_backward(decode: &Rotation6Decode, grad_matrix: &Matrix3<f64>) -> [f64; 6] {
    let c1: Vector3<f64> = decode.matrix.column(0).into();
    let c2: Vector3<f64> = decode.matrix.column(1).into();
    let g3: Vector3<f64> = grad_matrix.column(2).into();
    // c3 = c1 x c2
    let mut g1: Vector3<f64> = grad_matrix.column(0).into();
    let mut g2: Vector3<f64> = grad_matrix.column(1).into();
    g1 += c2.cross(&g3);
    g2 += g3.cross(&c1);
    // c2 = u / |u|
    let gu = (g2 - c2 * c2.dot(&g2)) / decode.u_norm;
    // u = b - (c1.b) c1
    let b = decode.b;
    let c1_dot_b = c1.dot(&b);
    let c1_dot_gu = c1.dot(&gu);
    let gb = gu - c1 * c1_dot_gu;
    g1 += -gu * c1_dot_b - b * c1_dot_gu;
    // c1 = a / |a|
    let ga = (g1 - c1 * c1.dot(&g1)) / decode.a_norm;
    [ga.x, ga.y, ga.z, gb.x, gb.y, gb.z]
}

pub fn activate_row(row: &[f64]) -> Result<ActivatedGaussian> {
    let rot = rotation6_to_matrix(&row[ROTATION])?;
    let s = Vector3::new(
        activate_scale(row[3]),
        activate_scale(row[4]),
        activate_scale(row[5]),
    );
    let d = Matrix3::from_diagonal(&s.component_mul(&s));
    let cov = rot * d * rot.transpose();
    Ok(ActivatedGaussian {
        position: Vector3::new(row[0], row[1], row[2]),
        // symmetrize against round-off
        cov3d: (cov + cov.transpose()) * 0.5,
        opacity: logistic(row[OPACITY]),
        color: [
            row[13].clamp(0.0, 1.0),
            row[14].clamp(0.0, 1.0),
            row[15].clamp(0.0, 1.0),
        ],
    })
}

/// Positions of active ellipsoids whose activated opacity reaches `opacity_threshold`.
pub fn extract_point_cloud(set: &GaussianSet, opacity_threshold: f64) -> PointCloud {
    let points = (0..set.len())
        .filter(|&i| set.is_active(i) && set.opacity(i) >= opacity_threshold)
        .map(|i| {
            let r = set.row(i);
            [r[0], r[1], r[2]]
        })
        .collect();
    PointCloud::new(points)
}

const MAGIC: &[u8; 4] = b"GSET";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

/// Writes `magic | version u32 | N u64 | N×16 f32 | N mask bytes`, all little-endian.
pub fn save_gaussians(path: impl AsRef<Path>, set: &GaussianSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_gaussians(set);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_gaussians(set: &GaussianSet) -> Vec<u8> {
    let n = set.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * (FEATURE_DIM * 4 + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for &v in set.features() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(set.mask().iter().map(|&m| m as u8));
    out
}

pub fn load_gaussians(path: impl AsRef<Path>) -> Result<GaussianSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gaussians(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn decode_gaussians(bytes: &[u8]) -> std::result::Result<GaussianSet, String> {
    if bytes.len() < HEADER_LEN {
        return Err("file shorter than header".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = (n as u128) * (FEATURE_DIM as u128 * 4 + 1) + HEADER_LEN as u128;
    if bytes.len() as u128 != expected {
        return Err(format!(
            "expected {expected} bytes for {n} ellipsoids, found {}",
            bytes.len()
        ));
    }
    let n = n as usize;
    let body = &bytes[HEADER_LEN..];
    let (feat_bytes, mask_bytes) = body.split_at(n * FEATURE_DIM * 4);
    let features: Vec<f64> = feat_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut mask = Vec::with_capacity(n);
    for &b in mask_bytes {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(format!("invalid mask byte {b}")),
        }
    }
    GaussianSet::with_mask(features, mask).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        let d = (a - b).abs().max();
        assert!(d <= tol, "max diff {d} > {tol}\n{a}\n{b}");
    }

    fn identity_row() -> [f64; 16] {
        let mut r = [0.0; 16];
        r[6] = 1.0;
        r[10] = 1.0;
        r
    }

    #[test]
    fn rotation_canonical_basis_is_identity() {
        let r = rotation6_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_mat_close(&r, &Matrix3::identity(), 0.0);
        let r = rotation6_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_mat_close(&r, &Matrix3::identity(), 0.0);
    }

    #[test]
    fn rotation_gram_schmidt_by_hand() {
        let r = rotation6_to_matrix(&[1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // b - (c1.b) c1 = (0,1,0) - (1/2)(1,1,0) = (-1/2, 1/2, 0)
        let expected = Matrix3::new(h, -h, 0.0, h, h, 0.0, 0.0, 0.0, 1.0);
        assert_mat_close(&r, &expected, 1e-15);
        assert_mat_close(&(r.transpose() * r), &Matrix3::identity(), 1e-9);
    }

    #[test]
    fn rotation_degenerate_inputs() {
        assert!(matches!(
            rotation6_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            rotation6_to_matrix(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn activate_examples() {
        let row = identity_row();
        let g = activate_row(&row).unwrap();
        assert_mat_close(&g.cov3d, &Matrix3::identity(), 1e-15);
        assert_eq!(g.opacity, 0.5);

        // diag(4,1,1) pattern, scaled by 1/16 to stay under SCALE_MAX
        let mut row = identity_row();
        row[3] = (0.5f64).ln();
        row[4] = (0.25f64).ln();
        row[5] = (0.25f64).ln();
        let g = activate_row(&row).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(0.25, 0.0625, 0.0625));
        assert_mat_close(&g.cov3d, &expected, 1e-15);
    }

    #[test]
    fn scale_clamp_limits_covariance() {
        let mut row = identity_row();
        row[3] = 2f64.ln();
        let g = activate_row(&row).unwrap();
        // s = exp(ln 2) = 2 is clamped to SCALE_MAX = 1
        assert_mat_close(&g.cov3d, &Matrix3::identity(), 1e-15);
        assert_eq!(activate_scale_grad(2f64.ln()), 0.0);
        assert_eq!(activate_scale_grad(-50.0), 0.0);
    }

    #[test]
    fn point_cloud_extraction_thresholds() {
        let mut set = GaussianSet::empty();
        for logit in [-4.0, 0.0, 4.0] {
            let mut r = identity_row();
            r[OPACITY] = logit;
            r[0] = logit;
            set.push_row(&r, true);
        }
        assert_eq!(extract_point_cloud(&set, 0.0).len(), 3);
        assert_eq!(extract_point_cloud(&set, 0.99).len(), 0);
        let pc = extract_point_cloud(&set, 0.9);
        assert_eq!(pc.points(), &[[4.0, 0.0, 0.0]]);
        set.mask_mut()[2] = false;
        assert_eq!(extract_point_cloud(&set, 0.0).len(), 2);
    }

    #[test]
    fn serialization_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        save_gaussians(&path, &GaussianSet::empty()).unwrap();
        assert_eq!(load_gaussians(&path).unwrap(), GaussianSet::empty());

        let mut set = GaussianSet::empty();
        set.push_row(&identity_row(), true);
        set.push_row(&identity_row(), false);
        let bytes = encode_gaussians(&set);
        let truncated = dir.path().join("trunc.bin");
        fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_gaussians(&truncated), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_gaussians(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(decode_gaussians(&bad).is_err());

        assert!(matches!(
            load_gaussians(dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_features() {
        let mut row = identity_row();
        row[0] = f64::NAN;
        assert!(GaussianSet::from_features(row.to_vec()).is_err());
    }

    fn rotation_fd_check(r6: [f64; 6], weights: Matrix3<f64>) {
        let dec = rotation6_decode(&r6).unwrap();
        let analytic = rotation6_backward(&dec, &weights);
        let f = |v: &[f64; 6]| rotation6_to_matrix(v).unwrap().component_mul(&weights).sum();
        for k in 0..6 {
            let h = 1e-6;
            let mut p = r6;
            p[k] += h;
            let mut m = r6;
            m[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "channel {k}: fd {fd} analytic {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        rotation_fd_check(
            [0.3, -1.2, 0.7, 0.5, 0.4, -0.9],
            Matrix3::new(0.1, -0.4, 0.8, 1.3, -0.2, 0.05, 0.6, 0.9, -1.1),
        );
        rotation_fd_check(
            [2.0, 0.1, 0.0, -0.3, 1.5, 0.2],
            Matrix3::new(-0.7, 0.3, 0.2, 0.1, 0.4, -0.5, 1.0, -0.6, 0.3),
        );
    }

    fn f32_row() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f32..10.0, FEATURE_DIM)
            .prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn activation_is_well_formed(row in proptest::collection::vec(-10.0f64..10.0, FEATURE_DIM)) {
            let Ok(g) = activate_row(&row) else { return Ok(()); };
            prop_assert!(g.opacity > 0.0 && g.opacity < 1.0);
            prop_assert!(g.cov3d.iter().all(|v| v.is_finite()));
            prop_assert!((g.cov3d - g.cov3d.transpose()).abs().max() == 0.0);
            let eig = g.cov3d.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&e| e > 0.0), "eigenvalues {eig:?}");
            prop_assert!(g.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }

        #[test]
        fn rotation_is_scale_invariant(
            r6 in proptest::collection::vec(-5.0f64..5.0, 6),
            ka in 0.01f64..100.0,
            kb in 0.01f64..100.0,
        ) {
            let Ok(r) = rotation6_to_matrix(&r6) else { return Ok(()); };
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            let scaled = [r6[0] * ka, r6[1] * ka, r6[2] * ka, r6[3] * kb, r6[4] * kb, r6[5] * kb];
            let rs = rotation6_to_matrix(&scaled).unwrap();
            prop_assert!((r - rs).abs().max() < 1e-9);
        }

        #[test]
        fn serialization_round_trips(
            n in prop_oneof![Just(0usize), Just(1), Just(64), Just(1024)],
            seed_rows in proptest::collection::vec(f32_row(), 1..4),
            mask_bits in any::<u64>(),
        ) {
            let mut set = GaussianSet::empty();
            for i in 0..n {
                let row = &seed_rows[i % seed_rows.len()];
                let mut row = row.clone();
                row[0] = (row[0] as f32 + i as f32) as f64;
                set.push_row(&row, (mask_bits >> (i % 64)) & 1 == 1);
            }
            let decoded = decode_gaussians(&encode_gaussians(&set)).unwrap();
            prop_assert_eq!(decoded.len(), set.len());
            for (a, b) in decoded.features().iter().zip(set.features()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(decoded.mask(), set.mask());
        }
    }
}
