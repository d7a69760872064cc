//! Multi-view regression of Gaussian sets with a hard ellipsoid budget.
//!
//! Growth is limited to the `K = max_points − count` ellipsoids with the
//! largest accumulated screen-space position gradient, so the cap holds after
//! every operation.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{
    activate_row, activate_scale, logistic, logit, rotation6_to_matrix, GaussianSet, FEATURE_DIM, LOG_SCALE, OPACITY, POSITION,
};
use crate::guidance::{view_gradients, LossKind, ViewEvidence};
use crate::render::render;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_points: usize,
    pub iterations: usize,
    /// Position learning rate, decayed exponentially to `lr_position_final`.
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub densify_interval: usize,
    pub densify_start: usize,
    pub densify_stop: usize,
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Ellipsoids above this activated scale are split rather than cloned.
    pub split_threshold: f64,
    /// Ellipsoids above this activated scale are pruned.
    pub prune_scale: f64,
    pub init_points: usize,
    pub init_scale: f64,
    /// Half-width of the cube initial positions are drawn from.
    pub init_extent: f64,
    /// Views used per iteration; 0 uses all of them.
    pub views_per_iteration: usize,
    pub refine_iterations: usize,
    pub background: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_points: 256,
            iterations: 2000,
            lr_position: 2e-3,
            lr_position_final: 2e-5,
            lr_log_scale: 5e-3,
            lr_rotation: 2e-3,
            lr_opacity: 2.5e-2,
            lr_color: 5e-3,
            densify_interval: 100,
            densify_start: 100,
            densify_stop: 1200,
            grad_threshold: 2e-5,
            prune_opacity: 0.01,
            split_threshold: 0.02,
            prune_scale: 0.5,
            init_points: 128,
            init_scale: 0.05,
            init_extent: 1.0,
            views_per_iteration: 0,
            refine_iterations: 500,
            background: [0.0; 3],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_points == 0 || self.init_points > self.max_points {
            return Err(Error::Config(format!(
                "init_points {} must be in [1, max_points = {}]",
                self.init_points, self.max_points
            )));
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be positive".into()));
        }
        Ok(())
    }

    fn lr_for_channel(&self, c: usize, iteration: usize, total: usize) -> f64 {
        match c {
            0..=2 => {
                let frac = if total > 1 { iteration as f64 / (total - 1) as f64 } else { 0.0 };
                self.lr_position * (self.lr_position_final / self.lr_position).powf(frac)
            }
            3..=5 => self.lr_log_scale,
            6..=11 => self.lr_rotation,
            12 => self.lr_opacity,
            _ => self.lr_color,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub count_before: usize,
    /// `K = max(0, max_points − count_before)`.
    pub budget: usize,
    pub added: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitStats {
    pub losses: Vec<f64>,
    /// Ellipsoid count after each iteration.
    pub counts: Vec<usize>,
    pub densify_events: Vec<DensifyEvent>,
    /// Accumulated position-gradient norms since the last densification.
    pub grad_accum: Vec<f64>,
    pub grad_visits: Vec<usize>,
    /// PSNR of the final (padded) set on each fitting view.
    pub view_psnr: Vec<f64>,
}

impl FitStats {
    /// Mean accumulated gradient norm per ellipsoid.
    pub fn mean_grad(&self) -> Vec<f64> {
        self.grad_accum
            .iter()
            .zip(&self.grad_visits)
            .map(|(&g, &n)| if n == 0 { 0.0 } else { g / n as f64 })
            .collect()
    }
}

/// Adam over feature rows; state rows follow the set through densify/prune.
#[derive(Debug, Clone)]
struct RowAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl RowAdam {
    fn new(rows: usize) -> Self {
        Self {
            m: vec![0.0; rows * FEATURE_DIM],
            v: vec![0.0; rows * FEATURE_DIM],
            step: 0,
        }
    }

    fn remap(&mut self, source: &[Option<usize>]) {
        let pick = |src: &[f64]| -> Vec<f64> {
            source
                .iter()
                .flat_map(|s| match s {
                    Some(i) => src[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].to_vec(),
                    None => vec![0.0; FEATURE_DIM],
                })
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    fn update(&mut self, features: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let lrs: Vec<f64> = (0..FEATURE_DIM).map(lr).collect();
        for (i, (w, &g)) in features.iter_mut().zip(grad).enumerate() {
            let m = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            *w -= lrs[i % FEATURE_DIM] * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        }
    }
}

/// Result of a structural edit: the new set and, per new row, the old row it
/// continues (`None` for newly created rows).
#[derive(Debug, Clone)]
pub struct Edited {
    pub set: GaussianSet,
    pub source: Vec<Option<usize>>,
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Number of ellipsoids densification may add.
pub fn densify_budget(max_points: usize, count: usize) -> usize {
    max_points.saturating_sub(count)
}

/// Clones or splits the top-K ellipsoids by accumulated gradient.
pub fn densify_topk(set: &GaussianSet, grad_norms: &[f64], config: &FitConfig, rng: &mut impl Rng) -> Result<Edited> {
    if grad_norms.len() != set.len() {
        return Err(Error::ShapeMismatch("one gradient statistic per ellipsoid expected".into()));
    }
    let k = densify_budget(config.max_points, set.len());
    let mut candidates: Vec<usize> = (0..set.len())
        .filter(|&i| set.is_active(i) && grad_norms[i] > config.grad_threshold)
        .collect();
    candidates.sort_by(|&a, &b| grad_norms[b].total_cmp(&grad_norms[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    candidates.sort_unstable();

    let mut out = GaussianSet::empty();
    let mut source = Vec::with_capacity(set.len() + candidates.len());
    let mut children = Vec::new();
    let mut selected = candidates.iter().peekable();
    for i in 0..set.len() {
        let row = set.row(i);
        if selected.peek() == Some(&&i) {
            selected.next();
            let g = activate_row(row)?;
            let scales: Vec<f64> = (0..3).map(|a| activate_scale(row[LOG_SCALE.start + a])).collect();
            if scales.iter().cloned().fold(0.0, f64::max) > config.split_threshold {
                let rot = rotation6_to_matrix(&row[6..12])?;
                for _ in 0..2 {
                    let z = Vector3::new(
                        scales[0] * gauss(rng),
                        scales[1] * gauss(rng),
                        scales[2] * gauss(rng),
                    );
                    let p = g.position + rot * z;
                    let mut child = row.to_vec();
                    child[..3].copy_from_slice(p.as_slice());
                    for a in 0..3 {
                        child[LOG_SCALE.start + a] -= 1.6f64.ln();
                    }
                    children.push(child);
                }
                continue;
            }
            let min_scale = scales.iter().cloned().fold(f64::INFINITY, f64::min);
            out.push_row(row, true);
            source.push(Some(i));
            let mut clone = row.to_vec();
            for v in &mut clone[POSITION] {
                *v += 0.2 * min_scale * gauss(rng);
            }
            children.push(clone);
            continue;
        }
        out.push_row(row, set.is_active(i));
        source.push(Some(i));
    }
    for c in children {
        out.push_row(&c, true);
        source.push(None);
    }
    assert!(out.len() <= config.max_points.max(set.len()), "densification exceeded the cap");
    Ok(Edited { set: out, source })
}

/// Removes near-transparent or oversized ellipsoids.
pub fn prune(set: &GaussianSet, prune_opacity: f64, prune_scale: f64) -> Edited {
    let mut out = GaussianSet::empty();
    let mut source = Vec::new();
    for i in 0..set.len() {
        if set.opacity(i) < prune_opacity || set.max_scale(i) > prune_scale {
            continue;
        }
        out.push_row(set.row(i), set.is_active(i));
        source.push(Some(i));
    }
    Edited { set: out, source }
}

/// Drops the least opaque rows or appends near-transparent duplicates so the
/// set has exactly `target` rows.
pub fn pad_to_count(set: &GaussianSet, target: usize, rng: &mut impl Rng) -> Result<GaussianSet> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = set.len();
    if n >= target {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| set.opacity(a).total_cmp(&set.opacity(b)).then(a.cmp(&b)));
        let mut keep = vec![true; n];
        for &i in &order[..n - target] {
            keep[i] = false;
        }
        let mut out = set.clone();
        out.retain_rows(|i, _| keep[i]);
        return Ok(out);
    }
    let mut out = set.clone();
    for _ in n..target {
        let src = rng.random_range(0..n);
        let mut row = set.row(src).to_vec();
        row[OPACITY] = logit(0.01 * logistic(row[OPACITY]));
        out.push_row(&row, set.is_active(src));
    }
    Ok(out)
}

/// Per-channel mean and standard deviation of the log-scales over all rows.
pub fn log_scale_stats<'a>(sets: impl IntoIterator<Item = &'a GaussianSet>) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0usize;
    for set in sets {
        for i in 0..set.len() {
            for c in 0..3 {
                let v = set.row(i)[LOG_SCALE.start + c];
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    (mean, std)
}

/// Deactivates rows with any log-scale outside `mean ± k·std`. A zero `std`
/// keeps only values exactly at the mean.
pub fn mask_outliers_with(set: &GaussianSet, mean: [f64; 3], std: [f64; 3], k_sigma: f64) -> GaussianSet {
    let mut out = set.clone();
    for i in 0..out.len() {
        let row = set.row(i);
        let outlier = (0..3).any(|c| {
            let d = (row[LOG_SCALE.start + c] - mean[c]).abs();
            if std[c] == 0.0 {
                d != 0.0
            } else {
                d > k_sigma * std[c]
            }
        });
        if outlier {
            out.mask_mut()[i] = false;
        }
    }
    out
}

pub fn mask_outliers(set: &GaussianSet, k_sigma: f64) -> GaussianSet {
    let (mean, std) = log_scale_stats([set]);
    mask_outliers_with(set, mean, std, k_sigma)
}

/// Whether a point projects inside the object mask of every view that sees
/// it (`require_all`), or of at least one view.
fn carved(p: &Vector3<f64>, views: &[ViewEvidence], require_all: bool) -> bool {
    let mut seen = false;
    for v in views {
        let t = v.camera.to_camera(p);
        if t.z <= 0.0 {
            continue;
        }
        let [u, w] = v.camera.project_point(&t);
        if u < 0.0 || w < 0.0 || u >= v.camera.width as f64 || w >= v.camera.height as f64 {
            continue;
        }
        seen = true;
        let inside = v.mask()[w as usize * v.camera.width + u as usize];
        if require_all && !inside {
            return false;
        }
        if !require_all && inside {
            return true;
        }
    }
    require_all && seen
}

/// Random ellipsoids inside the visual hull of the masks (falling back to the
/// union of mask-carved frusta if the hull is too thin to hit).
pub fn initialize(views: &[ViewEvidence], config: &FitConfig, rng: &mut impl Rng) -> Result<GaussianSet> {
    let mut set = GaussianSet::empty();
    let e = config.init_extent;
    let budget = 200 * config.init_points;
    let mut attempts = 0;
    while set.len() < config.init_points {
        let p = Vector3::new(rng.random_range(-e..e), rng.random_range(-e..e), rng.random_range(-e..e));
        attempts += 1;
        if !carved(&p, views, attempts <= budget) {
            if attempts > 2 * budget {
                return Err(Error::EmptyMask);
            }
            continue;
        }
        let mut row = vec![0.0; FEATURE_DIM];
        row[..3].copy_from_slice(p.as_slice());
        row[3..6].fill(config.init_scale.ln());
        loop {
            for v in &mut row[6..12] {
                *v = gauss(rng);
            }
            if rotation6_to_matrix(&row[6..12]).is_ok() {
                break;
            }
        }
        row[OPACITY] = 0.0;
        row[13..16].fill(0.5);
        set.push_row(&row, true);
    }
    Ok(set)
}

fn pick_views(count: usize, per_iter: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    if per_iter == 0 || per_iter >= count {
        return idx;
    }
    idx.shuffle(rng);
    idx.truncate(per_iter);
    idx.sort_unstable();
    idx
}

fn optimize(
    mut set: GaussianSet,
    views: &[ViewEvidence],
    config: &FitConfig,
    iterations: usize,
    densify: bool,
    rng: &mut impl Rng,
) -> Result<(GaussianSet, FitStats)> {
    let mut adam = RowAdam::new(set.len());
    let mut stats = FitStats {
        grad_accum: vec![0.0; set.len()],
        grad_visits: vec![0; set.len()],
        ..Default::default()
    };
    for it in 0..iterations {
        let chosen = pick_views(views.len(), config.views_per_iteration, rng);
        let subset: Vec<ViewEvidence> = chosen.iter().map(|&i| views[i].clone()).collect();
        let per_view = view_gradients(&set, &subset, LossKind::L1, config.background)?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; set.len() * FEATURE_DIM];
        for (v, (l, g)) in subset.iter().zip(&per_view) {
            loss += v.weight * l;
            for (a, b) in grad.iter_mut().zip(&g.features) {
                *a += v.weight * b;
            }
            for i in 0..set.len() {
                if g.visible[i] {
                    let [gx, gy] = g.mean2d[i];
                    stats.grad_accum[i] += v.weight * (gx * gx + gy * gy).sqrt();
                    stats.grad_visits[i] += 1;
                }
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedFit(it));
        }
        stats.losses.push(loss);
        let total = iterations;
        adam.update(set.features_mut(), &grad, |c| config.lr_for_channel(c, it, total));

        let step = it + 1;
        if densify
            && step >= config.densify_start
            && step <= config.densify_stop
            && step % config.densify_interval == 0
        {
            let k = densify_budget(config.max_points, set.len());
            let before = set.len();
            let dens = densify_topk(&set, &stats.mean_grad(), config, rng)?;
            let added = dens.set.len() - before;
            assert!(added <= k, "densification added {added} > K = {k}");
            stats.densify_events.push(DensifyEvent {
                iteration: step,
                count_before: before,
                budget: k,
                added,
            });
            adam.remap(&dens.source);
            let pr = prune(&dens.set, config.prune_opacity, config.prune_scale);
            adam.remap(&pr.source);
            set = pr.set;
            stats.grad_accum = vec![0.0; set.len()];
            stats.grad_visits = vec![0; set.len()];
            if set.is_empty() {
                return Err(Error::DivergedFit(it));
            }
        }
        assert!(set.len() <= config.max_points, "ellipsoid count exceeded the cap");
        stats.counts.push(set.len());
    }
    Ok((set, stats))
}

fn view_psnr(set: &GaussianSet, views: &[ViewEvidence], background: [f64; 3]) -> Vec<f64> {
    views
        .iter()
        .map(|v| {
            let out = render(set, &v.camera, background);
            crate::pipeline::metrics::psnr(&out.image, &v.image, None).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Fits a set with exactly `max_points` rows to at least four posed views.
pub fn fit_scene(views: &[ViewEvidence], config: &FitConfig, rng: &mut impl Rng) -> Result<(GaussianSet, FitStats)> {
    config.validate()?;
    if views.len() < 4 {
        return Err(Error::InsufficientViews {
            needed: 4,
            got: views.len(),
        });
    }
    if views.iter().any(|v| !v.image.same_size(&views[0].image)) {
        return Err(Error::ShapeMismatch("fitting views differ in size".into()));
    }
    let init = initialize(views, config, rng)?;
    let (set, mut stats) = optimize(init, views, config, config.iterations, true, rng)?;
    let set = pad_to_count(&set, config.max_points, rng)?;
    stats.view_psnr = view_psnr(&set, views, config.background);
    Ok((set, stats))
}

/// Continues optimization from `init` with the row count held fixed.
pub fn refine_multiview(
    init: &GaussianSet,
    views: &[ViewEvidence],
    config: &FitConfig,
    rng: &mut impl Rng,
) -> Result<(GaussianSet, FitStats)> {
    if views.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, got: 0 });
    }
    if init.active_count() == 0 {
        return Err(Error::EmptySet);
    }
    let (set, mut stats) = optimize(init.clone(), views, config, config.refine_iterations, false, rng)?;
    debug_assert_eq!(set.len(), init.len());
    stats.view_psnr = view_psnr(&set, views, config.background);
    Ok((set, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::rng_stream;

    fn row(x: f64, log_scale: f64, opacity_logit: f64) -> Vec<f64> {
        let mut r = vec![0.0; FEATURE_DIM];
        r[0] = x;
        r[3..6].fill(log_scale);
        r[6] = 1.0;
        r[10] = 1.0;
        r[OPACITY] = opacity_logit;
        r[13..16].fill(0.5);
        r
    }

    fn set_of(n: usize) -> GaussianSet {
        let mut s = GaussianSet::empty();
        for i in 0..n {
            s.push_row(&row(i as f64 * 0.01, (0.01f64).ln(), 0.0), true);
        }
        s
    }

    #[test]
    fn budget_formula() {
        assert_eq!(densify_budget(1024, 1000), 24);
        assert_eq!(densify_budget(256, 256), 0);
        assert_eq!(densify_budget(10, 12), 0);
    }

    #[test]
    fn densify_respects_k_and_bookkeeping() {
        let cfg = FitConfig {
            max_points: 12,
            grad_threshold: 0.5,
            ..Default::default()
        };
        let mut rng = rng_stream(1, 0);
        let set = set_of(10);
        let grads: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = densify_topk(&set, &grads, &cfg, &mut rng).unwrap();
        assert_eq!(d.set.len(), 12);
        assert_eq!(d.source.iter().filter(|s| s.is_none()).count(), 2);

        let full = densify_topk(&set_of(12), &[9.0; 12], &cfg, &mut rng).unwrap();
        assert_eq!(full.set.features(), set_of(12).features());

        let mut big = GaussianSet::empty();
        big.push_row(&row(0.0, (0.1f64).ln(), 0.0), true);
        let split = densify_topk(&big, &[1.0], &FitConfig { max_points: 5, ..cfg }, &mut rng).unwrap();
        assert_eq!(split.set.len(), 2);
        assert!(split.source.iter().all(|s| s.is_none()));
        assert!((split.set.row(0)[3] - ((0.1f64).ln() - 1.6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn prune_examples() {
        let set = set_of(4);
        assert_eq!(prune(&set, 0.01, 0.5).set, set);
        let mut s = set.clone();
        s.row_mut(2)[OPACITY] = -10.0;
        let p = prune(&s, 0.01, 0.5);
        assert_eq!(p.set.len(), 3);
        assert_eq!(p.source, vec![Some(0), Some(1), Some(3)]);
        assert!(prune(&GaussianSet::empty(), 0.01, 0.5).set.is_empty());
    }

    #[test]
    fn pad_examples() {
        let mut rng = rng_stream(2, 0);
        let set = set_of(6);
        assert_eq!(pad_to_count(&set, 6, &mut rng).unwrap(), set);
        let mut s = set.clone();
        for i in 0..6 {
            s.row_mut(i)[OPACITY] = i as f64 - 3.0;
        }
        let cut = pad_to_count(&s, 4, &mut rng).unwrap();
        assert_eq!(cut.len(), 4);
        assert!((0..4).all(|i| cut.row(i)[OPACITY] >= -1.0));
        let grown = pad_to_count(&set, 7, &mut rng).unwrap();
        assert_eq!(grown.len(), 7);
        assert!((grown.opacity(6) - 0.005).abs() < 1e-12);
        assert!(matches!(pad_to_count(&GaussianSet::empty(), 3, &mut rng), Err(Error::EmptySet)));
    }

    #[test]
    fn outlier_masking() {
        let set = set_of(8);
        assert!(mask_outliers(&set, 3.0).mask().iter().all(|&m| m));
        let mut s = set_of(30);
        s.row_mut(5)[4] += 10.0;
        let (mean, std) = log_scale_stats([&set_of(30)]);
        assert_eq!(std, [0.0; 3]);
        let masked = mask_outliers_with(&s, mean, [0.1; 3], 3.0);
        assert_eq!(masked.mask().iter().filter(|&&m| !m).count(), 1);
        assert!(!masked.mask()[5]);
        let self_masked = mask_outliers(&s, 3.0);
        assert!(!self_masked.mask()[5]);
        assert_eq!(self_masked.len(), 30);
    }
}
