#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use roarnet_core::eval::EvalConfig;
use roarnet_core::geom::{yaw_rotation, Box3D, Dims};
use roarnet_core::kitti::GroundTruthLabel;

pub fn random_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims::new(
        rng.random_range(1.4..2.0),
        rng.random_range(1.3..2.0),
        rng.random_range(3.0..5.0),
    )
    .unwrap()
}

/// A box in front of the camera at depth `z_range`, inside a 90 degree cone.
pub fn random_box(rng: &mut ChaCha8Rng, z_range: (f64, f64)) -> Box3D {
    let z = rng.random_range(z_range.0..z_range.1);
    let x = rng.random_range(-0.5..0.5) * z;
    let y = rng.random_range(0.0..2.0);
    Box3D::new(Point3::new(x, y, z), random_dims(rng), rng.random_range(-PI..PI)).unwrap()
}

/// A second box overlapping `a` in most draws.
pub fn perturbed_box(rng: &mut ChaCha8Rng, a: &Box3D) -> Box3D {
    let d = a.dims();
    let k = |rng: &mut ChaCha8Rng, v: f64| v * rng.random_range(0.7..1.3);
    let dims = Dims::new(k(rng, d.w), k(rng, d.h), k(rng, d.l)).unwrap();
    let shift = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-0.6..0.6), rng.random_range(-2.0..2.0));
    Box3D::new(a.center() + shift, dims, rng.random_range(-PI..PI)).unwrap()
}

fn local(b: &Box3D, p: &Point3<f64>) -> Vector3<f64> {
    yaw_rotation(b.yaw()).transpose() * (p - b.center())
}

pub fn inside_3d(b: &Box3D, p: &Point3<f64>) -> bool {
    let q = local(b, p);
    let d = b.dims();
    q.x.abs() <= d.l / 2.0 && q.y.abs() <= d.h / 2.0 && q.z.abs() <= d.w / 2.0
}

pub fn inside_bev(b: &Box3D, x: f64, z: f64) -> bool {
    let q = local(b, &Point3::new(x, b.center().y, z));
    let d = b.dims();
    q.x.abs() <= d.l / 2.0 && q.z.abs() <= d.w / 2.0
}

fn bounds(a: &Box3D, b: &Box3D) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in a.corners().iter().chain(b.corners().iter()) {
        for i in 0..3 {
            lo[i] = lo[i].min(c[i]);
            hi[i] = hi[i].max(c[i]);
        }
    }
    (lo, hi)
}

fn ratio(both: u64, ia: u64, ib: u64) -> f64 {
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Jittered-grid estimate of 3D IoU with `n^3` samples over the joint hull.
pub fn mc_iou_3d(a: &Box3D, b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = bounds(a, b);
    let step: Vec<f64> = (0..3).map(|i| (hi[i] - lo[i]) / n as f64).collect();
    let (mut both, mut ia, mut ib) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = Point3::new(
                    lo[0] + (i as f64 + rng.random::<f64>()) * step[0],
                    lo[1] + (j as f64 + rng.random::<f64>()) * step[1],
                    lo[2] + (k as f64 + rng.random::<f64>()) * step[2],
                );
                let (x, y) = (inside_3d(a, &p), inside_3d(b, &p));
                ia += x as u64;
                ib += y as u64;
                both += (x && y) as u64;
            }
        }
    }
    ratio(both, ia, ib)
}

/// Jittered-grid estimate of BEV IoU with `n^2` samples.
pub fn mc_iou_bev(a: &Box3D, b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = bounds(a, b);
    let (sx, sz) = ((hi[0] - lo[0]) / n as f64, (hi[2] - lo[2]) / n as f64);
    let (mut both, mut ia, mut ib) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for k in 0..n {
            let x = lo[0] + (i as f64 + rng.random::<f64>()) * sx;
            let z = lo[2] + (k as f64 + rng.random::<f64>()) * sz;
            let (p, q) = (inside_bev(a, x, z), inside_bev(b, x, z));
            ia += p as u64;
            ib += q as u64;
            both += (p && q) as u64;
        }
    }
    ratio(both, ia, ib)
}

/// Exhaustive matching: each detection goes to a qualifying counted label
/// (each at most once), a qualifying uncounted label (any number), or
/// nowhere. Maximizes true positives, then minimizes false positives.
/// Returns `(tp, fp, fn)`.
pub fn brute_force_counts(dets: &[Box3D], gts: &[GroundTruthLabel], cfg: &EvalConfig) -> (usize, usize, usize) {
    let qualifies: Vec<Vec<usize>> = dets
        .iter()
        .map(|d| {
            (0..gts.len())
                .filter(|&j| cfg.match_metric.iou(d, &gts[j].box3d) >= cfg.iou_threshold)
                .collect()
        })
        .collect();
    let counted: Vec<bool> = gts.iter().map(|g| cfg.counts(g)).collect();
    let mut best = (0usize, usize::MAX);
    let mut used = vec![false; gts.len()];
    fn walk(
        i: usize,
        q: &[Vec<usize>],
        counted: &[bool],
        used: &mut Vec<bool>,
        tp: usize,
        fp: usize,
        best: &mut (usize, usize),
    ) {
        if i == q.len() {
            if tp > best.0 || (tp == best.0 && fp < best.1) {
                *best = (tp, fp);
            }
            return;
        }
        walk(i + 1, q, counted, used, tp, fp + 1, best);
        for &j in &q[i] {
            if !counted[j] {
                walk(i + 1, q, counted, used, tp, fp, best);
            } else if !used[j] {
                used[j] = true;
                walk(i + 1, q, counted, used, tp + 1, fp, best);
                used[j] = false;
            }
        }
    }
    walk(0, &qualifies, &counted, &mut used, 0, 0, &mut best);
    let total = counted.iter().filter(|c| **c).count();
    (best.0, best.1, total - best.0)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps round-off on vanishing
/// gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}
