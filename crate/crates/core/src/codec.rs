//! Bijections between network output vectors and boxes.
//!
//! Layouts follow the RPN/BRN output arity: the RPN emits three location
//! offsets and one objectness logit; the BRN emits three location offsets,
//! `2 * n_r` rotation values (logit, residual per bin) and `4 * n_c` size
//! values (logit, h, w, l residual per cluster).

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::geom::{Box3D, Dims};
use crate::kitti::GroundTruthLabel;
use crate::rng::rng_for;

pub const DEFAULT_ROTATION_BINS: usize = 12;
pub const DEFAULT_SIZE_CLUSTERS: usize = 3;
const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("target offset {offset} on axis {axis} is not strictly inside the bound {bound}")]
    OutOfBounds { axis: usize, offset: f64, bound: f64 },
    #[error("decoded dimensions are not positive: h={0} w={1} l={2}")]
    NonPositiveDims(f64, f64, f64),
    #[error("need at least {needed} distinct sizes, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("expected {expected} outputs, got {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("invalid region: {0}")]
    InvalidRegion(&'static str),
    #[error("invalid codec parameter: {0}")]
    InvalidParameter(String),
}

/// Logistic function, evaluated without overflow for large `|t|`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Objectness probability from the raw RPN output.
pub fn objectness(t_o: f64) -> f64 {
    sigmoid(t_o)
}

/// Standing-cylinder proposal with its location-decode bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalRegion {
    center: Point3<f64>,
    radius: f64,
    y_extent: (f64, f64),
    bounds: Vector3<f64>,
}

impl ProposalRegion {
    pub fn new(
        center: Point3<f64>,
        radius: f64,
        y_extent: (f64, f64),
        bounds: Vector3<f64>,
    ) -> Result<Self, CodecError> {
        if !(center.x.is_finite() && center.y.is_finite() && center.z.is_finite()) {
            return Err(CodecError::InvalidRegion("non-finite center"));
        }
        if !(radius > 0.0) {
            return Err(CodecError::InvalidRegion("radius must be positive"));
        }
        if !(bounds.x > 0.0 && bounds.y > 0.0 && bounds.z > 0.0) {
            return Err(CodecError::InvalidRegion("bounds must be positive"));
        }
        if !(y_extent.0 < y_extent.1) {
            return Err(CodecError::InvalidRegion("y extent must be increasing"));
        }
        Ok(ProposalRegion {
            center,
            radius,
            y_extent,
            bounds,
        })
    }

    pub fn center(&self) -> Point3<f64> {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Absolute camera-frame interval `(y_min, y_max)` admitted by the cylinder.
    pub fn y_extent(&self) -> (f64, f64) {
        self.y_extent
    }

    pub fn bounds(&self) -> Vector3<f64> {
        self.bounds
    }

    pub fn recentered(&self, center: Point3<f64>) -> ProposalRegion {
        ProposalRegion { center, ..*self }
    }
}

/// Region shape shared by every proposal; only the center varies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionTemplate {
    pub radius: f64,
    pub y_extent: (f64, f64),
    pub bounds: Vector3<f64>,
}

impl Default for RegionTemplate {
    fn default() -> Self {
        RegionTemplate {
            radius: 2.0,
            y_extent: (-1.0, 3.0),
            bounds: Vector3::new(2.0, 2.0, 2.0),
        }
    }
}

impl RegionTemplate {
    pub fn at(&self, center: Point3<f64>) -> Result<ProposalRegion, CodecError> {
        ProposalRegion::new(center, self.radius, self.y_extent, self.bounds)
    }
}

/// `center + 2 (sigmoid(t) - 0.5) * bound` per axis.
pub fn decode_location(t: &[f64; 3], region: &ProposalRegion) -> Point3<f64> {
    let c = region.center();
    let m = region.bounds();
    Point3::new(
        c.x + 2.0 * (sigmoid(t[0]) - 0.5) * m.x,
        c.y + 2.0 * (sigmoid(t[1]) - 0.5) * m.y,
        c.z + 2.0 * (sigmoid(t[2]) - 0.5) * m.z,
    )
}

/// Inverse of [`decode_location`]; the target must lie strictly inside the bounds.
pub fn encode_location(target: &Point3<f64>, region: &ProposalRegion) -> Result<[f64; 3], CodecError> {
    let offset = target - region.center();
    let m = region.bounds();
    let mut t = [0.0; 3];
    for axis in 0..3 {
        if !(offset[axis].abs() < m[axis]) {
            return Err(CodecError::OutOfBounds {
                axis,
                offset: offset[axis],
                bound: m[axis],
            });
        }
        let u = 0.5 + offset[axis] / (2.0 * m[axis]);
        t[axis] = logit(u);
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationResidual {
    /// Residual in radians from the bin center.
    #[default]
    Radians,
    /// Residual divided by the bin width.
    BinNormalized,
}

/// `n_r` equal bins over `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationBins {
    n_r: usize,
    pub residual: RotationResidual,
}

impl RotationBins {
    pub fn new(n_r: usize) -> Result<Self, CodecError> {
        if n_r == 0 {
            return Err(CodecError::InvalidParameter("rotation bin count must be positive".into()));
        }
        Ok(RotationBins {
            n_r,
            residual: RotationResidual::Radians,
        })
    }

    pub fn count(&self) -> usize {
        self.n_r
    }

    pub fn width(&self) -> f64 {
        PI / self.n_r as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.width()
    }

    fn residual_scale(&self) -> f64 {
        match self.residual {
            RotationResidual::Radians => 1.0,
            RotationResidual::BinNormalized => self.width(),
        }
    }

    /// Target bin and stored residual for a heading (taken modulo pi).
    pub fn target(&self, yaw: f64) -> (usize, f64) {
        let y = wrap_half_turn(yaw);
        let bin = ((y / self.width()).floor() as usize).min(self.n_r - 1);
        (bin, (y - self.center(bin)) / self.residual_scale())
    }
}

impl Default for RotationBins {
    fn default() -> Self {
        RotationBins::new(DEFAULT_ROTATION_BINS).unwrap()
    }
}

/// Wraps an angle into `[0, pi)`.
pub fn wrap_half_turn(yaw: f64) -> f64 {
    let r = yaw.rem_euclid(PI);
    if r >= PI {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationEncoding {
    pub logits: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Encodes a heading: `confidence` on the target logit, zero elsewhere, and
/// every bin's residual set so that any bin decodes to the same heading.
pub fn encode_rotation(yaw: f64, bins: &RotationBins, confidence: f64) -> RotationEncoding {
    let y = wrap_half_turn(yaw);
    let (target, _) = bins.target(y);
    let scale = bins.residual_scale();
    RotationEncoding {
        logits: (0..bins.count())
            .map(|i| if i == target { confidence } else { 0.0 })
            .collect(),
        residuals: (0..bins.count()).map(|i| (y - bins.center(i)) / scale).collect(),
    }
}

/// Heading in `[0, pi)`: center of the winning bin plus its residual, wrapped.
pub fn decode_rotation(enc: &RotationEncoding, bins: &RotationBins) -> f64 {
    let bin = argmax(&enc.logits);
    wrap_half_turn(bins.center(bin) + enc.residuals[bin] * bins.residual_scale())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SizeResidual {
    /// Residual in meters added to the centroid.
    #[default]
    Additive,
    /// Natural log of the ratio to the centroid.
    Log,
}

/// Size prototypes as `[h, w, l]` triples in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeClusters {
    centroids: Vec<[f64; 3]>,
    pub residual: SizeResidual,
}

impl SizeClusters {
    pub fn new(centroids: Vec<[f64; 3]>) -> Result<Self, CodecError> {
        if centroids.is_empty() {
            return Err(CodecError::InvalidParameter("no size centroids".into()));
        }
        if centroids.iter().flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(CodecError::InvalidParameter("size centroids must be positive".into()));
        }
        for i in 0..centroids.len() {
            if centroids[..i].contains(&centroids[i]) {
                return Err(CodecError::InvalidParameter("duplicate size centroid".into()));
            }
        }
        Ok(SizeClusters {
            centroids,
            residual: SizeResidual::Additive,
        })
    }

    pub fn centroids(&self) -> &[[f64; 3]] {
        &self.centroids
    }

    pub fn count(&self) -> usize {
        self.centroids.len()
    }

    pub fn nearest(&self, hwl: &[f64; 3]) -> usize {
        let d: Vec<f64> = self.centroids.iter().map(|c| -sq_dist(c, hwl)).collect();
        argmax(&d)
    }

    fn residual_for(&self, hwl: &[f64; 3], cluster: usize) -> [f64; 3] {
        let c = self.centroids[cluster];
        match self.residual {
            SizeResidual::Additive => [hwl[0] - c[0], hwl[1] - c[1], hwl[2] - c[2]],
            SizeResidual::Log => [(hwl[0] / c[0]).ln(), (hwl[1] / c[1]).ln(), (hwl[2] / c[2]).ln()],
        }
    }

    fn apply_residual(&self, cluster: usize, r: &[f64; 3]) -> [f64; 3] {
        let c = self.centroids[cluster];
        match self.residual {
            SizeResidual::Additive => [c[0] + r[0], c[1] + r[1], c[2] + r[2]],
            SizeResidual::Log => [c[0] * r[0].exp(), c[1] * r[1].exp(), c[2] * r[2].exp()],
        }
    }

    /// Target cluster (nearest centroid) and its residual.
    pub fn target(&self, dims: &Dims) -> (usize, [f64; 3]) {
        let hwl = [dims.h, dims.w, dims.l];
        let k = self.nearest(&hwl);
        (k, self.residual_for(&hwl, k))
    }

    /// Text form: one `H W L` line per centroid.
    pub fn to_text(&self) -> String {
        self.centroids
            .iter()
            .map(|c| format!("{} {} {}\n", c[0], c[1], c[2]))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let mut centroids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| CodecError::InvalidParameter(format!("line {}: malformed number", i + 1)))?;
            if vals.len() != 3 {
                return Err(CodecError::InvalidParameter(format!(
                    "line {}: expected 3 values, found {}",
                    i + 1,
                    vals.len()
                )));
            }
            centroids.push([vals[0], vals[1], vals[2]]);
        }
        SizeClusters::new(centroids)
    }
}

impl Default for SizeClusters {
    /// Car size modes as `[h, w, l]`; replace with fitted clusters for real data.
    fn default() -> Self {
        SizeClusters::new(vec![[1.53, 1.63, 3.88], [1.45, 1.52, 3.20], [1.70, 1.80, 4.60]]).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeEncoding {
    pub logits: Vec<f64>,
    pub residuals: Vec<[f64; 3]>,
}

/// Encodes dimensions: `confidence` on the nearest centroid's logit, every
/// cluster's residual set so that any cluster decodes to `dims`.
pub fn encode_size(dims: &Dims, clusters: &SizeClusters, confidence: f64) -> SizeEncoding {
    let hwl = [dims.h, dims.w, dims.l];
    let target = clusters.nearest(&hwl);
    SizeEncoding {
        logits: (0..clusters.count())
            .map(|i| if i == target { confidence } else { 0.0 })
            .collect(),
        residuals: (0..clusters.count())
            .map(|i| clusters.residual_for(&hwl, i))
            .collect(),
    }
}

/// Winning centroid plus its residual, returned as `[h, w, l]`.
pub fn decode_size(enc: &SizeEncoding, clusters: &SizeClusters) -> Result<[f64; 3], CodecError> {
    let k = argmax(&enc.logits);
    let hwl = clusters.apply_residual(k, &enc.residuals[k]);
    if !hwl.iter().all(|v| *v > 0.0) {
        return Err(CodecError::NonPositiveDims(hwl[0], hwl[1], hwl[2]));
    }
    Ok(hwl)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Diagnostics from a k-means fit.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansReport {
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub sse_history: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl KMeansReport {
    pub fn final_sse(&self) -> f64 {
        *self.sse_history.last().unwrap_or(&0.0)
    }
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments are
/// stable or after 100 iterations.
pub fn kmeans(points: &[[f64; 3]], k: usize, seed: u64) -> Result<(Vec<[f64; 3]>, KMeansReport), CodecError> {
    let mut distinct: Vec<[f64; 3]> = Vec::new();
    for p in points {
        if !distinct.contains(p) {
            distinct.push(*p);
        }
        if distinct.len() >= k {
            break;
        }
    }
    if k == 0 || distinct.len() < k {
        return Err(CodecError::InsufficientData {
            needed: k.max(1),
            found: distinct.len(),
        });
    }

    let mut rng = rng_for(seed, &[0x6b6d65616e73]);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                chosen = Some(i);
                if pick < w {
                    break;
                }
                pick -= w;
            }
        }
        let next = points[chosen.expect("fewer than k distinct points")];
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &next));
        }
        centroids.push(next);
    }

    let assign = |centroids: &[[f64; 3]]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let neg: Vec<f64> = centroids.iter().map(|c| -sq_dist(p, c)).collect();
                argmax(&neg)
            })
            .collect()
    };
    let sse = |centroids: &[[f64; 3]], assignments: &[usize]| -> f64 {
        points
            .iter()
            .zip(assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum()
    };

    let mut assignments = assign(&centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for j in 0..3 {
                sums[a][j] += p[j];
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
        history.push(sse(&centroids, &assignments));
        let next = assign(&centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok((
        centroids,
        KMeansReport {
            sse_history: history,
            assignments,
            iterations,
        },
    ))
}

/// Fits `n_c` size prototypes to label dimensions.
pub fn fit_size_clusters(
    labels: &[GroundTruthLabel],
    n_c: usize,
    seed: u64,
) -> Result<(SizeClusters, KMeansReport), CodecError> {
    let points: Vec<[f64; 3]> = labels
        .iter()
        .map(|l| {
            let d = l.box3d.dims();
            [d.h, d.w, d.l]
        })
        .collect();
    let (centroids, report) = kmeans(&points, n_c, seed)?;
    Ok((SizeClusters::new(centroids)?, report))
}

/// Raw RPN output: location offsets and the objectness logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnOutput {
    pub location: [f64; 3],
    pub objectness: f64,
}

impl RpnOutput {
    pub const ARITY: usize = 4;

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.location.to_vec();
        v.push(self.objectness);
        v
    }

    pub fn from_flat(values: &[f64]) -> Result<Self, CodecError> {
        if values.len() != Self::ARITY {
            return Err(CodecError::ArityMismatch {
                expected: Self::ARITY,
                found: values.len(),
            });
        }
        Ok(RpnOutput {
            location: [values[0], values[1], values[2]],
            objectness: values[3],
        })
    }

    pub fn probability(&self) -> f64 {
        objectness(self.objectness)
    }
}

/// Raw BRN output: location offsets, rotation and size encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct BrnOutput {
    pub location: [f64; 3],
    pub rotation: RotationEncoding,
    pub size: SizeEncoding,
}

impl BrnOutput {
    pub fn arity(n_r: usize, n_c: usize) -> usize {
        3 + 2 * n_r + 4 * n_c
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.location.to_vec();
        for (c, r) in self.rotation.logits.iter().zip(&self.rotation.residuals) {
            v.push(*c);
            v.push(*r);
        }
        for (c, r) in self.size.logits.iter().zip(&self.size.residuals) {
            v.push(*c);
            v.extend_from_slice(r);
        }
        v
    }

    pub fn from_flat(values: &[f64], n_r: usize, n_c: usize) -> Result<Self, CodecError> {
        let expected = Self::arity(n_r, n_c);
        if values.len() != expected {
            return Err(CodecError::ArityMismatch {
                expected,
                found: values.len(),
            });
        }
        let rot = &values[3..3 + 2 * n_r];
        let size = &values[3 + 2 * n_r..];
        Ok(BrnOutput {
            location: [values[0], values[1], values[2]],
            rotation: RotationEncoding {
                logits: rot.chunks_exact(2).map(|c| c[0]).collect(),
                residuals: rot.chunks_exact(2).map(|c| c[1]).collect(),
            },
            size: SizeEncoding {
                logits: size.chunks_exact(4).map(|c| c[0]).collect(),
                residuals: size.chunks_exact(4).map(|c| [c[1], c[2], c[3]]).collect(),
            },
        })
    }
}

/// Rotation bins and size clusters used to read BRN outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoxCodec {
    pub bins: RotationBins,
    pub clusters: SizeClusters,
}

impl BoxCodec {
    /// Logit placed on the target class by [`BoxCodec::encode_box`].
    pub const CONFIDENT_LOGIT: f64 = 20.0;

    pub fn encode_box(&self, b: &Box3D, region: &ProposalRegion) -> Result<BrnOutput, CodecError> {
        Ok(BrnOutput {
            location: encode_location(&b.center(), region)?,
            rotation: encode_rotation(b.yaw(), &self.bins, Self::CONFIDENT_LOGIT),
            size: encode_size(&b.dims(), &self.clusters, Self::CONFIDENT_LOGIT),
        })
    }

    /// Box with heading in `[0, pi)`.
    pub fn decode_box(&self, out: &BrnOutput, region: &ProposalRegion) -> Result<Box3D, CodecError> {
        let center = decode_location(&out.location, region);
        let yaw = decode_rotation(&out.rotation, &self.bins);
        let [h, w, l] = decode_size(&out.size, &self.clusters)?;
        let dims = Dims { w, h, l };
        Box3D::new(center, dims, yaw).map_err(|e| CodecError::InvalidParameter(e.to_string()))
    }
}
