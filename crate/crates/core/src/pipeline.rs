//! Detection orchestration: monocular seeding, cylinder proposals, recursive
//! point-cloud refinement, confidence scoring and BEV non-maximum suppression.
//!
//! Networks are abstracted behind [`MonocularPredictor`] and
//! [`PointPredictor`]. The oracle implementations read ground truth and add
//! seeded noise, standing in for trained models.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{
    decode_location, encode_location, logit, sigmoid, BoxCodec, BrnOutput, CodecError, ProposalRegion,
    RegionTemplate, RpnOutput,
};
use crate::geom::{iou_2d, iou_bev, normalize_yaw, project_box, Box2D, Box3D, Dims, GeomError};
use crate::kitti::{format_label_line, CloudFrame, FrameData, KittiError, LidarPoint, PointCloud};
use crate::mono::{geometric_agreement_search, spatial_scatter, MonoError, ScatterParams, SolverConfig};
use crate::rng::{derive_seed, hash_str, rng_for};

pub const DEFAULT_VOXEL_RESOLUTION: f64 = 0.1;
/// Points fed to a point predictor at inference.
pub const PREDICTION_SAMPLE_COUNT: usize = 512;
/// Points per region used when producing training samples.
pub const TRAINING_SAMPLE_COUNT: usize = 256;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no points to sample from")]
    EmptyCloud,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error(transparent)]
    Mono(#[from] MonoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Kitti(#[from] KittiError),
}

/// One monocular hypothesis: image box, size and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonoDetection {
    pub box2d: Box2D,
    pub dims: Dims,
    pub yaw: f64,
    pub score: f64,
}

/// Image-based detector. Must be callable from several workers at once.
pub trait MonocularPredictor: Send + Sync {
    fn predict(&self, frame: &FrameData) -> Result<Vec<MonoDetection>, PipelineError>;
}

/// Point-cloud networks. `points` are sampled from the region and expressed
/// relative to its center.
pub trait PointPredictor: Send + Sync {
    fn rpn(&self, frame: &FrameData, points: &PointCloud, region: &ProposalRegion) -> Result<RpnOutput, PipelineError>;
    fn brn(&self, frame: &FrameData, points: &PointCloud, region: &ProposalRegion) -> Result<BrnOutput, PipelineError>;
}

/// Points inside the standing cylinder, re-expressed relative to its center.
pub fn gather_cylinder(cloud: &PointCloud, region: &ProposalRegion) -> PointCloud {
    let c = region.center();
    let r2 = region.radius() * region.radius();
    let (y0, y1) = region.y_extent();
    let points = cloud
        .points()
        .iter()
        .filter(|p| {
            let (dx, dz) = (p.x - c.x, p.z - c.z);
            dx * dx + dz * dz <= r2 && p.y >= y0 && p.y <= y1
        })
        .map(|p| LidarPoint::new(p.x - c.x, p.y - c.y, p.z - c.z, p.reflectance))
        .collect();
    PointCloud::from_parts(cloud.frame(), points)
}

fn voxel_key(p: &LidarPoint, resolution: f64) -> (i64, i64, i64) {
    (
        (p.x / resolution).floor() as i64,
        (p.y / resolution).floor() as i64,
        (p.z / resolution).floor() as i64,
    )
}

/// Replaces the points of each occupied voxel by their centroid. Output is
/// ordered by voxel index.
pub fn voxel_downsample(cloud: &PointCloud, resolution: f64) -> Result<PointCloud, PipelineError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(PipelineError::InvalidParameter(format!("voxel resolution {resolution}")));
    }
    let mut cells: BTreeMap<(i64, i64, i64), ([f64; 4], usize)> = BTreeMap::new();
    for p in cloud.points() {
        let cell = cells.entry(voxel_key(p, resolution)).or_insert(([0.0; 4], 0));
        cell.0[0] += p.x;
        cell.0[1] += p.y;
        cell.0[2] += p.z;
        cell.0[3] += p.reflectance;
        cell.1 += 1;
    }
    let points = cells
        .values()
        .map(|(s, n)| {
            let k = *n as f64;
            LidarPoint::new(s[0] / k, s[1] / k, s[2] / k, s[3] / k)
        })
        .collect();
    Ok(PointCloud::from_parts(cloud.frame(), points))
}

/// Exactly `n` points: without replacement when the cloud is large enough,
/// with replacement otherwise.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud, PipelineError> {
    if n == 0 {
        return Err(PipelineError::InvalidParameter("sample count must be positive".into()));
    }
    let src = cloud.points();
    if src.is_empty() {
        return Err(PipelineError::EmptyCloud);
    }
    let mut rng = rng_for(seed, &[]);
    let points = if src.len() >= n {
        sample(&mut rng, src.len(), n).into_iter().map(|i| src[i]).collect()
    } else {
        (0..n).map(|_| src[rng.random_range(0..src.len())]).collect()
    };
    Ok(PointCloud::from_parts(cloud.frame(), points))
}

/// Noise levels for the oracle predictors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Relative standard deviation applied to each dimension.
    pub dims_noise_sigma: f64,
    pub yaw_noise_sigma: f64,
    pub center_noise_sigma: f64,
    pub box2d_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            dims_noise_sigma: 0.0,
            yaw_noise_sigma: 0.0,
            center_noise_sigma: 0.0,
            box2d_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let sigmas = [
            self.dims_noise_sigma,
            self.yaw_noise_sigma,
            self.center_noise_sigma,
            self.box2d_noise_sigma,
        ];
        if sigmas.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(PipelineError::InvalidParameter("oracle noise sigmas must be finite and >= 0".into()))
        }
    }
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

/// Returns every labelled car with its image box, size and heading, each
/// perturbed by the configured noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleMonocular {
    pub cfg: OracleConfig,
}

impl OracleMonocular {
    pub fn new(cfg: OracleConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(OracleMonocular { cfg })
    }
}

impl MonocularPredictor for OracleMonocular {
    fn predict(&self, frame: &FrameData) -> Result<Vec<MonoDetection>, PipelineError> {
        let c = &self.cfg;
        Ok(frame
            .labels
            .iter()
            .enumerate()
            .map(|(i, gt)| {
                let mut rng = rng_for(c.rng_seed, &[hash_str(&frame.frame_id), i as u64]);
                let d = gt.box3d.dims();
                let mut jitter = |v: f64| (v * (1.0 + gaussian(&mut rng, c.dims_noise_sigma))).max(0.05 * v);
                let dims = Dims {
                    w: jitter(d.w),
                    h: jitter(d.h),
                    l: jitter(d.l),
                };
                let yaw = normalize_yaw(gt.box3d.yaw() + gaussian(&mut rng, c.yaw_noise_sigma));
                let b = gt.bbox2d;
                let mut e = [0.0; 4];
                e.iter_mut().for_each(|v| *v = gaussian(&mut rng, c.box2d_noise_sigma));
                let box2d = Box2D::new(b.xmin + e[0], b.ymin + e[1], b.xmax + e[2], b.ymax + e[3]).unwrap_or(b);
                MonoDetection {
                    box2d,
                    dims,
                    yaw,
                    score: 1.0,
                }
            })
            .collect())
    }
}

/// Encodes the labelled car nearest to the region center.
///
/// Objectness is `1 - d / radius` clamped to `[0.01, 0.99]`, where `d` is the
/// ground-plane distance from the region center to the car. Regions whose
/// nearest car lies outside the location bounds get a low objectness and
/// zero offsets. Only `center_noise_sigma` is applied here.
#[derive(Debug, Clone, Default)]
pub struct OraclePointPredictor {
    pub cfg: OracleConfig,
    pub codec: BoxCodec,
}

const MISS_PROBABILITY: f64 = 0.0025;
const OFFSET_LIMIT: f64 = 0.999;

impl OraclePointPredictor {
    pub fn new(cfg: OracleConfig, codec: BoxCodec) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(OraclePointPredictor { cfg, codec })
    }

    /// Nearest car, its (noised) box and its ground-plane distance relative to
    /// the radius, if that car is within the region bounds.
    fn target(&self, frame: &FrameData, region: &ProposalRegion, stage: u64) -> Option<(Box3D, f64)> {
        let c = region.center();
        let gt = frame
            .labels
            .iter()
            .map(|l| l.box3d)
            .min_by(|a, b| (a.center() - c).norm().total_cmp(&(b.center() - c).norm()))?;
        let m = region.bounds();
        let offset = gt.center() - c;
        if (0..3).any(|a| offset[a].abs() >= m[a]) {
            return None;
        }
        let rho = offset.x.hypot(offset.z) / region.radius();
        let mut rng = rng_for(
            self.cfg.rng_seed,
            &[hash_str(&frame.frame_id), c.x.to_bits(), c.y.to_bits(), c.z.to_bits(), stage],
        );
        let noisy: Vector3<f64> = Vector3::from_fn(|a, _| {
            let v = offset[a] + gaussian(&mut rng, self.cfg.center_noise_sigma);
            v.clamp(-OFFSET_LIMIT * m[a], OFFSET_LIMIT * m[a])
        });
        Some((gt.with_center(c + noisy), rho))
    }
}

impl PointPredictor for OraclePointPredictor {
    fn rpn(&self, frame: &FrameData, _points: &PointCloud, region: &ProposalRegion) -> Result<RpnOutput, PipelineError> {
        Ok(match self.target(frame, region, 0) {
            Some((b, rho)) => RpnOutput {
                location: encode_location(&b.center(), region)?,
                objectness: logit((1.0 - rho).clamp(0.01, 0.99)),
            },
            None => RpnOutput {
                location: [0.0; 3],
                objectness: logit(MISS_PROBABILITY),
            },
        })
    }

    fn brn(&self, frame: &FrameData, _points: &PointCloud, region: &ProposalRegion) -> Result<BrnOutput, PipelineError> {
        let b = match self.target(frame, region, 1) {
            Some((b, _)) => b,
            None => {
                let [h, w, l] = self.codec.clusters.centroids()[0];
                Box3D::new(region.center(), Dims { w, h, l }, 0.0)?
            }
        };
        Ok(self.codec.encode_box(&b, region)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PipelineMode {
    /// Objectness and box from one pass on the seed region.
    SingleStage,
    /// The single pass repeated once on a region re-centered on its box.
    SingleStageTwice,
    /// Proposal network, then two box-regression passes, re-centering before each.
    #[default]
    RpnBrnBrn,
}

impl PipelineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::SingleStage => "single_stage",
            PipelineMode::SingleStageTwice => "single_stage_twice",
            PipelineMode::RpnBrnBrn => "rpn_brn_brn",
        }
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_stage" => Ok(PipelineMode::SingleStage),
            "single_stage_twice" => Ok(PipelineMode::SingleStageTwice),
            "rpn_brn_brn" => Ok(PipelineMode::RpnBrnBrn),
            other => Err(PipelineError::InvalidParameter(format!("unknown pipeline mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Proposals with objectness probability below this are dropped.
    pub objectness: f64,
    pub nms_bev: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            objectness: 0.25,
            nms_bev: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub scatter: ScatterParams,
    pub mode: PipelineMode,
    pub thresholds: Thresholds,
    pub region: RegionTemplate,
    pub solver: SolverConfig,
    pub codec: BoxCodec,
    pub voxel_resolution: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            scatter: ScatterParams::default(),
            mode: PipelineMode::default(),
            thresholds: Thresholds::default(),
            region: RegionTemplate::default(),
            solver: SolverConfig::default(),
            codec: BoxCodec::default(),
            voxel_resolution: DEFAULT_VOXEL_RESOLUTION,
            sample_count: PREDICTION_SAMPLE_COUNT,
            seed: 0,
        }
    }
}

/// Monocular hypothesis index and seed index within its scatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProposalId {
    pub object: usize,
    pub seed: usize,
}

impl std::fmt::Display for ProposalId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.object, self.seed)
    }
}

/// A seed region produced by monocular solving and spatial scattering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedRegion {
    pub id: ProposalId,
    pub source: MonoDetection,
    pub region: ProposalRegion,
}

/// A seed region with its proposal-network output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredProposal {
    pub seed: SeedRegion,
    pub objectness: f64,
    /// Location decoded from the proposal network.
    pub location: Point3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub box2d_source: Box2D,
    pub objectness: f64,
    /// IoU between the source 2D box and the projected 3D box.
    pub confidence: f64,
    pub provenance: Vec<ProposalId>,
}

/// Stage (a): monocular hypotheses, pose solving and scattering into seed regions.
/// Hypotheses without a feasible pose are skipped.
pub fn seed_regions(
    frame: &FrameData,
    mono: &dyn MonocularPredictor,
    cfg: &DetectorConfig,
) -> Result<Vec<SeedRegion>, PipelineError> {
    let p = &frame.calib.p2;
    let mut out = Vec::new();
    for (object, det) in mono.predict(frame)?.into_iter().enumerate() {
        if det.dims.validate().is_err() {
            log::debug!("{}: hypothesis {object} has invalid dims", frame.frame_id);
            continue;
        }
        let scatter = geometric_agreement_search(&det.box2d, &det.dims, det.yaw, p, &cfg.solver)
            .and_then(|est| Ok((est, spatial_scatter(&est, &cfg.scatter, p)?)));
        let (est, scatter) = match scatter {
            Ok(v) => v,
            Err(e) => {
                log::debug!("{}: hypothesis {object} dropped: {e}", frame.frame_id);
                continue;
            }
        };
        for (seed, s) in scatter.seeds.iter().enumerate() {
            let center = Point3::new(s.x, est.solved_center.y, s.z);
            out.push(SeedRegion {
                id: ProposalId { object, seed },
                source: det,
                region: cfg.region.at(center)?,
            });
        }
    }
    Ok(out)
}

struct FrameContext<'a> {
    frame: &'a FrameData,
    cloud: PointCloud,
    points: &'a dyn PointPredictor,
    cfg: &'a DetectorConfig,
}

impl FrameContext<'_> {
    fn new<'a>(
        frame: &'a FrameData,
        points: &'a dyn PointPredictor,
        cfg: &'a DetectorConfig,
    ) -> Result<FrameContext<'a>, PipelineError> {
        Ok(FrameContext {
            frame,
            cloud: frame.camera_cloud()?,
            points,
            cfg,
        })
    }

    fn prepare(&self, region: &ProposalRegion, id: ProposalId, stage: u64) -> Result<PointCloud, PipelineError> {
        let gathered = gather_cylinder(&self.cloud, region);
        let reduced = voxel_downsample(&gathered, self.cfg.voxel_resolution)?;
        let seed = derive_seed(
            self.cfg.seed,
            &[hash_str(&self.frame.frame_id), id.object as u64, id.seed as u64, stage],
        );
        sample_points(&reduced, self.cfg.sample_count, seed)
    }

    fn rpn(&self, region: &ProposalRegion, id: ProposalId, stage: u64) -> Result<(f64, Point3<f64>), PipelineError> {
        let pts = self.prepare(region, id, stage)?;
        let out = self.points.rpn(self.frame, &pts, region)?;
        Ok((sigmoid(out.objectness), decode_location(&out.location, region)))
    }

    fn brn(&self, region: &ProposalRegion, id: ProposalId, stage: u64) -> Result<Box3D, PipelineError> {
        let pts = self.prepare(region, id, stage)?;
        let out = self.points.brn(self.frame, &pts, region)?;
        Ok(self.cfg.codec.decode_box(&out, region)?)
    }

    fn score(&self, seed: &SeedRegion) -> Result<ScoredProposal, PipelineError> {
        let (objectness, location) = self.rpn(&seed.region, seed.id, 0)?;
        Ok(ScoredProposal {
            seed: *seed,
            objectness,
            location,
        })
    }

    /// Stages (c) and (d) for a proposal that passed the objectness filter.
    fn refine(&self, prop: &ScoredProposal) -> Result<Option<Detection>, PipelineError> {
        let id = prop.seed.id;
        let threshold = self.cfg.thresholds.objectness;
        let region = prop.seed.region;
        let (box3d, objectness) = match self.cfg.mode {
            PipelineMode::SingleStage => (self.brn(&region, id, 1)?, prop.objectness),
            PipelineMode::SingleStageTwice => {
                let first = self.brn(&region, id, 1)?;
                let again = region.recentered(first.center());
                let (obj, _) = self.rpn(&again, id, 2)?;
                if obj < threshold {
                    return Ok(None);
                }
                (self.brn(&again, id, 3)?, obj)
            }
            PipelineMode::RpnBrnBrn => {
                let first = self.brn(&region.recentered(prop.location), id, 1)?;
                (self.brn(&region.recentered(first.center()), id, 2)?, prop.objectness)
            }
        };
        let projected = project_box(&box3d, &self.frame.calib.p2)?;
        Ok(Some(Detection {
            box3d,
            box2d_source: prop.seed.source.box2d,
            objectness,
            confidence: iou_2d(&prop.seed.source.box2d, &projected),
            provenance: vec![id],
        }))
    }
}

/// Stages (a) and (b) without the objectness filter. Seeds whose cylinder is
/// empty or whose prediction fails are dropped.
pub fn score_proposals(
    frame: &FrameData,
    mono: &dyn MonocularPredictor,
    points: &dyn PointPredictor,
    cfg: &DetectorConfig,
) -> Result<Vec<ScoredProposal>, PipelineError> {
    let seeds = seed_regions(frame, mono, cfg)?;
    let ctx = FrameContext::new(frame, points, cfg)?;
    Ok(seeds
        .par_iter()
        .map(|s| ctx.score(s))
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|r| r.map_err(|e| log::debug!("{}: proposal dropped: {e}", frame.frame_id)).ok())
        .collect())
}

/// Full detection on one frame.
pub fn detect_frame(
    frame: &FrameData,
    mono: &dyn MonocularPredictor,
    points: &dyn PointPredictor,
    cfg: &DetectorConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let proposals = score_proposals(frame, mono, points, cfg)?;
    let ctx = FrameContext::new(frame, points, cfg)?;
    let dets: Vec<Detection> = proposals
        .par_iter()
        .filter(|p| p.objectness >= cfg.thresholds.objectness)
        .map(|p| ctx.refine(p))
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|r| match r {
            Ok(d) => d,
            Err(e) => {
                log::debug!("{}: proposal dropped: {e}", frame.frame_id);
                None
            }
        })
        .collect();
    Ok(nms_bev(&dets, cfg.thresholds.nms_bev))
}

/// Greedy suppression by descending confidence; a detection is dropped when
/// its BEV IoU with an already kept one exceeds `threshold`. Ties keep input order.
pub fn nms_bev(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_bev(&dets[k].box3d, &dets[i].box3d) <= threshold) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// One line per detection: frame id, class, 2D box, height, width, length,
/// bottom-center location, heading, objectness and confidence.
pub fn format_detections(frame_id: &str, dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| {
            let label = format_label_line("Car", 0.0, 0, 0.0, &d.box2d_source, &d.box3d);
            let fields: Vec<&str> = label.split_whitespace().collect();
            format!(
                "{} {} {} {} {:.6} {:.6}\n",
                frame_id,
                fields[0],
                fields[4..8].join(" "),
                fields[8..15].join(" "),
                d.objectness,
                d.confidence
            )
        })
        .collect()
}

/// A detection line read back from [`format_detections`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub class_name: String,
    pub box2d: Box2D,
    pub box3d: Box3D,
    pub objectness: f64,
    pub confidence: f64,
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>, PipelineError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 15 {
                return Err(PipelineError::InvalidParameter(format!(
                    "detection line {}: expected 15 fields, found {}",
                    n + 1,
                    t.len()
                )));
            }
            let v = t[2..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| PipelineError::InvalidParameter(format!("detection line {}: {e}", n + 1)))?;
            let dims = Dims::new(v[5], v[4], v[6])?;
            let center = Point3::new(v[7], v[8] - dims.h / 2.0, v[9]);
            Ok(DetectionRecord {
                frame_id: t[0].to_string(),
                class_name: t[1].to_string(),
                box2d: Box2D::new(v[0], v[1], v[2], v[3])?,
                box3d: Box3D::new(center, dims, v[10])?,
                objectness: v[11],
                confidence: v[12],
            })
        })
        .collect()
}

/// Convenience for callers that hold clouds in the camera frame.
pub fn camera_cloud(points: Vec<LidarPoint>) -> Result<PointCloud, PipelineError> {
    Ok(PointCloud::new(CloudFrame::Camera, points)?)
}
