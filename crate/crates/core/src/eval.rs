//! Detection evaluation, proposal recall, parameter sweeps and the sensor
//! desynchronization simulator.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rayon::prelude::*;

use crate::geom::{iou_3d, iou_bev, Box3D};
use crate::kitti::{Difficulty, FrameData, GroundTruthLabel};
use crate::mono::ScatterParams;
use crate::pipeline::{
    detect_frame, score_proposals, seed_regions, DetectorConfig, MonocularPredictor, PipelineError, PointPredictor,
};
use crate::rng::{hash_str, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    #[default]
    R11,
    R40,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMetric {
    #[default]
    Iou3d,
    IouBev,
}

impl MatchMetric {
    pub fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            MatchMetric::Iou3d => iou_3d(a, b),
            MatchMetric::IouBev => iou_bev(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub difficulty: Difficulty,
    pub ap_mode: ApMode,
    pub match_metric: MatchMetric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.7,
            difficulty: Difficulty::Moderate,
            ap_mode: ApMode::R11,
            match_metric: MatchMetric::Iou3d,
        }
    }
}

impl EvalConfig {
    /// Whether a label counts at the active difficulty.
    pub fn counts(&self, gt: &GroundTruthLabel) -> bool {
        gt.difficulty != Difficulty::Ignored && gt.difficulty <= self.difficulty
    }
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive(usize),
    /// Overlaps only labels outside the active difficulty; not scored.
    Ignored(usize),
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    pub outcomes: Vec<MatchOutcome>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy one-to-one matching. `dets` must be sorted by descending score.
/// Each detection takes the unmatched counted label with the highest IoU at
/// or above the threshold; otherwise it is absorbed by any overlapping
/// uncounted label, or becomes a false positive.
pub fn match_detections(dets: &[Box3D], gts: &[GroundTruthLabel], cfg: &EvalConfig) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        let mut ignored = None;
        for (j, gt) in gts.iter().enumerate() {
            let iou = cfg.match_metric.iou(d, &gt.box3d);
            if iou < cfg.iou_threshold {
                continue;
            }
            if !cfg.counts(gt) {
                ignored.get_or_insert(j);
            } else if !taken[j] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let outcome = match (best, ignored) {
            (Some((j, _)), _) => {
                taken[j] = true;
                out.tp += 1;
                MatchOutcome::TruePositive(j)
            }
            (None, Some(j)) => MatchOutcome::Ignored(j),
            (None, None) => {
                out.fp += 1;
                MatchOutcome::FalsePositive
            }
        };
        out.outcomes.push(outcome);
    }
    out.fn_ = gts
        .iter()
        .zip(&taken)
        .filter(|(g, t)| cfg.counts(g) && !**t)
        .count();
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    /// `(recall, precision)` after each scored detection, by descending score.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Scored detections pooled over a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredMatches {
    /// `(score, is_true_positive)` for every non-ignored detection.
    pub scored: Vec<(f64, bool)>,
    pub gt_count: usize,
}

impl ScoredMatches {
    pub fn add_frame(&mut self, dets: &[(Box3D, f64)], gts: &[GroundTruthLabel], cfg: &EvalConfig) {
        let mut sorted = dets.to_vec();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
        let boxes: Vec<Box3D> = sorted.iter().map(|d| d.0).collect();
        let m = match_detections(&boxes, gts, cfg);
        for ((_, score), o) in sorted.iter().zip(&m.outcomes) {
            match o {
                MatchOutcome::TruePositive(_) => self.scored.push((*score, true)),
                MatchOutcome::FalsePositive => self.scored.push((*score, false)),
                MatchOutcome::Ignored(_) => {}
            }
        }
        self.gt_count += gts.iter().filter(|g| cfg.counts(g)).count();
    }

    pub fn merge(mut self, other: ScoredMatches) -> ScoredMatches {
        self.scored.extend(other.scored);
        self.gt_count += other.gt_count;
        self
    }
}

fn recall_levels(mode: ApMode) -> Vec<f64> {
    match mode {
        ApMode::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
        ApMode::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
    }
}

/// Interpolated average precision: the mean, over the mode's recall levels,
/// of the best precision reached at or beyond each level.
pub fn average_precision(matches: &ScoredMatches, mode: ApMode) -> PrCurve {
    let mut scored = matches.scored.clone();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = scored
        .iter()
        .enumerate()
        .map(|(i, (_, hit))| {
            tp += *hit as usize;
            let recall = if matches.gt_count == 0 {
                0.0
            } else {
                tp as f64 / matches.gt_count as f64
            };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let ap = interpolated_ap(&points, mode);
    PrCurve { points, ap }
}

pub fn interpolated_ap(points: &[(f64, f64)], mode: ApMode) -> f64 {
    let levels = recall_levels(mode);
    let sum: f64 = levels
        .iter()
        .map(|&r| {
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    sum / levels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecallReport {
    pub captured: usize,
    pub gt_count: usize,
    pub candidates: usize,
}

impl RecallReport {
    /// Fraction of labels with a qualifying candidate; 0 when there are no labels.
    pub fn recall(&self) -> f64 {
        if self.gt_count == 0 {
            0.0
        } else {
            self.captured as f64 / self.gt_count as f64
        }
    }

    pub fn per_gt(&self) -> f64 {
        if self.gt_count == 0 {
            0.0
        } else {
            self.candidates as f64 / self.gt_count as f64
        }
    }

    pub fn merge(self, o: RecallReport) -> RecallReport {
        RecallReport {
            captured: self.captured + o.captured,
            gt_count: self.gt_count + o.gt_count,
            candidates: self.candidates + o.candidates,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RecallCriterion {
    /// A proposal center within this ground-plane distance of the label center.
    Distance(f64),
    /// A detection box at or above this IoU with the label.
    Iou { threshold: f64, metric: MatchMetric },
}

/// A proposal location or a detected box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Candidate {
    Point(Point3<f64>),
    Box(Box3D),
}

impl Candidate {
    fn qualifies(&self, gt: &Box3D, criterion: &RecallCriterion) -> bool {
        match (criterion, self) {
            (RecallCriterion::Distance(d), c) => {
                let p = match c {
                    Candidate::Point(p) => *p,
                    Candidate::Box(b) => b.center(),
                };
                let g = gt.center();
                (p.x - g.x).hypot(p.z - g.z) <= *d
            }
            (RecallCriterion::Iou { threshold, metric }, Candidate::Box(b)) => metric.iou(b, gt) >= *threshold,
            (RecallCriterion::Iou { .. }, Candidate::Point(_)) => false,
        }
    }
}

pub fn recall_at(candidates: &[Candidate], gts: &[Box3D], criterion: &RecallCriterion) -> RecallReport {
    RecallReport {
        captured: gts
            .iter()
            .filter(|g| candidates.iter().any(|c| c.qualifies(g, criterion)))
            .count(),
        gt_count: gts.len(),
        candidates: candidates.len(),
    }
}

fn gt_boxes(frame: &FrameData) -> Vec<Box3D> {
    frame.labels.iter().map(|l| l.box3d).collect()
}

/// A three-column table with a header row, written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }
}

/// Proposal recall and proposals per label as the scatter ratio varies.
/// Proposals are the seed regions surviving `cfg.thresholds.objectness`;
/// a threshold of zero counts every seed without running the proposal network.
pub fn sweep_scatter(
    frames: &[FrameData],
    mono: &dyn MonocularPredictor,
    points: &dyn PointPredictor,
    cfg: &DetectorConfig,
    s_values: &[f64],
    m: f64,
) -> Result<SweepTable, PipelineError> {
    let criterion = RecallCriterion::Distance(cfg.region.radius);
    let mut rows = Vec::new();
    for &s in s_values {
        let run = DetectorConfig {
            scatter: ScatterParams::with_s(s, m)?,
            ..cfg.clone()
        };
        let report = frames
            .par_iter()
            .map(|f| {
                let centers: Vec<Candidate> = if run.thresholds.objectness <= 0.0 {
                    seed_regions(f, mono, &run)?
                        .iter()
                        .map(|r| Candidate::Point(r.region.center()))
                        .collect()
                } else {
                    score_proposals(f, mono, points, &run)?
                        .iter()
                        .filter(|p| p.objectness >= run.thresholds.objectness)
                        .map(|p| Candidate::Point(p.seed.region.center()))
                        .collect()
                };
                Ok(recall_at(&centers, &gt_boxes(f), &criterion))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?
            .into_iter()
            .fold(RecallReport::default(), RecallReport::merge);
        rows.push(vec![s, report.recall(), report.per_gt()]);
    }
    Ok(SweepTable {
        header: vec!["s", "recall", "proposals_per_gt"],
        rows,
    })
}

/// Proposal recall as the objectness threshold varies; proposals are scored once.
pub fn sweep_objectness(
    frames: &[FrameData],
    mono: &dyn MonocularPredictor,
    points: &dyn PointPredictor,
    cfg: &DetectorConfig,
    thresholds: &[f64],
) -> Result<SweepTable, PipelineError> {
    let criterion = RecallCriterion::Distance(cfg.region.radius);
    let scored = frames
        .par_iter()
        .map(|f| score_proposals(f, mono, points, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = thresholds
        .iter()
        .map(|&t| {
            let report = frames
                .iter()
                .zip(&scored)
                .map(|(f, props)| {
                    let kept: Vec<Candidate> = props
                        .iter()
                        .filter(|p| p.objectness >= t)
                        .map(|p| Candidate::Point(p.seed.region.center()))
                        .collect();
                    recall_at(&kept, &gt_boxes(f), &criterion)
                })
                .fold(RecallReport::default(), RecallReport::merge);
            vec![t, report.recall(), report.per_gt()]
        })
        .collect();
    Ok(SweepTable {
        header: vec!["threshold", "recall", "proposals_per_gt"],
        rows,
    })
}

/// Bounds of the random rigid shift between the point cloud and the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesyncConfig {
    /// Per-axis bound on the two ground-plane axes.
    pub max_xy: f64,
    /// Bound on the vertical axis.
    pub max_z_vertical: f64,
    pub rng_seed: u64,
}

impl Default for DesyncConfig {
    fn default() -> Self {
        DesyncConfig {
            max_xy: 0.8,
            max_z_vertical: 0.2,
            rng_seed: 0,
        }
    }
}

impl DesyncConfig {
    /// Ground-plane bound `magnitude`, vertical bound a quarter of it.
    pub fn with_magnitude(magnitude: f64, rng_seed: u64) -> Self {
        DesyncConfig {
            max_xy: magnitude,
            max_z_vertical: 0.25 * magnitude,
            rng_seed,
        }
    }

    /// The camera-frame shift for one frame: x and z on the ground, y vertical.
    pub fn draw(&self, frame_id: &str) -> Vector3<f64> {
        let mut rng = rng_for(self.rng_seed, &[hash_str(frame_id)]);
        let mut uniform = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let x = uniform(self.max_xy);
        let y = uniform(self.max_z_vertical);
        let z = uniform(self.max_xy);
        Vector3::new(x, y, z)
    }
}

/// Shifts every point and every 3D label by `delta` (camera frame). Image
/// boxes and calibration are left alone; the cloud is returned in the camera frame.
pub fn translate_frame(frame: &FrameData, delta: &Vector3<f64>) -> Result<FrameData, PipelineError> {
    let cloud = frame.camera_cloud()?.translated(delta);
    let labels = frame
        .labels
        .iter()
        .map(|l| GroundTruthLabel {
            box3d: l.box3d.translated(delta),
            ..l.clone()
        })
        .collect();
    Ok(FrameData {
        frame_id: frame.frame_id.clone(),
        calib: frame.calib.clone(),
        labels,
        cloud,
        image_size: frame.image_size,
    })
}

pub fn desync_frame(frame: &FrameData, cfg: &DesyncConfig) -> Result<FrameData, PipelineError> {
    translate_frame(frame, &cfg.draw(&frame.frame_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DesyncMetric {
    #[default]
    Recall,
    Ap,
}

/// Detection recall at the configured IoU, or AP, for a set of frames.
pub fn evaluate_frames(
    frames: &[FrameData],
    mono: &dyn MonocularPredictor,
    points: &dyn PointPredictor,
    cfg: &DetectorConfig,
    eval: &EvalConfig,
    metric: DesyncMetric,
) -> Result<f64, PipelineError> {
    let per_frame = frames
        .par_iter()
        .map(|f| Ok((f, detect_frame(f, mono, points, cfg)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(match metric {
        DesyncMetric::Recall => {
            let criterion = RecallCriterion::Iou {
                threshold: eval.iou_threshold,
                metric: eval.match_metric,
            };
            per_frame
                .iter()
                .map(|(f, dets)| {
                    let c: Vec<Candidate> = dets.iter().map(|d| Candidate::Box(d.box3d)).collect();
                    recall_at(&c, &gt_boxes(f), &criterion)
                })
                .fold(RecallReport::default(), RecallReport::merge)
                .recall()
        }
        DesyncMetric::Ap => {
            let pooled = per_frame.iter().fold(ScoredMatches::default(), |mut acc, (f, dets)| {
                let scored: Vec<(Box3D, f64)> = dets.iter().map(|d| (d.box3d, d.confidence)).collect();
                acc.add_frame(&scored, &f.labels, eval);
                acc
            });
            average_precision(&pooled, eval.ap_mode).ap
        }
    })
}

/// Metric versus desynchronization magnitude, averaged over `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn desync_robustness_curve(
    frames: &[FrameData],
    mono: &dyn MonocularPredictor,
    points: &dyn PointPredictor,
    cfg: &DetectorConfig,
    eval: &EvalConfig,
    magnitudes: &[f64],
    seeds: &[u64],
    metric: DesyncMetric,
) -> Result<SweepTable, PipelineError> {
    let mut rows = Vec::new();
    for &mag in magnitudes {
        let mut total = 0.0;
        for &seed in seeds {
            let desync = DesyncConfig::with_magnitude(mag, seed);
            let shifted = frames
                .iter()
                .map(|f| desync_frame(f, &desync))
                .collect::<Result<Vec<_>, _>>()?;
            total += evaluate_frames(&shifted, mono, points, cfg, eval, metric)?;
        }
        rows.push(vec![mag, total / seeds.len().max(1) as f64]);
    }
    Ok(SweepTable {
        header: vec![
            "discrepancy_m",
            match metric {
                DesyncMetric::Recall => "recall",
                DesyncMetric::Ap => "ap",
            },
        ],
        rows,
    })
}
