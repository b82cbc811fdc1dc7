use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;
use roarnet_core::codec::{fit_size_clusters, BoxCodec};
use roarnet_core::eval::{
    average_precision, desync_frame, desync_robustness_curve, match_detections, sweep_objectness, sweep_scatter,
    DesyncMetric, ScoredMatches, SweepTable,
};
use roarnet_core::geom::{Box2D, Dims, ProjectionMatrix};
use roarnet_core::kitti::{
    parse_calibration, DatasetLayout, Difficulty, FrameData, LoadOptions, SplitIndex,
};
use roarnet_core::mono::{geometric_agreement_search, spatial_scatter, SolverConfig};
use roarnet_core::pipeline::{detect_frame, format_detections, OracleMonocular, OraclePointPredictor, PipelineError};
use roarnet_core::rng::derive_seed;
use roarnet_core::synth::{synth_split, SynthConfig};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Classify, DesyncMetricArg, Failure, SolvePoseArgs, SweepKind};

// stdout writes that tolerate a closed pipe
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Kitti(_) => Failure::Data(e.into()),
        other => Failure::Internal(other.into()),
    }
}

/// `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_values(text: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (a, b, d): (f64, f64, f64) = (start.trim().parse()?, stop.trim().parse()?, step.trim().parse()?);
            if !(d > 0.0) || b < a {
                bail!("range {text:?} needs start <= stop and a positive step");
            }
            let n = ((b - a) / d + 1e-9).floor() as usize;
            // round away the drift of repeated addition
            Ok((0..=n).map(|i| ((a + i as f64 * d) * 1e9).round() / 1e9).collect())
        }
        [_] => text
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("{v:?}: {e}")))
            .collect(),
        _ => bail!("expected start:stop:step or a comma list, found {text:?}"),
    }
}

fn split_list(cfg: &RunConfig, root: &Path) -> Result<String, Failure> {
    let direct = PathBuf::from(&cfg.split);
    let path = if direct.is_file() {
        direct
    } else {
        root.join("ImageSets").join(format!("{}.txt", cfg.split))
    };
    fs::read_to_string(&path)
        .with_context(|| format!("reading split list {}", path.display()))
        .data()
}

fn load_frames(cfg: &RunConfig) -> Result<Vec<FrameData>, Failure> {
    let root = cfg.dataset_root().usage()?;
    let list = split_list(cfg, root)?;
    let index = SplitIndex::new(&list, root, LoadOptions::default()).data()?;
    let mut frames = Vec::with_capacity(index.ids.len());
    let mut failed = 0;
    for (id, r) in index.ids.iter().zip(index.load_each()) {
        match r {
            Ok(f) => frames.push(f),
            Err(e) => {
                log::error!("frame {id}: {e}");
                failed += 1;
            }
        }
    }
    if frames.is_empty() {
        return Err(Failure::Data(anyhow!("none of the {} listed frames could be loaded", index.ids.len())));
    }
    if failed > 0 {
        log::warn!("skipping {failed} of {} frames", index.ids.len());
    }
    log::info!("loaded {} frames from {}", frames.len(), root.display());
    Ok(frames)
}

/// Creates the output directory and records the effective configuration there.
fn prepare_output(cfg: &RunConfig) -> Result<&Path, Failure> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .data()?;
    fs::write(dir.join("effective_config.toml"), cfg.to_toml())
        .context("writing effective_config.toml")
        .data()?;
    Ok(dir)
}

fn oracles(cfg: &RunConfig) -> Result<(OracleMonocular, OraclePointPredictor), Failure> {
    let mono = OracleMonocular::new(cfg.oracle).usage()?;
    let points = OraclePointPredictor::new(cfg.oracle, BoxCodec::default()).usage()?;
    Ok((mono, points))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .data()
}

pub fn synth(
    cfg: &RunConfig,
    dest: Option<PathBuf>,
    count: usize,
    min_cars: usize,
    max_cars: usize,
) -> Result<(), Failure> {
    if min_cars == 0 || max_cars < min_cars {
        return Err(Failure::Usage(anyhow!("need 1 <= --min-cars <= --max-cars")));
    }
    let dest = match dest {
        Some(d) => d,
        None => cfg.dataset_root().usage()?.to_path_buf(),
    };
    let synth = SynthConfig {
        min_cars,
        max_cars,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let frames = synth_split(count, &synth);
    let layout = DatasetLayout::new(&dest);
    for f in &frames {
        layout.write_frame(f).data()?;
    }
    let sets = dest.join("ImageSets");
    fs::create_dir_all(&sets).data()?;
    let list: String = frames.iter().map(|f| format!("{}\n", f.frame_id)).collect();
    write_text(&sets.join(format!("{}.txt", cfg.split)), &list)?;
    let cars: usize = frames.iter().map(|f| f.labels.len()).sum();
    outln!("wrote {} frames with {cars} cars to {}", frames.len(), dest.display());
    Ok(())
}

pub fn inspect(cfg: &RunConfig, as_json: bool) -> Result<(), Failure> {
    let frames = load_frames(cfg)?;
    let mut by_difficulty = [0usize; 4];
    for l in frames.iter().flat_map(|f| &f.labels) {
        by_difficulty[l.difficulty as usize] += 1;
    }
    let cars: usize = by_difficulty.iter().sum();
    let points: usize = frames.iter().map(|f| f.cloud.len()).sum();
    let mean_points = if frames.is_empty() { 0.0 } else { points as f64 / frames.len() as f64 };
    let names = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard, Difficulty::Ignored];
    if as_json {
        let counts: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(by_difficulty)
            .map(|(d, n)| (d.as_str().to_string(), json!(n)))
            .collect();
        let doc = json!({
            "split": cfg.split,
            "frames": frames.len(),
            "cars": cars,
            "difficulty": counts,
            "mean_points_per_frame": mean_points,
        });
        outln!("{}", serde_json::to_string_pretty(&doc).internal()?);
    } else {
        outln!("split      {}", cfg.split);
        outln!("frames     {}", frames.len());
        outln!("cars       {cars}");
        for (d, n) in names.iter().zip(by_difficulty) {
            outln!("  {:<9}{n}", d.as_str());
        }
        outln!("points     {mean_points:.1} per frame");
    }
    Ok(())
}

fn triple(text: &str, what: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| anyhow!("--{what}: {e}"))
        .usage()
}

pub fn solve_pose(cfg: &RunConfig, args: &SolvePoseArgs) -> Result<(), Failure> {
    let (box2d, dims, yaw, p2, truth) = if let Some(id) = &args.frame {
        let layout = DatasetLayout::new(cfg.dataset_root().usage()?);
        let frame = layout.load_frame(id, &LoadOptions::default()).data()?;
        let label = frame.labels.get(args.object).ok_or_else(|| {
            Failure::Usage(anyhow!("frame {id} has {} cars; --object {} is out of range", frame.labels.len(), args.object))
        })?;
        let b = label.box3d;
        (label.bbox2d, b.dims(), b.yaw(), frame.calib.p2, Some(b.center()))
    } else {
        let (Some(bx), Some(dm), Some(yaw)) = (&args.box2d, &args.dims, args.yaw) else {
            return Err(Failure::Usage(anyhow!("pass --box, --dims and --yaw, or --frame")));
        };
        let b = triple(bx, "box")?;
        let d = triple(dm, "dims")?;
        if b.len() != 4 || d.len() != 3 {
            return Err(Failure::Usage(anyhow!("--box takes 4 values and --dims 3")));
        }
        let box2d = Box2D::new(b[0], b[1], b[2], b[3]).usage()?;
        let dims = Dims::new(d[0], d[1], d[2]).usage()?;
        let p2: ProjectionMatrix = match &args.calib {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .data()?;
                parse_calibration(&text).data()?.p2
            }
            None => return Err(Failure::Usage(anyhow!("--calib is required with --box"))),
        };
        (box2d, dims, yaw, p2, None)
    };
    let solver = SolverConfig {
        configurations: cfg.configurations,
        ..SolverConfig::default()
    };
    let est = geometric_agreement_search(&box2d, &dims, yaw, &p2, &solver).data()?;
    let scatter = spatial_scatter(&est, &cfg.scatter().usage()?, &p2).data()?;
    let c = est.solved_center;
    if args.json {
        let mut doc = json!({
            "center": [c.x, c.y, c.z],
            "configuration": est.best_config.to_string(),
            "configuration_index": est.best_config.index(),
            "agreement": est.agreement,
            "residual_px": est.residual_rms,
            "seeds": scatter.seeds.iter().map(|s| [s.x, s.y, s.z]).collect::<Vec<_>>(),
        });
        if let Some(t) = truth {
            doc["truth"] = json!([t.x, t.y, t.z]);
            doc["error_m"] = json!((c - t).norm());
        }
        outln!("{}", serde_json::to_string_pretty(&doc).internal()?);
    } else {
        outln!("center         {:.4} {:.4} {:.4}", c.x, c.y, c.z);
        outln!("configuration  {} (#{})", est.best_config, est.best_config.index());
        outln!("agreement      {:.6}", est.agreement);
        outln!("residual       {:.4} px", est.residual_rms);
        outln!("seeds          {}", scatter.seeds.len());
        if let Some(t) = truth {
            outln!("error          {:.4} m", (c - t).norm());
        }
    }
    Ok(())
}

pub fn detect(cfg: &RunConfig) -> Result<(), Failure> {
    let mut frames = load_frames(cfg)?;
    if let Some(d) = &cfg.desync {
        frames = frames
            .iter()
            .map(|f| desync_frame(f, d))
            .collect::<Result<_, _>>()
            .map_err(pipeline_failure)?;
    }
    let dir = prepare_output(cfg)?;
    let (mono, points) = oracles(cfg)?;
    let detector = cfg.detector().usage()?;
    let results: Vec<_> = frames
        .par_iter()
        .map(|f| detect_frame(f, &mono, &points, &detector))
        .collect();
    let mut last_error = None;
    let mut kept = Vec::with_capacity(frames.len());
    for (f, r) in frames.iter().zip(results) {
        match r {
            Ok(dets) => kept.push((f, dets)),
            Err(e) => {
                log::error!("frame {}: {e}", f.frame_id);
                last_error = Some(e);
            }
        }
    }
    if kept.is_empty() {
        if let Some(e) = last_error {
            return Err(pipeline_failure(e));
        }
    }

    let det_dir = dir.join("detections");
    fs::create_dir_all(&det_dir).data()?;
    let mut scored = ScoredMatches::default();
    let (mut tp, mut fn_, mut count) = (0, 0, 0);
    for (f, dets) in &kept {
        write_text(&det_dir.join(format!("{}.txt", f.frame_id)), &format_detections(&f.frame_id, dets))?;
        let boxes: Vec<_> = dets.iter().map(|d| d.box3d).collect();
        let m = match_detections(&boxes, &f.labels, &cfg.eval);
        tp += m.tp;
        fn_ += m.fn_;
        count += dets.len();
        let with_scores: Vec<_> = dets.iter().map(|d| (d.box3d, d.confidence)).collect();
        scored.add_frame(&with_scores, &f.labels, &cfg.eval);
    }
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let ap = average_precision(&scored, cfg.eval.ap_mode).ap;
    let summary = json!({
        "split": cfg.split,
        "frames": kept.len(),
        "ground_truth": tp + fn_,
        "detections": count,
        "true_positives": tp,
        "recall": recall,
        "ap": ap,
        "ap_mode": format!("{:?}", cfg.eval.ap_mode).to_lowercase(),
        "difficulty": cfg.eval.difficulty.as_str(),
        "iou_threshold": cfg.eval.iou_threshold,
        "mode": cfg.mode.as_str(),
    });
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).internal()?)?;
    outln!(
        "{} frames, {} cars ({}), {count} detections",
        kept.len(),
        tp + fn_,
        cfg.eval.difficulty.as_str()
    );
    outln!("recall {recall:.4}  AP {ap:.4} at IoU {}", cfg.eval.iou_threshold);
    Ok(())
}

pub fn sweep(cfg: &RunConfig, kind: &SweepKind) -> Result<(), Failure> {
    let frames = load_frames(cfg)?;
    let dir = prepare_output(cfg)?;
    let (mono, points) = oracles(cfg)?;
    let detector = cfg.detector().usage()?;
    let (name, table): (&str, SweepTable) = match kind {
        SweepKind::Scatter { values } => {
            let s = parse_values(values).usage()?;
            if s.iter().any(|v| !(0.0..1.0).contains(v)) {
                return Err(Failure::Usage(anyhow!("scatter ratios must lie in [0, 1)")));
            }
            let t = sweep_scatter(&frames, &mono, &points, &detector, &s, cfg.scatter_m).map_err(pipeline_failure)?;
            ("scatter", t)
        }
        SweepKind::Objectness { values } => {
            let t = parse_values(values).usage()?;
            ("objectness", sweep_objectness(&frames, &mono, &points, &detector, &t).map_err(pipeline_failure)?)
        }
        SweepKind::Desync { values, seeds, metric } => {
            let mags = parse_values(values).usage()?;
            if mags.iter().any(|m| *m < 0.0) {
                return Err(Failure::Usage(anyhow!("desync magnitudes must be non-negative")));
            }
            let draws: Vec<u64> = (0..(*seeds).max(1)).map(|i| derive_seed(cfg.seed, &[i])).collect();
            let metric = match metric {
                DesyncMetricArg::Recall => DesyncMetric::Recall,
                DesyncMetricArg::Ap => DesyncMetric::Ap,
            };
            let t = desync_robustness_curve(&frames, &mono, &points, &detector, &cfg.eval, &mags, &draws, metric)
                .map_err(pipeline_failure)?;
            ("desync", t)
        }
    };
    let csv = table.to_csv();
    let path = dir.join(format!("sweep_{name}.csv"));
    write_text(&path, &csv)?;
    out!("{csv}");
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn fit_sizes(cfg: &RunConfig, clusters: usize) -> Result<(), Failure> {
    if clusters == 0 {
        return Err(Failure::Usage(anyhow!("--clusters must be positive")));
    }
    let frames = load_frames(cfg)?;
    let dir = prepare_output(cfg)?;
    let labels: Vec<_> = frames.iter().flat_map(|f| f.labels.iter().cloned()).collect();
    outln!("n_c,sse");
    let mut fitted = None;
    for k in 1..=clusters {
        let (c, report) = fit_size_clusters(&labels, k, cfg.seed).data()?;
        outln!("{k},{}", report.final_sse());
        fitted = Some(c);
    }
    let fitted = fitted.expect("at least one cluster count");
    let path = dir.join("size_clusters.txt");
    write_text(&path, &fitted.to_text())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_ranges() {
        let v = parse_values("0:0.8:0.1").unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(v[3], 0.3);
        assert_eq!(v[8], 0.8);
        assert_eq!(parse_values("0.05:0.5:0.05").unwrap().len(), 10);
        assert_eq!(parse_values("0.1, 0.4,0.2").unwrap(), [0.1, 0.4, 0.2]);
        assert_eq!(parse_values("2").unwrap(), [2.0]);
        assert!(parse_values("1:0:0.1").is_err());
        assert!(parse_values("0:1:0").is_err());
        assert!(parse_values("a,b").is_err());
    }
}
