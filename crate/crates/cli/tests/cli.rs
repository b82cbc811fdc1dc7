use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn roarnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roarnet"))
        .current_dir(dir)
        .env_remove("ROARNET_DATASET_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = roarnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn dataset(frames: &str) -> TempDir {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["--seed", "5", "synth", "ds", "--frames", frames]);
    tmp
}

#[test]
fn synth_detect_sweep_fit() {
    let tmp = dataset("4");
    let d = tmp.path();
    assert_eq!(fs::read_to_string(d.join("ds/ImageSets/val.txt")).unwrap().lines().count(), 4);

    let summary = ok(d, &["--dataset-root", "ds", "inspect", "--json"]);
    let doc: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(doc["frames"], 4);

    ok(d, &["--dataset-root", "ds", "--output-dir", "out", "detect"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["recall"], 1.0);
    assert_eq!(fs::read_dir(d.join("out/detections")).unwrap().count(), 4);
    assert!(d.join("out/effective_config.toml").is_file());

    let csv = ok(d, &["--dataset-root", "ds", "--output-dir", "out", "sweep", "scatter", "--values", "0,0.3"]);
    assert_eq!(csv.lines().next(), Some("s,recall,proposals_per_gt"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(fs::read_to_string(d.join("out/sweep_scatter.csv")).unwrap(), csv);

    let csv = ok(d, &["--dataset-root", "ds", "--output-dir", "out", "sweep", "objectness", "--values", "0:1:0.5"]);
    assert_eq!(csv.lines().count(), 4);

    let fit = ok(d, &["--dataset-root", "ds", "--output-dir", "out", "fit-sizes", "--clusters", "2"]);
    let sse: Vec<f64> = fit.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(sse.len(), 2);
    assert!(sse[1] <= sse[0]);
    assert_eq!(fs::read_to_string(d.join("out/size_clusters.txt")).unwrap().lines().count(), 2);
}

#[test]
fn desync_sweep_has_a_row_per_magnitude() {
    let tmp = dataset("2");
    let csv = ok(
        tmp.path(),
        &["--dataset-root", "ds", "--output-dir", "out", "sweep", "desync", "--seeds", "1"],
    );
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.starts_with("discrepancy_m,recall\n"));
}

#[test]
fn solve_pose_from_a_frame_is_exact() {
    let tmp = dataset("1");
    let d = tmp.path();
    let id = fs::read_to_string(d.join("ds/ImageSets/val.txt")).unwrap().lines().next().unwrap().to_string();
    let out = ok(d, &["--dataset-root", "ds", "solve-pose", "--frame", &id, "--json"]);
    let doc: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(doc["error_m"].as_f64().unwrap() < 1e-6);

    let label = fs::read_to_string(d.join(format!("ds/label_2/{id}.txt"))).unwrap();
    let f: Vec<&str> = label.lines().next().unwrap().split_whitespace().collect();
    let calib = format!("ds/calib/{id}.txt");
    let bbox = f[4..8].join(",");
    let dims = format!("{},{},{}", f[9], f[8], f[10]);
    let args = ["solve-pose", "--calib", &calib, "--box", &bbox, "--dims", &dims, "--yaw", f[14]];
    let text = ok(d, &args);
    let agreement: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("agreement"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(agreement >= 0.99);

    let json: serde_json::Value = serde_json::from_str(&ok(d, &[&args[..], &["--json"]].concat())).unwrap();
    assert!(json["agreement"].as_f64().unwrap() >= 0.99);
    let truth: Vec<f64> = [f[11], f[12], f[13]].iter().map(|v| v.parse().unwrap()).collect();
    let center = json["center"].as_array().unwrap();
    let bottom = center[1].as_f64().unwrap() + f[8].parse::<f64>().unwrap() / 2.0;
    assert!((center[0].as_f64().unwrap() - truth[0]).abs() < 1e-6);
    assert!((bottom - truth[1]).abs() < 1e-6);
    assert!((center[2].as_f64().unwrap() - truth[2]).abs() < 1e-6);
}

#[test]
fn every_mode_writes_detections() {
    let tmp = dataset("3");
    let d = tmp.path();
    for mode in ["single_stage", "single_stage_twice", "rpn_brn_brn"] {
        ok(d, &["--dataset-root", "ds", "--output-dir", mode, "--mode", mode, "detect"]);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(mode).join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["mode"], mode);
        for f in fs::read_dir(d.join(mode).join("detections")).unwrap() {
            for line in fs::read_to_string(f.unwrap().path()).unwrap().lines() {
                let fields: Vec<&str> = line.split_whitespace().collect();
                assert_eq!(fields.len(), 15);
                assert_eq!(fields[1], "Car");
                assert!(fields[2..].iter().all(|v| v.parse::<f64>().is_ok()));
            }
        }
    }
}

#[test]
fn broken_frames_are_skipped() {
    let tmp = dataset("3");
    let d = tmp.path();
    fs::write(d.join("ds/label_2/000001.txt"), "Car 0 0 not-a-number\n").unwrap();
    ok(d, &["--dataset-root", "ds", "--output-dir", "out", "detect"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 2);
}

#[test]
fn seeded_runs_repeat() {
    let tmp = dataset("3");
    let d = tmp.path();
    let run = |out: &str| {
        ok(
            d,
            &["--dataset-root", "ds", "--output-dir", out, "--seed", "11", "--dims-noise", "0.1", "--center-noise", "0.2", "detect"],
        );
        fs::read_to_string(d.join(out).join("summary.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
    for f in fs::read_dir(d.join("a/detections")).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(
            fs::read(d.join("a/detections").join(&name)).unwrap(),
            fs::read(d.join("b/detections").join(&name)).unwrap()
        );
    }

    let other = TempDir::new().unwrap();
    ok(other.path(), &["--seed", "5", "synth", "ds", "--frames", "3"]);
    assert_eq!(
        fs::read(d.join("ds/label_2/000000.txt")).unwrap(),
        fs::read(other.path().join("ds/label_2/000000.txt")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let tmp = dataset("1");
    let d = tmp.path();
    fs::write(
        d.join("run.toml"),
        "[run]\nseed = 3\noutput_dir = \"from_file\"\n\n[dataset]\nroot = \"ds\"\n\n[scatter]\ns = 0.4\n",
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "--scatter-s", "0.2", "detect"]);
    let echoed: toml::Table = fs::read_to_string(d.join("from_file/effective_config.toml")).unwrap().parse().unwrap();
    assert_eq!(echoed["scatter"]["s"].as_float(), Some(0.2));
    assert_eq!(echoed["run"]["seed"].as_integer(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_roarnet"))
        .current_dir(d)
        .env("ROARNET_DATASET_ROOT", "ds")
        .args(["--output-dir", "env", "detect"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("env/summary.json").is_file());
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(roarnet(d, &["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(roarnet(d, &["detect"]).status.code(), Some(1));
    assert_eq!(roarnet(d, &["--scatter-s", "1.5", "--dataset-root", "x", "detect"]).status.code(), Some(1));
    fs::write(d.join("bad.toml"), "[scatter]\nwidth = 2\n").unwrap();
    assert_eq!(roarnet(d, &["--config", "bad.toml", "inspect"]).status.code(), Some(1));
    assert_eq!(roarnet(d, &["--dataset-root", "missing", "inspect"]).status.code(), Some(2));
    assert_eq!(roarnet(d, &["solve-pose", "--box", "1,2,3", "--dims", "1,1,1", "--yaw", "0"]).status.code(), Some(1));
    assert_eq!(
        roarnet(d, &["solve-pose", "--box", "500,170,700,260", "--dims", "1.6,1.5,3.9", "--yaw", "0"]).status.code(),
        Some(1)
    );
    assert_eq!(roarnet(d, &["--help"]).status.code(), Some(0));

    ok(d, &["synth", "ds", "--frames", "1"]);
    fs::write(d.join("ds/label_2/000000.txt"), "Car 0 0 not-a-number\n").unwrap();
    let out = roarnet(d, &["--dataset-root", "ds", "inspect"]);
    assert_eq!(out.status.code(), Some(2));
}
