use nalgebra::{Matrix3x4, Point3, Rotation3, Vector3};
use proptest::prelude::*;
use roarnet_core::geom::{Box2D, Box3D, Dims, ProjectionMatrix};
use roarnet_core::kitti::{
    assign_difficulty, camera_to_lidar, emit_calibration, emit_labels, emit_velodyne, lidar_to_camera,
    load_split, parse_calibration, parse_labels, parse_split_list, parse_velodyne, CalibrationSet, CloudFrame,
    DatasetLayout, Difficulty, GroundTruthLabel, KittiError, LidarPoint, LoadOptions, PointCloud,
};
use roarnet_core::synth::{synth_split, SynthConfig};

fn label() -> impl Strategy<Value = GroundTruthLabel> {
    (
        (0.0..1.0f64, 0u8..4, -3.1..3.1f64),
        (0.0..1000.0f64, 0.0..300.0f64, 1.0..200.0f64, 1.0..120.0f64),
        (-20.0..20.0f64, -1.0..2.5f64, 2.0..70.0f64),
        (1.0..2.5f64, 1.0..2.5f64, 2.0..6.0f64, -3.1..3.1f64),
    )
        .prop_map(|((t, o, a), (x, y, w, h), (cx, cy, cz), (dw, dh, dl, ry))| {
            GroundTruthLabel::new(
                "Car",
                t,
                o,
                a,
                Box2D::new(x, y, x + w, y + h).unwrap(),
                Box3D::new(Point3::new(cx, cy, cz), Dims::new(dw, dh, dl).unwrap(), ry).unwrap(),
            )
        })
}

fn point() -> impl Strategy<Value = LidarPoint> {
    (-80.0..80.0f64, -80.0..80.0f64, -3.0..3.0f64, 0.0..1.0f64).prop_map(|(x, y, z, r)| LidarPoint::new(x, y, z, r))
}

proptest! {
    #[test]
    fn labels_round_trip(labels in prop::collection::vec(label(), 0..6)) {
        let back = parse_labels(&emit_labels(&labels)).unwrap();
        prop_assert_eq!(back.len(), labels.len());
        for (a, b) in back.iter().zip(&labels) {
            prop_assert!((a.box3d.center() - b.box3d.center()).amax() < 1e-6);
            prop_assert!((a.box3d.yaw() - b.box3d.yaw()).abs() < 1e-6);
            prop_assert!((a.box3d.dims().l - b.box3d.dims().l).abs() < 1e-6);
            prop_assert!((a.bbox2d.ymax - b.bbox2d.ymax).abs() < 1e-6);
            prop_assert!((a.truncation - b.truncation).abs() < 1e-6);
            prop_assert_eq!(a.occlusion, b.occlusion);
            prop_assert_eq!(a.difficulty, b.difficulty);
        }
    }

    #[test]
    fn velodyne_round_trip(points in prop::collection::vec(point(), 0..200)) {
        let cloud = PointCloud::new(CloudFrame::Lidar, points).unwrap();
        let back = parse_velodyne(&emit_velodyne(&cloud)).unwrap();
        prop_assert_eq!(back.len(), cloud.len());
        for (a, b) in back.points().iter().zip(cloud.points()) {
            prop_assert!((a.position() - b.position()).amax() <= 1e-6 * b.position().coords.amax().max(1.0));
        }
    }

    #[test]
    fn lidar_to_camera_is_rigid(
        points in prop::collection::vec(point(), 2..40),
        (r, p, y) in (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64),
        t in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
        rect in -0.05..0.05f64,
    ) {
        let rot = Rotation3::from_euler_angles(r, p, y).into_inner();
        let tr = Matrix3x4::from_columns(&[rot.column(0), rot.column(1), rot.column(2), Vector3::new(t.0, t.1, t.2).column(0)]);
        let r0 = Rotation3::from_euler_angles(rect, 0.0, 0.0).into_inner();
        let calib = CalibrationSet::new(ProjectionMatrix::kitti_default(), r0, tr).unwrap();
        let cloud = PointCloud::new(CloudFrame::Lidar, points).unwrap();
        let cam = lidar_to_camera(&cloud, &calib).unwrap();
        let (p, q) = (cloud.points(), cam.points());
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d0 = (p[i].position() - p[j].position()).norm();
                let d1 = (q[i].position() - q[j].position()).norm();
                prop_assert!((d0 - d1).abs() < 1e-6);
            }
        }
        let back = camera_to_lidar(&cam, &calib).unwrap();
        for (a, b) in back.points().iter().zip(p) {
            prop_assert!((a.position() - b.position()).norm() < 1e-6);
        }
    }

    #[test]
    fn difficulty_is_monotone(l in label(), dh in 0.0..50.0f64, lower_occ in any::<bool>(), dt in 0.0..0.5f64) {
        let base = assign_difficulty(&l);
        let mut easier = l.clone();
        let b = l.bbox2d;
        easier.bbox2d = Box2D::new(b.xmin, b.ymin, b.xmax, b.ymax + dh).unwrap();
        prop_assert!(assign_difficulty(&easier) <= base);
        let mut easier = l.clone();
        if lower_occ && easier.occlusion > 0 {
            easier.occlusion -= 1;
        }
        prop_assert!(assign_difficulty(&easier) <= base);
        let mut easier = l.clone();
        easier.truncation = (easier.truncation - dt).max(0.0);
        prop_assert!(assign_difficulty(&easier) <= base);
    }
}

#[test]
fn calibration_round_trip() {
    let calib = CalibrationSet::kitti_default();
    let back = parse_calibration(&emit_calibration(&calib)).unwrap();
    assert!((back.p2.matrix() - calib.p2.matrix()).amax() < 1e-6);
    assert!((back.r0_rect - calib.r0_rect).amax() < 1e-6);
    assert!((back.tr_velo_to_cam - calib.tr_velo_to_cam).amax() < 1e-6);
}

#[test]
fn calibration_missing_key_is_reported() {
    let text = emit_calibration(&CalibrationSet::kitti_default());
    let without: String = text.lines().filter(|l| !l.starts_with("P2")).map(|l| format!("{l}\n")).collect();
    assert!(matches!(parse_calibration(&without), Err(KittiError::MissingKey { .. })));
}

#[test]
fn short_label_line_is_rejected() {
    let err = parse_labels("Car 0 0 0 1 2 3 4 1.5 1.6 3.9 1 1.6 20\n").unwrap_err();
    assert!(matches!(err, KittiError::FieldCountMismatch { line: 1, found: 14 }));
}

#[test]
fn dont_care_is_dropped() {
    let text = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n\
                Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n";
    let labels = parse_labels(text).unwrap();
    assert_eq!(labels.len(), 1);
    assert_eq!(labels[0].difficulty, Difficulty::Hard.min(labels[0].difficulty));
}

#[test]
fn dataset_layout_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let frames = synth_split(3, &SynthConfig::default());
    let layout = DatasetLayout::new(dir.path());
    for f in &frames {
        layout.write_frame(f).unwrap();
    }
    let list: String = frames.iter().map(|f| format!("{}\n", f.frame_id)).collect();
    let loaded = load_split(&list, dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in loaded.iter().zip(&frames) {
        assert_eq!(a.frame_id, b.frame_id);
        assert_eq!(a.labels.len(), b.labels.len());
        assert_eq!(a.cloud.len(), b.cloud.len());
        assert_eq!(a.image_size, LoadOptions::default().default_image_size);
    }
    let missing = load_split("999999\n", dir.path()).unwrap_err();
    assert!(matches!(missing, KittiError::MissingFile { .. }));
}

#[test]
fn split_lists() {
    assert_eq!(parse_split_list("000001\n000002\n\n000005\n").unwrap(), ["000001", "000002", "000005"]);
    assert!(matches!(parse_split_list("000001\n000001\n"), Err(KittiError::DuplicateFrameId { .. })));
}
