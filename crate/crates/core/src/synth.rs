//! Synthetic labelled frames for tests and desk-scale benchmarks.
//!
//! Cars stand on a flat ground plane, are well separated on the ground and
//! fully inside the image. Each 2D label is the exact projection of its 3D
//! box, and every car is sampled densely on its surface.

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geom::{normalize_yaw, project_box, yaw_rotation, Box2D, Box3D, Dims, ProjectionMatrix};
use crate::kitti::{camera_to_lidar, CalibrationSet, CloudFrame, FrameData, GroundTruthLabel, LidarPoint, PointCloud};
use crate::rng::{hash_str, rng_for};

/// Camera height above the ground plane, in meters.
pub const CAMERA_HEIGHT: f64 = 1.65;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub min_cars: usize,
    pub max_cars: usize,
    pub depth_range: (f64, f64),
    /// Minimum ground-plane distance between car centers.
    pub min_separation: f64,
    pub surface_points_per_car: usize,
    pub ground_points: usize,
    pub image_size: (u32, u32),
    /// Smallest admissible 2D box height in pixels.
    pub min_box_height: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_cars: 1,
            max_cars: 5,
            depth_range: (8.0, 40.0),
            min_separation: 7.0,
            surface_points_per_car: 300,
            ground_points: 3000,
            image_size: (1242, 375),
            min_box_height: 30.0,
            seed: 0,
        }
    }
}

fn random_dims(rng: &mut ChaCha8Rng) -> Dims {
    let h = Normal::<f64>::new(1.53, 0.08).unwrap().sample(rng).clamp(1.3, 1.8);
    let w = Normal::<f64>::new(1.63, 0.08).unwrap().sample(rng).clamp(1.4, 1.9);
    let l = Normal::<f64>::new(3.88, 0.35).unwrap().sample(rng).clamp(3.0, 4.8);
    Dims { w, h, l }
}

fn inside_image(b: &Box2D, size: (u32, u32)) -> bool {
    b.xmin >= 1.0 && b.ymin >= 1.0 && b.xmax <= size.0 as f64 - 1.0 && b.ymax <= size.1 as f64 - 1.0
}

/// Draws a car standing on the ground whose projection fits the image.
fn place_car(
    rng: &mut ChaCha8Rng,
    p: &ProjectionMatrix,
    cfg: &SynthConfig,
    placed: &[Box3D],
) -> Option<(Box3D, Box2D)> {
    for _ in 0..200 {
        let dims = random_dims(rng);
        let z = rng.random_range(cfg.depth_range.0..cfg.depth_range.1);
        let x = rng.random_range(-0.55..0.55) * z;
        let yaw = rng.random_range(-PI..PI);
        let center = Point3::new(x, CAMERA_HEIGHT - dims.h / 2.0, z);
        let Ok(b) = Box3D::new(center, dims, yaw) else {
            continue;
        };
        let clear = placed.iter().all(|o| {
            let d = o.center() - b.center();
            (d.x * d.x + d.z * d.z).sqrt() >= cfg.min_separation
        });
        if !clear {
            continue;
        }
        let Ok(b2) = project_box(&b, p) else {
            continue;
        };
        if inside_image(&b2, cfg.image_size) && b2.height() >= cfg.min_box_height {
            return Some((b, b2));
        }
    }
    None
}

/// Points drawn uniformly over the six faces of a box.
pub fn surface_points(b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    let Dims { w, h, l } = b.dims();
    let faces = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = faces.iter().sum();
    let r = yaw_rotation(b.yaw());
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let (u, v) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let sign = if face % 2 == 0 { 0.5 } else { -0.5 };
            let local = match face / 2 {
                0 => Vector3::new(sign * l, u * h, v * w),
                1 => Vector3::new(u * l, v * h, sign * w),
                _ => Vector3::new(u * l, sign * h, v * w),
            };
            b.center() + r * local
        })
        .collect()
}

/// Labels and a Lidar-frame cloud for one synthetic frame.
pub fn synth_frame(frame_id: &str, calib: &CalibrationSet, cfg: &SynthConfig) -> FrameData {
    let mut rng = rng_for(cfg.seed, &[hash_str(frame_id)]);
    let count = rng.random_range(cfg.min_cars..=cfg.max_cars.max(cfg.min_cars));
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..count {
        if let Some((b, b2)) = place_car(&mut rng, &calib.p2, cfg, &boxes) {
            let c = b.center();
            let alpha = normalize_yaw(b.yaw() - c.x.atan2(c.z));
            labels.push(GroundTruthLabel::new("Car", 0.0, 0, alpha, b2, b));
            boxes.push(b);
        }
    }
    let mut points = Vec::new();
    for b in &boxes {
        for p in surface_points(b, cfg.surface_points_per_car, &mut rng) {
            points.push(LidarPoint::new(p.x, p.y, p.z, rng.random_range(0.0..1.0)));
        }
    }
    for _ in 0..cfg.ground_points {
        let x = rng.random_range(-30.0..30.0);
        let z = rng.random_range(2.0..60.0);
        points.push(LidarPoint::new(x, CAMERA_HEIGHT, z, rng.random_range(0.0..0.3)));
    }
    let camera = PointCloud::from_parts(CloudFrame::Camera, points);
    let cloud = camera_to_lidar(&camera, calib).expect("default calibration is invertible");
    FrameData {
        frame_id: frame_id.to_string(),
        calib: calib.clone(),
        labels,
        cloud,
        image_size: cfg.image_size,
    }
}

/// Frames `000000`, `000001`, ... under the default KITTI calibration.
pub fn synth_split(count: usize, cfg: &SynthConfig) -> Vec<FrameData> {
    let calib = CalibrationSet::kitti_default();
    (0..count)
        .map(|i| synth_frame(&format!("{i:06}"), &calib, cfg))
        .collect()
}
