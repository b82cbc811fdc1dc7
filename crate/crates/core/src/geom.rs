//! Oriented box geometry in the camera frame (x right, y down, z forward).
//!
//! A [`Box3D`] is stored about its geometric center. Its local axes follow the
//! KITTI object convention: length `L` along local x, height `H` along y and
//! width `W` along local z, rotated by `yaw` about the camera y axis.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3, Vector4};
use thiserror::Error;

/// Clip-test tolerance for polygon intersection.
const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("box dimensions must be strictly positive, got w={w} h={h} l={l}")]
    NonPositiveDims { w: f64, h: f64, l: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("2D box is not well ordered: ({xmin}, {ymin}) .. ({xmax}, {ymax})")]
    IllOrdered {
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
    },
    #[error("box corner at depth {depth} is not in front of the camera")]
    BehindCamera { depth: f64 },
    #[error("projection matrix has a zero focal term")]
    ZeroFocal,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = yaw - two_pi * ((yaw + PI) / two_pi).floor();
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    r
}

/// Rotation about the camera y axis.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Physical extents in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub w: f64,
    pub h: f64,
    pub l: f64,
}

impl Dims {
    pub fn new(w: f64, h: f64, l: f64) -> Result<Self, GeomError> {
        let d = Dims { w, h, l };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.w.is_finite() && self.h.is_finite() && self.l.is_finite()) {
            return Err(GeomError::NonFinite("dims"));
        }
        if self.w <= 0.0 || self.h <= 0.0 || self.l <= 0.0 {
            return Err(GeomError::NonPositiveDims {
                w: self.w,
                h: self.h,
                l: self.l,
            });
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Dims {
        Dims {
            w: self.w * factor,
            h: self.h * factor,
            l: self.l * factor,
        }
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.l
    }
}

/// Axis-aligned image rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Box2D {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, GeomError> {
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFinite("box2d"));
        }
        if xmin >= xmax || ymin >= ymax {
            return Err(GeomError::IllOrdered {
                xmin,
                ymin,
                xmax,
                ymax,
            });
        }
        Ok(Box2D {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn translated(&self, du: f64, dv: f64) -> Box2D {
        Box2D {
            xmin: self.xmin + du,
            ymin: self.ymin + dv,
            xmax: self.xmax + du,
            ymax: self.ymax + dv,
        }
    }
}

/// Camera projection from homogeneous camera-frame meters to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn new(p: Matrix3x4<f64>) -> Result<Self, GeomError> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("projection matrix"));
        }
        if p[(0, 0)] == 0.0 || p[(1, 1)] == 0.0 {
            return Err(GeomError::ZeroFocal);
        }
        Ok(ProjectionMatrix(p))
    }

    /// Pinhole camera with square pixels and no baseline offset.
    pub fn pinhole(focal: f64, cu: f64, cv: f64) -> Result<Self, GeomError> {
        Self::new(Matrix3x4::new(
            focal, 0.0, cu, 0.0, 0.0, focal, cv, 0.0, 0.0, 0.0, 1.0, 0.0,
        ))
    }

    /// The left color camera of a typical KITTI recording.
    pub fn kitti_default() -> Self {
        ProjectionMatrix(Matrix3x4::new(
            721.5377, 0.0, 609.5593, 44.85728, 0.0, 721.5377, 172.854, 0.2163791, 0.0, 0.0, 1.0,
            0.002745884,
        ))
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, GeomError> {
        Self::new(self.0 * factor)
    }

    /// Pixel coordinates of a camera-frame point; `None` when the homogeneous
    /// depth is not positive.
    pub fn project(&self, p: &Point3<f64>) -> Option<[f64; 2]> {
        let h = self.0 * Vector4::new(p.x, p.y, p.z, 1.0);
        if h.z <= 0.0 {
            return None;
        }
        Some([h.x / h.z, h.y / h.z])
    }
}

/// Oriented 3D box, center in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    center: Point3<f64>,
    dims: Dims,
    yaw: f64,
}

impl Box3D {
    pub fn new(center: Point3<f64>, dims: Dims, yaw: f64) -> Result<Self, GeomError> {
        if !(center.x.is_finite() && center.y.is_finite() && center.z.is_finite()) {
            return Err(GeomError::NonFinite("box center"));
        }
        if !yaw.is_finite() {
            return Err(GeomError::NonFinite("yaw"));
        }
        dims.validate()?;
        Ok(Box3D {
            center,
            dims,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> Point3<f64> {
        self.center
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.dims.volume()
    }

    pub fn translated(&self, delta: &Vector3<f64>) -> Box3D {
        Box3D {
            center: self.center + delta,
            ..*self
        }
    }

    pub fn with_center(&self, center: Point3<f64>) -> Box3D {
        Box3D { center, ..*self }
    }

    /// Vertical interval `(top, bottom)` along camera y.
    pub fn y_range(&self) -> (f64, f64) {
        let half = self.dims.h / 2.0;
        (self.center.y - half, self.center.y + half)
    }

    /// Corner offsets from the center, in the same order as [`Box3D::corners`].
    pub fn corner_offsets(&self) -> [Vector3<f64>; 8] {
        corner_offsets(&self.dims, self.yaw)
    }

    /// The eight corners. Indices 0..4 are the bottom face (larger y),
    /// counter-clockwise seen from above, starting at local (+L/2, +W/2);
    /// corner `i + 4` sits directly above corner `i`.
    pub fn corners(&self) -> [Point3<f64>; 8] {
        self.corner_offsets().map(|o| self.center + o)
    }

    /// Ground-plane footprint as a counter-clockwise polygon in (x, z).
    pub fn bev_polygon(&self) -> ConvexPolygon {
        let c = self.corners();
        ConvexPolygon {
            vertices: (0..4).map(|i| [c[i].x, c[i].z]).collect(),
        }
    }
}

/// Corner offsets for given extents and yaw, ordered as in [`Box3D::corners`].
pub fn corner_offsets(dims: &Dims, yaw: f64) -> [Vector3<f64>; 8] {
    let (hl, hh, hw) = (dims.l / 2.0, dims.h / 2.0, dims.w / 2.0);
    let footprint = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
    let r = yaw_rotation(yaw);
    let mut out = [Vector3::zeros(); 8];
    for (i, &(x, z)) in footprint.iter().enumerate() {
        out[i] = r * Vector3::new(x, hh, z);
        out[i + 4] = r * Vector3::new(x, -hh, z);
    }
    out
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvexPolygon {
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    /// Shoelace area; positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0.0)
    }

    /// Sutherland–Hodgman clip of `self` against the convex `clip` polygon.
    pub fn clip(&self, clip: &ConvexPolygon) -> ConvexPolygon {
        let mut output = self.vertices.clone();
        let n = clip.vertices.len();
        for i in 0..n {
            if output.is_empty() {
                break;
            }
            let a = clip.vertices[i];
            let b = clip.vertices[(i + 1) % n];
            let input = std::mem::take(&mut output);
            let m = input.len();
            for j in 0..m {
                let cur = input[j];
                let prev = input[(j + m - 1) % m];
                let cur_in = cross(a, b, cur) >= -CLIP_EPS;
                let prev_in = cross(a, b, prev) >= -CLIP_EPS;
                if cur_in {
                    if !prev_in {
                        output.push(line_intersection(prev, cur, a, b));
                    }
                    output.push(cur);
                } else if prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
            }
        }
        ConvexPolygon { vertices: output }
    }
}

fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Intersection of segment `p0 -> p1` with the infinite line through `a`, `b`.
fn line_intersection(p0: [f64; 2], p1: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d0 = cross(a, b, p0);
    let d1 = cross(a, b, p1);
    let denom = d0 - d1;
    if denom.abs() < f64::MIN_POSITIVE {
        return p0;
    }
    let t = d0 / denom;
    [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])]
}

/// Axis-aligned hull of the projected corners.
pub fn project_box(b: &Box3D, p: &ProjectionMatrix) -> Result<Box2D, GeomError> {
    let mut hull = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in b.corners() {
        if c.z <= 0.0 {
            return Err(GeomError::BehindCamera { depth: c.z });
        }
        let [u, v] = p
            .project(&c)
            .ok_or(GeomError::BehindCamera { depth: c.z })?;
        hull[0] = hull[0].min(u);
        hull[1] = hull[1].min(v);
        hull[2] = hull[2].max(u);
        hull[3] = hull[3].max(v);
    }
    Ok(Box2D {
        xmin: hull[0],
        ymin: hull[1],
        xmax: hull[2],
        ymax: hull[3],
    })
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
    let ih = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection area of the two ground-plane footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // Clip in a fixed order so that the result is symmetric bit-for-bit.
    let (first, second) = if order_key(a) <= order_key(b) {
        (a, b)
    } else {
        (b, a)
    };
    let area = first.bev_polygon().clip(&second.bev_polygon()).area();
    if area < CLIP_EPS {
        0.0
    } else {
        area
    }
}

fn order_key(b: &Box3D) -> [f64; 7] {
    let c = b.center();
    let d = b.dims();
    [c.x, c.y, c.z, d.w, d.h, d.l, b.yaw()]
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.dims().w * a.dims().l + b.dims().w * b.dims().l - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (atop, abot) = a.y_range();
    let (btop, bbot) = b.y_range();
    let overlap_h = abot.min(bbot) - atop.max(btop);
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_h;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cube(x: f64, y: f64, z: f64, yaw: f64) -> Box3D {
        Box3D::new(Point3::new(x, y, z), Dims::new(1.0, 1.0, 1.0).unwrap(), yaw).unwrap()
    }

    fn sorted(mut pts: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts
    }

    fn rounded(c: [Point3<f64>; 8]) -> Vec<[f64; 3]> {
        c.iter()
            .map(|p| [p.x, p.y, p.z].map(|v| (v * 1e9).round() / 1e9))
            .collect()
    }

    #[test]
    fn yaw_wraps_into_half_open_interval() {
        assert_eq!(normalize_yaw(PI), -PI);
        assert!((normalize_yaw(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(normalize_yaw(0.5), 0.5);
        assert!((normalize_yaw(-PI - 0.2) - (PI - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn unit_cube_corners() {
        let c = cube(0.0, 0.0, 0.0, 0.0).corners();
        for p in &c {
            assert!((p.x.abs() - 0.5).abs() < 1e-15);
            assert!((p.y.abs() - 0.5).abs() < 1e-15);
            assert!((p.z.abs() - 0.5).abs() < 1e-15);
        }
        // bottom face first
        assert!(c[..4].iter().all(|p| p.y > 0.0));
        assert!(c[4..].iter().all(|p| p.y < 0.0));
    }

    #[test]
    fn half_turn_permutes_corners() {
        let dims = Dims::new(1.6, 1.5, 3.9).unwrap();
        let a = Box3D::new(Point3::new(1.0, 2.0, 9.0), dims, 0.0).unwrap();
        let b = Box3D::new(Point3::new(1.0, 2.0, 9.0), dims, PI).unwrap();
        assert_eq!(sorted(rounded(a.corners())), sorted(rounded(b.corners())));
    }

    #[test]
    fn quarter_turn_swaps_ground_extents() {
        let dims = Dims::new(1.0, 1.0, 2.0).unwrap();
        let extent = |b: Box3D| {
            let c = b.corners();
            let xs = c.iter().map(|p| p.x);
            let zs = c.iter().map(|p| p.z);
            (
                xs.clone().fold(f64::MIN, f64::max) - xs.fold(f64::MAX, f64::min),
                zs.clone().fold(f64::MIN, f64::max) - zs.fold(f64::MAX, f64::min),
            )
        };
        let (x0, z0) = extent(Box3D::new(Point3::origin(), dims, 0.0).unwrap());
        assert!((x0 - 2.0).abs() < 1e-12 && (z0 - 1.0).abs() < 1e-12);
        let (x1, z1) = extent(Box3D::new(Point3::origin(), dims, FRAC_PI_2).unwrap());
        assert!((x1 - 1.0).abs() < 1e-12 && (z1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn footprint_is_counter_clockwise() {
        for yaw in [-3.0, -1.0, 0.0, 0.7, 2.5] {
            let poly = cube(3.0, 0.0, 5.0, yaw).bev_polygon();
            assert!((poly.signed_area() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_of_centered_cube() {
        let p = ProjectionMatrix::pinhole(100.0, 0.0, 0.0).unwrap();
        let b = Box3D::new(Point3::new(0.0, 0.0, 10.0), Dims::new(2.0, 2.0, 2.0).unwrap(), 0.0)
            .unwrap();
        let r = project_box(&b, &p).unwrap();
        // brute force over the eight corners: the nearest face (z = 9) dominates
        let expect = 100.0 / 9.0;
        assert!((r.xmin + expect).abs() < 1e-12);
        assert!((r.xmax - expect).abs() < 1e-12);
        assert!((r.ymin + expect).abs() < 1e-12);
        assert!((r.ymax - expect).abs() < 1e-12);
    }

    #[test]
    fn projection_behind_camera_fails() {
        let p = ProjectionMatrix::pinhole(100.0, 0.0, 0.0).unwrap();
        let b = cube(0.0, 0.0, -10.0, 0.0);
        assert!(matches!(
            project_box(&b, &p),
            Err(GeomError::BehindCamera { .. })
        ));
    }

    #[test]
    fn projection_moves_right_with_x() {
        let p = ProjectionMatrix::kitti_default();
        let mut prev = project_box(&cube(-3.0, 1.0, 12.0, 0.0), &p).unwrap();
        for k in 1..20 {
            let cur = project_box(&cube(-3.0 + 0.3 * k as f64, 1.0, 12.0, 0.0), &p).unwrap();
            assert!(cur.xmin > prev.xmin && cur.xmax > prev.xmax);
            prev = cur;
        }
    }

    #[test]
    fn iou_2d_cases() {
        let a = Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(iou_2d(&a, &a), 1.0);
        let far = Box2D::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou_2d(&a, &far), 0.0);
        let shifted = a.translated(0.5, 0.0);
        assert!((iou_2d(&a, &shifted) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bev_and_3d_iou_axis_aligned() {
        let a = cube(0.0, 0.0, 10.0, 0.0);
        assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        let b = cube(0.5, 0.0, 10.0, 0.0);
        assert!((iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let stacked = cube(0.0, 1.0, 10.0, 0.0);
        assert_eq!(iou_3d(&a, &stacked), 0.0);
    }

    #[test]
    fn rotated_square_octagon() {
        let a = cube(0.0, 0.0, 10.0, 0.0);
        let b = cube(0.0, 0.0, 10.0, PI / 4.0);
        // octagon area 2(sqrt 2 - 1), union 2 - that
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert!((iou_bev(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn touching_footprints_have_zero_overlap() {
        let a = cube(0.0, 0.0, 10.0, 0.0);
        let b = cube(1.0, 0.0, 10.0, 0.0);
        assert_eq!(iou_bev(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(Dims::new(0.0, 1.0, 1.0).is_err());
        assert!(Box2D::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(Box3D::new(Point3::new(f64::NAN, 0.0, 0.0), Dims::new(1.0, 1.0, 1.0).unwrap(), 0.0).is_err());
    }
}
