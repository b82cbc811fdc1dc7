//! KITTI object-benchmark file formats: calibration, labels, velodyne scans
//! and split lists, plus the Lidar to camera conversion.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{Box2D, Box3D, Dims, GeomError, ProjectionMatrix};

pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (1242, 375);
const ORTHONORMAL_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("calibration is missing key {key}")]
    MissingKey { key: &'static str },
    #[error("line {line}, key {key}: malformed number {token:?}")]
    MalformedNumber {
        line: usize,
        key: String,
        token: String,
    },
    #[error("line {line}, key {key}: expected {expected} values, found {found}")]
    WrongValueCount {
        line: usize,
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("line {line}: expected 15 label fields, found {found}")]
    FieldCountMismatch { line: usize, found: usize },
    #[error("line {line}: invalid label: {reason}")]
    InvalidLabel { line: usize, reason: String },
    #[error("velodyne stream of {len} bytes is not a whole number of 16-byte records")]
    TruncatedRecord { len: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("expected a {expected:?}-frame cloud, got {found:?}")]
    WrongFrame {
        expected: CloudFrame,
        found: CloudFrame,
    },
    #[error("frame {frame_id}: missing file {}", path.display())]
    MissingFile { frame_id: String, path: PathBuf },
    #[error("duplicate frame id {0} in split list")]
    DuplicateFrameId(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Left color camera intrinsics plus the rigid Lidar to camera chain.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub p2: ProjectionMatrix,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

impl CalibrationSet {
    pub fn new(
        p2: ProjectionMatrix,
        r0_rect: Matrix3<f64>,
        tr_velo_to_cam: Matrix3x4<f64>,
    ) -> Result<Self, KittiError> {
        let calib = CalibrationSet {
            p2,
            r0_rect,
            tr_velo_to_cam,
        };
        calib.validate()?;
        Ok(calib)
    }

    /// Identity Lidar chain with the given camera.
    pub fn with_identity_extrinsics(p2: ProjectionMatrix) -> Self {
        CalibrationSet {
            p2,
            r0_rect: Matrix3::identity(),
            tr_velo_to_cam: Matrix3x4::identity(),
        }
    }

    /// Typical KITTI values (sequence 0000 of the object benchmark).
    pub fn kitti_default() -> Self {
        CalibrationSet {
            p2: ProjectionMatrix::kitti_default(),
            r0_rect: Matrix3::new(
                0.9999239, 0.00983776, -0.007445048, -0.009869795, 0.9999421, -0.004278459,
                0.007402527, 0.004351614, 0.9999631,
            ),
            tr_velo_to_cam: Matrix3x4::new(
                7.533745e-03,
                -9.999714e-01,
                -6.166020e-04,
                -4.069766e-03,
                1.480249e-02,
                7.280733e-04,
                -9.998902e-01,
                -7.631618e-02,
                9.998621e-01,
                7.523790e-03,
                1.480755e-02,
                -2.717806e-01,
            ),
        }
    }

    pub fn validate(&self) -> Result<(), KittiError> {
        check_orthonormal(&self.r0_rect, "R0_rect")?;
        check_orthonormal(&self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned(), "Tr_velo_to_cam")?;
        if self.tr_velo_to_cam.iter().any(|v| !v.is_finite()) {
            return Err(KittiError::InvalidCalibration("non-finite Tr_velo_to_cam".into()));
        }
        Ok(())
    }

    /// Combined rigid map from the Lidar frame to the rectified camera frame.
    fn velo_to_rect(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let rot = self.r0_rect * self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0);
        let t = self.r0_rect * self.tr_velo_to_cam.column(3);
        (rot, t)
    }
}

fn check_orthonormal(m: &Matrix3<f64>, name: &str) -> Result<(), KittiError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(KittiError::InvalidCalibration(format!("non-finite {name}")));
    }
    let err = (m * m.transpose() - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(KittiError::InvalidCalibration(format!(
            "{name} is not orthonormal (deviation {err:e})"
        )));
    }
    Ok(())
}

fn parse_values(line: usize, key: &str, rest: &str, expected: usize) -> Result<Vec<f64>, KittiError> {
    let values = rest
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| KittiError::MalformedNumber {
                line,
                key: key.to_string(),
                token: tok.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != expected {
        return Err(KittiError::WrongValueCount {
            line,
            key: key.to_string(),
            expected,
            found: values.len(),
        });
    }
    Ok(values)
}

/// Parses a calibration file (`KEY: v0 v1 ...` per line). Keys other than
/// `P2`, `R0_rect` and `Tr_velo_to_cam` are ignored.
pub fn parse_calibration(text: &str) -> Result<CalibrationSet, KittiError> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let Some((key, rest)) = raw.split_once(':') else {
            continue;
        };
        match key.trim() {
            "P2" => {
                let v = parse_values(line, "P2", rest, 12)?;
                p2 = Some(ProjectionMatrix::new(Matrix3x4::from_row_slice(&v))?);
            }
            "R0_rect" => {
                let v = parse_values(line, "R0_rect", rest, 9)?;
                r0 = Some(Matrix3::from_row_slice(&v));
            }
            "Tr_velo_to_cam" => {
                let v = parse_values(line, "Tr_velo_to_cam", rest, 12)?;
                tr = Some(Matrix3x4::from_row_slice(&v));
            }
            _ => {}
        }
    }
    CalibrationSet::new(
        p2.ok_or(KittiError::MissingKey { key: "P2" })?,
        r0.ok_or(KittiError::MissingKey { key: "R0_rect" })?,
        tr.ok_or(KittiError::MissingKey { key: "Tr_velo_to_cam" })?,
    )
}

fn push_row_major<const R: usize, const C: usize>(
    out: &mut String,
    key: &str,
    m: &nalgebra::SMatrix<f64, R, C>,
) {
    out.push_str(key);
    out.push(':');
    for r in 0..R {
        for c in 0..C {
            let _ = write!(out, " {:e}", m[(r, c)]);
        }
    }
    out.push('\n');
}

pub fn emit_calibration(calib: &CalibrationSet) -> String {
    let mut out = String::new();
    push_row_major(&mut out, "P2", calib.p2.matrix());
    push_row_major(&mut out, "R0_rect", &calib.r0_rect);
    push_row_major(&mut out, "Tr_velo_to_cam", &calib.tr_velo_to_cam);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Ignored => "ignored",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLabel {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    pub bbox2d: Box2D,
    pub box3d: Box3D,
    pub difficulty: Difficulty,
}

impl GroundTruthLabel {
    pub fn new(
        class_name: impl Into<String>,
        truncation: f64,
        occlusion: u8,
        alpha: f64,
        bbox2d: Box2D,
        box3d: Box3D,
    ) -> Self {
        let mut label = GroundTruthLabel {
            class_name: class_name.into(),
            truncation,
            occlusion,
            alpha,
            bbox2d,
            box3d,
            difficulty: Difficulty::Ignored,
        };
        label.difficulty = assign_difficulty(&label);
        label
    }
}

/// Standard KITTI strata by 2D box height, occlusion and truncation.
pub fn assign_difficulty(label: &GroundTruthLabel) -> Difficulty {
    let height = label.bbox2d.height();
    let (occ, trunc) = (label.occlusion, label.truncation);
    if height >= 40.0 && occ == 0 && trunc <= 0.15 {
        Difficulty::Easy
    } else if height >= 25.0 && occ <= 1 && trunc <= 0.30 {
        Difficulty::Moderate
    } else if height >= 25.0 && occ <= 2 && trunc <= 0.50 {
        Difficulty::Hard
    } else {
        Difficulty::Ignored
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassFilter {
    #[default]
    CarOnly,
    AllClasses,
}

impl ClassFilter {
    fn admits(&self, class: &str) -> bool {
        match self {
            ClassFilter::CarOnly => class == "Car",
            ClassFilter::AllClasses => true,
        }
    }
}

/// Parses a label file keeping only cars.
pub fn parse_labels(text: &str) -> Result<Vec<GroundTruthLabel>, KittiError> {
    parse_labels_with(text, ClassFilter::CarOnly)
}

/// Parses a label file. `DontCare` regions are always dropped.
pub fn parse_labels_with(
    text: &str,
    filter: ClassFilter,
) -> Result<Vec<GroundTruthLabel>, KittiError> {
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 15 {
            return Err(KittiError::FieldCountMismatch {
                line,
                found: fields.len(),
            });
        }
        let class = fields[0];
        if class == "DontCare" || !filter.admits(class) {
            continue;
        }
        let mut v = [0.0f64; 14];
        for (slot, tok) in v.iter_mut().zip(&fields[1..]) {
            *slot = tok.parse().map_err(|_| KittiError::MalformedNumber {
                line,
                key: class.to_string(),
                token: tok.to_string(),
            })?;
        }
        let invalid = |reason: String| KittiError::InvalidLabel { line, reason };
        let [trunc, occ, alpha, x0, y0, x1, y1, h, w, l, x, y, z, ry] = v;
        if !(0.0..=1.0).contains(&trunc) {
            return Err(invalid(format!("truncation {trunc} outside [0, 1]")));
        }
        if occ.fract() != 0.0 || !(0.0..=3.0).contains(&occ) {
            return Err(invalid(format!("occlusion {occ} not in 0..=3")));
        }
        let bbox2d = Box2D::new(x0, y0, x1, y1).map_err(|e| invalid(e.to_string()))?;
        let dims = Dims::new(w, h, l).map_err(|e| invalid(e.to_string()))?;
        let box3d = Box3D::new(Point3::new(x, y - h / 2.0, z), dims, ry)
            .map_err(|e| invalid(e.to_string()))?;
        labels.push(GroundTruthLabel::new(class, trunc, occ as u8, alpha, bbox2d, box3d));
    }
    Ok(labels)
}

/// One KITTI label line (bottom-face-center convention, no trailing newline).
pub fn format_label_line(class: &str, truncation: f64, occlusion: u8, alpha: f64, b2: &Box2D, b3: &Box3D) -> String {
    let c = b3.center();
    let d = b3.dims();
    format!(
        "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        class,
        truncation,
        occlusion,
        alpha,
        b2.xmin,
        b2.ymin,
        b2.xmax,
        b2.ymax,
        d.h,
        d.w,
        d.l,
        c.x,
        c.y + d.h / 2.0,
        c.z,
        b3.yaw()
    )
}

pub fn emit_labels(labels: &[GroundTruthLabel]) -> String {
    let mut out = String::new();
    for lb in labels {
        out.push_str(&format_label_line(
            &lb.class_name,
            lb.truncation,
            lb.occlusion,
            lb.alpha,
            &lb.bbox2d,
            &lb.box3d,
        ));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFrame {
    Lidar,
    Camera,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectance: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, reflectance: f64) -> Self {
        LidarPoint { x, y, z, reflectance }
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, self.z)
    }
}

/// Points in a single tagged frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    frame: CloudFrame,
    points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(frame: CloudFrame, points: Vec<LidarPoint>) -> Result<Self, KittiError> {
        if let Some(index) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(KittiError::NonFinitePoint { index });
        }
        Ok(PointCloud { frame, points })
    }

    pub fn empty(frame: CloudFrame) -> Self {
        PointCloud {
            frame,
            points: Vec::new(),
        }
    }

    /// Builds a cloud whose points are derived from an already valid cloud.
    pub(crate) fn from_parts(frame: CloudFrame, points: Vec<LidarPoint>) -> Self {
        PointCloud { frame, points }
    }

    pub fn frame(&self) -> CloudFrame {
        self.frame
    }

    pub fn points(&self) -> &[LidarPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, delta: &Vector3<f64>) -> PointCloud {
        PointCloud {
            frame: self.frame,
            points: self
                .points
                .iter()
                .map(|p| LidarPoint::new(p.x + delta.x, p.y + delta.y, p.z + delta.z, p.reflectance))
                .collect(),
        }
    }
}

/// Decodes little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn parse_velodyne(bytes: &[u8]) -> Result<PointCloud, KittiError> {
    if bytes.len() % 16 != 0 {
        return Err(KittiError::TruncatedRecord { len: bytes.len() });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i..i + 4].try_into().unwrap()) as f64;
            LidarPoint::new(f(0), f(4), f(8), f(12))
        })
        .collect();
    PointCloud::new(CloudFrame::Lidar, points)
}

pub fn emit_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.reflectance] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Maps each point by `R0_rect * (Tr_velo_to_cam * [x y z 1])`.
pub fn lidar_to_camera(cloud: &PointCloud, calib: &CalibrationSet) -> Result<PointCloud, KittiError> {
    if cloud.frame() != CloudFrame::Lidar {
        return Err(KittiError::WrongFrame {
            expected: CloudFrame::Lidar,
            found: cloud.frame(),
        });
    }
    let m = calib.r0_rect * calib.tr_velo_to_cam;
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let q = m * Vector4::new(p.x, p.y, p.z, 1.0);
            LidarPoint::new(q.x, q.y, q.z, p.reflectance)
        })
        .collect();
    Ok(PointCloud::from_parts(CloudFrame::Camera, points))
}

/// Inverse of [`lidar_to_camera`], using the transpose of the rotation part.
pub fn camera_to_lidar(cloud: &PointCloud, calib: &CalibrationSet) -> Result<PointCloud, KittiError> {
    if cloud.frame() != CloudFrame::Camera {
        return Err(KittiError::WrongFrame {
            expected: CloudFrame::Camera,
            found: cloud.frame(),
        });
    }
    let (rot, t) = calib.velo_to_rect();
    let inv = rot
        .try_inverse()
        .ok_or_else(|| KittiError::InvalidCalibration("singular extrinsics".into()))?;
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let q = inv * (Vector3::new(p.x, p.y, p.z) - t);
            LidarPoint::new(q.x, q.y, q.z, p.reflectance)
        })
        .collect();
    Ok(PointCloud::from_parts(CloudFrame::Lidar, points))
}

/// One labelled sample. Immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub frame_id: String,
    pub calib: CalibrationSet,
    pub labels: Vec<GroundTruthLabel>,
    pub cloud: PointCloud,
    pub image_size: (u32, u32),
}

impl FrameData {
    /// The cloud expressed in the camera frame.
    pub fn camera_cloud(&self) -> Result<PointCloud, KittiError> {
        match self.cloud.frame() {
            CloudFrame::Camera => Ok(self.cloud.clone()),
            CloudFrame::Lidar => lidar_to_camera(&self.cloud, &self.calib),
        }
    }
}

/// Frame ids, one per non-blank line.
pub fn parse_split_list(text: &str) -> Result<Vec<String>, KittiError> {
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if !seen.insert(id.to_string()) {
            return Err(KittiError::DuplicateFrameId(id.to_string()));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub class_filter: ClassFilter,
    pub default_image_size: (u32, u32),
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            class_filter: ClassFilter::CarOnly,
            default_image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

/// `{calib/, label_2/, velodyne/, image_2/}` under a dataset root.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn calib_path(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn velodyne_path(&self, id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{id}.bin"))
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("image_2").join(format!("{id}.png"))
    }

    pub fn load_frame(&self, id: &str, opts: &LoadOptions) -> Result<FrameData, KittiError> {
        let calib = parse_calibration(&read_text(id, &self.calib_path(id))?)?;
        let labels = parse_labels_with(&read_text(id, &self.label_path(id))?, opts.class_filter)?;
        let cloud = parse_velodyne(&read_bytes(id, &self.velodyne_path(id))?)?;
        let image_size = png_dimensions(&self.image_path(id)).unwrap_or(opts.default_image_size);
        Ok(FrameData {
            frame_id: id.to_string(),
            calib,
            labels,
            cloud,
            image_size,
        })
    }

    /// Writes a frame in the on-disk layout; the cloud is stored in the Lidar frame.
    pub fn write_frame(&self, frame: &FrameData) -> Result<(), KittiError> {
        let id = &frame.frame_id;
        let lidar = match frame.cloud.frame() {
            CloudFrame::Lidar => frame.cloud.clone(),
            CloudFrame::Camera => camera_to_lidar(&frame.cloud, &frame.calib)?,
        };
        write_file(&self.calib_path(id), emit_calibration(&frame.calib).as_bytes())?;
        write_file(&self.label_path(id), emit_labels(&frame.labels).as_bytes())?;
        write_file(&self.velodyne_path(id), &emit_velodyne(&lidar))?;
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), KittiError> {
    let io = |source| KittiError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn read_bytes(id: &str, path: &Path) -> Result<Vec<u8>, KittiError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            KittiError::MissingFile {
                frame_id: id.to_string(),
                path: path.to_path_buf(),
            }
        } else {
            KittiError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn read_text(id: &str, path: &Path) -> Result<String, KittiError> {
    let bytes = read_bytes(id, path)?;
    String::from_utf8(bytes).map_err(|e| KittiError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

/// Width and height from a PNG IHDR chunk, without decoding pixels.
fn png_dimensions(path: &Path) -> Option<(u32, u32)> {
    use std::io::Read;
    let mut header = [0u8; 24];
    fs::File::open(path).ok()?.read_exact(&mut header).ok()?;
    if &header[..8] != b"\x89PNG\r\n\x1a\n" || &header[12..16] != b"IHDR" {
        return None;
    }
    let w = u32::from_be_bytes(header[16..20].try_into().ok()?);
    let h = u32::from_be_bytes(header[20..24].try_into().ok()?);
    Some((w, h))
}

/// Frame ids of a split bound to a dataset root; frames load on demand.
#[derive(Debug, Clone)]
pub struct SplitIndex {
    pub layout: DatasetLayout,
    pub ids: Vec<String>,
    pub options: LoadOptions,
}

impl SplitIndex {
    pub fn new(list_text: &str, root: impl Into<PathBuf>, options: LoadOptions) -> Result<Self, KittiError> {
        Ok(SplitIndex {
            layout: DatasetLayout::new(root),
            ids: parse_split_list(list_text)?,
            options,
        })
    }

    /// Lazily loads frames in list order, one result per id.
    pub fn frames(&self) -> impl Iterator<Item = Result<FrameData, KittiError>> + '_ {
        self.ids
            .iter()
            .map(move |id| self.layout.load_frame(id, &self.options))
    }

    /// Loads every frame in parallel; results keep list order.
    pub fn load_each(&self) -> Vec<Result<FrameData, KittiError>> {
        self.ids
            .par_iter()
            .map(|id| self.layout.load_frame(id, &self.options))
            .collect()
    }
}

/// Eagerly loads a split, failing on the first frame (in list order) that
/// cannot be read.
pub fn load_split(list_text: &str, root: &Path) -> Result<Vec<FrameData>, KittiError> {
    SplitIndex::new(list_text, root, LoadOptions::default())?
        .load_each()
        .into_iter()
        .collect()
}
