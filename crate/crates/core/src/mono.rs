//! Monocular 3D localization from a 2D box, and seed scattering.
//!
//! Every side of the 2D box is touched by one projected corner of the 3D box.
//! For a chosen side-to-corner assignment the four tangency conditions are
//! linear in the unknown center once cross-multiplied by the homogeneous
//! depth, giving an over-determined 4x3 system solved in the least-squares
//! sense. The search keeps the assignment whose projected hull best overlaps
//! the input box.

use nalgebra::{Matrix3x4, Matrix4x3, Point3, RowVector3, Vector3, Vector4};
use thiserror::Error;

use crate::geom::{corner_offsets, iou_2d, Box2D, Box3D, Dims, GeomError, ProjectionMatrix};

/// Relative singular-value floor below which the system counts as rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonoError {
    #[error("corner configuration {0} gives a rank-deficient system")]
    SingularSystem(usize),
    #[error("no corner configuration yields a feasible box")]
    NoFeasibleConfiguration,
    #[error("invalid scatter parameters s={s}, m={m}")]
    InvalidScatterParams { s: f64, m: f64 },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Sides of a 2D box, in the order used by [`CornerConfiguration`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Top,
    Right,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Top, Side::Right, Side::Bottom];

    fn image_axis(self) -> usize {
        match self {
            Side::Left | Side::Right => 0,
            Side::Top | Side::Bottom => 1,
        }
    }

    fn coordinate(self, b: &Box2D) -> f64 {
        match self {
            Side::Left => b.xmin,
            Side::Top => b.ymin,
            Side::Right => b.xmax,
            Side::Bottom => b.ymax,
        }
    }
}

/// Which box corner (0..8, see [`Box3D::corners`]) touches each 2D side,
/// indexed by [`Side`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CornerConfiguration {
    pub corners: [u8; 4],
}

impl CornerConfiguration {
    pub const COUNT: usize = 4096;

    pub fn new(left: u8, top: u8, right: u8, bottom: u8) -> Self {
        assert!(left < 8 && top < 8 && right < 8 && bottom < 8);
        CornerConfiguration {
            corners: [left, top, right, bottom],
        }
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < Self::COUNT);
        let d = |k: u32| ((index >> (3 * k)) & 7) as u8;
        CornerConfiguration::new(d(3), d(2), d(1), d(0))
    }

    /// Position in the full enumeration (base-8 digits left, top, right, bottom).
    pub fn index(&self) -> usize {
        self.corners
            .iter()
            .fold(0usize, |acc, &c| acc * 8 + c as usize)
    }

    pub fn corner(&self, side: Side) -> usize {
        self.corners[side as usize] as usize
    }

    /// A single corner cannot touch two parallel sides of a box with extent.
    pub fn is_degenerate(&self) -> bool {
        self.corners[0] == self.corners[2] || self.corners[1] == self.corners[3]
    }
}

impl std::fmt::Display for CornerConfiguration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [l, t, r, b] = self.corners;
        write!(f, "L{l}T{t}R{r}B{b}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfigurationSet {
    /// All 8^4 side-to-corner assignments.
    #[default]
    Full,
    /// Left and right from the bottom face, top and bottom sharing one
    /// vertical edge: 64 assignments.
    Reduced,
}

impl ConfigurationSet {
    pub fn configurations(&self) -> Vec<CornerConfiguration> {
        match self {
            ConfigurationSet::Full => (0..CornerConfiguration::COUNT)
                .map(CornerConfiguration::from_index)
                .collect(),
            ConfigurationSet::Reduced => {
                let mut out = Vec::with_capacity(64);
                for left in 0..4 {
                    for edge in 0..4 {
                        for right in 0..4 {
                            out.push(CornerConfiguration::new(left, edge + 4, right, edge));
                        }
                    }
                }
                out.sort_by_key(|c| c.index());
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Reprojection RMS above which a solution is infeasible, in pixels.
    pub max_residual_px: f64,
    /// Solutions farther than this (camera z, meters) are infeasible.
    pub max_depth: f64,
    pub configurations: ConfigurationSet,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_residual_px: 10.0,
            max_depth: 150.0,
            configurations: ConfigurationSet::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Infeasibility {
    BehindCamera,
    TooFar,
    ResidualTooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationSolution {
    pub center: Point3<f64>,
    /// RMS distance in pixels between each assigned corner and its side.
    pub residual_rms: f64,
    pub infeasible: Option<Infeasibility>,
}

impl TranslationSolution {
    pub fn is_feasible(&self) -> bool {
        self.infeasible.is_none()
    }
}

/// The cross-multiplied tangency rows for one (2D box, camera) pair. The
/// left-hand side does not depend on the corner assignment.
struct TangencySystem {
    rows: [RowVector3<f64>; 4],
    constants: [f64; 4],
    /// Least-squares solve operator `R^-1 Q^T` from the QR factorization.
    solve: Matrix3x4<f64>,
}

impl TangencySystem {
    fn new(b: &Box2D, p: &ProjectionMatrix) -> Option<Self> {
        let m = p.matrix();
        let mut rows = [RowVector3::zeros(); 4];
        let mut constants = [0.0; 4];
        for side in Side::ALL {
            let k = side.image_axis();
            let coord = side.coordinate(b);
            let i = side as usize;
            rows[i] = RowVector3::new(
                m[(k, 0)] - coord * m[(2, 0)],
                m[(k, 1)] - coord * m[(2, 1)],
                m[(k, 2)] - coord * m[(2, 2)],
            );
            constants[i] = m[(k, 3)] - coord * m[(2, 3)];
        }
        let a = Matrix4x3::from_rows(&rows);
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin / smax < RANK_TOL {
            return None;
        }
        let qr = a.qr();
        let solve = qr.r().try_inverse()? * qr.q().transpose();
        Some(TangencySystem {
            rows,
            constants,
            solve,
        })
    }

    /// Right-hand side entry for a side pinned by a corner at offset `o`.
    fn rhs(&self, side: usize, o: &Vector3<f64>) -> f64 {
        -(self.rows[side].dot(&o.transpose()) + self.constants[side])
    }
}

fn assigned_residual(
    center: &Point3<f64>,
    offsets: &[Vector3<f64>; 8],
    config: &CornerConfiguration,
    b: &Box2D,
    p: &ProjectionMatrix,
) -> Option<f64> {
    let mut sq = 0.0;
    for side in Side::ALL {
        let uv = p.project(&(center + offsets[config.corner(side)]))?;
        let r = uv[side.image_axis()] - side.coordinate(b);
        sq += r * r;
    }
    Some((sq / 4.0).sqrt())
}

/// Solves the box center for one corner configuration.
pub fn solve_translation(
    box2d: &Box2D,
    dims: &Dims,
    yaw: f64,
    config: &CornerConfiguration,
    p: &ProjectionMatrix,
    cfg: &SolverConfig,
) -> Result<TranslationSolution, MonoError> {
    dims.validate()?;
    if config.is_degenerate() {
        return Err(MonoError::SingularSystem(config.index()));
    }
    let system = TangencySystem::new(box2d, p).ok_or(MonoError::SingularSystem(config.index()))?;
    let offsets = corner_offsets(dims, yaw);
    let rhs = Vector4::from_fn(|i, _| system.rhs(i, &offsets[config.corners[i] as usize]));
    let t = system.solve * rhs;
    let center = Point3::from(t);
    Ok(classify(center, &offsets, config, box2d, p, cfg))
}

fn classify(
    center: Point3<f64>,
    offsets: &[Vector3<f64>; 8],
    config: &CornerConfiguration,
    box2d: &Box2D,
    p: &ProjectionMatrix,
    cfg: &SolverConfig,
) -> TranslationSolution {
    let in_front = center.z > 0.0 && offsets.iter().all(|o| center.z + o.z > 0.0);
    let residual = if in_front {
        assigned_residual(&center, offsets, config, box2d, p)
    } else {
        None
    };
    let (residual_rms, infeasible) = match residual {
        None => (f64::INFINITY, Some(Infeasibility::BehindCamera)),
        Some(_) if center.z > cfg.max_depth => (residual.unwrap(), Some(Infeasibility::TooFar)),
        Some(r) if !(r <= cfg.max_residual_px) => (r, Some(Infeasibility::ResidualTooLarge)),
        Some(r) => (r, None),
    };
    TranslationSolution {
        center,
        residual_rms,
        infeasible,
    }
}

/// Result of the agreement search for one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonoEstimate {
    pub box2d: Box2D,
    pub dims: Dims,
    pub yaw: f64,
    pub solved_center: Point3<f64>,
    pub best_config: CornerConfiguration,
    /// IoU between the input box and the projection of the solved box.
    pub agreement: f64,
    pub residual_rms: f64,
}

impl MonoEstimate {
    pub fn solved_box(&self) -> Box3D {
        Box3D::new(self.solved_center, self.dims, self.yaw)
            .expect("estimate holds validated dims and a finite center")
    }
}

/// Enumerates the configuration set and keeps the assignment whose projected
/// box agrees best with `box2d`. Ties go to the smaller residual, then to the
/// lower configuration index.
pub fn geometric_agreement_search(
    box2d: &Box2D,
    dims: &Dims,
    yaw: f64,
    p: &ProjectionMatrix,
    cfg: &SolverConfig,
) -> Result<MonoEstimate, MonoError> {
    dims.validate()?;
    let Some(system) = TangencySystem::new(box2d, p) else {
        return Err(MonoError::NoFeasibleConfiguration);
    };
    let offsets = corner_offsets(dims, yaw);
    // contribution[side][corner] = column `side` of the solve operator times
    // that side's right-hand side for the corner.
    let mut contribution = [[Vector3::zeros(); 8]; 4];
    for (side, row) in contribution.iter_mut().enumerate() {
        let column = system.solve.column(side).into_owned();
        for (corner, slot) in row.iter_mut().enumerate() {
            *slot = column * system.rhs(side, &offsets[corner]);
        }
    }

    let mut best: Option<(f64, f64, CornerConfiguration, Point3<f64>)> = None;
    for config in cfg.configurations.configurations() {
        if config.is_degenerate() {
            continue;
        }
        let t = (0..4).fold(Vector3::zeros(), |acc, s| {
            acc + contribution[s][config.corners[s] as usize]
        });
        let center = Point3::from(t);
        if center.z <= 0.0 || center.z > cfg.max_depth {
            continue;
        }
        let mut uv = [[0.0; 2]; 8];
        let mut visible = true;
        for (slot, o) in uv.iter_mut().zip(&offsets) {
            if center.z + o.z <= 0.0 {
                visible = false;
                break;
            }
            match p.project(&(center + o)) {
                Some(q) => *slot = q,
                None => {
                    visible = false;
                    break;
                }
            }
        }
        if !visible {
            continue;
        }
        let at = |side: Side| uv[config.corner(side)];
        if at(Side::Left)[0] >= at(Side::Right)[0] || at(Side::Top)[1] >= at(Side::Bottom)[1] {
            continue;
        }
        let residual = (Side::ALL
            .iter()
            .map(|&s| {
                let r = at(s)[s.image_axis()] - s.coordinate(box2d);
                r * r
            })
            .sum::<f64>()
            / 4.0)
            .sqrt();
        if !(residual <= cfg.max_residual_px) {
            continue;
        }
        let hull = uv.iter().fold(
            Box2D {
                xmin: f64::INFINITY,
                ymin: f64::INFINITY,
                xmax: f64::NEG_INFINITY,
                ymax: f64::NEG_INFINITY,
            },
            |h, q| Box2D {
                xmin: h.xmin.min(q[0]),
                ymin: h.ymin.min(q[1]),
                xmax: h.xmax.max(q[0]),
                ymax: h.ymax.max(q[1]),
            },
        );
        let agreement = iou_2d(box2d, &hull);
        let better = match &best {
            None => true,
            Some((a, r, _, _)) => agreement > *a || (agreement == *a && residual < *r),
        };
        if better {
            best = Some((agreement, residual, config, center));
        }
    }

    let (agreement, residual_rms, best_config, solved_center) =
        best.ok_or(MonoError::NoFeasibleConfiguration)?;
    Ok(MonoEstimate {
        box2d: *box2d,
        dims: *dims,
        yaw,
        solved_center,
        best_config,
        agreement,
        residual_rms,
    })
}

/// Size-deviation ratio `s` and seed stride `m` (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterParams {
    s: f64,
    m: f64,
}

impl ScatterParams {
    pub fn new(s: f64, m: f64) -> Result<Self, MonoError> {
        if !(s > 0.0 && s < 1.0 && m > 0.0 && m.is_finite()) {
            return Err(MonoError::InvalidScatterParams { s, m });
        }
        Ok(ScatterParams { s, m })
    }

    /// No size deviation: the single seed is the solved center itself.
    pub fn direct(m: f64) -> Result<Self, MonoError> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(MonoError::InvalidScatterParams { s: 0.0, m });
        }
        Ok(ScatterParams { s: 0.0, m })
    }

    /// `s` in `[0, 1)`; zero only via [`ScatterParams::direct`].
    pub fn with_s(s: f64, m: f64) -> Result<Self, MonoError> {
        if s == 0.0 {
            Self::direct(m)
        } else {
            Self::new(s, m)
        }
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn m(&self) -> f64 {
        self.m
    }
}

impl Default for ScatterParams {
    fn default() -> Self {
        ScatterParams { s: 0.5, m: 1.6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterResult {
    pub seeds: Vec<Point3<f64>>,
    /// Center solved with `(1 - s)` scaled dimensions.
    pub p1: Point3<f64>,
    /// Center solved with `(1 + s)` scaled dimensions.
    pub p2: Point3<f64>,
}

/// Number of seeds for a segment of the given length: `ceil(len / m)`, at least one.
pub fn seed_count(length: f64, m: f64) -> usize {
    ((length / m).ceil() as usize).max(1)
}

/// Seeds equally spaced on `[p1, p2]`, starting at `p1`, `len / n` apart.
pub fn seeds_on_segment(p1: &Point3<f64>, p2: &Point3<f64>, m: f64) -> Vec<Point3<f64>> {
    let n = seed_count((p2 - p1).norm(), m);
    (0..n)
        .map(|k| p1 + (p2 - p1) * (k as f64 / n as f64))
        .collect()
}

/// Re-solves the estimate's configuration with the two extreme sizes and
/// places seeds between the resulting centers.
pub fn spatial_scatter(
    est: &MonoEstimate,
    params: &ScatterParams,
    p: &ProjectionMatrix,
) -> Result<ScatterResult, MonoError> {
    let cfg = SolverConfig::default();
    let small = est.dims.scaled(1.0 - params.s);
    let large = est.dims.scaled(1.0 + params.s);
    let p1 = solve_translation(&est.box2d, &small, est.yaw, &est.best_config, p, &cfg)?.center;
    let p2 = solve_translation(&est.box2d, &large, est.yaw, &est.best_config, p, &cfg)?.center;
    Ok(ScatterResult {
        seeds: seeds_on_segment(&p1, &p2, params.m),
        p1,
        p2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project_box;

    fn truth() -> Box3D {
        Box3D::new(
            Point3::new(2.0, 0.5, 15.0),
            Dims::new(1.6, 1.5, 3.9).unwrap(),
            0.3,
        )
        .unwrap()
    }

    /// The assignment realised by the true box: extreme projected corners.
    fn tight_config(b: &Box3D, p: &ProjectionMatrix) -> CornerConfiguration {
        let uv: Vec<[f64; 2]> = b.corners().iter().map(|c| p.project(c).unwrap()).collect();
        let arg = |key: &dyn Fn(usize) -> f64| {
            (0..8)
                .min_by(|&i, &j| key(i).partial_cmp(&key(j)).unwrap())
                .unwrap() as u8
        };
        CornerConfiguration::new(
            arg(&|i| uv[i][0]),
            arg(&|i| uv[i][1]),
            arg(&|i| -uv[i][0]),
            arg(&|i| -uv[i][1]),
        )
    }

    #[test]
    fn index_round_trip() {
        for i in [0, 1, 511, 2048, 4095] {
            assert_eq!(CornerConfiguration::from_index(i).index(), i);
        }
        assert_eq!(ConfigurationSet::Reduced.configurations().len(), 64);
        assert_eq!(ConfigurationSet::Full.configurations().len(), 4096);
    }

    #[test]
    fn recovers_center_with_true_configuration() {
        let p = ProjectionMatrix::kitti_default();
        let b = truth();
        let b2 = project_box(&b, &p).unwrap();
        let c = tight_config(&b, &p);
        let sol = solve_translation(&b2, &b.dims(), b.yaw(), &c, &p, &SolverConfig::default()).unwrap();
        assert!(sol.is_feasible());
        assert!((sol.center - b.center()).norm() < 1e-3);
        assert!(sol.residual_rms < 1e-6);
    }

    #[test]
    fn single_corner_configuration_is_singular() {
        let p = ProjectionMatrix::kitti_default();
        let b = truth();
        let b2 = project_box(&b, &p).unwrap();
        let c = CornerConfiguration::new(3, 3, 3, 3);
        assert!(matches!(
            solve_translation(&b2, &b.dims(), b.yaw(), &c, &p, &SolverConfig::default()),
            Err(MonoError::SingularSystem(_))
        ));
    }

    #[test]
    fn projective_scale_invariance() {
        let p = ProjectionMatrix::pinhole(700.0, 0.0, 0.0).unwrap();
        let p2 = ProjectionMatrix::pinhole(1400.0, 0.0, 0.0).unwrap();
        let b = truth();
        let b2 = project_box(&b, &p).unwrap();
        let doubled = Box2D::new(2.0 * b2.xmin, 2.0 * b2.ymin, 2.0 * b2.xmax, 2.0 * b2.ymax).unwrap();
        let c = tight_config(&b, &p);
        let cfg = SolverConfig::default();
        let s1 = solve_translation(&b2, &b.dims(), b.yaw(), &c, &p, &cfg).unwrap();
        let s2 = solve_translation(&doubled, &b.dims(), b.yaw(), &c, &p2, &cfg).unwrap();
        assert!((s1.center - s2.center).norm() < 1e-9);
    }

    #[test]
    fn search_round_trip() {
        let p = ProjectionMatrix::kitti_default();
        let b = truth();
        let b2 = project_box(&b, &p).unwrap();
        let est = geometric_agreement_search(&b2, &b.dims(), b.yaw(), &p, &SolverConfig::default()).unwrap();
        assert!(est.agreement >= 0.99);
        assert!((est.solved_center - b.center()).norm() < 1e-2);
        let reproj = project_box(&est.solved_box(), &p).unwrap();
        assert!((iou_2d(&b2, &reproj) - est.agreement).abs() < 1e-9);
    }

    #[test]
    fn reduced_set_agrees_for_typical_car() {
        let p = ProjectionMatrix::kitti_default();
        let b = truth();
        let b2 = project_box(&b, &p).unwrap();
        let cfg = SolverConfig {
            configurations: ConfigurationSet::Reduced,
            ..SolverConfig::default()
        };
        let est = geometric_agreement_search(&b2, &b.dims(), b.yaw(), &p, &cfg).unwrap();
        assert!((est.solved_center - b.center()).norm() < 1e-2);
    }

    #[test]
    fn tiny_box_is_not_solvable() {
        let p = ProjectionMatrix::kitti_default();
        let b2 = Box2D::new(600.0, 170.0, 600.0 + 1e-6, 170.0 + 1e-6).unwrap();
        let dims = Dims::new(1.6, 1.5, 3.9).unwrap();
        match geometric_agreement_search(&b2, &dims, 0.0, &p, &SolverConfig::default()) {
            Err(MonoError::NoFeasibleConfiguration) => {}
            Ok(est) => assert!(est.agreement < 0.01, "agreement {}", est.agreement),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn scatter_zero_deviation_limit() {
        let p = ProjectionMatrix::kitti_default();
        let b = truth();
        let b2 = project_box(&b, &p).unwrap();
        let est = geometric_agreement_search(&b2, &b.dims(), b.yaw(), &p, &SolverConfig::default()).unwrap();
        let res = spatial_scatter(&est, &ScatterParams::new(1e-9, 1.6).unwrap(), &p).unwrap();
        assert_eq!(res.seeds.len(), 1);
        assert!((res.seeds[0] - est.solved_center).norm() < 1e-6);
    }

    #[test]
    fn seed_count_arithmetic() {
        assert_eq!(seed_count(4.0, 1.6), 3);
        assert_eq!(seed_count(0.0, 1.6), 1);
        assert_eq!(seed_count(3.2, 1.6), 2);
        let p1 = Point3::new(0.0, 0.0, 10.0);
        let p2 = Point3::new(0.0, 0.0, 14.0);
        let seeds = seeds_on_segment(&p1, &p2, 1.6);
        assert_eq!(seeds.len(), 3);
        assert_eq!(seeds[0], p1);
        assert!((seeds[1].z - (10.0 + 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn scatter_params_validation() {
        assert!(ScatterParams::new(0.0, 1.6).is_err());
        assert!(ScatterParams::new(1.0, 1.6).is_err());
        assert!(ScatterParams::new(0.5, 0.0).is_err());
        assert!(ScatterParams::new(0.5, 1.6).is_ok());
    }
}
