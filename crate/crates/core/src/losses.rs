//! Multi-task RPN and BRN losses with analytic gradients.
//!
//! Regression terms use the Huber loss and classification terms use
//! cross-entropy. Location residuals are measured on bound-normalized
//! offsets, `2 (sigmoid(t) - 0.5) - (target - center) / bound`, so every
//! axis lives on the same `[-2, 2]` scale.

use nalgebra::Point3;
use thiserror::Error;

use crate::codec::{argmax, sigmoid, BoxCodec, BrnOutput, ProposalRegion, RpnOutput};
use crate::geom::Box3D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("target index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("prediction arity does not match the codec")]
    ArityMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_obj: f64,
    pub huber_delta: f64,
    /// The BRN loss is switched off once the proposal box reaches this 3D IoU.
    pub brn_iou_gate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_obj: 1.0,
            huber_delta: 1.0,
            brn_iou_gate: 0.8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_obj > 0.0) {
            return Err(LossError::InvalidConfig("lambda_obj must be positive"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(LossError::InvalidConfig("huber_delta must be positive"));
        }
        if !(self.brn_iou_gate > 0.0 && self.brn_iou_gate <= 1.0) {
            return Err(LossError::InvalidConfig("brn_iou_gate must be in (0, 1]"));
        }
        Ok(())
    }
}

pub fn huber(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`]; zero at the origin.
pub fn huber_grad(residual: f64, delta: f64) -> f64 {
    if residual.abs() <= delta {
        residual
    } else {
        delta * residual.signum()
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64, LossError> {
    if target >= logits.len() {
        return Err(LossError::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `sigmoid(t)` against a boolean label.
pub fn binary_cross_entropy(t: f64, positive: bool) -> f64 {
    if positive {
        softplus(-t)
    } else {
        softplus(t)
    }
}

/// Loss values before masking.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub obj: f64,
    pub loc: f64,
    pub rot_cls: f64,
    pub rot_reg: f64,
    pub size_cls: f64,
    pub size_reg: f64,
}

/// Indicator values; a term contributes only when its mask is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossMasks {
    pub obj: bool,
    pub loc: bool,
    pub rot_cls: bool,
    pub rot_reg: bool,
    pub size_cls: bool,
    pub size_reg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: LossTerms,
    pub masks: LossMasks,
    /// Weight on the objectness term.
    pub obj_weight: f64,
}

impl LossBreakdown {
    fn assemble(terms: LossTerms, masks: LossMasks, obj_weight: f64) -> Self {
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        let total = pick(masks.obj, obj_weight * terms.obj)
            + pick(masks.loc, terms.loc)
            + pick(masks.rot_cls, terms.rot_cls)
            + pick(masks.rot_reg, terms.rot_reg)
            + pick(masks.size_cls, terms.size_cls)
            + pick(masks.size_reg, terms.size_reg);
        LossBreakdown {
            total,
            terms,
            masks,
            obj_weight,
        }
    }
}

fn location_residuals(t: &[f64; 3], target: &Point3<f64>, region: &ProposalRegion) -> [f64; 3] {
    let c = region.center();
    let m = region.bounds();
    std::array::from_fn(|a| 2.0 * (sigmoid(t[a]) - 0.5) - (target[a] - c[a]) / m[a])
}

fn location_loss(t: &[f64; 3], target: &Point3<f64>, region: &ProposalRegion, delta: f64) -> f64 {
    location_residuals(t, target, region)
        .iter()
        .map(|r| huber(*r, delta))
        .sum()
}

fn location_grad(t: &[f64; 3], target: &Point3<f64>, region: &ProposalRegion, delta: f64) -> [f64; 3] {
    let r = location_residuals(t, target, region);
    std::array::from_fn(|a| {
        let s = sigmoid(t[a]);
        huber_grad(r[a], delta) * 2.0 * s * (1.0 - s)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnTarget {
    pub is_object: bool,
    pub location: Point3<f64>,
}

/// `lambda * L_obj + [object] L_loc`.
pub fn rpn_loss(
    pred: &RpnOutput,
    target: &RpnTarget,
    region: &ProposalRegion,
    cfg: &LossConfig,
) -> LossBreakdown {
    let terms = LossTerms {
        obj: binary_cross_entropy(pred.objectness, target.is_object),
        loc: location_loss(&pred.location, &target.location, region, cfg.huber_delta),
        ..LossTerms::default()
    };
    let masks = LossMasks {
        obj: true,
        loc: target.is_object,
        ..LossMasks::default()
    };
    LossBreakdown::assemble(terms, masks, cfg.lambda_obj)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RpnGradient {
    pub location: [f64; 3],
    pub objectness: f64,
}

pub fn rpn_gradients(
    pred: &RpnOutput,
    target: &RpnTarget,
    region: &ProposalRegion,
    cfg: &LossConfig,
) -> RpnGradient {
    let y = if target.is_object { 1.0 } else { 0.0 };
    RpnGradient {
        location: if target.is_object {
            location_grad(&pred.location, &target.location, region, cfg.huber_delta)
        } else {
            [0.0; 3]
        },
        objectness: cfg.lambda_obj * (sigmoid(pred.objectness) - y),
    }
}

fn check_arity(pred: &BrnOutput, codec: &BoxCodec) -> Result<(), LossError> {
    let (n_r, n_c) = (codec.bins.count(), codec.clusters.count());
    if pred.rotation.logits.len() != n_r
        || pred.rotation.residuals.len() != n_r
        || pred.size.logits.len() != n_c
        || pred.size.residuals.len() != n_c
    {
        return Err(LossError::ArityMismatch);
    }
    Ok(())
}

/// `[iou < gate] (L_loc + L_rot_cls + [rot cls hit] L_rot_reg + L_size_cls + [size cls hit] L_size_reg)`.
///
/// `proposal_box_iou` is the 3D IoU the caller associates with the proposal;
/// see the crate README for the convention used by the pipeline.
pub fn brn_loss(
    pred: &BrnOutput,
    target: &Box3D,
    region: &ProposalRegion,
    codec: &BoxCodec,
    proposal_box_iou: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    check_arity(pred, codec)?;
    let gate = proposal_box_iou < cfg.brn_iou_gate;
    let (rot_bin, rot_res) = codec.bins.target(target.yaw());
    let (size_cls, size_res) = codec.clusters.target(&target.dims());
    let pred_size = pred.size.residuals[size_cls];
    let terms = LossTerms {
        obj: 0.0,
        loc: location_loss(&pred.location, &target.center(), region, cfg.huber_delta),
        rot_cls: cross_entropy(&pred.rotation.logits, rot_bin)?,
        rot_reg: huber(pred.rotation.residuals[rot_bin] - rot_res, cfg.huber_delta),
        size_cls: cross_entropy(&pred.size.logits, size_cls)?,
        size_reg: (0..3)
            .map(|j| huber(pred_size[j] - size_res[j], cfg.huber_delta))
            .sum(),
    };
    let masks = LossMasks {
        obj: false,
        loc: gate,
        rot_cls: gate,
        rot_reg: gate && argmax(&pred.rotation.logits) == rot_bin,
        size_cls: gate,
        size_reg: gate && argmax(&pred.size.logits) == size_cls,
    };
    Ok(LossBreakdown::assemble(terms, masks, 0.0))
}

/// Partials of the BRN total, laid out like [`BrnOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct BrnGradient {
    pub location: [f64; 3],
    pub rotation_logits: Vec<f64>,
    pub rotation_residuals: Vec<f64>,
    pub size_logits: Vec<f64>,
    pub size_residuals: Vec<[f64; 3]>,
}

pub fn brn_gradients(
    pred: &BrnOutput,
    target: &Box3D,
    region: &ProposalRegion,
    codec: &BoxCodec,
    proposal_box_iou: f64,
    cfg: &LossConfig,
) -> Result<BrnGradient, LossError> {
    let breakdown = brn_loss(pred, target, region, codec, proposal_box_iou, cfg)?;
    let masks = breakdown.masks;
    let (n_r, n_c) = (codec.bins.count(), codec.clusters.count());
    let mut g = BrnGradient {
        location: [0.0; 3],
        rotation_logits: vec![0.0; n_r],
        rotation_residuals: vec![0.0; n_r],
        size_logits: vec![0.0; n_c],
        size_residuals: vec![[0.0; 3]; n_c],
    };
    let (rot_bin, rot_res) = codec.bins.target(target.yaw());
    let (size_cls, size_res) = codec.clusters.target(&target.dims());
    if masks.loc {
        g.location = location_grad(&pred.location, &target.center(), region, cfg.huber_delta);
    }
    if masks.rot_cls {
        g.rotation_logits = softmax(&pred.rotation.logits);
        g.rotation_logits[rot_bin] -= 1.0;
    }
    if masks.rot_reg {
        g.rotation_residuals[rot_bin] =
            huber_grad(pred.rotation.residuals[rot_bin] - rot_res, cfg.huber_delta);
    }
    if masks.size_cls {
        g.size_logits = softmax(&pred.size.logits);
        g.size_logits[size_cls] -= 1.0;
    }
    if masks.size_reg {
        let p = pred.size.residuals[size_cls];
        g.size_residuals[size_cls] = std::array::from_fn(|j| huber_grad(p[j] - size_res[j], cfg.huber_delta));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_location, RegionTemplate};
    use crate::geom::Dims;

    fn setup() -> (ProposalRegion, Box3D, BoxCodec) {
        let region = RegionTemplate::default().at(Point3::new(1.0, 1.0, 20.0)).unwrap();
        let target = Box3D::new(Point3::new(1.4, 0.9, 19.2), Dims::new(1.6, 1.5, 3.9).unwrap(), 0.7).unwrap();
        (region, target, BoxCodec::default())
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.7, 0.7), 0.5 * 0.7 * 0.7);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert_eq!(huber_grad(0.0, 1.0), 0.0);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[40.0, 0.0], 0).unwrap() < 1e-17);
        assert!((cross_entropy(&[3.0; 7], 4).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(LossError::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn rpn_negative_masks_location() {
        let (region, target, _) = setup();
        let pred = RpnOutput {
            location: [0.3, -0.2, 1.0],
            objectness: 0.4,
        };
        let t = RpnTarget {
            is_object: false,
            location: target.center(),
        };
        let cfg = LossConfig::default();
        let l = rpn_loss(&pred, &t, &region, &cfg);
        assert!(!l.masks.loc && l.terms.loc > 0.0);
        assert_eq!(l.total, cfg.lambda_obj * l.terms.obj);
        assert_eq!(rpn_gradients(&pred, &t, &region, &cfg).location, [0.0; 3]);
    }

    #[test]
    fn rpn_perfect_prediction() {
        let (region, target, _) = setup();
        let pred = RpnOutput {
            location: encode_location(&target.center(), &region).unwrap(),
            objectness: 40.0,
        };
        let t = RpnTarget {
            is_object: true,
            location: target.center(),
        };
        assert!(rpn_loss(&pred, &t, &region, &LossConfig::default()).total < 1e-6);
    }

    #[test]
    fn rpn_lambda_linearity() {
        let (region, target, _) = setup();
        let pred = RpnOutput {
            location: [0.3, -0.2, 1.0],
            objectness: -0.4,
        };
        let t = RpnTarget {
            is_object: true,
            location: target.center(),
        };
        let one = rpn_loss(&pred, &t, &region, &LossConfig::default());
        let two = rpn_loss(
            &pred,
            &t,
            &region,
            &LossConfig {
                lambda_obj: 2.0,
                ..LossConfig::default()
            },
        );
        assert_eq!(two.obj_weight * two.terms.obj, 2.0 * one.obj_weight * one.terms.obj);
        assert_eq!(two.terms.loc, one.terms.loc);
    }

    #[test]
    fn brn_gate_zeroes_everything() {
        let (region, target, codec) = setup();
        let mut pred = codec.encode_box(&target, &region).unwrap();
        pred.location = [1.0, -1.0, 0.5];
        let l = brn_loss(&pred, &target, &region, &codec, 0.9, &LossConfig::default()).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.terms.loc > 0.0);
    }

    #[test]
    fn brn_rotation_class_miss_masks_residual() {
        let (region, target, codec) = setup();
        let mut pred = codec.encode_box(&target, &region).unwrap();
        let (bin, _) = codec.bins.target(target.yaw());
        pred.rotation.logits[bin] = 0.0;
        pred.rotation.logits[(bin + 3) % codec.bins.count()] = 5.0;
        let l = brn_loss(&pred, &target, &region, &codec, 0.0, &LossConfig::default()).unwrap();
        assert!(!l.masks.rot_reg);
        assert!(l.terms.rot_cls > 0.0);
    }

    #[test]
    fn brn_exact_target_is_near_zero() {
        let (region, target, codec) = setup();
        let pred = codec.encode_box(&target, &region).unwrap();
        let l = brn_loss(&pred, &target, &region, &codec, 0.0, &LossConfig::default()).unwrap();
        assert!(l.total < 1e-6, "total {}", l.total);
    }
}
