//! Target assignment and training losses.
//!
//! The score head is trained with binary cross-entropy against the soft
//! target IoU; offsets with smooth L1 on proposals whose IoU reaches
//! `tau_reg`. Both losses are means so `lambda` does not depend on the
//! number of proposals.

use crate::error::{Error, Result};
use crate::geometry::{encode, temporal_iou, Moment, Proposal};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_TAU_REG: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 0.0025;

/// Per-proposal training targets for one ground-truth moment.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub iou: Vec<f64>,
    pub regress: Vec<bool>,
    /// Center offsets; 0 where `regress` is false.
    pub dc: Vec<f64>,
    /// Width offsets; 0 where `regress` is false.
    pub dw: Vec<f64>,
}

impl Targets {
    pub fn num_regressed(&self) -> usize {
        self.regress.iter().filter(|&&r| r).count()
    }
}

pub fn assign_targets(proposals: &[Proposal], gt: Moment, alpha: f64, beta: f64, tau_reg: f64) -> Result<Targets> {
    if !gt.is_valid() {
        return Err(Error::Geometry(format!("invalid ground truth {gt:?}")));
    }
    if !(0.0..=1.0).contains(&tau_reg) {
        return Err(Error::Config(format!("tau_reg must lie in [0, 1], got {tau_reg}")));
    }
    let n = proposals.len();
    let mut t = Targets {
        iou: Vec::with_capacity(n),
        regress: Vec::with_capacity(n),
        dc: Vec::with_capacity(n),
        dw: Vec::with_capacity(n),
    };
    for p in proposals {
        let iou = temporal_iou(p.anchor, gt);
        let regress = iou >= tau_reg;
        let (dc, dw) = if regress {
            encode(gt, p.anchor, alpha, beta)?
        } else {
            (0.0, 0.0)
        };
        t.iou.push(iou);
        t.regress.push(regress);
        t.dc.push(dc);
        t.dw.push(dw);
    }
    Ok(t)
}

/// `-t·ln θ - (1 - t)·ln(1 - θ)` with θ clipped.
pub fn binary_cross_entropy(theta: f64, target: f64) -> f64 {
    let p = theta.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -target * p.ln() - (1.0 - target) * (1.0 - p).ln()
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Targets for a batch stacked into `[B, J]` tensors.
#[derive(Debug, Clone)]
pub struct BatchTargets<T> {
    pub iou: Tensor<T>,
    pub dc: Tensor<T>,
    pub dw: Tensor<T>,
    pub mask: Tensor<T>,
    pub num_regressed: usize,
}

impl<T: Real> BatchTargets<T> {
    pub fn stack(targets: &[Targets]) -> Result<Self> {
        let rows = targets.len();
        let cols = targets.first().map(|t| t.iou.len()).ok_or(Error::Empty("target batch"))?;
        if targets.iter().any(|t| t.iou.len() != cols) {
            return Err(Error::Config("targets in a batch differ in proposal count".into()));
        }
        let gather = |f: &dyn Fn(&Targets) -> Vec<f64>| -> Tensor<T> {
            let flat: Vec<f64> = targets.iter().flat_map(f).collect();
            Tensor::from_f64(vec![rows, cols], &flat).expect("rows × cols values")
        };
        Ok(Self {
            iou: gather(&|t| t.iou.clone()),
            dc: gather(&|t| t.dc.clone()),
            dw: gather(&|t| t.dw.clone()),
            mask: gather(&|t| t.regress.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect()),
            num_regressed: targets.iter().map(Targets::num_regressed).sum(),
        })
    }
}

/// Mean soft-target cross-entropy between predicted scores `theta` and
/// targets of the same shape.
pub fn iou_loss<T: Real>(tape: &mut Tape<T>, theta: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(theta) != target.shape() {
        return Err(Error::Shape {
            what: "iou targets".into(),
            expected: tape.shape(theta).to_vec(),
            found: target.shape().to_vec(),
        });
    }
    let p = tape.clamp(theta, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(p)?;
    let neg_p = tape.scale(p, -1.0)?;
    let q = tape.shift(neg_p, 1.0)?;
    let log_q = tape.log(q)?;
    let t = tape.constant(target.clone());
    let one_minus_t = {
        let mut data = target.clone();
        data.data_mut().iter_mut().for_each(|v| *v = T::one() - *v);
        tape.constant(data)
    };
    let pos = tape.mul(log_p, t)?;
    let neg = tape.mul(log_q, one_minus_t)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean_all(ll)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Mean over masked proposals of `smooth_l1(t_c - δc) + smooth_l1(t_w - δw)`;
/// a constant zero when nothing is masked.
pub fn reg_loss<T: Real>(
    tape: &mut Tape<T>,
    dc: Var,
    dw: Var,
    target_dc: &Tensor<T>,
    target_dw: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Var> {
    for (what, t) in [("center targets", target_dc), ("width targets", target_dw), ("regression mask", mask)] {
        if t.shape() != tape.shape(dc) || t.shape() != tape.shape(dw) {
            return Err(Error::Shape {
                what: what.into(),
                expected: tape.shape(dc).to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    let count = mask.data().iter().filter(|&&m| m != T::zero()).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let m = tape.constant(mask.clone());
    let mut terms = Vec::with_capacity(2);
    for (pred, target) in [(dc, target_dc), (dw, target_dw)] {
        let t = tape.constant(target.clone());
        let diff = tape.sub(t, pred)?;
        let l = tape.smooth_l1(diff)?;
        terms.push(tape.mul(l, m)?);
    }
    let both = tape.add(terms[0], terms[1])?;
    let sum = tape.sum(both)?;
    Ok(tape.scale(sum, 1.0 / count as f64)?)
}

/// `l_iou + lambda · l_reg`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l_iou: Var, l_reg: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = tape.scale(l_reg, lambda)?;
    Ok(tape.add(l_iou, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::proposal_grid;

    fn scalar_tensor(v: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1, 1], &[v]).unwrap()
    }

    fn iou_loss_at(theta: f64, target: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let th = tape.constant(scalar_tensor(theta));
        let l = iou_loss(&mut tape, th, &scalar_tensor(target)).unwrap();
        tape.data(l)[0]
    }

    #[test]
    fn assign_on_two_cell_grid() {
        let grid = proposal_grid(2, 2, &[1.0]).unwrap();
        let t = assign_targets(&grid, Moment::new(0.25, 0.5), 0.3, 0.3, 0.5).unwrap();
        assert_eq!(t.iou, vec![1.0, 0.0, 0.5]);
        assert_eq!(t.regress, vec![true, false, true]);
        assert_eq!((t.dc[0], t.dw[0]), (0.0, 0.0));
        assert_eq!((t.dc[1], t.dw[1]), (0.0, 0.0));
    }

    #[test]
    fn assign_rejects_bad_inputs() {
        let grid = proposal_grid(2, 2, &[1.0]).unwrap();
        assert!(assign_targets(&grid, Moment::new(0.5, 0.0), 0.3, 0.3, 0.5).is_err());
        assert!(assign_targets(&grid, Moment::new(0.5, 0.2), 0.3, 0.3, 1.5).is_err());
    }

    #[test]
    fn iou_loss_point_values() {
        assert!((iou_loss_at(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        let floor = -0.3 * 0.3f64.ln() - 0.7 * 0.7f64.ln();
        assert!((iou_loss_at(0.3, 0.3) - floor).abs() < 1e-12);
        assert!((floor - 0.610_864).abs() < 1e-6);
        assert!(iou_loss_at(1.0 - 1e-12, 1.0) < 1e-6);
        assert!(iou_loss_at(0.0, 0.0).is_finite());
        assert!((binary_cross_entropy(0.3, 0.3) - floor).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn reg_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let preds = Tensor::from_f64(vec![1, 2], &[0.2, -0.1]).unwrap();
        let dc = tape.param(preds.clone());
        let dw = tape.param(preds.clone());
        let ones = Tensor::full(vec![1, 2], 1.0);
        let l = reg_loss(&mut tape, dc, dw, &preds, &preds, &ones).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);

        let tc = Tensor::from_f64(vec![1, 2], &[0.7, 5.0]).unwrap();
        let mask = Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap();
        let l = reg_loss(&mut tape, dc, dw, &tc, &preds, &mask).unwrap();
        assert!((tape.data(l)[0] - 0.125).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(dc).unwrap()[1], 0.0);
        assert_eq!(tape.grad(dw).unwrap()[1], 0.0);

        let zeros = Tensor::zeros(vec![1, 2]);
        let l = reg_loss(&mut tape, dc, dw, &tc, &preds, &zeros).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(0.6));
        let b = tape.constant(Tensor::scalar(4.0));
        let t = total_loss(&mut tape, a, b, DEFAULT_LAMBDA).unwrap();
        assert!((tape.data(t)[0] - 0.61).abs() < 1e-12);
        let t = total_loss(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(tape.data(t)[0], 0.6);
        assert!(total_loss(&mut tape, a, b, -1.0).is_err());
    }
}
