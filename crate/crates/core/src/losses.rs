//! Heatmap focal loss, masked L1 regression losses and their weighted sum.

use crate::autodiff::{FocalParams, Tape, Var};
use crate::error::{Error, Result};
use crate::targets::TargetBundle;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub size: f64,
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            size: 0.1,
            offset: 1.0,
        }
    }
}

/// Focal loss of a predicted heatmap (any shape) against target values.
pub fn focal_loss(tape: &mut Tape, pred: Var, target: &Tensor, params: FocalParams) -> Result<Var> {
    if tape.value(pred).len() != target.numel() {
        return Err(Error::shape(
            "focal_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(pred), target.shape()),
        ));
    }
    tape.focal_loss(pred, target.values(), params)
}

/// Focal loss evaluated outside any training graph.
pub fn focal_loss_value(pred: &Tensor, target: &Tensor, params: FocalParams) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "focal_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let l = focal_loss(&mut tape, p, target, params)?;
    Ok(tape.scalar(l))
}

/// L1 losses on the size map (`2 x H x W`: width, height) and offset map
/// (`2 x H x W`: dx, dy), read only at the target center cell.
pub fn regression_losses(
    tape: &mut Tape,
    size: Var,
    offset: Var,
    targets: &TargetBundle,
) -> Result<(Var, Var)> {
    let (mh, mw) = (targets.heatmap.shape()[0], targets.heatmap.shape()[1]);
    for (name, v) in [("size", size), ("offset", offset)] {
        if tape.shape(v) != [2, mh, mw] {
            return Err(Error::shape(
                "regression_losses",
                format!("{name} map {:?} vs heatmap {mh}x{mw}", tape.shape(v)),
            ));
        }
    }
    let c = targets.center_index();
    let plane = mh * mw;
    let mut l1 = |map: Var, targets: (f64, f64)| -> Result<Var> {
        let a = tape.pick(map, c)?;
        let b = tape.pick(map, plane + c)?;
        let da = tape.offset(a, -targets.0);
        let db = tape.offset(b, -targets.1);
        let (da, db) = (tape.abs(da), tape.abs(db));
        tape.add(da, db)
    };
    let l_size = l1(size, targets.size_target)?;
    let l_off = l1(offset, targets.offset_target)?;
    Ok((l_size, l_off))
}

/// `L_c + w.size * L_size + w.offset * L_off`.
pub fn total_loss(tape: &mut Tape, l_c: Var, l_size: Var, l_off: Var, w: LossWeights) -> Result<Var> {
    let s = tape.scale(l_size, w.size);
    let o = tape.scale(l_off, w.offset);
    let t = tape.add(l_c, s)?;
    tape.add(t, o)
}

pub fn total_loss_value(l_c: f64, l_size: f64, l_off: f64, w: LossWeights) -> f64 {
    l_c + w.size * l_size + w.offset * l_off
}
