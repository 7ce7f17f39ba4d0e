//! The composite training objective.

use omg_tensor::{Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictions;
use crate::params::Ctx;

/// Weights of balanced BCE, Dice, and detection BCE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { a: 0.3, b: 0.45, c: 0.25 }
    }
}

/// Ground truth for a batch: `[B * H * W]` binary mask values and `[B]` labels.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    pub samples: usize,
    pub loc: Vec<T>,
    pub det: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub value: f64,
    pub bbce: f64,
    pub dice: f64,
    pub det: f64,
}

/// `a * bBCE + b * Dice + c * BCE(det)`, with the components for logging.
pub fn total_loss<T: Real>(ctx: &mut Ctx<T>, pred: &Predictions, target: &Targets<T>, w: LossWeights) -> Result<LossParts> {
    if w.a < 0.0 || w.b < 0.0 || w.c < 0.0 {
        return Err(Error::Config(format!("negative loss weight in {w:?}")));
    }
    let g = &mut ctx.g;
    let bbce = g.balanced_bce(pred.loc, &target.loc, target.samples)?;
    let dice = g.dice_loss(pred.loc, &target.loc, target.samples)?;
    let det = g.bce(pred.det, &target.det)?;
    let terms = [g.scale(bbce, T::lit(w.a)), g.scale(dice, T::lit(w.b)), g.scale(det, T::lit(w.c))];
    let s = g.add(terms[0], terms[1])?;
    let total = g.add(s, terms[2])?;
    let v = |x: Var| g.value(x).data()[0].as_f64();
    Ok(LossParts { total, value: v(total), bbce: v(bbce), dice: v(dice), det: v(det) })
}
