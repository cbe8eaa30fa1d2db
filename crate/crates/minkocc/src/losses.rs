//! Training losses: per-level occupancy BCE, class-balanced 3D cross
//! entropy, confidence-weighted 2D cross entropy against pseudo-labels, and
//! the phase-switched total.

use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const LAMBDA1: f64 = 0.5;
pub const LAMBDA2: f64 = 1.0;
pub const BETA: f64 = 0.9;

/// Effective-number class weights (1-beta) / (1-beta^n_y).
#[derive(Clone, Debug)]
pub struct ClassBalance {
    pub beta: f64,
    pub counts: Vec<u64>,
}

impl ClassBalance {
    pub fn new(beta: f64, counts: Vec<u64>) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("beta {beta} outside [0,1)")));
        }
        Ok(ClassBalance { beta, counts })
    }

    pub fn weight(&self, class: usize) -> Result<f64> {
        let n = *self
            .counts
            .get(class)
            .ok_or(Error::UnknownLabel(class as i32))?;
        if n == 0 {
            return Err(Error::Config(format!(
                "class {class} has zero dataset count, cannot be weighted"
            )));
        }
        Ok((1.0 - self.beta) / (1.0 - self.beta.powi(n.min(i32::MAX as u64) as i32)))
    }
}

/// Mean binary cross entropy over all rows of all decoder levels; levels are
/// (keep logits (n,1), 0/1 occupancy targets) pairs. Empty levels contribute
/// nothing to either sum or count.
pub fn occupancy_bce<'t>(tape: &'t Tape, levels: &[(Var<'t>, Vec<f64>)]) -> Result<Var<'t>> {
    let mut total_rows = 0usize;
    let mut acc: Option<Var<'t>> = None;
    for (logits, targets) in levels {
        let n = logits.shape()[0];
        if n != targets.len() {
            return Err(Error::Length(format!(
                "{} occupancy targets for {} rows",
                targets.len(),
                n
            )));
        }
        if n == 0 {
            continue;
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Config("occupancy targets must be 0 or 1".to_string()));
        }
        total_rows += n;
        let per_row = logits.bce_with_logits(Rc::new(targets.clone()));
        let s = per_row.sum();
        acc = Some(match acc {
            Some(a) => a.add(s),
            None => s,
        });
    }
    match acc {
        Some(a) if total_rows > 0 => Ok(a.mul_scalar(1.0 / total_rows as f64)),
        _ => Ok(tape.scalar(0.0)),
    }
}

/// Mean over rows of weight(y) * (-log softmax(logits)_y).
pub fn class_balanced_ce<'t>(
    logits: Var<'t>,
    labels: &[i32],
    balance: &ClassBalance,
) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Length(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Ok(logits.tape().scalar(0.0));
    }
    let mut idx = Vec::with_capacity(n);
    let mut w = Array2::<f64>::zeros((n, 1));
    for (r, &l) in labels.iter().enumerate() {
        if l < 0 || l >= c as i32 {
            return Err(Error::UnknownLabel(l));
        }
        idx.push(r * c + l as usize);
        w[[r, 0]] = balance.weight(l as usize)?;
    }
    let tape = logits.tape();
    let picked = logits.log_softmax_rows().select_flat(Rc::new(idx));
    let weighted = picked.neg().mul(tape.constant(w.into_dyn()));
    Ok(weighted.mean())
}

/// 2D pseudo-labels: class 0 marks unlabeled pixels, confidence is zero
/// exactly there.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelImage {
    pub classes: Array2<i32>,
    pub confidence: Array2<f64>,
}

impl PseudoLabelImage {
    pub fn new(classes: Array2<i32>, confidence: Array2<f64>) -> Result<Self> {
        if classes.shape() != confidence.shape() {
            return Err(Error::Shape(format!(
                "class map {:?} vs confidence map {:?}",
                classes.shape(),
                confidence.shape()
            )));
        }
        for (&cl, &cf) in classes.iter().zip(confidence.iter()) {
            if !(0.0..=1.0).contains(&cf) {
                return Err(Error::Config(format!("confidence {cf} outside [0,1]")));
            }
            if cl == 0 && cf != 0.0 {
                return Err(Error::Config(
                    "unlabeled pixels must carry zero confidence".to_string(),
                ));
            }
        }
        Ok(PseudoLabelImage {
            classes,
            confidence,
        })
    }

    pub fn labeled_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }
}

/// Confidence-weighted cross entropy over labeled pixels, normalized by the
/// labeled-pixel count. `pred` is a (C,H,W) logit image.
pub fn soft_ce_2d<'t>(pred: Var<'t>, pseudo: &PseudoLabelImage) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "expected (C,H,W) logits, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if pseudo.classes.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "{h}x{w} logits vs {:?} pseudo labels",
            pseudo.classes.shape()
        )));
    }
    let tape = pred.tape();
    let labeled = pseudo.labeled_count();
    if labeled == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut idx = Vec::with_capacity(labeled);
    let mut conf = Array2::<f64>::zeros((labeled, 1));
    let mut k = 0usize;
    for y in 0..h {
        for x in 0..w {
            let cl = pseudo.classes[[y, x]];
            if cl == 0 {
                continue;
            }
            if cl < 0 || cl >= c as i32 {
                return Err(Error::UnknownLabel(cl));
            }
            idx.push((y * w + x) * c + cl as usize);
            conf[[k, 0]] = pseudo.confidence[[y, x]];
            k += 1;
        }
    }
    let rows = pred.image_to_rows();
    let picked = rows.log_softmax_rows().select_flat(Rc::new(idx));
    let weighted = picked.neg().mul(tape.constant(conf.into_dyn()));
    Ok(weighted.sum().mul_scalar(1.0 / labeled as f64))
}

/// Warm-start scheduling: steps [0, ceil(alpha * total)) use 3D supervision.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PhaseSchedule {
    pub alpha: f64,
    pub total_steps: u64,
}

impl PhaseSchedule {
    pub fn new(alpha: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
        }
        Ok(PhaseSchedule { alpha, total_steps })
    }

    pub fn warm_steps(&self) -> u64 {
        (self.alpha * self.total_steps as f64).ceil() as u64
    }

    pub fn is_warm(&self, step: u64) -> bool {
        step < self.warm_steps()
    }
}

/// Which semantic loss accompanies the occupancy loss this step.
pub enum SemanticLoss<'t> {
    ThreeD(Var<'t>),
    TwoD(Var<'t>),
}

/// lambda1 * semantic + lambda2 * bce, rejecting a semantic loss from the
/// wrong phase.
pub fn total_loss<'t>(
    schedule: &PhaseSchedule,
    step: u64,
    semantic: SemanticLoss<'t>,
    l_bce: Var<'t>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var<'t>> {
    let warm = schedule.is_warm(step);
    let sem = match (warm, semantic) {
        (true, SemanticLoss::ThreeD(v)) => v,
        (false, SemanticLoss::TwoD(v)) => v,
        (true, SemanticLoss::TwoD(_)) => {
            return Err(Error::Phase(format!(
                "step {step} is in warm-start, got a 2D semantic loss"
            )))
        }
        (false, SemanticLoss::ThreeD(_)) => {
            return Err(Error::Phase(format!(
                "step {step} is past warm-start, got a 3D semantic loss"
            )))
        }
    };
    Ok(sem.mul_scalar(lambda1).add(l_bce.mul_scalar(lambda2)))
}
