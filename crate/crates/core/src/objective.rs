//! Weighted total loss, the gradient-descent update and the central
//! finite-difference gradient.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LAMBDA3_PARAM: &str = "objective.lambda3";
pub const LAMBDA_BLEND_PARAM: &str = "distill.lambda_blend";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    /// Initial value of the learnable weight on the radar-enhancement term.
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub l6: f64,
    pub alpha_igfm: f64,
    /// Initial value of the learnable blend scale.
    pub lambda_blend: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.3,
            l2: 0.3,
            l3: 100.0,
            l4: 0.3,
            l5: 0.3,
            l6: 0.3,
            alpha_igfm: 0.5,
            lambda_blend: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fixed = [self.l1, self.l2, self.l4, self.l5, self.l6];
        if fixed.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return arg(format!("loss weights must be finite and non-negative: {fixed:?}"));
        }
        if !self.l3.is_finite() || !self.lambda_blend.is_finite() {
            return arg("learnable weight initializers must be finite");
        }
        if !(0.0..=1.0).contains(&self.alpha_igfm) {
            return arg(format!("alpha_igfm {} outside [0, 1]", self.alpha_igfm));
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub det: f64,
    pub depth: f64,
    pub igfm: f64,
    pub swfd: f64,
    pub swrd: f64,
    pub ld: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 6] {
        [self.det, self.depth, self.igfm, self.swfd, self.swrd, self.ld]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det: f64,
    pub depth: f64,
    pub igfm: f64,
    pub swfd: f64,
    pub swrd: f64,
    pub ld: f64,
    pub total: f64,
}

/// Per-term multipliers with `lambda3` taken from the parameter store.
pub fn term_weights(w: &LossWeights, lambda3: f64) -> [f64; 6] {
    [w.l1, w.l2, lambda3, w.l4, w.l5, w.l6]
}

pub fn total_loss(c: &LossComponents, w: &LossWeights, lambda3: f64) -> Result<LossBreakdown> {
    let terms = c.as_array();
    if let Some(bad) = terms.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss component {bad}")));
    }
    if let Some(neg) = terms.iter().find(|&&v| v < 0.0) {
        return Err(Error::Invariant(format!("negative loss component {neg}")));
    }
    let total = terms.iter().zip(term_weights(w, lambda3)).map(|(v, l)| v * l).sum();
    Ok(LossBreakdown {
        det: c.det,
        depth: c.depth,
        igfm: c.igfm,
        swfd: c.swfd,
        swrd: c.swrd,
        ld: c.ld,
        total,
    })
}

/// `value -= lr * grad` on trainable entries; frozen entries are skipped.
pub fn train_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return arg(format!("learning rate must be finite and >= 0, got {lr}"));
    }
    for (_, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Central differences `(f(x + h e) - f(x - h e)) / 2h` for every element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return arg(format!("finite-difference step must be positive, got {h}"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!("non-finite objective at element {i}")));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
