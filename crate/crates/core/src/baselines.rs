//! Reference attacks evaluated with the same success test and quantisation
//! as the main attack: targeted C&W (l2) and a frame-sparse gradient attack.

use serde::{Deserialize, Serialize};

use crate::attack::{check_inputs, finish, is_success, quantize_clamp, AttackResult};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::victim::Classifier;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    #[default]
    CwL2,
    SparseL21,
}

impl BaselineMethod {
    pub fn label(self) -> &'static str {
        match self {
            BaselineMethod::CwL2 => "cw_l2",
            BaselineMethod::SparseL21 => "sparse-l2,1 (simplified)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// C&W confidence margin on logits.
    pub kappa: f64,
    /// C&W weight of the margin term.
    pub c: f64,
    pub lr: f64,
    pub max_iters: usize,
    /// Cross-entropy weight of the sparse attack.
    pub lambda_a: f64,
    /// Group shrinkage of the sparse attack, as a fraction of the largest
    /// per-step growth of a frame's norm.
    pub lambda_sparse: f64,
    pub success_confidence: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            method: BaselineMethod::CwL2,
            kappa: 5.0,
            c: 1.0,
            lr: 0.01,
            max_iters: 200,
            lambda_a: 1.0,
            lambda_sparse: 0.3,
            success_confidence: 0.9,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.c > 0.0) || !(self.lr > 0.0) || self.kappa < 0.0 || self.lambda_sparse < 0.0 || self.lambda_a < 0.0 {
            return Err(Error::Config("baseline weights must be non-negative with c, lr > 0".into()));
        }
        if !(self.success_confidence > 0.0 && self.success_confidence < 1.0) {
            return Err(Error::Config("success_confidence must be in (0, 1)".into()));
        }
        Ok(())
    }
}

pub fn run_baseline<C: Classifier<f32> + ?Sized>(x_c: &Tensor<f32>, y_t: usize, f: &C, cfg: &BaselineConfig) -> Result<AttackResult> {
    match cfg.method {
        BaselineMethod::CwL2 => cw_l2_attack(x_c, y_t, f, cfg),
        BaselineMethod::SparseL21 => sparse_l21_attack(x_c, y_t, f, cfg),
    }
}

/// Optimises `w` with `x_a = (tanh(w) + 1) / 2` under
/// `||x_a - x_c||^2 + c * max(max_{j != t} z_j - z_t, -kappa)`, keeping the
/// closest successful quantised iterate.
pub fn cw_l2_attack<C: Classifier<f32> + ?Sized>(x_c: &Tensor<f32>, y_t: usize, f: &C, cfg: &BaselineConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(x_c, y_t, f)?;
    let x_c = x_c.clamp(0.0, 1.0);
    let thr = cfg.success_confidence;
    if is_success(f, &quantize_clamp(&x_c), y_t, thr)?.0 {
        return finish(f, &x_c, quantize_clamp(&x_c), Tensor::zeros(&[0]), y_t, thr, 0, Vec::new());
    }
    let eps = 1e-6f32;
    let mut w = vec![x_c.map(|v| (2.0 * v.clamp(eps, 1.0 - eps) - 1.0).atanh())];
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut best: Option<(f64, Tensor<f32>, usize)> = None;
    let mut closest: Option<(f64, Tensor<f32>)> = None;
    for it in 1..=cfg.max_iters {
        let tape = Tape::new();
        let wv = tape.var(w[0].clone());
        let xa = wv.tanh().shift(1.0).scale(0.5);
        let dist = xa.sub(tape.constant(x_c.clone()))?.sum_squares();
        let margin = f.logits_on_tape(&tape, xa)?.cw_margin(y_t, cfg.kappa as f32)?;
        let loss = dist.add(margin.scale(cfg.c as f32))?;
        let lv = loss.value().item() as f64;
        if !lv.is_finite() {
            return Err(Error::NumericOverflow { stage: format!("cw loss at iteration {it}") });
        }
        trace.push(lv);
        let cand = quantize_clamp(&xa.value());
        let (ok, conf) = is_success(f, &cand, y_t, thr)?;
        if ok {
            let d = cand.sub(&x_c).sq_norm() as f64;
            if best.as_ref().map_or(true, |b| d < b.0) {
                best = Some((d, cand, it));
            }
        } else if closest.as_ref().map_or(true, |b| conf > b.0) {
            closest = Some((conf, cand));
        }
        let g = tape.backward(loss)?.get_or_zeros(wv);
        opt.step(&mut w, std::slice::from_ref(&g))?;
    }
    let (x_a, used) = match (best, closest) {
        (Some((_, x, it)), _) => (x, it),
        (None, Some((_, x))) => (x, cfg.max_iters),
        (None, None) => unreachable!("at least one iteration ran"),
    };
    finish(f, &x_c, x_a, Tensor::zeros(&[0]), y_t, thr, used, trace)
}

/// Shrinks every frame of `delta` towards zero by `tau` in l2 norm.
pub fn group_soft_threshold(delta: &mut Tensor<f32>, tau: f32) -> Result<()> {
    let [c, t, w, h] = delta.dims4()?;
    let norms = delta.frame_sq_norms()?;
    let plane = w * h;
    for (ti, n2) in norms.into_iter().enumerate() {
        let n = n2.sqrt();
        let keep = if n > tau { 1.0 - tau / n } else { 0.0 };
        for ci in 0..c {
            let off = (ci * t + ti) * plane;
            delta.data_mut()[off..off + plane].iter_mut().for_each(|v| *v *= keep);
        }
    }
    Ok(())
}

/// Adam on `lambda_a * CE(f(clip(x_c + delta)), y_t)` followed by a proximal
/// group shrinkage of every frame, stopping at the first quantised success.
pub fn sparse_l21_attack<C: Classifier<f32> + ?Sized>(
    x_c: &Tensor<f32>,
    y_t: usize,
    f: &C,
    cfg: &BaselineConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(x_c, y_t, f)?;
    let x_c = x_c.clamp(0.0, 1.0);
    let thr = cfg.success_confidence;
    let [c, _, w, h] = x_c.dims4()?;
    let tau = (cfg.lambda_sparse * cfg.lr * ((c * w * h) as f64).sqrt()) as f32;
    let mut delta = vec![Tensor::zeros(x_c.shape())];
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut best: Option<(f64, Tensor<f32>)> = None;
    let mut used = cfg.max_iters;
    for it in 1..=cfg.max_iters {
        let cand = quantize_clamp(&x_c.add(&delta[0]));
        let (ok, conf) = is_success(f, &cand, y_t, thr)?;
        if ok || best.as_ref().map_or(true, |b| conf > b.0) {
            best = Some((conf, cand));
        }
        if ok {
            used = it - 1;
            break;
        }
        let tape = Tape::new();
        let dv = tape.var(delta[0].clone());
        let xa = tape.constant(x_c.clone()).add(dv)?.clamp(0.0, 1.0);
        let ce = f.logits_on_tape(&tape, xa)?.cross_entropy(y_t)?.scale(cfg.lambda_a as f32);
        let l21 = crate::losses::l21_norm(&delta[0])? as f64;
        let lv = ce.value().item() as f64 + cfg.lambda_sparse * l21;
        if !lv.is_finite() {
            return Err(Error::NumericOverflow { stage: format!("sparse attack loss at iteration {it}") });
        }
        trace.push(lv);
        let g = tape.backward(ce)?.get_or_zeros(dv);
        opt.step(&mut delta, std::slice::from_ref(&g))?;
        group_soft_threshold(&mut delta[0], tau)?;
    }
    let (_, x_a) = best.expect("at least one iteration ran");
    finish(f, &x_c, x_a, Tensor::zeros(&[0]), y_t, thr, used, trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_zeroes_small_frames() {
        let mut d = Tensor::<f32>::zeros(&[1, 2, 1, 2]);
        d.data_mut().copy_from_slice(&[3.0, 4.0, 0.3, 0.4]);
        group_soft_threshold(&mut d, 1.0).unwrap();
        assert!((d.data()[0] - 2.4).abs() < 1e-6);
        assert!((d.data()[1] - 3.2).abs() < 1e-6);
        assert_eq!(&d.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(BaselineConfig::default().validate().is_ok());
        assert!(BaselineConfig { c: 0.0, ..Default::default() }.validate().is_err());
        assert!(BaselineConfig { max_iters: 0, ..Default::default() }.validate().is_err());
    }
}
