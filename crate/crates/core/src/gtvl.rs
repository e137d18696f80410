//! Learnable target video, pulled towards the target class by the victim and
//! anchored to a guide video of that class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};
use crate::victim::Classifier;

pub const DEFAULT_LR: f64 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInit {
    #[default]
    GuideCopy,
    Zeros,
    UniformNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceWeights {
    pub lambda_b: f64,
    pub beta_b: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights { lambda_b: 1.0, beta_b: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct TargetState<T: Float> {
    x_t: Tensor<T>,
    x_g: Tensor<T>,
    y_t: usize,
    opt: Adam<T>,
}

impl<T: Float> TargetState<T> {
    /// Copy initialisation: `x_t = x_g`.
    pub fn init_target(x_g: Tensor<T>, y_t: usize, num_classes: usize) -> Result<Self> {
        Self::init(x_g, y_t, num_classes, TargetInit::GuideCopy, 0)
    }

    pub fn init(x_g: Tensor<T>, y_t: usize, num_classes: usize, mode: TargetInit, seed: u64) -> Result<Self> {
        if y_t >= num_classes {
            return Err(Error::ClassIndex { index: y_t, num_classes });
        }
        x_g.dims4()?;
        if !x_g.all_finite() {
            return Err(Error::Precondition("guide video has non-finite values".into()));
        }
        let x_t = match mode {
            TargetInit::GuideCopy => x_g.clone(),
            TargetInit::Zeros => Tensor::zeros(x_g.shape()),
            TargetInit::UniformNoise => Tensor::uniform(x_g.shape(), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(TargetState { x_t, x_g, y_t, opt: Adam::new(DEFAULT_LR) })
    }

    pub fn x_t(&self) -> &Tensor<T> {
        &self.x_t
    }

    pub fn x_g(&self) -> &Tensor<T> {
        &self.x_g
    }

    pub fn y_t(&self) -> usize {
        self.y_t
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }
}

/// `lambda_b * CE(f(x_t), y_t) + (beta_b / N) * ||x_t - x_g||^2` on the tape.
pub fn guidance_loss_tape<'t, T: Float, C: Classifier<T> + ?Sized>(
    tape: &'t Tape<T>,
    x_t: Var<'t, T>,
    x_g: &Tensor<T>,
    y_t: usize,
    f: &C,
    w: &GuidanceWeights,
) -> Result<Var<'t, T>> {
    x_t.value().same_shape(x_g, "guidance loss")?;
    let n = x_g.len() as f64;
    let mse = x_t.sub(tape.constant(x_g.clone()))?.sum_squares().scale(T::lit(w.beta_b / n));
    if w.lambda_b == 0.0 {
        return Ok(mse);
    }
    let ce = f.logits_on_tape(tape, x_t)?.cross_entropy(y_t)?.scale(T::lit(w.lambda_b));
    ce.add(mse)
}

pub fn guidance_loss<T: Float, C: Classifier<T> + ?Sized>(s: &TargetState<T>, f: &C, w: &GuidanceWeights) -> Result<T> {
    let mse = s.x_t.sub(&s.x_g).sq_norm() * T::lit(w.beta_b / s.x_g.len() as f64);
    if w.lambda_b == 0.0 {
        return Ok(mse);
    }
    let ce = crate::losses::cross_entropy_targeted(&f.logits(&s.x_t)?, s.y_t)?;
    Ok(T::lit(w.lambda_b) * ce + mse)
}

/// One Adam step on `x_t`, then clamps it to `[0, 1]`. Returns the loss
/// evaluated before the step.
pub fn gtvl_step<T: Float, C: Classifier<T> + ?Sized>(
    s: &mut TargetState<T>,
    f: &C,
    w: &GuidanceWeights,
    lr: f64,
) -> Result<T> {
    let tape = Tape::new();
    let x = tape.var(s.x_t.clone());
    let loss = guidance_loss_tape(&tape, x, &s.x_g, s.y_t, f, w)?;
    let grad = tape.backward(loss)?.get_or_zeros(x);
    if !grad.all_finite() {
        return Err(Error::NumericOverflow { stage: "guided target step (gradient)".into() });
    }
    s.opt.lr = lr;
    s.opt.step(std::slice::from_mut(&mut s.x_t), std::slice::from_ref(&grad))?;
    s.x_t = s.x_t.clamp(T::zero(), T::one());
    Ok(loss.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{CnnConfig, ToyCnn};

    fn tiny() -> ToyCnn<f64> {
        ToyCnn::new(CnnConfig { channels: vec![4, 4], pools: vec![[2, 2, 2], [1, 1, 1]], num_classes: 3, ..Default::default() })
            .unwrap()
    }

    fn guide() -> Tensor<f64> {
        Tensor::from_fn(&[3, 4, 4, 4], |i| ((i * 7) % 13) as f64 / 13.0)
    }

    #[test]
    fn copy_init_zeroes_the_anchor() {
        let f = tiny();
        let s = TargetState::init_target(guide(), 1, 3).unwrap();
        assert_eq!(s.x_t(), s.x_g());
        let w = GuidanceWeights::default();
        let ce = crate::losses::cross_entropy_targeted(&f.logits(&guide()).unwrap(), 1).unwrap();
        assert_eq!(guidance_loss(&s, &f, &w).unwrap(), ce);
        assert!(matches!(TargetState::init_target(guide(), 3, 3), Err(Error::ClassIndex { .. })));
    }

    #[test]
    fn pure_anchor_step_keeps_copy_and_descends_otherwise() {
        let f = tiny();
        let w = GuidanceWeights { lambda_b: 0.0, beta_b: 1.0 };
        let mut s = TargetState::init_target(guide(), 0, 3).unwrap();
        gtvl_step(&mut s, &f, &w, DEFAULT_LR).unwrap();
        assert_eq!(s.x_t(), s.x_g());

        let offset = guide().map(|v| (v * 0.5 + 0.25).clamp(0.0, 1.0));
        let mut s = TargetState::init_target(offset, 0, 3).unwrap();
        s.x_t = guide();
        let mut prev = guidance_loss(&s, &f, &w).unwrap();
        for _ in 0..10 {
            gtvl_step(&mut s, &f, &w, DEFAULT_LR).unwrap();
            let now = guidance_loss(&s, &f, &w).unwrap();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn uniform_logits_and_unit_offset() {
        struct Flat;
        impl Classifier<f64> for Flat {
            fn num_classes(&self) -> usize {
                4
            }
            fn logits(&self, _: &Tensor<f64>) -> Result<Vec<f64>> {
                Ok(vec![0.0; 4])
            }
            fn features(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
                Ok(x.clone())
            }
            fn feature_dim(&self) -> usize {
                0
            }
            fn is_differentiable(&self) -> bool {
                true
            }
            fn logits_on_tape<'t>(&self, _: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
                x.scale(0.0).sum().custom(Tensor::zeros(&[4]), |_| Tensor::scalar(0.0)).reshape(&[4])
            }
        }
        let g = Tensor::full(&[1, 2, 2, 2], 0.25);
        let s = TargetState::init_target(g.clone(), 2, 4).unwrap();
        let w = GuidanceWeights::default();
        assert!((guidance_loss(&s, &Flat, &w).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut s2 = s.clone();
        s2.x_t = g.map(|v| v + 1.0);
        let pure = GuidanceWeights { lambda_b: 0.0, beta_b: 0.01 };
        assert!((guidance_loss(&s2, &Flat, &pure).unwrap() - 0.01).abs() < 1e-15);
    }
}
