//! Terms of the adversarial objective: targeted cross entropy, frame-grouped
//! l2,1 sparsity and the low-low-low band fidelity term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};
use crate::victim::Classifier;
use crate::wavelet3d as wt;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub beta_a: f64,
    pub gamma_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_a: 0.3, beta_a: 0.4, gamma_a: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("beta_a", self.beta_a), ("gamma_a", self.gamma_a)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `-log softmax(logits)[y]`.
pub fn cross_entropy_targeted<T: Float>(logits: &[T], y: usize) -> Result<T> {
    if logits.len() < 2 {
        return Err(Error::shape("cross entropy needs at least two classes"));
    }
    if y >= logits.len() {
        return Err(Error::ClassIndex { index: y, num_classes: logits.len() });
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
    Ok(lse - logits[y])
}

/// Sum over frames of each frame's Frobenius norm (no `1/T`).
pub fn l21_norm<T: Float>(delta: &Tensor<T>) -> Result<T> {
    Ok(delta.frame_sq_norms()?.into_iter().map(|s| s.sqrt()).sum())
}

fn lll_scale<T: Float>(x: &Tensor<T>) -> T {
    T::lit(8.0 / x.len() as f64)
}

/// `(8/N) * ||lll(x_c) - lll(x_a)||^2`, always with the 3D transform.
pub fn low_freq_loss<T: Float>(x_c: &Tensor<T>, x_a: &Tensor<T>) -> Result<T> {
    x_c.same_shape(x_a, "low_freq_loss")?;
    let band = |x: &Tensor<T>| -> Result<Tensor<T>> { wt::select_channels(&wt::haar3_forward(x)?, 8, 0) };
    Ok(band(x_c)?.sub(&band(x_a)?).sq_norm() * lll_scale(x_c))
}

pub fn low_freq_loss_tape<'t, T: Float>(x_c: Var<'t, T>, x_a: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = lll_scale(&x_c.value());
    let d = x_a.haar3()?.sub(x_c.haar3()?)?;
    Ok(d.select_channels(8, 0)?.sum_squares().scale(s))
}

/// Values of the three weighted terms, for traces and reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub l21: f64,
    pub lll: f64,
    pub total: f64,
}

/// Adversarial objective on the tape; a zero weight drops its term entirely.
pub fn adversarial_loss_tape<'t, T: Float, C: Classifier<T> + ?Sized>(
    tape: &'t Tape<T>,
    x_a: Var<'t, T>,
    x_c: Var<'t, T>,
    y_t: usize,
    f: &C,
    w: &LossWeights,
) -> Result<(Var<'t, T>, LossTerms)> {
    x_a.value().same_shape(&x_c.value(), "adversarial loss")?;
    if y_t >= f.num_classes() {
        return Err(Error::ClassIndex { index: y_t, num_classes: f.num_classes() });
    }
    let [_, t, ..] = x_c.value().dims4()?;
    let mut terms = LossTerms::default();
    let mut parts = Vec::new();
    if w.lambda_a > 0.0 {
        let ce = f.logits_on_tape(tape, x_a)?.cross_entropy(y_t)?;
        terms.ce = ce.value().item().as_f64();
        parts.push(ce.scale(T::lit(w.lambda_a)));
    }
    if w.beta_a > 0.0 {
        let l21 = x_a.sub(x_c)?.l21()?;
        terms.l21 = l21.value().item().as_f64();
        parts.push(l21.scale(T::lit(w.beta_a / t as f64)));
    }
    if w.gamma_a > 0.0 {
        let lll = low_freq_loss_tape(x_c, x_a)?;
        terms.lll = lll.value().item().as_f64();
        parts.push(lll.scale(T::lit(w.gamma_a)));
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => x_a.scale(T::zero()).sum(),
    };
    for &p in parts.iter().skip(1) {
        total = total.add(p)?;
    }
    terms.total = total.value().item().as_f64();
    Ok((total, terms))
}

/// Plain-value twin of [`adversarial_loss_tape`].
pub fn adversarial_loss<T: Float, C: Classifier<T> + ?Sized>(
    x_a: &Tensor<T>,
    x_c: &Tensor<T>,
    y_t: usize,
    f: &C,
    w: &LossWeights,
) -> Result<T> {
    x_a.same_shape(x_c, "adversarial loss")?;
    let [_, t, ..] = x_c.dims4()?;
    let mut total = T::zero();
    if w.lambda_a > 0.0 {
        total += T::lit(w.lambda_a) * cross_entropy_targeted(&f.logits(x_a)?, y_t)?;
    }
    if w.beta_a > 0.0 {
        total += T::lit(w.beta_a / t as f64) * l21_norm(&x_a.sub(x_c))?;
    }
    if w.gamma_a > 0.0 {
        total += T::lit(w.gamma_a) * low_freq_loss(x_c, x_a)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_reference_values() {
        let u = cross_entropy_targeted(&[0.0f64; 4], 2).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let v = cross_entropy_targeted(&[10.0f64, 0.0, 0.0], 0).unwrap();
        let oracle = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 9.0797e-5).abs() < 1e-8);
        let shifted = cross_entropy_targeted(&[1010.0f64, 1000.0, 1000.0], 0).unwrap();
        assert!((shifted - v).abs() < 1e-9);
        assert!(matches!(cross_entropy_targeted(&[0.0f64; 3], 3), Err(Error::ClassIndex { .. })));
    }

    #[test]
    fn l21_of_two_frames() {
        let mut d = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        d.data_mut()[0] = 3.0;
        d.data_mut()[4] = 4.0;
        assert_eq!(l21_norm(&d).unwrap(), 7.0);
        assert_eq!(l21_norm(&Tensor::<f64>::zeros(&[3, 4, 2, 2])).unwrap(), 0.0);
    }

    #[test]
    fn lll_sees_constants_but_not_checkerboards() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 4, 4], |i| (i % 11) as f64 / 11.0);
        assert_eq!(low_freq_loss(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 1.0);
        assert!((low_freq_loss(&x, &shifted).unwrap() - 8.0).abs() < 1e-12);
        let eps = 0.01;
        let board = Tensor::from_fn(x.shape(), |i| {
            let (h, w, t) = (i % 4, (i / 4) % 4, (i / 16) % 4);
            let s = if (h + w + t) % 2 == 0 { eps } else { -eps };
            x.data()[i] + s
        });
        assert!(low_freq_loss(&x, &board).unwrap() < 1e-24);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { beta_a: -1.0, ..Default::default() }.validate().is_err());
    }
}
