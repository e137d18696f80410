//! Adapter exposing an arbitrary inference callable as a [`Classifier`].

use std::sync::Arc;

use super::Classifier;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

pub type LogitsFn<T> = Arc<dyn Fn(&Tensor<T>) -> Result<Vec<T>> + Send + Sync>;
pub type FeatureFn<T> = Arc<dyn Fn(&Tensor<T>) -> Result<Tensor<T>> + Send + Sync>;
/// `(normalized input, d loss / d logits) -> d loss / d normalized input`.
pub type VjpFn<T> = Arc<dyn Fn(&Tensor<T>, &[T]) -> Result<Tensor<T>> + Send + Sync>;

/// Per-channel `(x - mean) / std`, applied before the wrapped callable.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocess {
    pub fn identity(channels: usize) -> Self {
        Preprocess { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    fn affine<T: Float>(&self) -> (Vec<T>, Vec<T>) {
        let scale = self.std.iter().map(|s| T::lit(1.0 / s)).collect();
        let shift = self.mean.iter().zip(&self.std).map(|(m, s)| T::lit(-m / s)).collect();
        (scale, shift)
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, ..] = x.dims4()?;
        if c != self.mean.len() {
            return Err(Error::shape(format!("preprocessing declared for {} channels, got {c}", self.mean.len())));
        }
        let (scale, shift) = self.affine::<T>();
        let plane = x.len() / c;
        Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * scale[i / plane] + shift[i / plane]))
    }
}

/// Description of a model living outside this crate.
pub struct ExternalModel<T: Float> {
    pub num_classes: usize,
    /// Shape used for the construction-time probe.
    pub input_shape: [usize; 4],
    pub feature_dim: usize,
    pub preprocess: Preprocess,
    pub logits: LogitsFn<T>,
    pub features: Option<FeatureFn<T>>,
    /// Present only for differentiable models.
    pub vjp: Option<VjpFn<T>>,
}

pub struct ExternalClassifier<T: Float> {
    model: ExternalModel<T>,
}

/// Validates the description by running one probe through it.
pub fn wrap_external<T: Float>(model: ExternalModel<T>) -> Result<ExternalClassifier<T>> {
    if model.preprocess.mean.len() != model.input_shape[0] || model.preprocess.std.len() != model.input_shape[0] {
        return Err(Error::Config("preprocessing must declare one mean and std per channel".into()));
    }
    if model.preprocess.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config("preprocessing std must be positive".into()));
    }
    let wrapped = ExternalClassifier { model };
    let probe = Tensor::full(&wrapped.model.input_shape, T::lit(0.5));
    let z = wrapped.logits(&probe).map_err(|e| Error::shape(format!("probe failed: {e}")))?;
    if z.len() != wrapped.model.num_classes {
        return Err(Error::shape(format!(
            "probe returned {} logits for {} declared classes",
            z.len(),
            wrapped.model.num_classes
        )));
    }
    Ok(wrapped)
}

impl<T: Float> ExternalClassifier<T> {
    pub fn preprocess(&self) -> &Preprocess {
        &self.model.preprocess
    }
}

impl<T: Float> Classifier<T> for ExternalClassifier<T> {
    fn num_classes(&self) -> usize {
        self.model.num_classes
    }

    fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        (self.model.logits)(&self.model.preprocess.apply(x)?)
    }

    fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.model.features {
            Some(f) => f(&self.model.preprocess.apply(x)?),
            None => Err(Error::Precondition("wrapped model exposes no features".into())),
        }
    }

    fn feature_dim(&self) -> usize {
        self.model.feature_dim
    }

    fn is_differentiable(&self) -> bool {
        self.model.vjp.is_some()
    }

    fn logits_on_tape<'t>(&self, _tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let vjp = self.model.vjp.clone().ok_or(Error::NotDifferentiable)?;
        let (scale, shift) = self.model.preprocess.affine::<T>();
        let xn = x.channel_affine(&scale, &shift)?;
        let input = (*xn.value()).clone();
        let z = (self.model.logits)(&input)?;
        let k = z.len();
        let value = Tensor::from_vec(&[k], z)?;
        Ok(xn.custom(value, move |g| {
            // The tape's VJP signature is infallible; a failing callback
            // poisons the gradient so the caller's finite check trips.
            vjp(&input, g.data()).unwrap_or_else(|_| Tensor::full(input.shape(), T::nan()))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_means() -> LogitsFn<f64> {
        Arc::new(|x: &Tensor<f64>| {
            let [c, ..] = x.dims4()?;
            let plane = x.len() / c;
            Ok(x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect())
        })
    }

    fn model(pre: Preprocess, vjp: Option<VjpFn<f64>>) -> ExternalModel<f64> {
        ExternalModel {
            num_classes: 3,
            input_shape: [3, 2, 4, 4],
            feature_dim: 0,
            preprocess: pre,
            logits: channel_means(),
            features: None,
            vjp,
        }
    }

    #[test]
    fn declared_normalization_is_observed() {
        let pre = Preprocess { mean: vec![0.5, 0.25, 0.0], std: vec![0.5, 0.25, 2.0] };
        let f = wrap_external(model(pre.clone(), None)).unwrap();
        for v in [0.0, 0.3, 1.0] {
            let z = f.logits(&Tensor::full(&[3, 2, 4, 4], v)).unwrap();
            for c in 0..3 {
                assert!((z[c] - (v - pre.mean[c]) / pre.std[c]).abs() < 1e-12);
            }
        }
        assert!(!f.is_differentiable());
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[3, 2, 4, 4]));
        assert!(matches!(f.logits_on_tape(&tape, x), Err(Error::NotDifferentiable)));
    }

    #[test]
    fn probe_catches_wrong_logit_count() {
        let mut m = model(Preprocess::identity(3), None);
        m.num_classes = 5;
        assert!(matches!(wrap_external(m), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_flows_through_preprocessing() {
        let vjp: VjpFn<f64> = Arc::new(|x: &Tensor<f64>, g: &[f64]| {
            let plane = x.len() / 3;
            Ok(Tensor::from_fn(x.shape(), |i| g[i / plane] / plane as f64))
        });
        let pre = Preprocess { mean: vec![0.0; 3], std: vec![0.5, 1.0, 2.0] };
        let f = wrap_external(model(pre, Some(vjp))).unwrap();
        let tape = Tape::new();
        let x = tape.var(Tensor::full(&[3, 2, 4, 4], 0.2));
        let loss = f.logits_on_tape(&tape, x).unwrap().sum();
        let g = tape.backward(loss).unwrap().get_or_zeros(x);
        let plane = 32.0;
        for (c, s) in [0.5, 1.0, 2.0].iter().enumerate() {
            assert!((g.data()[c * 32] - 1.0 / (plane * s)).abs() < 1e-12);
        }
    }
}
