//! Small 3D CNN action classifier and its training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Sample};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv3d, Init, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output width of each conv block.
    pub channels: Vec<usize>,
    pub kernel: [usize; 3],
    /// Max-pool window after each block; `[1, 1, 1]` skips pooling.
    pub pools: Vec<[usize; 3]>,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            in_channels: 3,
            num_classes: 8,
            channels: vec![16, 32, 32, 64],
            kernel: [3, 3, 3],
            pools: vec![[1, 2, 2], [2, 2, 2], [1, 2, 2], [1, 1, 1]],
            seed: 0,
        }
    }
}

impl CnnConfig {
    /// Same depth, but every kernel and pool has temporal extent 1, so each
    /// frame is classified on its own.
    pub fn framewise() -> Self {
        CnnConfig { kernel: [1, 3, 3], pools: vec![[1, 2, 2], [1, 2, 2], [1, 2, 2], [1, 1, 1]], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.pools.len() {
            return Err(Error::Config("cnn needs one pool per conv block".into()));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("cnn widths must be positive and num_classes >= 2".into()));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) || self.pools.iter().flatten().any(|&p| p == 0) {
            return Err(Error::Config("cnn kernels must be odd and pools positive".into()));
        }
        Ok(())
    }

    /// Width of the penultimate features.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct ToyCnn<T> {
    cfg: CnnConfig,
    pub params: ParamStore<T>,
    convs: Vec<Conv3d>,
    head: Linear,
}

const KIND: &str = "toy_cnn";

impl<T: Float> ToyCnn<T> {
    pub fn new(cfg: CnnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let pad = cfg.kernel.map(|k| k / 2);
        let mut cin = cfg.in_channels;
        let convs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let conv = Conv3d::new(
                    &mut params,
                    &format!("conv{i}"),
                    cin,
                    cout,
                    cfg.kernel,
                    pad,
                    Init::HeUniform { gain: 1.0 },
                    &mut rng,
                );
                cin = cout;
                conv
            })
            .collect();
        let head = Linear::new(&mut params, "head", cfg.feature_dim(), cfg.num_classes, &mut rng);
        Ok(ToyCnn { cfg, params, convs, head })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    pub fn cast<U: Float>(&self) -> ToyCnn<U> {
        ToyCnn { cfg: self.cfg.clone(), params: self.params.cast(), convs: self.convs.clone(), head: self.head }
    }

    /// `(features [T', D], logits [K])`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let [c, ..] = x.value().dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!("classifier expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let mut h = x.shift(T::lit(-0.5)).scale(T::lit(2.0));
        for (conv, &pool) in self.convs.iter().zip(&self.cfg.pools) {
            h = conv.forward(p, h)?.relu();
            if pool != [1, 1, 1] {
                h = h.max_pool3d(pool)?;
            }
        }
        let feats = h.frame_mean()?;
        let logits = self.head.forward(p, feats.mean_rows()?)?;
        Ok((feats, logits))
    }

    fn eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (f, z) = self.forward(&p, tape.constant(x.clone()))?;
        let feats = (*f.value()).clone();
        let logits = z.value().data().to_vec();
        Ok((feats, logits))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let arch = serde_json::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint::from_params(&self.params).with_meta("kind", KIND).with_meta("arch", arch))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != KIND {
            return Err(Error::Format { kind: "checkpoint", reason: "not a toy_cnn checkpoint".into() });
        }
        let cfg: CnnConfig = serde_json::from_str(ck.meta("arch")?)
            .map_err(|e| Error::Format { kind: "checkpoint", reason: format!("arch: {e}") })?;
        let mut model = Self::new(cfg)?;
        ck.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl<T: Float> Classifier<T> for ToyCnn<T> {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.eval(x)?.1)
    }

    fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.eval(x)?.0)
    }

    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn logits_on_tape<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = self.params.bind(tape, false);
        Ok(self.forward(&p, x)?.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once validation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, lr: 2e-3, batch_size: 16, seed: 0, stop_at_accuracy: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.val_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Fraction of `samples` whose arg-max logit is the label.
pub fn accuracy<C: Classifier<f32> + ?Sized>(model: &C, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("accuracy of an empty split".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        if model.predict(&s.video)?.0 == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mini-batch Adam on mean cross entropy; deterministic in `cfg.seed`.
pub fn train_victim(model: &mut ToyCnn<f32>, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Precondition("training needs non-empty train and val splits".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let inv = 1.0 / batch.len() as f32;
            let mut loss: Option<Var<'_, f32>> = None;
            for &i in batch {
                let s = &train[i];
                let (_, z) = model.forward(&p, tape.constant(s.video.clone()))?;
                let ce = z.cross_entropy(s.label)?.scale(inv);
                loss = Some(match loss {
                    Some(l) => l.add(ce)?,
                    None => ce,
                });
            }
            let loss = loss.expect("non-empty batch");
            let lv = loss.value().item() as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, loss: lv });
            }
            total += lv * batch.len() as f64;
            let grads = p.grads(&tape.backward(loss)?);
            opt.step(model.params.tensors_mut(), &grads)?;
        }
        let acc = accuracy(model, val)?;
        let mean = total / train.len() as f64;
        log::info!("epoch {:>3}  loss {mean:.4}  val acc {acc:.3}", epoch + 1);
        report.epoch_loss.push(mean);
        report.val_accuracy.push(acc);
        if cfg.stop_at_accuracy.is_some_and(|a| acc >= a) {
            break;
        }
    }
    Ok(report)
}
