//! Alternating optimisation of the target video and the invertible network,
//! plus the evaluation protocol shared with the baselines.

use serde::{Deserialize, Serialize};

use crate::coupling::{Dims, Stin, StinConfig};
use crate::error::{Error, Result};
use crate::gtvl::{gtvl_step, GuidanceWeights, TargetInit, TargetState, DEFAULT_LR};
use crate::losses::{adversarial_loss_tape, LossWeights};
use crate::metrics::PairMetrics;
use crate::nn::Adam;
use crate::tape::{softmax, Tape};
use crate::tensor::Tensor;
use crate::victim::Classifier;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Guided learnable target.
    #[default]
    Gtvl,
    /// Frozen highest-confidence target video.
    Hct,
    /// Target learned from zeros by cross entropy alone.
    Cgt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub loss: LossWeights,
    pub guidance: GuidanceWeights,
    pub stin_lr: f64,
    pub gtvl_lr: f64,
    pub max_epochs: usize,
    pub success_confidence: f64,
    pub stin: StinConfig,
    pub target_mode: TargetMode,
    pub target_init: TargetInit,
    /// Seeds the noise target initialisation; network weights use `stin.init_seed`.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            loss: LossWeights::default(),
            guidance: GuidanceWeights::default(),
            stin_lr: 1e-4,
            gtvl_lr: DEFAULT_LR,
            max_epochs: 200,
            success_confidence: 0.9,
            stin: StinConfig::default(),
            target_mode: TargetMode::Gtvl,
            target_init: TargetInit::GuideCopy,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(self.success_confidence > 0.0 && self.success_confidence < 1.0) {
            return Err(Error::Config(format!("success_confidence must be in (0, 1), got {}", self.success_confidence)));
        }
        for (name, lr) in [("stin_lr", self.stin_lr), ("gtvl_lr", self.gtvl_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        self.loss.validate()?;
        self.stin.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// Quantised adversarial video.
    #[serde(skip)]
    pub x_a: Tensor<f32>,
    /// Residual stream; empty for the baselines.
    #[serde(skip)]
    pub x_r: Tensor<f32>,
    pub success: bool,
    pub epochs_used: usize,
    pub final_confidence: f64,
    pub predicted: usize,
    pub metrics: PairMetrics,
    pub loss_trace: Vec<f64>,
}

/// 8-bit representable video: clamp to `[0, 1]`, round to the nearest
/// multiple of `1/255` with ties to even.
pub fn quantize_clamp(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() / 255.0)
}

/// `(softmax(f(x))[y_t] > threshold, that confidence)`.
pub fn is_success<C: Classifier<f32> + ?Sized>(f: &C, x: &Tensor<f32>, y_t: usize, threshold: f64) -> Result<(bool, f64)> {
    let z = f.logits(x)?;
    if y_t >= z.len() {
        return Err(Error::ClassIndex { index: y_t, num_classes: z.len() });
    }
    let p: Vec<f64> = softmax(&z.iter().map(|&v| v as f64).collect::<Vec<_>>());
    Ok((p[y_t] > threshold, p[y_t]))
}

fn argmax(z: &[f32]) -> usize {
    z.iter().enumerate().fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0
}

pub(crate) fn check_inputs<C: Classifier<f32> + ?Sized>(x_c: &Tensor<f32>, y_t: usize, f: &C) -> Result<()> {
    if !f.is_differentiable() {
        return Err(Error::NotDifferentiable);
    }
    x_c.dims4()?;
    if !x_c.all_finite() {
        return Err(Error::Precondition("clean video has non-finite values".into()));
    }
    if y_t >= f.num_classes() {
        return Err(Error::ClassIndex { index: y_t, num_classes: f.num_classes() });
    }
    Ok(())
}

/// Finishes a result from the chosen quantised candidate.
pub(crate) fn finish<C: Classifier<f32> + ?Sized>(
    f: &C,
    x_c: &Tensor<f32>,
    x_a: Tensor<f32>,
    x_r: Tensor<f32>,
    y_t: usize,
    threshold: f64,
    epochs_used: usize,
    loss_trace: Vec<f64>,
) -> Result<AttackResult> {
    let (success, final_confidence) = is_success(f, &x_a, y_t, threshold)?;
    let predicted = argmax(&f.logits(&x_a)?);
    let metrics = PairMetrics::compute(&x_a, x_c)?;
    Ok(AttackResult { x_a, x_r, success, epochs_used, final_confidence, predicted, metrics, loss_trace })
}

/// Targeted attack on `x_c` towards `y_t`, guided by `x_g` (a video the
/// victim already assigns to `y_t`; ignored in [`TargetMode::Cgt`]).
///
/// Each epoch runs one target step, a forward pass of the network, a success
/// check on the quantised output, and one network step. The first success
/// ends the run; otherwise the most confident candidate is returned.
pub fn run_attack<C: Classifier<f32> + ?Sized>(
    x_c: &Tensor<f32>,
    x_g: &Tensor<f32>,
    y_t: usize,
    f: &C,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(x_c, y_t, f)?;
    x_c.same_shape(x_g, "clean and guide videos")?;
    let x_c = x_c.clamp(0.0, 1.0);
    let source = argmax(&f.logits(&x_c)?);
    if source == y_t {
        return Err(Error::Precondition(format!("victim already assigns the clean video to target class {y_t}")));
    }
    let mut guidance = cfg.guidance;
    let state = match cfg.target_mode {
        TargetMode::Gtvl | TargetMode::Hct => {
            let g = argmax(&f.logits(x_g)?);
            if g != y_t {
                return Err(Error::Precondition(format!("guide video is classified {g}, not target {y_t}")));
            }
            TargetState::init(x_g.clamp(0.0, 1.0), y_t, f.num_classes(), cfg.target_init, cfg.seed)
        }
        TargetMode::Cgt => {
            guidance.beta_b = 0.0;
            TargetState::init(x_g.clamp(0.0, 1.0), y_t, f.num_classes(), TargetInit::Zeros, cfg.seed)
        }
    };
    let mut state = state?;
    let mut stin = Stin::<f32>::new(cfg.stin.clone(), x_c.shape()[0])?;
    let mut opt = Adam::new(cfg.stin_lr);
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, Tensor<f32>, Tensor<f32>)> = None;
    let mut used = cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        if cfg.target_mode != TargetMode::Hct {
            gtvl_step(&mut state, f, &guidance, cfg.gtvl_lr)?;
        }
        let tape = Tape::new();
        let p = stin.params.bind(&tape, true);
        let xc = tape.constant(x_c.clone());
        let xt = tape.constant(state.x_t().clone());
        let (xa_raw, xr) = stin.forward_tape(&p, xc, xt)?;
        let xa = xa_raw.clamp(0.0, 1.0);
        let (loss, terms) = adversarial_loss_tape(&tape, xa, xc, y_t, f, &cfg.loss)?;
        if !terms.total.is_finite() {
            return Err(Error::NumericOverflow { stage: format!("adversarial loss at epoch {epoch}") });
        }
        trace.push(terms.total);

        let candidate = quantize_clamp(&xa_raw.value());
        let (ok, conf) = is_success(f, &candidate, y_t, cfg.success_confidence)?;
        if best.as_ref().map_or(true, |b| conf > b.0) || ok {
            best = Some((conf, candidate, (*xr.value()).clone()));
        }
        if ok {
            used = epoch;
            break;
        }

        let grads = p.grads(&tape.backward(loss)?);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NumericOverflow { stage: format!("network gradient at epoch {epoch}") });
        }
        opt.step(stin.params.tensors_mut(), &grads)?;
    }
    let (_, x_a, x_r) = best.expect("at least one epoch ran");
    finish(f, &x_c, x_a, x_r, y_t, cfg.success_confidence, used, trace)
}

/// One attack instance: clean source, both guide choices, and the target.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteItem {
    /// Position of the source in its split.
    pub source_index: usize,
    pub source_label: usize,
    pub y_t: usize,
    pub x_c: Tensor<f32>,
    /// Randomly drawn correctly classified video of class `y_t`.
    pub x_g: Tensor<f32>,
    /// The most confident video of class `y_t`.
    pub x_hct: Tensor<f32>,
}

pub fn attack_item<C: Classifier<f32> + ?Sized>(item: &SuiteItem, f: &C, cfg: &AttackConfig) -> Result<AttackResult> {
    let guide = if cfg.target_mode == TargetMode::Hct { &item.x_hct } else { &item.x_g };
    run_attack(&item.x_c, guide, item.y_t, f, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Framewise 2D transform and depth-1 kernels against the 3D network.
    Dims,
    /// Guided target against the frozen and from-scratch targets.
    Target,
    /// With and without the low-band fidelity term.
    Lll,
}

/// Configuration of every arm; arms differ only in the ablated factor.
pub fn ablation_arms(which: Ablation, base: &AttackConfig) -> Vec<(String, AttackConfig)> {
    let with = |f: &dyn Fn(&mut AttackConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match which {
        Ablation::Dims => vec![
            ("stin_2d".into(), with(&|c| c.stin.dims = Dims::Spatial)),
            ("stin_3d".into(), with(&|c| c.stin.dims = Dims::SpatioTemporal)),
        ],
        Ablation::Target => vec![
            ("hct".into(), with(&|c| c.target_mode = TargetMode::Hct)),
            ("cgt".into(), with(&|c| c.target_mode = TargetMode::Cgt)),
            ("gtvl".into(), with(&|c| c.target_mode = TargetMode::Gtvl)),
        ],
        Ablation::Lll => vec![
            ("without_lll".into(), with(&|c| c.loss.gamma_a = 0.0)),
            ("with_lll".into(), with(&|c| c.loss.gamma_a = base.loss.gamma_a.max(f64::MIN_POSITIVE))),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct AblationArm {
    pub name: String,
    pub config: AttackConfig,
    pub results: Vec<AttackResult>,
}

/// Runs every arm over the suite, items in parallel.
pub fn run_ablation<C: Classifier<f32> + ?Sized>(
    which: Ablation,
    suite: &[SuiteItem],
    f: &C,
    base: &AttackConfig,
) -> Result<Vec<AblationArm>> {
    use rayon::prelude::*;
    ablation_arms(which, base)
        .into_iter()
        .map(|(name, config)| {
            let results = suite.par_iter().map(|it| attack_item(it, f, &config)).collect::<Result<Vec<_>>>()?;
            Ok(AblationArm { name, config, results })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{CnnConfig, ToyCnn};

    #[test]
    fn quantization_rule() {
        let x = Tensor::from_vec(&[5], vec![0.5, -0.2, 1.7, 0.3, 1.0 / 255.0]).unwrap();
        let q = quantize_clamp(&x);
        assert_eq!(q.data()[0], 128.0 / 255.0);
        assert_eq!(q.data()[1], 0.0);
        assert_eq!(q.data()[2], 1.0);
        // 76.5 on the 8-bit scale: a tie, rounded to even.
        assert_eq!(q.data()[3], 76.0 / 255.0);
        assert_eq!(quantize_clamp(&q), q);
    }

    struct Fixed(Vec<f32>);

    impl Classifier<f32> for Fixed {
        fn num_classes(&self) -> usize {
            self.0.len()
        }
        fn logits(&self, _: &Tensor<f32>) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
        fn features(&self, _: &Tensor<f32>) -> Result<Tensor<f32>> {
            Err(Error::Precondition("none".into()))
        }
        fn feature_dim(&self) -> usize {
            0
        }
        fn is_differentiable(&self) -> bool {
            false
        }
        fn logits_on_tape<'t>(&self, _: &'t Tape<f32>, _: crate::tape::Var<'t, f32>) -> Result<crate::tape::Var<'t, f32>> {
            Err(Error::NotDifferentiable)
        }
    }

    #[test]
    fn success_is_strict() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let (ok, c) = is_success(&Fixed(vec![10.0, 0.0, 0.0]), &x, 0, 0.9).unwrap();
        assert!(ok);
        assert!((c - 0.99991).abs() < 1e-5);
        let (ok, c) = is_success(&Fixed(vec![0.0; 101]), &x, 3, 0.9).unwrap();
        assert!(!ok);
        assert!((c - 1.0 / 101.0).abs() < 1e-12);
        // softmax(ln 9, 0) = 0.9 exactly
        let (ok, c) = is_success(&Fixed(vec![9f32.ln(), 0.0]), &x, 0, c.max(0.9)).unwrap();
        assert!((c - 0.9).abs() < 1e-7);
        assert_eq!(ok, c > 0.9);
    }

    #[test]
    fn rejects_non_differentiable_and_zero_epochs() {
        let x = Tensor::full(&[3, 2, 4, 4], 0.5);
        let err = run_attack(&x, &x, 1, &Fixed(vec![1.0, 0.0]), &AttackConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NotDifferentiable));
        let m = ToyCnn::<f32>::new(CnnConfig { channels: vec![4], pools: vec![[1, 1, 1]], num_classes: 2, ..Default::default() })
            .unwrap();
        let cfg = AttackConfig { max_epochs: 0, ..Default::default() };
        assert!(matches!(run_attack(&x, &x, 1, &m, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_arms_differ_only_in_factor() {
        let base = AttackConfig::default();
        let arms = ablation_arms(Ablation::Lll, &base);
        assert_eq!(arms[0].1, AttackConfig { loss: LossWeights { gamma_a: 0.0, ..base.loss }, ..base.clone() });
        assert_eq!(arms[1].1, base);
        let dims = ablation_arms(Ablation::Dims, &base);
        assert_eq!(dims[0].1.stin.dims, Dims::Spatial);
        assert_eq!(AttackConfig { stin: StinConfig { dims: Dims::SpatioTemporal, ..dims[0].1.stin.clone() }, ..dims[0].1.clone() }, base);
    }
}
