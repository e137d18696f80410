//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svastin::coupling::{Stin, StinConfig};
use svastin::gtvl::{guidance_loss_tape, GuidanceWeights};
use svastin::losses::{adversarial_loss_tape, LossWeights};
use svastin::tape::Tape;
use svastin::victim::{CnnConfig, ToyCnn};
use svastin::Tensor;

/// Direct evaluation of the separable transform: every output coefficient is
/// the product of three 2x2 Haar matrix entries summed over its 2x2x2 block.
pub fn haar3_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let [c, t, w, h] = x.dims4().unwrap();
    let m = |band: usize, d: usize| {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        if band == 1 && d == 1 {
            -s
        } else {
            s
        }
    };
    let (t2, w2, h2) = (t / 2, w / 2, h / 2);
    let mut out = Tensor::zeros(&[8 * c, t2, w2, h2]);
    for ci in 0..c {
        for band in 0..8 {
            let (bt, bw, bh) = (band >> 2, (band >> 1) & 1, band & 1);
            for a in 0..t2 {
                for b in 0..w2 {
                    for e in 0..h2 {
                        let mut acc = 0.0;
                        for d in 0..8 {
                            let (dt, dw, dh) = (d >> 2, (d >> 1) & 1, d & 1);
                            let v = x.data()[((ci * t + 2 * a + dt) * w + 2 * b + dw) * h + 2 * e + dh];
                            acc += m(bt, dt) * m(bw, dw) * m(bh, dh) * v;
                        }
                        out.data_mut()[(((ci * 8 + band) * t2 + a) * w2 + b) * h2 + e] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn random_video(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 0.05, 0.95, &mut rng)
}

/// Small 64-bit victim for 4x4x4 clips.
pub fn tiny_victim(seed: u64) -> ToyCnn<f64> {
    ToyCnn::new(CnnConfig {
        in_channels: 3,
        num_classes: 4,
        channels: vec![4, 6],
        kernel: [3, 3, 3],
        pools: vec![[2, 2, 2], [1, 1, 1]],
        seed,
    })
    .unwrap()
}

/// Network with every parameter randomised, so no gradient path is muted by
/// the zero-initialised output layers.
pub fn random_stin(seed: u64) -> Stin<f64> {
    let cfg = StinConfig { num_blocks: 2, subnet_hidden_channels: 3, subnet_dense_layers: 3, init_seed: seed, ..Default::default() };
    let mut stin = Stin::<f64>::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in stin.params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.15..0.15);
        }
    }
    stin
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}


const H: f64 = 1e-3;

/// Analytic and numeric derivatives collected over sampled coordinates.
///
/// A coordinate lands in `kinked` when its central difference at `H` and at
/// `H / 10` disagree by more than 1e-4 relative: a ReLU or max-pool switch
/// lies inside the step, so the `H` quotient is not a derivative there. Such
/// coordinates are compared against the finer quotient instead.
#[derive(Default)]
pub struct Samples {
    smooth: (Vec<f64>, Vec<f64>),
    kinked: (Vec<f64>, Vec<f64>),
}

impl Samples {
    fn probe(&mut self, analytic: f64, mut at: impl FnMut(f64) -> f64) {
        let d = |h: f64, at: &mut dyn FnMut(f64) -> f64| (at(h) - at(-h)) / (2.0 * h);
        let coarse = d(H, &mut at);
        let fine = d(H / 10.0, &mut at);
        let slot = if (coarse - fine).abs() <= 1e-4 * (fine.abs() + 1e-6) {
            self.smooth.1.push(coarse);
            &mut self.smooth.0
        } else {
            self.kinked.1.push(fine);
            &mut self.kinked.0
        };
        slot.push(analytic);
    }

    pub fn smooth_error(&self) -> f64 {
        rel_err(&self.smooth.0, &self.smooth.1)
    }

    pub fn kinked_error(&self) -> f64 {
        if self.kinked.0.is_empty() {
            0.0
        } else {
            rel_err(&self.kinked.0, &self.kinked.1)
        }
    }

    pub fn kinks(&self) -> usize {
        self.kinked.0.len()
    }

    pub fn total(&self) -> usize {
        self.smooth.0.len() + self.kinked.0.len()
    }

    fn merge(&mut self, other: Samples) {
        self.smooth.0.extend(other.smooth.0);
        self.smooth.1.extend(other.smooth.1);
        self.kinked.0.extend(other.kinked.0);
        self.kinked.1.extend(other.kinked.1);
    }

    /// The acceptance rule: smooth coordinates within 1e-3, coordinates on a
    /// kink within 1e-2 of the finer quotient, and at most a tenth on kinks.
    pub fn passes(&self) -> bool {
        self.smooth_error() <= 1e-3 && self.kinked_error() <= 1e-2 && self.kinks() * 10 <= self.total()
    }
}

pub struct GradCheck {
    /// Worst smooth-coordinate error over the parameter groups.
    pub worst_group: f64,
    pub params: Samples,
    pub x_t: Samples,
    pub groups: usize,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.worst_group <= 1e-3 && self.params.passes() && self.x_t.passes()
    }
}

/// Adversarial loss of the network output against the clean clip, checked
/// against central differences in every parameter group and in `x_t`.
pub fn adversarial_gradcheck(seed: u64, per_group: usize) -> GradCheck {
    let f = tiny_victim(seed);
    let mut stin = random_stin(seed);
    let x_c = random_video(&[3, 4, 4, 4], seed + 1);
    let x_t = random_video(&[3, 4, 4, 4], seed + 2);
    let w = LossWeights::default();
    let y_t = 1;

    let loss_at = |stin: &Stin<f64>, x_t: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let p = stin.params.bind(&tape, false);
        let xc = tape.constant(x_c.clone());
        let (xa, _) = stin.forward_tape(&p, xc, tape.constant(x_t.clone())).unwrap();
        adversarial_loss_tape(&tape, xa, xc, y_t, &f, &w).unwrap().0.value().item()
    };

    let tape = Tape::new();
    let p = stin.params.bind(&tape, true);
    let xc = tape.constant(x_c.clone());
    let xt = tape.var(x_t.clone());
    let (xa, _) = stin.forward_tape(&p, xc, xt).unwrap();
    let (loss, _) = adversarial_loss_tape(&tape, xa, xc, y_t, &f, &w).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g_params = p.grads(&grads);
    let g_xt = grads.get_or_zeros(xt);
    drop(grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let groups = stin.params.len();
    let mut params = Samples::default();
    let mut worst_group: f64 = 0.0;
    for g in 0..groups {
        let n = stin.params.tensors()[g].len();
        let mut s = Samples::default();
        for _ in 0..per_group.min(n) {
            let i = rng.gen_range(0..n);
            let orig = stin.params.tensors()[g].data()[i];
            s.probe(g_params[g].data()[i], |d| {
                stin.params.tensors_mut()[g].data_mut()[i] = orig + d;
                let v = loss_at(&stin, &x_t);
                stin.params.tensors_mut()[g].data_mut()[i] = orig;
                v
            });
        }
        worst_group = worst_group.max(s.smooth_error());
        params.merge(s);
    }

    let mut xs = Samples::default();
    for i in (0..x_t.len()).step_by(3) {
        xs.probe(g_xt.data()[i], |d| {
            let mut xp = x_t.clone();
            xp.data_mut()[i] += d;
            loss_at(&stin, &xp)
        });
    }
    GradCheck { worst_group, params, x_t: xs, groups }
}

/// Guidance loss gradient with respect to the learnable target.
pub fn guidance_gradcheck(seed: u64) -> Samples {
    let f = tiny_victim(seed);
    let x_g = random_video(&[3, 4, 4, 4], seed + 4);
    // Away from the guide so the distance term contributes.
    let x_t = random_video(&[3, 4, 4, 4], seed + 5);
    let w = GuidanceWeights::default();
    let loss_at = |x: &Tensor<f64>| {
        let tape = Tape::new();
        guidance_loss_tape(&tape, tape.constant(x.clone()), &x_g, 2, &f, &w).unwrap().value().item()
    };
    let tape = Tape::new();
    let x = tape.var(x_t.clone());
    let loss = guidance_loss_tape(&tape, x, &x_g, 2, &f, &w).unwrap();
    let g = tape.backward(loss).unwrap().get_or_zeros(x);
    let mut s = Samples::default();
    for i in 0..x_t.len() {
        s.probe(g.data()[i], |d| {
            let mut xp = x_t.clone();
            xp.data_mut()[i] += d;
            loss_at(&xp)
        });
    }
    s
}

/// Default-shaped network whose every weight, output layers included, is
/// drawn at the hidden-layer initialisation scale `U(-1/sqrt(fan_in), ..)`.
pub fn drawn_stin<T: svastin::Float>(cfg: StinConfig, seed: u64) -> Stin<T> {
    let mut stin = Stin::<T>::new(StinConfig { init_seed: seed, ..cfg }, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd12a);
    for t in stin.params.tensors_mut() {
        let bound = match t.shape() {
            [_, cin, k0, k1, k2] => 1.0 / ((cin * k0 * k1 * k2) as f64).sqrt(),
            _ => 0.05,
        };
        *t = Tensor::uniform(t.shape(), -bound, bound, &mut rng);
    }
    stin
}
