//! Procedural motion clips whose class is carried only by how an object moves.
//!
//! Every clip shows one flat-coloured shape on a flat background. Position,
//! orientation and log-size live on tori (positions wrap at the frame edge,
//! log-size wraps inside a fixed band), so the distribution of any single
//! frame is the same for every class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    TranslateUp,
    TranslateDown,
    TranslateLeft,
    TranslateRight,
    RotateCw,
    RotateCcw,
    ScaleGrow,
    ScaleShrink,
}

impl Motion {
    pub const ALL: [Motion; 8] = [
        Motion::TranslateUp,
        Motion::TranslateDown,
        Motion::TranslateLeft,
        Motion::TranslateRight,
        Motion::RotateCw,
        Motion::RotateCcw,
        Motion::ScaleGrow,
        Motion::ScaleShrink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::TranslateUp => "translate_up",
            Motion::TranslateDown => "translate_down",
            Motion::TranslateLeft => "translate_left",
            Motion::TranslateRight => "translate_right",
            Motion::RotateCw => "rotate_cw",
            Motion::RotateCcw => "rotate_ccw",
            Motion::ScaleGrow => "scale_grow",
            Motion::ScaleShrink => "scale_shrink",
        }
    }

    /// Integer pixel shift per frame along (W, H); "up" is towards H index 0.
    fn shift(self, v: i64) -> Option<(i64, i64)> {
        match self {
            Motion::TranslateUp => Some((0, -v)),
            Motion::TranslateDown => Some((0, v)),
            Motion::TranslateLeft => Some((-v, 0)),
            Motion::TranslateRight => Some((v, 0)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticVideoSpec {
    /// Uses the first `num_classes` entries of [`Motion::ALL`].
    pub num_classes: usize,
    pub channels: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub clips_per_class: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Pixels per frame for the translation classes.
    pub velocity: usize,
    /// Degrees per frame for the rotation classes.
    pub rotation_deg: f64,
    /// Size ratio between consecutive frames for the scale classes.
    pub scale_rate: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        SyntheticVideoSpec {
            num_classes: 8,
            channels: 3,
            frames: 8,
            width: 32,
            height: 32,
            clips_per_class: 100,
            noise: 0.02,
            velocity: 2,
            rotation_deg: 20.0,
            scale_rate: 1.12,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Object radius band in pixels; log-size wraps inside it.
const SIZE_RANGE: (f64, f64) = (3.5, 8.0);

impl SyntheticVideoSpec {
    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.width, self.height]
    }

    pub fn classes(&self) -> &'static [Motion] {
        &Motion::ALL[..self.num_classes.min(Motion::ALL.len())]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=Motion::ALL.len()).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=8, got {}", self.num_classes));
        }
        if self.channels == 0 {
            return fail("channels must be >= 1".into());
        }
        if self.frames < 2 || self.frames % 2 != 0 {
            return fail(format!("frames must be even and >= 2, got {}", self.frames));
        }
        let side = self.width.min(self.height);
        if side < 16 || self.width % 2 != 0 || self.height % 2 != 0 {
            return fail(format!("frames must be even-sized and at least 16x16, got {}x{}", self.width, self.height));
        }
        if self.velocity == 0 || 2 * self.velocity >= side {
            return fail(format!("velocity {} is unusable on a {side}-pixel frame", self.velocity));
        }
        if self.scale_rate <= 1.0 || self.scale_rate.ln() * (self.frames - 1) as f64 >= (SIZE_RANGE.1 / SIZE_RANGE.0).ln() {
            return fail(format!("scale_rate {} must be > 1 and small enough not to wrap twice", self.scale_rate));
        }
        if !(self.rotation_deg > 0.0 && self.rotation_deg < 90.0) {
            return fail(format!("rotation_deg must be in (0, 90), got {}", self.rotation_deg));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        let val = self.val_count();
        if val == 0 || val >= self.clips_per_class {
            return fail(format!("{} clips per class cannot be split {}", self.clips_per_class, self.val_fraction));
        }
        Ok(())
    }

    fn val_count(&self) -> usize {
        (self.clips_per_class as f64 * self.val_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticVideoSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// SHA-256 over labels and payloads, train split first.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.val) {
            h.update((s.label as u32).to_le_bytes());
            for d in s.video.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            for v in s.video.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Bar,
    Ellipse,
    Triangle,
    Ell,
}

fn box_sdf(u: f64, v: f64, cu: f64, cv: f64, hu: f64, hv: f64) -> f64 {
    ((u - cu).abs() - hu).max((v - cv).abs() - hv)
}

impl Shape {
    /// Approximate signed distance for the unit-size shape.
    fn sdf(self, u: f64, v: f64) -> f64 {
        match self {
            Shape::Bar => box_sdf(u, v, 0.0, 0.0, 1.0, 0.4),
            Shape::Ellipse => ((u * u + 4.0 * v * v).sqrt() - 1.0) * 0.5,
            Shape::Triangle => {
                // vertices (1, 0), (-0.7, 0.75), (-0.7, -0.75)
                let e1 = -(u + 0.7);
                let n = (0.75f64).hypot(1.7);
                let e2 = (0.75 * (u - 1.0) + 1.7 * v) / n;
                let e3 = (0.75 * (u - 1.0) - 1.7 * v) / n;
                e1.max(e2).max(e3)
            }
            Shape::Ell => box_sdf(u, v, -0.35, 0.0, 0.3, 1.0).min(box_sdf(u, v, 0.25, -0.7, 0.9, 0.3)),
        }
    }
}

struct Scene {
    shape: Shape,
    fg: Vec<f64>,
    bg: Vec<f64>,
    cx: f64,
    cy: f64,
    theta: f64,
    log_size: f64,
}

fn wrap(d: f64, period: f64) -> f64 {
    d - period * (d / period + 0.5).floor()
}

fn wrap_band(x: f64, lo: f64, hi: f64) -> f64 {
    lo + (x - lo).rem_euclid(hi - lo)
}

impl Scene {
    fn render(&self, w: usize, h: usize, out: &mut [f32], frame: usize, frames: usize) {
        let (sin, cos) = self.theta.sin_cos();
        let s = self.log_size.exp();
        let plane = w * h;
        for x in 0..w {
            for y in 0..h {
                let dx = wrap(x as f64 + 0.5 - self.cx, w as f64);
                let dy = wrap(y as f64 + 0.5 - self.cy, h as f64);
                let u = (cos * dx + sin * dy) / s;
                let v = (-sin * dx + cos * dy) / s;
                let cov = (0.5 - self.shape.sdf(u, v) * s).clamp(0.0, 1.0);
                for (c, (&f, &b)) in self.fg.iter().zip(&self.bg).enumerate() {
                    out[(c * frames + frame) * plane + x * h + y] = (b + cov * (f - b)) as f32;
                }
            }
        }
    }
}

fn random_scene(spec: &SyntheticVideoSpec, rng: &mut ChaCha8Rng) -> Scene {
    let shape = [Shape::Bar, Shape::Ellipse, Shape::Triangle, Shape::Ell][rng.gen_range(0..4)];
    let mut fg: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.6..1.0)).collect();
    let mut bg: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.0..0.4)).collect();
    if rng.gen_bool(0.5) {
        std::mem::swap(&mut fg, &mut bg);
    }
    Scene {
        shape,
        fg,
        bg,
        cx: rng.gen_range(0.0..spec.width as f64),
        cy: rng.gen_range(0.0..spec.height as f64),
        theta: rng.gen_range(0.0..std::f64::consts::TAU),
        log_size: rng.gen_range(SIZE_RANGE.0.ln()..SIZE_RANGE.1.ln()),
    }
}

/// Copies frame `t - 1` into frame `t` rolled by `(dx, dy)` with wrap-around.
fn roll_from_previous(data: &mut [f32], spec: &SyntheticVideoSpec, t: usize, dx: i64, dy: i64) {
    let (w, h, frames) = (spec.width, spec.height, spec.frames);
    let plane = w * h;
    for c in 0..spec.channels {
        let src = (c * frames + t - 1) * plane;
        let dst = (c * frames + t) * plane;
        for x in 0..w {
            let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
            for y in 0..h {
                let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                data[dst + x * h + y] = data[src + sx * h + sy];
            }
        }
    }
}

fn render_clip(spec: &SyntheticVideoSpec, motion: Motion, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let shape = spec.shape();
    let mut data = vec![0f32; shape.iter().product()];
    let mut scene = random_scene(spec, rng);
    let (lo, hi) = (SIZE_RANGE.0.ln(), SIZE_RANGE.1.ln());
    let omega = spec.rotation_deg.to_radians();
    let step = spec.scale_rate.ln();
    scene.render(spec.width, spec.height, &mut data, 0, spec.frames);
    for t in 1..spec.frames {
        if let Some((dx, dy)) = motion.shift(spec.velocity as i64) {
            roll_from_previous(&mut data, spec, t, dx, dy);
            continue;
        }
        match motion {
            Motion::RotateCw => scene.theta += omega,
            Motion::RotateCcw => scene.theta -= omega,
            Motion::ScaleGrow => scene.log_size = wrap_band(scene.log_size + step, lo, hi),
            Motion::ScaleShrink => scene.log_size = wrap_band(scene.log_size - step, lo, hi),
            _ => unreachable!("translations handled above"),
        }
        scene.render(spec.width, spec.height, &mut data, t, spec.frames);
    }
    if spec.noise > 0.0 {
        let n = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in &mut data {
            *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    // 8-bit exact, so the PNG container stores clips losslessly.
    for v in &mut data {
        *v = (*v * 255.0).round_ties_even() / 255.0;
    }
    Tensor::from_vec(&shape, data).expect("shape matches buffer")
}

/// Deterministic in `spec.seed`; the split is stratified per class.
pub fn generate_dataset(spec: &SyntheticVideoSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.clips_per_class;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    split_rng.set_stream(u64::MAX);
    for (label, &motion) in spec.classes().iter().enumerate() {
        let clips: Vec<Sample> = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream((label * n + i) as u64);
                Sample { video: render_clip(spec, motion, &mut rng), label }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut split_rng);
        let val_idx = &order[..spec.val_count()];
        for (i, s) in clips.into_iter().enumerate() {
            if val_idx.contains(&i) {
                val.push(s);
            } else {
                train.push(s);
            }
        }
    }
    Ok(Dataset { spec: spec.clone(), train, val })
}

/// Every frame as its own one-frame clip, keeping the clip label.
pub fn frame_dataset(d: &Dataset) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let split = |s: &[Sample]| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for smp in s {
            let [_, t, ..] = smp.video.dims4()?;
            for ti in 0..t {
                out.push(Sample { video: smp.video.frame(ti)?, label: smp.label });
            }
        }
        Ok(out)
    };
    Ok((split(&d.train)?, split(&d.val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticVideoSpec {
        SyntheticVideoSpec { clips_per_class: 5, ..Default::default() }
    }

    #[test]
    fn deterministic_and_split() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.val.len(), 8);
        assert_eq!(a.train.len(), 32);
        let c = generate_dataset(&SyntheticVideoSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn translate_up_rolls_towards_h_zero() {
        let spec = SyntheticVideoSpec { noise: 0.0, ..small() };
        let d = generate_dataset(&spec).unwrap();
        let clip = &d.train.iter().find(|s| s.label == 0).unwrap().video;
        let [c, t, w, h] = clip.dims4().unwrap();
        let at = |ci: usize, ti: usize, x: usize, y: usize| clip.data()[((ci * t + ti) * w + x) * h + y];
        for ci in 0..c {
            for ti in 1..t {
                for x in 0..w {
                    for y in 0..h {
                        assert_eq!(at(ci, ti, x, y), at(ci, ti - 1, x, (y + spec.velocity) % h));
                    }
                }
            }
        }
    }

    #[test]
    fn values_in_unit_range_and_object_visible() {
        let d = generate_dataset(&small()).unwrap();
        for s in &d.train {
            assert!(s.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let f = s.video.frame(0).unwrap();
            let mean = f.sum() / f.len() as f32;
            let spread = f.data().iter().map(|v| (v - mean).abs()).fold(0f32, f32::max);
            assert!(spread > 0.15);
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        for bad in [
            SyntheticVideoSpec { width: 8, height: 8, ..small() },
            SyntheticVideoSpec { frames: 3, ..small() },
            SyntheticVideoSpec { velocity: 0, ..small() },
            SyntheticVideoSpec { num_classes: 9, ..small() },
            SyntheticVideoSpec { clips_per_class: 1, ..small() },
        ] {
            assert!(matches!(generate_dataset(&bad), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
