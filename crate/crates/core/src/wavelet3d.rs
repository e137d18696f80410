//! Single-level orthonormal Haar transforms over videos.
//!
//! The 3D transform maps `[C, T, W, H]` to `[8C, T/2, W/2, H/2]`. Channel
//! `8k + i` holds band `i` of input channel `k`, where the band index packs
//! the (temporal, width, height) filter choices as bits `t<<2 | w<<1 | h` and
//! a set bit means high-pass. Every 1D step maps `(a, b)` to
//! `((a + b)/sqrt 2, (a - b)/sqrt 2)`.
//!
//! A framewise 2D transform (`[C, T, W, H]` to `[4C, T, W/2, H/2]`) is
//! provided for the spatial-only network variant.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pass {
    Low,
    High,
}

/// One of the eight 3D sub-bands, letters ordered (temporal, width, height).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubbandLabel {
    pub temporal: Pass,
    pub width: Pass,
    pub height: Pass,
}

impl SubbandLabel {
    pub const LLL: SubbandLabel = SubbandLabel::from_index(0);
    pub const HHH: SubbandLabel = SubbandLabel::from_index(7);

    /// All labels in storage order: lll, llh, lhl, lhh, hll, hlh, hhl, hhh.
    pub const ALL: [SubbandLabel; 8] = [
        SubbandLabel::from_index(0),
        SubbandLabel::from_index(1),
        SubbandLabel::from_index(2),
        SubbandLabel::from_index(3),
        SubbandLabel::from_index(4),
        SubbandLabel::from_index(5),
        SubbandLabel::from_index(6),
        SubbandLabel::from_index(7),
    ];

    pub const fn from_index(i: usize) -> Self {
        const fn pass(bit: usize) -> Pass {
            if bit == 0 {
                Pass::Low
            } else {
                Pass::High
            }
        }
        SubbandLabel { temporal: pass((i >> 2) & 1), width: pass((i >> 1) & 1), height: pass(i & 1) }
    }

    pub fn index(self) -> usize {
        let bit = |p: Pass| (p == Pass::High) as usize;
        bit(self.temporal) << 2 | bit(self.width) << 1 | bit(self.height)
    }

    pub fn parse(s: &str) -> Option<Self> {
        let b = s.as_bytes();
        if b.len() != 3 {
            return None;
        }
        let mut idx = 0;
        for &ch in b {
            idx <<= 1;
            match ch {
                b'l' | b'L' => {}
                b'h' | b'H' => idx |= 1,
                _ => return None,
            }
        }
        Some(Self::from_index(idx))
    }
}

impl fmt::Display for SubbandLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |p: Pass| if p == Pass::Low { 'l' } else { 'h' };
        write!(f, "{}{}{}", c(self.temporal), c(self.width), c(self.height))
    }
}

/// Coefficients of the 3D transform, `[8C, T/2, W/2, H/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs<T>(Tensor<T>);

impl<T: Float> WaveletCoeffs<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let [c, ..] = t.dims4()?;
        if c == 0 || c % 8 != 0 {
            return Err(Error::shape(format!(
                "wavelet coefficients need a channel count divisible by 8, got {c}"
            )));
        }
        Ok(WaveletCoeffs(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn input_channels(&self) -> usize {
        self.0.shape()[0] / 8
    }
}

fn check_even(axis: &'static str, len: usize) -> Result<()> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::OddAxis { axis, len });
    }
    Ok(())
}

/// Validates the `[C, T, W, H]` layout required by one 3D Haar level.
pub fn check_video_shape<T: Float>(x: &Tensor<T>) -> Result<[usize; 4]> {
    let [c, t, w, h] = x.dims4()?;
    if c == 0 {
        return Err(Error::shape("video has no channels"));
    }
    check_even("T", t)?;
    check_even("W", w)?;
    check_even("H", h)?;
    Ok([c, t, w, h])
}

#[inline]
fn butterfly<T: Float>(v: &mut [T; 8], stride: usize, s: T) {
    // pairs (i, i + stride) for every i whose `stride` bit is clear
    for i in 0..8 {
        if i & stride == 0 {
            let (a, b) = (v[i], v[i | stride]);
            v[i] = (a + b) * s;
            v[i | stride] = (a - b) * s;
        }
    }
}

/// Raw 3D Haar analysis on a tensor.
pub fn haar3_forward<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, t, w, h] = check_video_shape(x)?;
    let (t2, w2, h2) = (t / 2, w / 2, h / 2);
    let s = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let xd = x.data();
    let band = t2 * w2 * h2;
    let mut out = vec![T::zero(); c * 8 * band];
    let mut v = [T::zero(); 8];
    for ci in 0..c {
        for a in 0..t2 {
            for b in 0..w2 {
                for e in 0..h2 {
                    for (i, slot) in v.iter_mut().enumerate() {
                        let (dt, dw, dh) = (i >> 2, (i >> 1) & 1, i & 1);
                        *slot = xd[((ci * t + 2 * a + dt) * w + 2 * b + dw) * h + 2 * e + dh];
                    }
                    butterfly(&mut v, 4, s);
                    butterfly(&mut v, 2, s);
                    butterfly(&mut v, 1, s);
                    let pos = (a * w2 + b) * h2 + e;
                    for (i, &val) in v.iter().enumerate() {
                        out[(ci * 8 + i) * band + pos] = val;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[8 * c, t2, w2, h2], out)
}

/// Raw 3D Haar synthesis; the exact inverse (and transpose) of
/// [`haar3_forward`].
pub fn haar3_inverse<T: Float>(coeffs: &Tensor<T>) -> Result<Tensor<T>> {
    let [c8, t2, w2, h2] = coeffs.dims4()?;
    if c8 == 0 || c8 % 8 != 0 {
        return Err(Error::shape(format!(
            "inverse transform needs a channel count divisible by 8, got {c8}"
        )));
    }
    let c = c8 / 8;
    let (t, w, h) = (2 * t2, 2 * w2, 2 * h2);
    let s = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let cd = coeffs.data();
    let band = t2 * w2 * h2;
    let mut out = vec![T::zero(); c * t * w * h];
    let mut v = [T::zero(); 8];
    for ci in 0..c {
        for a in 0..t2 {
            for b in 0..w2 {
                for e in 0..h2 {
                    let pos = (a * w2 + b) * h2 + e;
                    for (i, slot) in v.iter_mut().enumerate() {
                        *slot = cd[(ci * 8 + i) * band + pos];
                    }
                    // each butterfly is its own inverse
                    butterfly(&mut v, 1, s);
                    butterfly(&mut v, 2, s);
                    butterfly(&mut v, 4, s);
                    for (i, &val) in v.iter().enumerate() {
                        let (dt, dw, dh) = (i >> 2, (i >> 1) & 1, i & 1);
                        out[((ci * t + 2 * a + dt) * w + 2 * b + dw) * h + 2 * e + dh] = val;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, t, w, h], out)
}

/// Framewise 2D Haar analysis, `[C, T, W, H]` to `[4C, T, W/2, H/2]` with
/// bands ordered ll, lh, hl, hh (width, height).
pub fn haar2_forward<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, t, w, h] = x.dims4()?;
    check_even("W", w)?;
    check_even("H", h)?;
    let (w2, h2) = (w / 2, h / 2);
    let s = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let xd = x.data();
    let band = t * w2 * h2;
    let mut out = vec![T::zero(); c * 4 * band];
    let mut v = [T::zero(); 8];
    for ci in 0..c {
        for a in 0..t {
            for b in 0..w2 {
                for e in 0..h2 {
                    for (i, slot) in v.iter_mut().take(4).enumerate() {
                        let (dw, dh) = (i >> 1, i & 1);
                        *slot = xd[((ci * t + a) * w + 2 * b + dw) * h + 2 * e + dh];
                    }
                    butterfly(&mut v, 2, s);
                    butterfly(&mut v, 1, s);
                    let pos = (a * w2 + b) * h2 + e;
                    for (i, &val) in v.iter().take(4).enumerate() {
                        out[(ci * 4 + i) * band + pos] = val;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[4 * c, t, w2, h2], out)
}

pub fn haar2_inverse<T: Float>(coeffs: &Tensor<T>) -> Result<Tensor<T>> {
    let [c4, t, w2, h2] = coeffs.dims4()?;
    if c4 == 0 || c4 % 4 != 0 {
        return Err(Error::shape(format!(
            "inverse 2D transform needs a channel count divisible by 4, got {c4}"
        )));
    }
    let c = c4 / 4;
    let (w, h) = (2 * w2, 2 * h2);
    let s = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let cd = coeffs.data();
    let band = t * w2 * h2;
    let mut out = vec![T::zero(); c * t * w * h];
    let mut v = [T::zero(); 8];
    for ci in 0..c {
        for a in 0..t {
            for b in 0..w2 {
                for e in 0..h2 {
                    let pos = (a * w2 + b) * h2 + e;
                    for (i, slot) in v.iter_mut().take(4).enumerate() {
                        *slot = cd[(ci * 4 + i) * band + pos];
                    }
                    butterfly(&mut v, 1, s);
                    butterfly(&mut v, 2, s);
                    for (i, &val) in v.iter().take(4).enumerate() {
                        let (dw, dh) = (i >> 1, i & 1);
                        out[((ci * t + a) * w + 2 * b + dw) * h + 2 * e + dh] = val;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, t, w, h], out)
}

/// Gathers every `group`-th channel starting at `offset` (band selection).
pub fn select_channels<T: Float>(x: &Tensor<T>, group: usize, offset: usize) -> Result<Tensor<T>> {
    let [c, t, w, h] = x.dims4()?;
    if group == 0 || c % group != 0 || offset >= group {
        return Err(Error::shape(format!("cannot take band {offset} of {group} from {c} channels")));
    }
    let plane = t * w * h;
    let mut out = Vec::with_capacity(c / group * plane);
    for k in 0..c / group {
        let ch = k * group + offset;
        out.extend_from_slice(&x.data()[ch * plane..(ch + 1) * plane]);
    }
    Tensor::from_vec(&[c / group, t, w, h], out)
}

/// Adjoint of [`select_channels`]: scatters the band back into a zero tensor.
pub fn scatter_channels<T: Float>(band: &Tensor<T>, group: usize, offset: usize) -> Result<Tensor<T>> {
    let [c, t, w, h] = band.dims4()?;
    let plane = t * w * h;
    let mut out = Tensor::zeros(&[c * group, t, w, h]);
    for k in 0..c {
        let ch = k * group + offset;
        out.data_mut()[ch * plane..(ch + 1) * plane]
            .copy_from_slice(&band.data()[k * plane..(k + 1) * plane]);
    }
    Ok(out)
}

/// Forward transform Γ.
pub fn dwt3d_forward<T: Float>(x: &Tensor<T>) -> Result<WaveletCoeffs<T>> {
    WaveletCoeffs::new(haar3_forward(x)?)
}

/// Inverse transform Γ⁻¹. The result is not clamped.
pub fn dwt3d_inverse<T: Float>(c: &WaveletCoeffs<T>) -> Result<Tensor<T>> {
    haar3_inverse(c.tensor())
}

/// One band for every input channel, `[C, T/2, W/2, H/2]`.
pub fn subband<T: Float>(c: &WaveletCoeffs<T>, label: SubbandLabel) -> Tensor<T> {
    select_channels(c.tensor(), 8, label.index()).expect("coefficients are validated on construction")
}
