//! Raw convolution and pooling kernels over `[C, T, W, H]` buffers.
//!
//! Convolutions go through im2col + gemm. The column matrix is `[K, P]` with
//! `K = cin * kt * kw * kh` and `P = T' * W' * H'`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub input: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.input[i] + 2 * self.pad[i] + 1 - self.kernel[i];
        }
        out
    }

    pub fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn p(&self) -> usize {
        self.output().iter().product()
    }

    pub fn for_input<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, pad: [usize; 3]) -> Result<Self> {
        let [cin, t, w, h] = x.dims4()?;
        let (cout, wcin, kernel) = match weight.shape() {
            &[co, ci, kt, kw, kh] => (co, ci, [kt, kw, kh]),
            s => return Err(Error::shape(format!("conv weight must be 5-d, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv expects {wcin} input channels, got {cin}"
            )));
        }
        let input = [t, w, h];
        for i in 0..3 {
            if input[i] + 2 * pad[i] < kernel[i] {
                return Err(Error::shape(format!(
                    "conv kernel {kernel:?} larger than padded input {input:?}"
                )));
            }
        }
        Ok(ConvGeom { cin, cout, kernel, pad, input })
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let [ti, wi, hi] = g.input;
    let [to, wo, ho] = g.output();
    let [kt, kw, kh] = g.kernel;
    let [pt, pw, ph] = g.pad;
    let p = to * wo * ho;
    let mut cols = vec![T::zero(); g.k() * p];
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * ti * wi * hi..(ci + 1) * ti * wi * hi];
        for dt in 0..kt {
            for dw in 0..kw {
                for dh in 0..kh {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    // valid output h range so that ho + dh - ph lies in [0, hi)
                    let h_lo = ph.saturating_sub(dh);
                    let h_hi = (hi + ph).saturating_sub(dh).min(ho);
                    for t in 0..to {
                        let src_t = t + dt;
                        if src_t < pt || src_t - pt >= ti {
                            continue;
                        }
                        let st = src_t - pt;
                        for w in 0..wo {
                            let src_w = w + dw;
                            if src_w < pw || src_w - pw >= wi {
                                continue;
                            }
                            let sw = src_w - pw;
                            if h_lo >= h_hi {
                                continue;
                            }
                            let src_off = (st * wi + sw) * hi + h_lo + dh - ph;
                            let dst_off = (t * wo + w) * ho;
                            dst[dst_off + h_lo..dst_off + h_hi]
                                .copy_from_slice(&xc[src_off..src_off + (h_hi - h_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let [ti, wi, hi] = g.input;
    let [to, wo, ho] = g.output();
    let [kt, kw, kh] = g.kernel;
    let [pt, pw, ph] = g.pad;
    let p = to * wo * ho;
    let mut x = vec![T::zero(); g.cin * ti * wi * hi];
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * ti * wi * hi..(ci + 1) * ti * wi * hi];
        for dt in 0..kt {
            for dw in 0..kw {
                for dh in 0..kh {
                    let src = &cols[row * p..(row + 1) * p];
                    let h_lo = ph.saturating_sub(dh);
                    let h_hi = (hi + ph).saturating_sub(dh).min(ho);
                    for t in 0..to {
                        let src_t = t + dt;
                        if src_t < pt || src_t - pt >= ti {
                            continue;
                        }
                        let st = src_t - pt;
                        for w in 0..wo {
                            let src_w = w + dw;
                            if src_w < pw || src_w - pw >= wi || h_lo >= h_hi {
                                continue;
                            }
                            let sw = src_w - pw;
                            let x_off = (st * wi + sw) * hi + h_lo + dh - ph;
                            let c_off = (t * wo + w) * ho;
                            for (d, &s) in xc[x_off..x_off + (h_hi - h_lo)]
                                .iter_mut()
                                .zip(&src[c_off + h_lo..c_off + h_hi])
                            {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

pub fn conv3d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let g = ConvGeom::for_input(x, weight, pad)?;
    let (k, p) = (g.k(), g.p());
    let cols = im2col(x.data(), &g);
    let mut out = vec![T::zero(); g.cout * p];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    T::gemm(g.cout, k, p, weight.data(), (k as isize, 1), &cols, (p as isize, 1), T::one(), &mut out);
    let [to, wo, ho] = g.output();
    Tensor::from_vec(&[g.cout, to, wo, ho], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: [usize; 3],
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::for_input(x, weight, pad)?;
    let (k, p) = (g.k(), g.p());
    let go = grad_out.data();
    let mut grads = ConvGrads { input: None, weight: None, bias: None };
    if need[1] {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![T::zero(); g.cout * k];
        // dW[cout, K] = dOut[cout, P] * cols^T
        T::gemm(g.cout, p, k, go, (p as isize, 1), &cols, (1, p as isize), T::zero(), &mut dw);
        grads.weight = Some(Tensor::from_vec(weight.shape(), dw)?);
    }
    if need[2] {
        let db: Vec<T> = go.chunks(p).map(|c| c.iter().copied().sum()).collect();
        grads.bias = Some(Tensor::from_vec(&[g.cout], db)?);
    }
    if need[0] {
        let mut dcols = vec![T::zero(); k * p];
        // dcols[K, P] = W^T * dOut
        T::gemm(k, g.cout, p, weight.data(), (1, k as isize), go, (p as isize, 1), T::zero(), &mut dcols);
        grads.input = Some(Tensor::from_vec(x.shape(), col2im(&dcols, &g))?);
    }
    Ok(grads)
}

/// Non-overlapping max pooling; returns the pooled tensor and the flat argmax
/// of every output cell.
pub fn max_pool3d<T: Float>(x: &Tensor<T>, kernel: [usize; 3]) -> Result<(Tensor<T>, Vec<u32>)> {
    let [c, t, w, h] = x.dims4()?;
    let [kt, kw, kh] = kernel;
    if kt == 0 || kw == 0 || kh == 0 || t % kt != 0 || w % kw != 0 || h % kh != 0 {
        return Err(Error::shape(format!(
            "pool kernel {kernel:?} does not tile input extents {:?}",
            [t, w, h]
        )));
    }
    let (to, wo, ho) = (t / kt, w / kw, h / kh);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * to * wo * ho);
    let mut arg = Vec::with_capacity(out.capacity());
    for ci in 0..c {
        for a in 0..to {
            for b in 0..wo {
                for e in 0..ho {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for dt in 0..kt {
                        for dw in 0..kw {
                            for dh in 0..kh {
                                let i = ((ci * t + a * kt + dt) * w + b * kw + dw) * h + e * kh + dh;
                                if xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[c, to, wo, ho], out)?, arg))
}
