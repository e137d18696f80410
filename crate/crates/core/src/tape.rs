//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Constants never receive gradients, which also skips the corresponding
//! weight-gradient work in convolutions.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, conv3d_backward, conv3d_forward};
use crate::tensor::{Float, Tensor};
use crate::wavelet3d as wt;

type Vjp<T> = Box<dyn Fn(&Tensor<T>) -> Tensor<T>>;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, T),
    Clamp(usize, T, T),
    Conv { x: usize, w: usize, b: Option<usize>, pad: [usize; 3] },
    Concat(Vec<usize>),
    MaxPool { x: usize, arg: Vec<u32> },
    FrameMean(usize),
    MeanRows(usize),
    Linear { x: usize, w: usize, b: usize },
    Haar3(usize),
    Haar3Inv(usize),
    Haar2(usize),
    Haar2Inv(usize),
    Select { x: usize, group: usize, offset: usize },
    Sum(usize),
    SumSquares(usize),
    L21(usize),
    CrossEntropy { logits: usize, target: usize, probs: Vec<T> },
    CwMargin { logits: usize, target: usize, other: usize, active: bool },
    ChannelAffine { x: usize, scale: Vec<T> },
    Custom { x: usize, vjp: Vjp<T> },
    Reshape(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `v`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A leaf that receives gradients.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, g: Tensor<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            let want = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        accumulate(&mut grads, *a, g.zip_map(val(*b), |p, q| p * q));
                    }
                    if want(*b) {
                        accumulate(&mut grads, *b, g.zip_map(val(*a), |p, q| p * q));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Shift(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(out, |p, y| p * y)),
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, g.zip_map(out, |p, y| p * y * (T::one() - y)))
                }
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_map(out, |p, y| p * (T::one() - y * y))),
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(val(*a), |p, x| if x > T::zero() { p } else { p * s }),
                    )
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(val(*a), |p, x| if x >= lo && x <= hi { p } else { T::zero() }),
                    )
                }
                Op::Conv { x, w, b, pad } => {
                    let need = [want(*x), want(*w), b.map(want).unwrap_or(false)];
                    let cg = conv3d_backward(val(*x), val(*w), &g, *pad, need)?;
                    if let Some(gx) = cg.input {
                        accumulate(&mut grads, *x, gx);
                    }
                    if let Some(gw) = cg.weight {
                        accumulate(&mut grads, *w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if want(p) {
                            let piece = Tensor::from_vec(val(p).shape(), g.data()[off..off + n].to_vec())?;
                            accumulate(&mut grads, p, piece);
                        }
                        off += n;
                    }
                }
                Op::MaxPool { x, arg } => {
                    let mut gx = Tensor::zeros(val(*x).shape());
                    for (&i, &gv) in arg.iter().zip(g.data()) {
                        gx.data_mut()[i as usize] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::FrameMean(x) => {
                    let [c, t, w, h] = val(*x).dims4()?;
                    let plane = w * h;
                    let inv = T::one() / T::lit(plane as f64);
                    let mut gx = Tensor::zeros(val(*x).shape());
                    for ci in 0..c {
                        for ti in 0..t {
                            let gv = g.data()[ti * c + ci] * inv;
                            let off = (ci * t + ti) * plane;
                            gx.data_mut()[off..off + plane].fill(gv);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let shape = val(*x).shape().to_vec();
                    let (r, c) = (shape[0], shape[1]);
                    let inv = T::one() / T::lit(r as f64);
                    let gx = Tensor::from_fn(&shape, |i| g.data()[i % c] * inv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (o, i) = (wv.shape()[0], wv.shape()[1]);
                    if want(*x) {
                        let mut gx = vec![T::zero(); i];
                        T::gemm(i, o, 1, wv.data(), (1, i as isize), g.data(), (1, 1), T::zero(), &mut gx);
                        accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                    }
                    if want(*w) {
                        let gw = Tensor::from_fn(&[o, i], |k| g.data()[k / i] * xv.data()[k % i]);
                        accumulate(&mut grads, *w, gw);
                    }
                    accumulate(&mut grads, *b, g);
                }
                Op::Haar3(a) => accumulate(&mut grads, *a, wt::haar3_inverse(&g)?),
                Op::Haar3Inv(a) => accumulate(&mut grads, *a, wt::haar3_forward(&g)?),
                Op::Haar2(a) => accumulate(&mut grads, *a, wt::haar2_inverse(&g)?),
                Op::Haar2Inv(a) => accumulate(&mut grads, *a, wt::haar2_forward(&g)?),
                Op::Select { x, group, offset } => {
                    accumulate(&mut grads, *x, wt::scatter_channels(&g, *group, *offset)?)
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, Tensor::full(val(*a).shape(), gv));
                }
                Op::SumSquares(a) => {
                    let two_g = g.item() + g.item();
                    accumulate(&mut grads, *a, val(*a).scale(two_g));
                }
                Op::L21(a) => {
                    let xv = val(*a);
                    let [c, t, w, h] = xv.dims4()?;
                    let norms: Vec<T> = xv.frame_sq_norms()?.into_iter().map(|n| n.sqrt()).collect();
                    let plane = w * h;
                    let gv = g.item();
                    let mut gx = Tensor::zeros(xv.shape());
                    for ci in 0..c {
                        for (ti, &n) in norms.iter().enumerate() {
                            if n == T::zero() {
                                continue;
                            }
                            let off = (ci * t + ti) * plane;
                            let f = gv / n;
                            for (d, &s) in gx.data_mut()[off..off + plane].iter_mut().zip(&xv.data()[off..off + plane]) {
                                *d = s * f;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let gv = g.item();
                    let mut gl = Tensor::from_vec(val(*logits).shape(), probs.clone())?;
                    gl.data_mut()[*target] -= T::one();
                    accumulate(&mut grads, *logits, gl.scale(gv));
                }
                Op::CwMargin { logits, target, other, active } => {
                    if *active {
                        let mut gl = Tensor::zeros(val(*logits).shape());
                        gl.data_mut()[*other] = g.item();
                        gl.data_mut()[*target] = -g.item();
                        accumulate(&mut grads, *logits, gl);
                    }
                }
                Op::ChannelAffine { x, scale } => {
                    let c = scale.len();
                    let plane = g.len() / c;
                    let gx = Tensor::from_fn(g.shape(), |i| g.data()[i] * scale[i / plane]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Custom { x, vjp } => {
                    let gx = vjp(&g);
                    if gx.shape() != val(*x).shape() {
                        return Err(Error::shape("custom vector-Jacobian product returned a wrong shape"));
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(Grads { grads })
    }
}

macro_rules! unary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(self) -> Self {
            let v = self.value().map($f);
            self.unary(v, Op::$op(self.id))
        }
    };
}

impl<'t, T: Float> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(&[self.id])
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        let g = self.tape.needs(&[self.id]);
        self.tape.push(value, op, g)
    }

    fn binary(self, other: Self, value: Tensor<T>, op: Op<T>) -> Self {
        let g = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, g)
    }

    fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        self.value().same_shape(&other.value(), what)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.check_same(&other, "add")?;
        let v = self.value().add(&other.value());
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.check_same(&other, "sub")?;
        let v = self.value().sub(&other.value());
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.check_same(&other, "mul")?;
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: T) -> Self {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn shift(self, c: T) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    unary!(exp, Exp, |x: T| x.exp());
    unary!(sigmoid, Sigmoid, |x: T| T::one() / (T::one() + (-x).exp()));
    unary!(tanh, Tanh, |x: T| x.tanh());

    pub fn leaky_relu(self, slope: T) -> Self {
        let v = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(T::zero())
    }

    /// Clamp whose gradient passes wherever the input lies inside `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Self {
        let v = self.value().clamp(lo, hi);
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn conv3d(self, weight: Self, bias: Option<Self>, pad: [usize; 3]) -> Result<Self> {
        let b = bias.map(|b| b.value());
        let v = conv3d_forward(&self.value(), &weight.value(), b.as_deref(), pad)?;
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let g = self.tape.needs(&ids);
        Ok(self.tape.push(v, Op::Conv { x: self.id, w: weight.id, b: bias.map(|b| b.id), pad }, g))
    }

    /// Concatenates along the channel axis (axis 0).
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = first.shape();
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            let v = p.value();
            if v.shape()[1..] != base[1..] {
                return Err(Error::shape(format!("concat: {:?} vs {:?}", v.shape(), base)));
            }
            channels += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = base.clone();
        shape[0] = channels;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let g = first.tape.needs(&ids);
        Ok(first.tape.push(Tensor::from_vec(&shape, data)?, Op::Concat(ids), g))
    }

    pub fn max_pool3d(self, kernel: [usize; 3]) -> Result<Self> {
        let (v, arg) = kernels::max_pool3d(&self.value(), kernel)?;
        Ok(self.unary(v, Op::MaxPool { x: self.id, arg }))
    }

    /// `[C, T, W, H]` to `[T, C]`: spatial mean of every channel per frame.
    pub fn frame_mean(self) -> Result<Self> {
        let x = self.value();
        let [c, t, w, h] = x.dims4()?;
        let plane = w * h;
        let inv = T::one() / T::lit(plane as f64);
        let mut out = vec![T::zero(); t * c];
        for ci in 0..c {
            for ti in 0..t {
                let off = (ci * t + ti) * plane;
                out[ti * c + ci] = x.data()[off..off + plane].iter().copied().sum::<T>() * inv;
            }
        }
        Ok(self.unary(Tensor::from_vec(&[t, c], out)?, Op::FrameMean(self.id)))
    }

    /// `[R, C]` to `[C]`.
    pub fn mean_rows(self) -> Result<Self> {
        let x = self.value();
        let (r, c) = match x.shape() {
            &[r, c] => (r, c),
            s => return Err(Error::shape(format!("mean_rows needs a matrix, got {s:?}"))),
        };
        let inv = T::one() / T::lit(r as f64);
        let mut out = vec![T::zero(); c];
        for row in x.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.unary(Tensor::from_vec(&[c], out)?, Op::MeanRows(self.id)))
    }

    /// `weight [O, I] * self [I] + bias [O]`.
    pub fn linear(self, weight: Self, bias: Self) -> Result<Self> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (o, i) = match w.shape() {
            &[o, i] => (o, i),
            s => return Err(Error::shape(format!("linear weight must be 2-d, got {s:?}"))),
        };
        if x.len() != i || b.len() != o {
            return Err(Error::shape(format!("linear: weight {o}x{i}, input {}, bias {}", x.len(), b.len())));
        }
        let mut out = b.data().to_vec();
        T::gemm(o, i, 1, w.data(), (i as isize, 1), x.data(), (1, 1), T::one(), &mut out);
        let g = self.tape.needs(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            Tensor::from_vec(&[o], out)?,
            Op::Linear { x: self.id, w: weight.id, b: bias.id },
            g,
        ))
    }

    pub fn haar3(self) -> Result<Self> {
        let v = wt::haar3_forward(&self.value())?;
        Ok(self.unary(v, Op::Haar3(self.id)))
    }

    pub fn haar3_inv(self) -> Result<Self> {
        let v = wt::haar3_inverse(&self.value())?;
        Ok(self.unary(v, Op::Haar3Inv(self.id)))
    }

    pub fn haar2(self) -> Result<Self> {
        let v = wt::haar2_forward(&self.value())?;
        Ok(self.unary(v, Op::Haar2(self.id)))
    }

    pub fn haar2_inv(self) -> Result<Self> {
        let v = wt::haar2_inverse(&self.value())?;
        Ok(self.unary(v, Op::Haar2Inv(self.id)))
    }

    pub fn select_channels(self, group: usize, offset: usize) -> Result<Self> {
        let v = wt::select_channels(&self.value(), group, offset)?;
        Ok(self.unary(v, Op::Select { x: self.id, group, offset }))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn sum_squares(self) -> Self {
        let v = Tensor::scalar(self.value().sq_norm());
        self.unary(v, Op::SumSquares(self.id))
    }

    /// Sum over frames of the per-frame Frobenius norm.
    pub fn l21(self) -> Result<Self> {
        let n: T = self.value().frame_sq_norms()?.into_iter().map(|s| s.sqrt()).sum();
        Ok(self.unary(Tensor::scalar(n), Op::L21(self.id)))
    }

    /// `-log softmax(self)[target]` on a logit vector.
    pub fn cross_entropy(self, target: usize) -> Result<Self> {
        let z = self.value();
        if target >= z.len() {
            return Err(Error::ClassIndex { index: target, num_classes: z.len() });
        }
        let probs = softmax(z.data());
        let m = z.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let loss = lse - z.data()[target];
        Ok(self.unary(Tensor::scalar(loss), Op::CrossEntropy { logits: self.id, target, probs }))
    }

    /// `max(max_{j != target} z_j - z_target, -kappa)`.
    pub fn cw_margin(self, target: usize, kappa: T) -> Result<Self> {
        let z = self.value();
        if target >= z.len() || z.len() < 2 {
            return Err(Error::ClassIndex { index: target, num_classes: z.len() });
        }
        let (other, best) = z
            .data()
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .fold((0, T::neg_infinity()), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        let margin = best - z.data()[target];
        let active = margin > -kappa;
        let v = if active { margin } else { -kappa };
        Ok(self.unary(Tensor::scalar(v), Op::CwMargin { logits: self.id, target, other, active }))
    }

    /// Per-channel `x * scale[c] + shift[c]` on a `[C, ...]` tensor.
    pub fn channel_affine(self, scale: &[T], shift: &[T]) -> Result<Self> {
        let x = self.value();
        let c = x.shape()[0];
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(format!("channel affine for {} channels on {c}", scale.len())));
        }
        let plane = x.len() / c;
        let v = Tensor::from_fn(x.shape(), |i| x.data()[i] * scale[i / plane] + shift[i / plane]);
        Ok(self.unary(v, Op::ChannelAffine { x: self.id, scale: scale.to_vec() }))
    }

    /// Inserts an externally computed function with a caller-supplied
    /// vector-Jacobian product.
    pub fn custom(self, value: Tensor<T>, vjp: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Self {
        self.unary(value, Op::Custom { x: self.id, vjp: Box::new(vjp) })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }
}

pub fn softmax<T: Float>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(f)/d(input) for a scalar function built
    /// on a fresh tape.
    fn check_grad(x0: &Tensor<f64>, f: impl Fn(Var<'_, f64>) -> Var<'_, f64>) {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = f(x);
        let g = tape.backward(y).unwrap().get_or_zeros(x);
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += d;
                let t = Tape::new();
                let v = f(t.var(xp));
                let out = v.value().item();
                out
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
        check_grad(&x0, |x| {
            let a = x.sigmoid().exp();
            let b = x.tanh().leaky_relu(0.2);
            a.mul(b).unwrap().add(x.scale(0.5).shift(1.0)).unwrap().sum_squares()
        });
    }

    #[test]
    fn conv_concat_pool_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
        let lw = Tensor::uniform(&[4, 5], -0.5, 0.5, &mut rng);
        check_grad(&x0, |x| {
            let t = x.tape;
            let c = x.conv3d(t.constant(w.clone()), None, [1, 1, 1]).unwrap();
            let cat = Var::concat(&[c, x]).unwrap();
            let p = cat.max_pool3d([1, 2, 2]).unwrap();
            let f = p.frame_mean().unwrap().mean_rows().unwrap();
            let l = f.linear(t.constant(lw.clone()), t.constant(Tensor::zeros(&[4]))).unwrap();
            l.cross_entropy(2).unwrap()
        });
    }

    #[test]
    fn wavelets_l21_and_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        check_grad(&x0, |x| {
            let band = x.haar3().unwrap().select_channels(8, 0).unwrap().sum_squares();
            let inv = x.haar2().unwrap().scale(1.3).haar2_inv().unwrap().l21().unwrap();
            band.add(inv).unwrap()
        });
        let z0 = Tensor::from_vec(&[3], vec![0.3, -0.2, 0.9]).unwrap();
        check_grad(&z0, |z| z.cw_margin(1, 5.0).unwrap());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.var(Tensor::full(&[2], 2.0));
        let y = a.mul(b).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_vec(&[3], vec![10.0, 0.0, 0.0]).unwrap());
        let a = z.cross_entropy(0).unwrap().value().item();
        let b = z.shift(123.0).cross_entropy(0).unwrap().value().item();
        assert!((a - b).abs() < 1e-9);
        assert!((a - 9.0797e-5).abs() < 1e-8);
    }
}
