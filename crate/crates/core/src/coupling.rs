//! Spatio-temporal affine coupling blocks and the invertible network built
//! from them.
//!
//! Both streams are transformed to wavelet coefficients, pass through `M`
//! two-stream coupling blocks and are transformed back:
//!
//! ```text
//! w_c' = w_c * exp(alpha(psi(w_t))) + phi(w_t)
//! w_t' = w_t * exp(alpha(rho(w_c'))) + eta(w_c')
//! ```
//!
//! `psi`, `phi`, `rho` and `eta` are densely connected 3D-conv stacks whose
//! last layer starts at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv3d, Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};
use crate::wavelet3d as wt;

/// How the bounded log-scale is derived from a subnet output `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `scale * sigmoid(u)`, range `(0, scale)`.
    Plain,
    /// `scale * sigmoid(u) - scale / 2`, range `(-scale/2, scale/2)`; a zero
    /// subnet output gives an identity block.
    Centered,
}

/// Which transform and kernel the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dims {
    /// 3D Haar transform, `(3, 3, 3)` kernels with `(1, 1, 1)` padding.
    SpatioTemporal,
    /// Framewise 2D Haar transform, `(1, 3, 3)` kernels with `(0, 1, 1)` padding.
    Spatial,
}

impl Dims {
    pub fn kernel(self) -> [usize; 3] {
        match self {
            Dims::SpatioTemporal => [3, 3, 3],
            Dims::Spatial => [1, 3, 3],
        }
    }

    pub fn padding(self) -> [usize; 3] {
        match self {
            Dims::SpatioTemporal => [1, 1, 1],
            Dims::Spatial => [0, 1, 1],
        }
    }

    /// Coefficient channels per video channel.
    pub fn bands(self) -> usize {
        match self {
            Dims::SpatioTemporal => 8,
            Dims::Spatial => 4,
        }
    }

    fn analysis<'t, T: Float>(self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Dims::SpatioTemporal => x.haar3(),
            Dims::Spatial => x.haar2(),
        }
    }

    fn synthesis<'t, T: Float>(self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Dims::SpatioTemporal => x.haar3_inv(),
            Dims::Spatial => x.haar2_inv(),
        }
    }

    pub fn analyze<T: Float>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Dims::SpatioTemporal => wt::haar3_forward(x),
            Dims::Spatial => wt::haar2_forward(x),
        }
    }

    pub fn synthesize<T: Float>(self, c: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Dims::SpatioTemporal => wt::haar3_inverse(c),
            Dims::Spatial => wt::haar2_inverse(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StinConfig {
    pub num_blocks: usize,
    pub subnet_hidden_channels: usize,
    pub subnet_dense_layers: usize,
    pub alpha_scale: f64,
    pub alpha_mode: AlphaMode,
    pub dims: Dims,
    pub init_seed: u64,
}

impl Default for StinConfig {
    fn default() -> Self {
        StinConfig {
            num_blocks: 4,
            subnet_hidden_channels: 8,
            subnet_dense_layers: 5,
            alpha_scale: 2.0,
            alpha_mode: AlphaMode::Centered,
            dims: Dims::SpatioTemporal,
            init_seed: 0,
        }
    }
}

impl StinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("stin.num_blocks must be >= 1".into()));
        }
        if self.subnet_dense_layers == 0 || self.subnet_hidden_channels == 0 {
            return Err(Error::Config("subnet layers and width must be >= 1".into()));
        }
        if !(self.alpha_scale > 0.0 && self.alpha_scale.is_finite()) {
            return Err(Error::Config(format!("stin.alpha_scale must be positive, got {}", self.alpha_scale)));
        }
        Ok(())
    }

    pub fn leaky_slope(&self) -> f64 {
        0.2
    }
}

/// `scale * sigmoid(u)`.
pub fn alpha(u: f64, scale: f64) -> f64 {
    scale / (1.0 + (-u).exp())
}

/// Elementwise [`alpha`] over a tensor.
pub fn alpha_tensor<T: Float>(u: &Tensor<T>, scale: T) -> Tensor<T> {
    u.map(|x| scale / (T::one() + (-x).exp()))
}

fn log_scale<'t, T: Float>(u: Var<'t, T>, cfg: &StinConfig) -> Var<'t, T> {
    let s = T::lit(cfg.alpha_scale);
    let a = u.sigmoid().scale(s);
    match cfg.alpha_mode {
        AlphaMode::Plain => a,
        AlphaMode::Centered => a.shift(T::lit(-cfg.alpha_scale / 2.0)),
    }
}

/// Densely connected conv stack: every layer sees the input and all
/// previous layer outputs; the final layer maps back to the input width.
#[derive(Clone, Debug)]
pub struct DenseSubnet {
    pub layers: Vec<Conv3d>,
}

impl DenseSubnet {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &StinConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (g, n) = (cfg.subnet_hidden_channels, cfg.subnet_dense_layers);
        let (kernel, pad) = (cfg.dims.kernel(), cfg.dims.padding());
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let cin = channels + i * g;
            let last = i + 1 == n;
            let (cout, init) = if last {
                (channels, Init::Zeros)
            } else {
                (g, Init::HeUniform { gain: 1.0 / 6f64.sqrt() })
            };
            layers.push(Conv3d::new(store, &format!("{name}.conv{}", i + 1), cin, cout, kernel, pad, init, rng));
        }
        DenseSubnet { layers }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>, slope: T) -> Result<Var<'t, T>> {
        let mut feats = vec![x];
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if feats.len() == 1 { x } else { Var::concat(&feats)? };
            let y = layer.forward(p, input)?;
            if i + 1 == n {
                return Ok(y);
            }
            feats.push(y.leaky_relu(slope));
        }
        unreachable!("subnet has at least one layer")
    }
}

/// The four subnets of one coupling block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub psi: DenseSubnet,
    pub phi: DenseSubnet,
    pub rho: DenseSubnet,
    pub eta: DenseSubnet,
}

pub const SUBNET_NAMES: [&str; 4] = ["psi", "phi", "rho", "eta"];

impl BlockParams {
    pub fn subnets(&self) -> [&DenseSubnet; 4] {
        [&self.psi, &self.phi, &self.rho, &self.eta]
    }
}

/// The two coefficient streams between blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffPair<T> {
    pub w_c: Tensor<T>,
    pub w_t: Tensor<T>,
}

/// The invertible two-stream network and its parameters.
#[derive(Clone, Debug)]
pub struct Stin<T> {
    cfg: StinConfig,
    video_channels: usize,
    pub params: ParamStore<T>,
    pub blocks: Vec<BlockParams>,
}

impl<T: Float> Stin<T> {
    pub fn new(cfg: StinConfig, video_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ParamStore::new();
        let width = video_channels * cfg.dims.bands();
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let mut sub = |n: &str| DenseSubnet::new(&mut params, &format!("block{b}.{n}"), width, &cfg, &mut rng);
                BlockParams { psi: sub("psi"), phi: sub("phi"), rho: sub("rho"), eta: sub("eta") }
            })
            .collect();
        Ok(Stin { cfg, video_channels, params, blocks })
    }

    pub fn config(&self) -> &StinConfig {
        &self.cfg
    }

    pub fn video_channels(&self) -> usize {
        self.video_channels
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn slope(&self) -> T {
        T::lit(self.cfg.leaky_slope())
    }

    fn check_finite(v: &Var<'_, T>, stage: impl FnOnce() -> String) -> Result<()> {
        if v.value().all_finite() {
            Ok(())
        } else {
            Err(Error::NumericOverflow { stage: stage() })
        }
    }

    /// One block forward on the tape.
    pub fn block_forward<'t>(
        &self,
        p: &Bound<'t, T>,
        index: usize,
        w_c: Var<'t, T>,
        w_t: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let b = &self.blocks[index];
        let slope = self.slope();
        let s1 = log_scale(b.psi.forward(p, w_t, slope)?, &self.cfg).exp();
        let t1 = b.phi.forward(p, w_t, slope)?;
        let w_c = w_c.mul(s1)?.add(t1)?;
        Self::check_finite(&w_c, || format!("coupling block {index} (clean stream)"))?;
        let s2 = log_scale(b.rho.forward(p, w_c, slope)?, &self.cfg).exp();
        let t2 = b.eta.forward(p, w_c, slope)?;
        let w_t = w_t.mul(s2)?.add(t2)?;
        Self::check_finite(&w_t, || format!("coupling block {index} (target stream)"))?;
        Ok((w_c, w_t))
    }

    /// Full network on the tape: transform, `M` blocks, inverse transform.
    pub fn forward_tape<'t>(
        &self,
        p: &Bound<'t, T>,
        x_c: Var<'t, T>,
        x_t: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_inputs(&x_c.value(), &x_t.value())?;
        let mut w_c = self.cfg.dims.analysis(x_c)?;
        let mut w_t = self.cfg.dims.analysis(x_t)?;
        for i in 0..self.blocks.len() {
            (w_c, w_t) = self.block_forward(p, i, w_c, w_t)?;
        }
        Ok((self.cfg.dims.synthesis(w_c)?, self.cfg.dims.synthesis(w_t)?))
    }

    fn check_inputs(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        a.same_shape(b, "stin inputs")?;
        let [c, t, ..] = a.dims4()?;
        if c != self.video_channels {
            return Err(Error::shape(format!("network built for {} channels, got {c}", self.video_channels)));
        }
        if self.cfg.dims == Dims::SpatioTemporal {
            wt::check_video_shape(a)?;
        } else if t == 0 {
            return Err(Error::shape("video has no frames"));
        }
        Ok(())
    }

    fn eval_subnet(&self, net: &DenseSubnet, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let y = net.forward(&p, tape.constant(x.clone()), self.slope())?;
        let v = (*y.value()).clone();
        Ok(v)
    }

    fn scale_of(&self, net: &DenseSubnet, x: &Tensor<T>) -> Result<Tensor<T>> {
        let u = self.eval_subnet(net, x)?;
        let s = T::lit(self.cfg.alpha_scale);
        let off = match self.cfg.alpha_mode {
            AlphaMode::Plain => T::zero(),
            AlphaMode::Centered => s / (T::one() + T::one()),
        };
        Ok(alpha_tensor(&u, s).map(|a| (a - off).exp()))
    }

    /// One block forward on plain coefficient tensors.
    pub fn acb_forward(&self, index: usize, pair: &CoeffPair<T>) -> Result<CoeffPair<T>> {
        pair.w_c.same_shape(&pair.w_t, "coefficient pair")?;
        let b = &self.blocks[index];
        let w_c = pair.w_c.zip_map(&self.scale_of(&b.psi, &pair.w_t)?, |a, s| a * s).add(&self.eval_subnet(&b.phi, &pair.w_t)?);
        overflow_guard(&w_c, index)?;
        let w_t = pair.w_t.zip_map(&self.scale_of(&b.rho, &w_c)?, |a, s| a * s).add(&self.eval_subnet(&b.eta, &w_c)?);
        overflow_guard(&w_t, index)?;
        Ok(CoeffPair { w_c, w_t })
    }

    /// Algebraic inverse of [`Stin::acb_forward`].
    pub fn acb_inverse(&self, index: usize, pair: &CoeffPair<T>) -> Result<CoeffPair<T>> {
        pair.w_c.same_shape(&pair.w_t, "coefficient pair")?;
        let b = &self.blocks[index];
        let w_t = pair
            .w_t
            .sub(&self.eval_subnet(&b.eta, &pair.w_c)?)
            .zip_map(&self.scale_of(&b.rho, &pair.w_c)?, |a, s| a / s);
        overflow_guard(&w_t, index)?;
        let w_c = pair
            .w_c
            .sub(&self.eval_subnet(&b.phi, &w_t)?)
            .zip_map(&self.scale_of(&b.psi, &w_t)?, |a, s| a / s);
        overflow_guard(&w_c, index)?;
        Ok(CoeffPair { w_c, w_t })
    }

    /// `(x_c, x_t) -> (x_a_raw, x_r)`.
    pub fn forward(&self, x_c: &Tensor<T>, x_t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_inputs(x_c, x_t)?;
        let d = self.cfg.dims;
        let mut pair = CoeffPair { w_c: d.analyze(x_c)?, w_t: d.analyze(x_t)? };
        for i in 0..self.blocks.len() {
            pair = self.acb_forward(i, &pair)?;
        }
        Ok((d.synthesize(&pair.w_c)?, d.synthesize(&pair.w_t)?))
    }

    /// `(x_a_raw, x_r) -> (x_c, x_t)`, blocks undone in reverse order.
    pub fn inverse(&self, x_a: &Tensor<T>, x_r: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_inputs(x_a, x_r)?;
        let d = self.cfg.dims;
        let mut pair = CoeffPair { w_c: d.analyze(x_a)?, w_t: d.analyze(x_r)? };
        for i in (0..self.blocks.len()).rev() {
            pair = self.acb_inverse(i, &pair)?;
        }
        Ok((d.synthesize(&pair.w_c)?, d.synthesize(&pair.w_t)?))
    }

    /// Parameter tensors of one subnet, `(name, id)` pairs in layer order.
    pub fn subnet_param_names(&self, block: usize, subnet: usize) -> Vec<String> {
        let net = self.blocks[block].subnets()[subnet];
        net.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .map(|id| self.params.names()[id.0].clone())
            .collect()
    }
}

fn overflow_guard<T: Float>(t: &Tensor<T>, index: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { stage: format!("coupling block {index}") })
    }
}
