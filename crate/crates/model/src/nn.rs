//! Layers with hand-written backward-friendly forms.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv2d, ConvTranspose2d, Module, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Normalization behavior of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone.
    TrainNoUpdate,
    /// Running statistics.
    Eval,
}

/// Non-learned state such as running statistics.
#[derive(Clone)]
pub struct Buffers {
    map: VarMap,
    dtype: DType,
    device: Device,
}

impl Buffers {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Buffers {
            map: VarMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn var(&self, path: &str, len: usize, value: f64) -> Result<Var> {
        let t = (Tensor::ones(len, self.dtype, &self.device)? * value)?;
        let v = Var::from_tensor(&t)?;
        self.map.data().lock().unwrap().insert(path.to_string(), v.clone());
        Ok(v)
    }

    pub fn varmap(&self) -> &VarMap {
        &self.map
    }
}

fn join(prefix: String, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, vb: VarBuilder, bufs: &Buffers) -> Result<Self> {
        let gamma = vb.get_with_hints(channels, "gamma", candle_nn::Init::Const(1.0))?;
        let beta = vb.get_with_hints(channels, "beta", candle_nn::Init::Const(0.0))?;
        let running_mean = bufs.var(&join(vb.prefix(), "running_mean"), channels, 0.0)?;
        let running_var = bufs.var(&join(vb.prefix(), "running_var"), channels, 1.0)?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.gamma.dim(0)?;
        let (mean, var) = match mode {
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
            Mode::Train | Mode::TrainNoUpdate => {
                let mean = x.mean_keepdim(vec![0, 2, 3])?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(vec![0, 2, 3])?;
                if mode == Mode::Train {
                    let n = (x.elem_count() / c) as f64;
                    let m = self.momentum;
                    let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0).max(1.0)))?;
                    let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                (mean, var)
            }
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        Ok(x
            .broadcast_sub(&mean)?
            .broadcast_mul(&inv)?
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            gamma: vb.get_with_hints(dim, "gamma", candle_nn::Init::Const(1.0))?,
            beta: vb.get_with_hints(dim, "beta", candle_nn::Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// 3x3 stride-2 max pooling with one pixel of padding, for non-negative inputs.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let padded = x
        .pad_with_zeros(D::Minus1, 1, 1 + 2 * wo - w)?
        .pad_with_zeros(D::Minus2, 1, 1 + 2 * ho - h)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let view = padded
                .narrow(2, dy, 2 * ho)?
                .narrow(3, dx, 2 * wo)?
                .reshape((b, c, ho, 2, wo, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((b, c, ho, wo))?;
            out = Some(match out {
                None => view,
                Some(o) => o.maximum(&view)?,
            });
        }
    }
    Ok(out.expect("nine views"))
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// Convolution with optionally detached weights, so a frozen module passes
/// gradients to its input but not to its parameters.
pub fn conv2d_forward(conv: &Conv2d, x: &Tensor, frozen: bool) -> Result<Tensor> {
    if !frozen {
        return Ok(conv.forward(x)?);
    }
    let cfg = conv.config();
    let y = x.conv2d(&conv.weight().detach(), cfg.padding, cfg.stride, cfg.dilation, cfg.groups)?;
    Ok(match conv.bias() {
        None => y,
        Some(b) => y.broadcast_add(&b.detach().reshape((1, b.dim(0)?, 1, 1))?)?,
    })
}

pub fn conv2d(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = candle_nn::Conv2dConfig {
        stride,
        padding,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, k, cfg, vb)?)
}

pub fn conv2d_no_bias(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = candle_nn::Conv2dConfig {
        stride,
        padding,
        ..Default::default()
    };
    Ok(candle_nn::conv2d_no_bias(cin, cout, k, cfg, vb)?)
}

pub fn conv_t2d(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<ConvTranspose2d> {
    let cfg = candle_nn::ConvTranspose2dConfig {
        stride,
        padding,
        ..Default::default()
    };
    Ok(candle_nn::conv_transpose2d(cin, cout, k, cfg, vb)?)
}

/// Scaled dot-product attention over the last two dimensions.
/// Returns the attended values and the attention weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dq = q.dim(D::Minus1)?;
    if k.dim(D::Minus1)? != dq || k.dim(D::Minus2)? != v.dim(D::Minus2)? {
        return Err(Error::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let scores = (q.matmul(&k.t()?)? / (dq as f64).sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok((weights.matmul(v)?, weights))
}

pub struct MultiHeadAttention {
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    o: candle_nn::Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("d={d} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: candle_nn::linear(d, d, vb.pp("q"))?,
            k: candle_nn::linear(d, d, vb.pp("k"))?,
            v: candle_nn::linear(d, d, vb.pp("v"))?,
            o: candle_nn::linear(d, d, vb.pp("o"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `query`: (B, Tq, d), `memory`: (B, Tk, d). Weights are (B, heads, Tq, Tk).
    pub fn forward(&self, query: &Tensor, memory: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let (out, w) = attention(&q, &k, &v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, tq, d))?;
        Ok((self.o.forward(&out)?, w))
    }
}

/// Overwrites every randomly initialized variable from a seeded generator so
/// that model construction is reproducible. Weights get Kaiming-normal values,
/// biases uniform values scaled by the fan-in of the matching weight, and
/// embedding tables small normal values. Normalization parameters keep their
/// constant initialization.
pub fn reseed(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan_in = |shape: &[usize]| -> usize { shape.iter().skip(1).product::<usize>().max(1) };
    for name in names {
        let var = &data[name];
        let shape = var.as_tensor().dims().to_vec();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = if name.ends_with(".weight") {
            let std = (2.0 / fan_in(&shape) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        } else if name.ends_with(".bias") {
            let weight = name.trim_end_matches(".bias").to_string() + ".weight";
            let fan = data
                .get(&weight)
                .map(|w| fan_in(w.as_tensor().dims()))
                .unwrap_or(n);
            let bound = 1.0 / (fan as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        } else if name.ends_with(".embedding") {
            let dist = Normal::new(0.0, 0.02).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        } else {
            continue;
        };
        let t = Tensor::from_vec(values, shape, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}
