//! RoI inpainting: patch generator, discriminator, AU classifier and losses.

use candle_core::Tensor;
use candle_nn::{Conv2d, ConvTranspose2d, Module, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::{conv2d, conv2d_forward, conv_t2d, leaky_relu};

/// Clamp applied before every logarithm.
pub const EPS: f64 = 1e-7;

/// Seed kernel size and number of stride-2 stages for patch side `s`.
pub fn patch_layout(s: usize) -> (usize, usize) {
    let m = (s.trailing_zeros() as usize).min(4);
    (s >> m, m)
}

/// Five transposed convolutions from a d-vector to an s x s x 3 patch in [0, 1].
pub struct Generator {
    layers: Vec<ConvTranspose2d>,
    d: usize,
    s: usize,
}

impl Generator {
    pub fn new(d: usize, widths: [usize; 4], s: usize, vb: VarBuilder) -> Result<Self> {
        let (k0, m) = patch_layout(s);
        let mut layers = vec![conv_t2d(d, widths[0], k0, 1, 0, vb.pp("layer0"))?];
        let chans = [widths[0], widths[1], widths[2], widths[3], 3];
        for i in 0..4 {
            let vbi = vb.pp(format!("layer{}", i + 1));
            layers.push(if i < m {
                conv_t2d(chans[i], chans[i + 1], 4, 2, 1, vbi)?
            } else {
                conv_t2d(chans[i], chans[i + 1], 3, 1, 1, vbi)?
            });
        }
        Ok(Generator { layers, d, s })
    }

    pub fn patch_size(&self) -> usize {
        self.s
    }

    /// (n, d) -> (n, 3, s, s)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.d {
            return Err(Error::Shape(format!("generator expects width {}, got {d}", self.d)));
        }
        let mut y = x.reshape((n, d, 1, 1))?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(&y)?;
            y = if i == last {
                candle_nn::ops::sigmoid(&y)?
            } else {
                y.relu()?
            };
        }
        Ok(y)
    }
}

/// Five convolutions from an s x s x 3 patch to one logit; used for both the
/// real/fake discriminator and the AU semantic classifier.
pub struct Critic {
    layers: Vec<Conv2d>,
    s: usize,
}

impl Critic {
    pub fn new(widths: [usize; 4], s: usize, vb: VarBuilder) -> Result<Self> {
        let (k0, m) = patch_layout(s);
        let chans = [3, widths[0], widths[1], widths[2], widths[3]];
        let mut layers = Vec::with_capacity(5);
        for i in 0..4 {
            let vbi = vb.pp(format!("layer{i}"));
            layers.push(if i < 4 - m {
                conv2d(chans[i], chans[i + 1], 3, 1, 1, vbi)?
            } else {
                conv2d(chans[i], chans[i + 1], 4, 2, 1, vbi)?
            });
        }
        layers.push(conv2d(widths[3], 1, k0, 1, 0, vb.pp("layer4"))?);
        Ok(Critic { layers, s })
    }

    /// (n, 3, s, s) -> (n,) logits. With `frozen` the parameters receive no gradient.
    pub fn logits(&self, patches: &Tensor, frozen: bool) -> Result<Tensor> {
        let dims = patches.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.s || dims[3] != self.s {
            return Err(Error::Shape(format!(
                "critic expects (n, 3, {s}, {s}), got {dims:?}",
                s = self.s
            )));
        }
        let mut y = patches.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            y = conv2d_forward(layer, &y, frozen)?;
            if i != last {
                y = leaky_relu(&y)?;
            }
        }
        Ok(y.flatten_all()?)
    }

    pub fn probs(&self, patches: &Tensor, frozen: bool) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(patches, frozen)?)?)
    }
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(EPS, 1.0 - EPS)?.log()?)
}

/// `E[log D(p)] + E[log(1 - D(G(x)))]`, maximized by the discriminator.
pub fn adversarial_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = clamped_log(d_real)?.mean_all()?;
    let fake = clamped_log(&d_fake.affine(-1.0, 1.0)?)?.mean_all()?;
    Ok((real + fake)?)
}

/// Non-saturating generator term `-E[log D(G(x))]`.
pub fn generator_adversarial_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok(clamped_log(d_fake)?.mean_all()?.neg()?)
}

/// L1 distance summed over each patch and averaged over the batch.
pub fn reconstruction_loss(reals: &Tensor, fakes: &Tensor) -> Result<Tensor> {
    if reals.dims() != fakes.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", reals.dims(), fakes.dims())));
    }
    let n = reals.dim(0)?.max(1);
    Ok(((reals - fakes)?.abs()?.sum_all()? / n as f64)?)
}

/// Elementwise binary cross-entropy with clamped logarithms.
pub fn binary_cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = targets.mul(&clamped_log(probs)?)?;
    let neg = targets.affine(-1.0, 1.0)?.mul(&clamped_log(&probs.affine(-1.0, 1.0)?)?)?;
    Ok((pos + neg)?.neg()?)
}

/// Mean cross-entropy of classifier outputs against binary targets.
pub fn semantic_loss(c_probs: &Tensor, y_hat: &[u8]) -> Result<Tensor> {
    if y_hat.len() != c_probs.elem_count() {
        return Err(Error::Shape(format!(
            "{} targets for {} patches",
            y_hat.len(),
            c_probs.elem_count()
        )));
    }
    if let Some(v) = y_hat.iter().find(|&&v| v > 1) {
        return Err(Error::Label(format!("semantic target {v} is not binary")));
    }
    let t = Tensor::from_vec(y_hat.iter().map(|&v| v as f64).collect::<Vec<_>>(), y_hat.len(), c_probs.device())?
        .to_dtype(c_probs.dtype())?;
    Ok(binary_cross_entropy(&c_probs.flatten_all()?, &t)?.mean_all()?)
}

/// Binarized backbone output used as the semantic target of unlabeled patches.
pub fn pseudo_label(prob: f64, threshold: f64) -> u8 {
    u8::from(prob >= threshold)
}

/// Semantic target for a masked AU: the ground truth when available.
pub fn semantic_target(labels: Option<&[u8]>, au: usize, intact_prob: impl FnOnce() -> f64, threshold: f64) -> u8 {
    match labels {
        Some(l) => l[au],
        None => pseudo_label(intact_prob(), threshold),
    }
}

/// `λ1·l_adv_g + (1 − λ1)·l_rec + λ2·l_c_g`
pub fn generator_loss(l_adv_g: &Tensor, l_rec: &Tensor, l_c_g: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    Ok(((l_adv_g * lambda1)? + (l_rec * (1.0 - lambda1))? + (l_c_g * lambda2)?)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoiiLosses {
    pub l_adv: f64,
    pub l_adv_g: f64,
    pub l_rec: f64,
    pub l_c: f64,
    pub l_c_g: f64,
    pub l_d: f64,
    pub l_g: f64,
}

/// Discriminator-phase and generator-phase graphs for one batch of patch pairs.
pub struct RoiiGraphs {
    /// `−l_adv + l_c`, touching only D and C.
    pub disc_objective: Tensor,
    pub l_adv: Tensor,
    pub l_c: Tensor,
}

/// D/C objective on real patches and detached fakes.
pub fn discriminator_phase(d: &Critic, c: &Critic, reals: &Tensor, fakes: &Tensor, y_hat: &[u8]) -> Result<RoiiGraphs> {
    let fakes = fakes.detach();
    let l_adv = adversarial_loss(&d.probs(reals, false)?, &d.probs(&fakes, false)?)?;
    let l_c = semantic_loss(&c.probs(reals, false)?, y_hat)?;
    Ok(RoiiGraphs {
        disc_objective: (l_adv.neg()? + &l_c)?,
        l_adv,
        l_c,
    })
}

pub struct GeneratorTerms {
    pub l_adv_g: Tensor,
    pub l_rec: Tensor,
    pub l_c_g: Tensor,
    pub l_g: Tensor,
}

/// Generator objective through frozen D and C.
pub fn generator_phase(
    d: &Critic,
    c: &Critic,
    reals: &Tensor,
    fakes: &Tensor,
    y_hat: &[u8],
    lambda1: f64,
    lambda2: f64,
) -> Result<GeneratorTerms> {
    let l_adv_g = generator_adversarial_loss(&d.probs(fakes, true)?)?;
    let l_rec = reconstruction_loss(reals, fakes)?;
    let l_c_g = semantic_loss(&c.probs(fakes, true)?, y_hat)?;
    let l_g = generator_loss(&l_adv_g, &l_rec, &l_c_g, lambda1, lambda2)?;
    Ok(GeneratorTerms {
        l_adv_g,
        l_rec,
        l_c_g,
        l_g,
    })
}
