//! Single-image optical flow head.

use candle_core::Tensor;
use candle_nn::{ConvTranspose2d, Module, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::conv_t2d;

pub struct FlowHead {
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

impl FlowHead {
    pub fn new(cin: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(FlowHead {
            up1: conv_t2d(cin, hidden, 4, 2, 1, vb.pp("up1"))?,
            up2: conv_t2d(hidden, 2, 4, 2, 1, vb.pp("up2"))?,
        })
    }

    /// (B, C, h, w) trunk output -> (B, 2, 4h, 4w) signed displacement.
    pub fn forward(&self, global_maps: &Tensor) -> Result<Tensor> {
        Ok(self.up2.forward(&self.up1.forward(global_maps)?.relu()?)?)
    }
}

/// L1 distance summed over each map and averaged over samples with a target.
/// Samples whose `valid` flag is false are left out of the graph entirely.
pub fn flow_loss(pred: &Tensor, target: &Tensor, valid: &[bool]) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "flow prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    if valid.len() != pred.dim(0)? {
        return Err(Error::Shape(format!("{} validity flags for batch {}", valid.len(), pred.dim(0)?)));
    }
    let keep: Vec<u32> = valid
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i as u32))
        .collect();
    if keep.is_empty() {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    let idx = Tensor::new(keep.as_slice(), pred.device())?;
    let diff = (pred.index_select(&idx, 0)? - target.index_select(&idx, 0)?)?;
    Ok((diff.abs()?.sum_all()? / keep.len() as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use candle_nn::VarMap;

    #[test]
    fn output_resolution_and_independence() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let head = FlowHead::new(8, 4, vb).unwrap();
        crate::nn::reseed(&vm, 0).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (3, 8, 6, 6), &Device::Cpu).unwrap();
        let y = head.forward(&x).unwrap();
        assert_eq!(y.dims(), &[3, 2, 24, 24]);
        let single = head.forward(&x.narrow(0, 1, 1).unwrap()).unwrap();
        let d = (y.narrow(0, 1, 1).unwrap() - single).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_arithmetic() {
        let dev = Device::Cpu;
        let ones = Tensor::ones((2, 2, 24, 24), DType::F64, &dev).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let l = flow_loss(&ones, &zeros, &[true, true]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1152.0).abs() < 1e-9);
        assert_eq!(flow_loss(&ones, &ones, &[true, true]).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(flow_loss(&ones, &zeros, &[false, false]).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn invalid_samples_get_no_gradient() {
        let dev = Device::Cpu;
        let p = Var::from_tensor(&Tensor::randn(0.0f64, 1.0, (3, 2, 4, 4), &dev).unwrap()).unwrap();
        let t = Tensor::randn(0.0f64, 1.0, (3, 2, 4, 4), &dev).unwrap();
        let g = flow_loss(p.as_tensor(), &t, &[true, false, true]).unwrap().backward().unwrap();
        let g = g.get(p.as_tensor()).unwrap();
        assert_eq!(g.get(1).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!(g.get(0).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0);
    }
}
