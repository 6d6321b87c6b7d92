//! Residual trunk, top-down fusion, RoI cropping and prediction heads.

use candle_core::{Device, Tensor, D};
use candle_nn::{Conv2d, Linear, Module, VarBuilder};
use rtatl_core::geometry::RoiBox;

use crate::error::{Error, Result};
use crate::nn::{conv2d, conv2d_no_bias, max_pool_3x3_s2, BatchNorm2d, Buffers, Mode};

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, vb: VarBuilder, bufs: &Buffers) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some((
                conv2d_no_bias(cin, cout, 1, stride, 0, vb.pp("down.conv"))?,
                BatchNorm2d::new(cout, vb.pp("down.bn"), bufs)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: conv2d_no_bias(cin, cout, 3, stride, 1, vb.pp("conv1"))?,
            bn1: BatchNorm2d::new(cout, vb.pp("bn1"), bufs)?,
            conv2: conv2d_no_bias(cout, cout, 3, 1, 1, vb.pp("conv2"))?,
            bn2: BatchNorm2d::new(cout, vb.pp("bn2"), bufs)?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// 18-layer residual trunk returning the outputs of its four stages.
pub struct Trunk {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<[BasicBlock; 2]>,
    widths: [usize; 4],
}

impl Trunk {
    pub fn new(widths: [usize; 4], vb: VarBuilder, bufs: &Buffers) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let vbs = vb.pp(format!("layer{}", i + 1));
            stages.push([
                BasicBlock::new(cin, w, stride, vbs.pp(0), bufs)?,
                BasicBlock::new(w, w, 1, vbs.pp(1), bufs)?,
            ]);
            cin = w;
        }
        Ok(Trunk {
            conv1: conv2d_no_bias(3, widths[0], 7, 2, 3, vb.pp("conv1"))?,
            bn1: BatchNorm2d::new(widths[0], vb.pp("bn1"), bufs)?,
            stages,
            widths,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    /// `images`: (B, 3, H, W) with H and W multiples of 32.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<[Tensor; 4]> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] % 32 != 0 || dims[3] % 32 != 0 || dims[2] == 0 {
            return Err(Error::Shape(format!(
                "trunk expects (B, 3, H, W) with H, W multiples of 32, got {dims:?}"
            )));
        }
        let mut x = self.bn1.forward(&self.conv1.forward(images)?, mode)?.relu()?;
        x = max_pool_3x3_s2(&x)?;
        let mut outs = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                x = b.forward(&x, mode)?;
            }
            outs.push(x.clone());
        }
        Ok(outs.try_into().expect("four stages"))
    }
}

/// Top-down pathway: project each stage to `channels`, upsample and add.
pub struct Fusion {
    laterals: Vec<Conv2d>,
    in_channels: [usize; 4],
    channels: usize,
}

impl Fusion {
    pub fn new(in_channels: [usize; 4], channels: usize, vb: VarBuilder) -> Result<Self> {
        let laterals = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| conv2d_no_bias(c, channels, 1, 1, 0, vb.pp(format!("lateral{}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fusion {
            laterals,
            in_channels,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, stages: &[Tensor; 4]) -> Result<Tensor> {
        for (s, &c) in stages.iter().zip(&self.in_channels) {
            if s.dim(1)? != c {
                return Err(Error::Shape(format!(
                    "fusion expects {c} channels, stage has {}",
                    s.dim(1)?
                )));
            }
        }
        let mut top = self.laterals[3].forward(&stages[3])?;
        for i in (0..3).rev() {
            let (_, _, h, w) = stages[i].dims4()?;
            top = (self.laterals[i].forward(&stages[i])? + top.upsample_nearest2d(h, w)?)?;
        }
        Ok(top)
    }
}

/// Bilinear crop of every box into a `cells`x`cells` grid.
///
/// `maps`: (B, C, Hf, Wf) covering an image of `image_size`; `boxes[b]` holds
/// the left/right boxes of each AU for image `b`. Returns (B, 2N, C, cells, cells)
/// with tokens ordered left0, right0, left1, ...
pub fn crop_roi_features(
    maps: &Tensor,
    boxes: &[Vec<[RoiBox; 2]>],
    image_size: (usize, usize),
    cells: usize,
) -> Result<Tensor> {
    let (b, c, hf, wf) = maps.dims4()?;
    if boxes.len() != b {
        return Err(Error::Shape(format!("{} box sets for batch of {b}", boxes.len())));
    }
    let n = boxes.first().map_or(0, Vec::len);
    if boxes.iter().any(|v| v.len() != n) || n == 0 {
        return Err(Error::Shape("every image needs the same nonzero number of AU boxes".into()));
    }
    let sx = image_size.0 as f64 / wf as f64;
    let sy = image_size.1 as f64 / hf as f64;
    let m = b * 2 * n * cells * cells;
    let mut idx = Vec::with_capacity(4 * m);
    let mut wts = Vec::with_capacity(4 * m);
    let axis = |f: f64, len: usize| -> (usize, usize, f64) {
        let f = f.clamp(0.0, (len - 1) as f64);
        let i0 = (f.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, f - i0 as f64)
    };
    for (bi, set) in boxes.iter().enumerate() {
        for pair in set {
            for bx in pair {
                let step = bx.size as f64 / cells as f64;
                for cy in 0..cells {
                    let y = bx.y0 as f64 + (cy as f64 + 0.5) * step;
                    let (y0, y1, ay) = axis(y / sy - 0.5, hf);
                    for cx in 0..cells {
                        let x = bx.x0 as f64 + (cx as f64 + 0.5) * step;
                        let (x0, x1, ax) = axis(x / sx - 0.5, wf);
                        let base = bi * hf * wf;
                        for (yy, xx, w) in [
                            (y0, x0, (1.0 - ax) * (1.0 - ay)),
                            (y0, x1, ax * (1.0 - ay)),
                            (y1, x0, (1.0 - ax) * ay),
                            (y1, x1, ax * ay),
                        ] {
                            idx.push((base + yy * wf + xx) as u32);
                            wts.push(w);
                        }
                    }
                }
            }
        }
    }
    let dev = maps.device();
    let flat = maps.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * hf * wf, c))?;
    let gathered = flat
        .index_select(&Tensor::from_vec(idx, 4 * m, dev)?, 0)?
        .reshape((m, 4, c))?;
    let w = Tensor::from_vec(wts, (m, 4, 1), dev)?.to_dtype(maps.dtype())?;
    let cropped = gathered.broadcast_mul(&w)?.sum(1)?;
    Ok(cropped
        .reshape((b, 2 * n, cells, cells, c))?
        .permute((0, 1, 4, 2, 3))?
        .contiguous()?)
}

/// Two-convolution stack of one AU followed by average pooling.
pub struct RoiBranch {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl RoiBranch {
    pub fn new(cin: usize, hidden: usize, d: usize, vb: VarBuilder) -> Result<Self> {
        Ok(RoiBranch {
            conv1: conv2d(cin, hidden, 3, 1, 1, vb.pp("conv1"))?,
            conv2: conv2d(hidden, d, 3, 1, 1, vb.pp("conv2"))?,
        })
    }

    /// (n, C, p, p) -> (n, d)
    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(patches)?.relu()?;
        let y = self.conv2.forward(&y)?.relu()?;
        Ok(y.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

/// Runs each AU's branch on its two tokens. `patches`: (B, 2N, C, p, p) -> (B, 2N, d).
pub fn roi_branches_forward(branches: &[RoiBranch], patches: &Tensor) -> Result<Tensor> {
    let (b, t, c, p, _) = patches.dims5()?;
    if t != 2 * branches.len() {
        return Err(Error::Shape(format!("{t} RoI tokens for {} branches", branches.len())));
    }
    let per_au = branches
        .iter()
        .enumerate()
        .map(|(i, br)| {
            let x = patches.narrow(1, 2 * i, 2)?.reshape((b * 2, c, p, p))?;
            let y = br.forward(&x)?;
            let d = y.dim(1)?;
            Ok(y.reshape((b, 2, d))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&per_au, 1)?)
}

pub fn roi_branch_forward(branches: &[RoiBranch], patch: &Tensor, au_index: usize) -> Result<Tensor> {
    let br = branches.get(au_index).ok_or(Error::Index {
        index: au_index,
        len: branches.len(),
    })?;
    br.forward(patch)
}

/// One linear classifier per AU applied to that AU's attended feature.
pub struct AuHeads {
    weight: Tensor,
    bias: Tensor,
}

impl AuHeads {
    pub fn new(n: usize, d: usize, vb: VarBuilder) -> Result<Self> {
        let init = candle_nn::Init::Const(0.0);
        Ok(AuHeads {
            weight: vb.get_with_hints((n, d), "weight", init)?,
            bias: vb.get_with_hints(n, "bias", init)?,
        })
    }

    /// (B, N, d) -> (B, N) logits
    pub fn forward(&self, per_au: &Tensor) -> Result<Tensor> {
        Ok(per_au
            .broadcast_mul(&self.weight.unsqueeze(0)?)?
            .sum(2)?
            .broadcast_add(&self.bias.unsqueeze(0)?)?)
    }
}

pub fn global_pool(maps: &Tensor) -> Result<Tensor> {
    Ok(maps.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Per-AU probabilities of both branches and their elementwise max.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs_global: Tensor,
    pub probs_roi: Tensor,
    pub probs_fused: Tensor,
}

impl Prediction {
    pub fn from_logits(global: &Tensor, roi: &Tensor) -> Result<Self> {
        let probs_global = candle_nn::ops::sigmoid(global)?;
        let probs_roi = candle_nn::ops::sigmoid(roi)?;
        let probs_fused = probs_global.maximum(&probs_roi)?;
        Ok(Prediction {
            probs_global,
            probs_roi,
            probs_fused,
        })
    }

    pub fn fused_rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.probs_fused.to_dtype(candle_core::DType::F32)?.to_vec2()?)
    }
}

pub fn predict(global_head: &Linear, roi_head: &AuHeads, global_vec: &Tensor, per_au: &Tensor) -> Result<Prediction> {
    Prediction::from_logits(&global_head.forward(global_vec)?, &roi_head.forward(per_au)?)
}

/// Feature map whose value at cell (x, y) of channel c is a linear function,
/// used by tests and diagnostics.
pub fn linear_ramp(c: usize, h: usize, w: usize, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..c * h * w)
        .map(|i| {
            let (ch, rem) = (i / (h * w), i % (h * w));
            let (y, x) = (rem / w, rem % w);
            x as f64 + 100.0 * y as f64 + 1000.0 * ch as f64
        })
        .collect();
    Ok(Tensor::from_vec(v, (1, c, h, w), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use candle_nn::VarMap;

    fn vb(vm: &VarMap) -> VarBuilder<'static> {
        VarBuilder::from_varmap(vm, DType::F64, &Device::Cpu)
    }

    #[test]
    fn trunk_stage_sizes() {
        let vm = VarMap::new();
        let bufs = Buffers::new(DType::F64, &Device::Cpu);
        let trunk = Trunk::new([4, 4, 8, 8], vb(&vm).pp("t"), &bufs).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F64, &Device::Cpu).unwrap();
        let out = trunk.forward(&x, Mode::Train).unwrap();
        let sizes: Vec<_> = out.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(sizes, vec![vec![2, 4, 16, 16], vec![2, 4, 8, 8], vec![2, 8, 4, 4], vec![2, 8, 2, 2]]);
        for t in &out {
            assert!(t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
        }
        let bad = Tensor::zeros((1, 3, 50, 64), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(trunk.forward(&bad, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_with_zero_lower_maps_is_upsampled_top() {
        let vm = VarMap::new();
        let fusion = Fusion::new([2, 3, 4, 5], 6, vb(&vm)).unwrap();
        let dev = Device::Cpu;
        let top = Tensor::randn(0.0f64, 1.0, (1, 5, 2, 2), &dev).unwrap();
        let stages = [
            Tensor::zeros((1, 2, 16, 16), DType::F64, &dev).unwrap(),
            Tensor::zeros((1, 3, 8, 8), DType::F64, &dev).unwrap(),
            Tensor::zeros((1, 4, 4, 4), DType::F64, &dev).unwrap(),
            top.clone(),
        ];
        let fused = fusion.forward(&stages).unwrap();
        assert_eq!(fused.dims(), &[1, 6, 16, 16]);
        let expect = fusion.laterals[3].forward(&top).unwrap().upsample_nearest2d(16, 16).unwrap();
        let diff = (fused - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let wrong = [stages[1].clone(), stages[1].clone(), stages[2].clone(), stages[3].clone()];
        assert!(fusion.forward(&wrong).is_err());
    }

    #[test]
    fn crop_of_linear_map_is_exact() {
        let dev = Device::Cpu;
        let maps = linear_ramp(2, 12, 12, &dev).unwrap();
        // stride 4 on a 48 px image; box size 8 px with 2 cells puts cell
        // centers exactly on feature centers
        let bx = RoiBox { x0: 20, y0: 16, size: 8 };
        let out = crop_roi_features(&maps, &[vec![[bx, bx]]], (48, 48), 2).unwrap();
        assert_eq!(out.dims(), &[1, 2, 2, 2, 2]);
        let v: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        let expect = |ch: usize, cy: usize, cx: usize| (5 + cx) as f64 + 100.0 * (4 + cy) as f64 + 1000.0 * ch as f64;
        for t in 0..2 {
            for ch in 0..2 {
                for cy in 0..2 {
                    for cx in 0..2 {
                        assert!((v[((t * 2 + ch) * 2 + cy) * 2 + cx] - expect(ch, cy, cx)).abs() < 1e-9);
                    }
                }
            }
        }
        // sub-cell positions interpolate linearly
        let half = RoiBox { x0: 22, y0: 16, size: 8 };
        let out = crop_roi_features(&maps, &[vec![[half, half]]], (48, 48), 2).unwrap();
        let v: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        assert!((v[0] - (5.5 + 400.0)).abs() < 1e-9);
    }

    #[test]
    fn crop_follows_impulse() {
        let dev = Device::Cpu;
        let mut data = vec![0.0f64; 12 * 12];
        data[5 * 12 + 5] = 1.0;
        let maps = Tensor::from_vec(data.clone(), (1, 1, 12, 12), &dev).unwrap();
        let mut shifted = vec![0.0f64; 12 * 12];
        shifted[5 * 12 + 6] = 1.0;
        let maps2 = Tensor::from_vec(shifted, (1, 1, 12, 12), &dev).unwrap();
        let a = RoiBox { x0: 16, y0: 16, size: 12 };
        let b = RoiBox { x0: 20, y0: 16, size: 12 };
        let ca = crop_roi_features(&maps, &[vec![[a, a]]], (48, 48), 3).unwrap();
        let cb = crop_roi_features(&maps2, &[vec![[b, b]]], (48, 48), 3).unwrap();
        let (va, vb): (Vec<f64>, Vec<f64>) = (
            ca.flatten_all().unwrap().to_vec1().unwrap(),
            cb.flatten_all().unwrap().to_vec1().unwrap(),
        );
        assert!(va.iter().sum::<f64>() > 0.0);
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
        let same = crop_roi_features(&maps, &[vec![[a, a]]], (48, 48), 3).unwrap();
        let t = same.squeeze(0).unwrap();
        let d = (t.get(0).unwrap() - t.get(1).unwrap()).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn branches_have_independent_parameters() {
        let vm = VarMap::new();
        let v = vb(&vm);
        let branches: Vec<_> = (0..2)
            .map(|i| RoiBranch::new(3, 4, 5, v.pp(format!("b{i}"))).unwrap())
            .collect();
        crate::nn::reseed(&vm, 3).unwrap();
        let patch = Tensor::randn(0.0f64, 1.0, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let a = roi_branch_forward(&branches, &patch, 0).unwrap();
        let b = roi_branch_forward(&branches, &patch, 1).unwrap();
        assert_eq!(a.dims(), &[1, 5]);
        let diff = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 0.0);
        assert!(matches!(roi_branch_forward(&branches, &patch, 2), Err(Error::Index { .. })));
        let zero = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let z: Vec<f64> = roi_branch_forward(&branches, &zero, 0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let again: Vec<f64> = roi_branch_forward(&branches, &zero, 0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn fused_is_elementwise_max() {
        let dev = Device::Cpu;
        let g = Tensor::new(&[[0.3f64, 0.5, 0.9]], &dev).unwrap();
        let r = Tensor::new(&[[0.7f64, 0.5, 0.1]], &dev).unwrap();
        let logit = |p: &Tensor| ((p / (1.0 - p).unwrap()).unwrap()).log().unwrap();
        let pred = Prediction::from_logits(&logit(&g), &logit(&r)).unwrap();
        let f: Vec<Vec<f64>> = pred.probs_fused.to_vec2().unwrap();
        let pg: Vec<Vec<f64>> = pred.probs_global.to_vec2().unwrap();
        let pr: Vec<Vec<f64>> = pred.probs_roi.to_vec2().unwrap();
        for i in 0..3 {
            assert_eq!(f[0][i], pg[0][i].max(pr[0][i]));
        }
        assert!((f[0][0] - 0.7).abs() < 1e-12);
    }
}
