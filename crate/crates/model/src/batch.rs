//! Conversion of samples into batched tensors.

use candle_core::{DType, Device, Tensor};
use rtatl_core::geometry::{compute_au_centers, roi_boxes, RoiBox};
use rtatl_core::landmarks::template;
use rtatl_core::{Config, Image, Sample};

use crate::error::{Error, Result};

pub fn image_tensor(img: &Image, device: &Device, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(img.to_chw(), (3, img.height(), img.width()), device)?.to_dtype(dtype)?)
}

/// RoI boxes of every AU. Samples without landmarks fall back to the
/// canonical template, which aligned faces match by construction. A masked
/// AU keeps the exact boxes that were erased.
pub fn sample_boxes(sample: &Sample, config: &Config) -> Result<Vec<[RoiBox; 2]>> {
    let (w, h) = (sample.image.width(), sample.image.height());
    let lm = match &sample.landmarks {
        Some(l) => l.clone(),
        None => template(w as f64),
    };
    let centers = compute_au_centers(&lm, &config.au, w, h)?;
    let mut boxes = roi_boxes(&centers, config.au.patch_size, w, h);
    if let Some(m) = &sample.mask {
        boxes[m.au_index] = m.boxes;
    }
    Ok(boxes)
}

/// An erased RoI pair with its original pixels.
#[derive(Debug, Clone)]
pub struct MaskedRoi {
    pub sample: usize,
    pub au: usize,
    /// (2, 3, s, s), left then right.
    pub patches: Tensor,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    /// Images with every erased RoI restored.
    pub intact: Tensor,
    pub boxes: Vec<Vec<[RoiBox; 2]>>,
    pub labels: Vec<Option<Vec<u8>>>,
    /// (B, N) labels, zero for unlabeled rows.
    pub label_tensor: Tensor,
    /// (B, N) one where the label supervises the AU.
    pub include: Tensor,
    pub masked: Vec<MaskedRoi>,
    /// (B, 2, h, w) flow targets at the flow head's resolution, zero where absent.
    pub flow_target: Tensor,
    pub flow_valid: Vec<bool>,
}

impl Batch {
    pub fn new(samples: &[Sample], config: &Config, device: &Device, dtype: DType) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let n = config.au.num_aus();
        let size = samples[0].image.width();
        let flow_side = size / 8;
        let mut images = Vec::with_capacity(samples.len());
        let mut intact = Vec::with_capacity(samples.len());
        let mut boxes = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        let mut label_vals = Vec::with_capacity(samples.len() * n);
        let mut include = Vec::with_capacity(samples.len() * n);
        let mut masked = Vec::new();
        let mut flows = Vec::with_capacity(samples.len());
        let mut flow_valid = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            s.check(n)?;
            if s.image.width() != size || s.image.height() != size {
                return Err(Error::Shape(format!(
                    "sample {i} is {}x{}, batch expects {size}x{size}",
                    s.image.width(),
                    s.image.height()
                )));
            }
            images.push(image_tensor(&s.image, device, dtype)?);
            intact.push(if s.mask.is_some() {
                image_tensor(&s.intact_image(), device, dtype)?
            } else {
                images[i].clone()
            });
            boxes.push(sample_boxes(s, config)?);
            let excluded = s.excluded_aus();
            match &s.labels {
                Some(l) if s.is_labeled => {
                    label_vals.extend(l.iter().map(|&v| v as f64));
                    include.extend((0..n).map(|a| if excluded.contains(&a) { 0.0 } else { 1.0 }));
                }
                _ => {
                    label_vals.extend(std::iter::repeat_n(0.0, n));
                    include.extend(std::iter::repeat_n(0.0, n));
                }
            }
            labels.push(if s.is_labeled { s.labels.clone() } else { None });
            if let Some(m) = &s.mask {
                let p = m
                    .patches
                    .iter()
                    .map(|p| image_tensor(p, device, dtype))
                    .collect::<Result<Vec<_>>>()?;
                masked.push(MaskedRoi {
                    sample: i,
                    au: m.au_index,
                    patches: Tensor::stack(&p, 0)?,
                });
            }
            match &s.flow_target {
                Some(f) => {
                    let small = f.downsample(flow_side, flow_side)?;
                    flows.push(Tensor::from_vec(small.to_planar(), (2, flow_side, flow_side), device)?.to_dtype(dtype)?);
                    flow_valid.push(true);
                }
                None => {
                    flows.push(Tensor::zeros((2, flow_side, flow_side), dtype, device)?);
                    flow_valid.push(false);
                }
            }
        }
        let b = samples.len();
        Ok(Batch {
            images: Tensor::stack(&images, 0)?,
            intact: Tensor::stack(&intact, 0)?,
            boxes,
            labels,
            label_tensor: Tensor::from_vec(label_vals, (b, n), device)?.to_dtype(dtype)?,
            include: Tensor::from_vec(include, (b, n), device)?.to_dtype(dtype)?,
            masked,
            flow_target: Tensor::stack(&flows, 0)?,
            flow_valid,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}
