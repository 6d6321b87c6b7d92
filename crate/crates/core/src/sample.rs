//! Training samples, RoI masking and geometric augmentation.

use std::collections::BTreeSet;

use rand::Rng;

use crate::config::AuSpec;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{compute_au_centers, roi_boxes, RoiBox};
use crate::image::Image;
use crate::landmarks::{self, Point};

/// Value written into erased RoIs.
pub const MASK_FILL: f32 = 1.0;

/// Record of one erased symmetric RoI pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDescriptor {
    pub au_index: usize,
    /// Image-left box first.
    pub boxes: [RoiBox; 2],
    /// Original pixels under `boxes`, in the same order.
    pub patches: [Image; 2],
    /// AUs whose RoIs touch an erased box; never supervised on this sample.
    pub excluded: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: Option<Vec<u8>>,
    pub landmarks: Option<Vec<Point>>,
    /// Displacement to the frame `flow_step` later, at this image's resolution.
    pub flow_target: Option<FlowField>,
    pub mask: Option<MaskDescriptor>,
    pub subject_id: String,
    pub is_labeled: bool,
}

impl Sample {
    pub fn check(&self, num_aus: usize) -> Result<()> {
        if self.is_labeled {
            match &self.labels {
                Some(l) if l.len() == num_aus && l.iter().all(|&v| v <= 1) => {}
                Some(l) => {
                    return Err(Error::Label(format!(
                        "{}: expected {num_aus} binary labels, got {:?}",
                        self.subject_id, l
                    )))
                }
                None => {
                    return Err(Error::Label(format!(
                        "{}: labeled sample without labels",
                        self.subject_id
                    )))
                }
            }
        }
        if let Some(f) = &self.flow_target {
            if f.width() != self.image.width() || f.height() != self.image.height() {
                return Err(Error::Shape(format!(
                    "{}: flow target does not match image size",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }

    /// The image with any erased RoIs restored.
    pub fn intact_image(&self) -> Image {
        let mut img = self.image.clone();
        if let Some(mask) = &self.mask {
            for (b, p) in mask.boxes.iter().zip(&mask.patches) {
                img.paste(p, b.x0, b.y0)
                    .expect("mask boxes always lie inside the image");
            }
        }
        img
    }

    pub fn excluded_aus(&self) -> BTreeSet<usize> {
        self.mask
            .as_ref()
            .map(|m| m.excluded.clone())
            .unwrap_or_default()
    }
}

/// Erases both RoIs of `au_index` with white and records what was removed.
pub fn mask_au(sample: &Sample, spec: &AuSpec, au_index: usize) -> Result<Sample> {
    if au_index >= spec.num_aus() {
        return Err(Error::Domain(format!("AU index {au_index} out of range")));
    }
    if sample.mask.is_some() {
        return Err(Error::Data("sample is already masked".into()));
    }
    let lm = sample
        .landmarks
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: masking needs landmarks", sample.subject_id)))?;
    let (w, h) = (sample.image.width(), sample.image.height());
    let centers = compute_au_centers(lm, spec, w, h)?;
    let boxes = roi_boxes(&centers, spec.patch_size, w, h);
    let erased = boxes[au_index];
    let patches = [
        sample.image.crop(erased[0].x0, erased[0].y0, erased[0].size, erased[0].size)?,
        sample.image.crop(erased[1].x0, erased[1].y0, erased[1].size, erased[1].size)?,
    ];
    let excluded = boxes
        .iter()
        .enumerate()
        .filter(|(_, pair)| {
            pair.iter()
                .any(|b| erased.iter().any(|e| b.intersection_area(e) > 0))
        })
        .map(|(i, _)| i)
        .collect();
    let mut image = sample.image.clone();
    for b in &erased {
        image.fill_rect(b.x0, b.y0, b.size, b.size, [MASK_FILL; 3]);
    }
    Ok(Sample {
        image,
        mask: Some(MaskDescriptor {
            au_index,
            boxes: erased,
            patches,
            excluded,
        }),
        ..sample.clone()
    })
}

/// Erases the RoI pair of a uniformly chosen AU.
pub fn apply_roi_mask(sample: &Sample, spec: &AuSpec, rng: &mut impl Rng) -> Result<Sample> {
    let au = rng.random_range(0..spec.num_aus());
    mask_au(sample, spec, au)
}

/// A crop window and optional mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropFlip {
    pub x0: usize,
    pub y0: usize,
    pub flip: bool,
}

/// Crops to `size` x `size` at the window, then mirrors if requested.
///
/// Image, landmarks, flow (with `u` negated on mirror) and mask boxes move
/// together; labels are untouched.
pub fn crop_flip(sample: &Sample, window: CropFlip, size: usize) -> Result<Sample> {
    let CropFlip { x0, y0, flip } = window;
    let mut image = sample.image.crop(x0, y0, size, size)?;
    let (dx, dy) = (x0 as f64, y0 as f64);
    let mut lm = sample
        .landmarks
        .as_ref()
        .map(|l| l.iter().map(|p| [p[0] - dx, p[1] - dy]).collect::<Vec<_>>());
    let mut flow = sample
        .flow_target
        .as_ref()
        .map(|f| f.crop(x0, y0, size, size))
        .transpose()?;
    let mut mask = match &sample.mask {
        None => None,
        Some(m) => {
            let mut m = m.clone();
            for b in &mut m.boxes {
                if b.x0 < x0 || b.y0 < y0 || b.x0 + b.size > x0 + size || b.y0 + b.size > y0 + size {
                    return Err(Error::Shape("crop window cuts through a mask box".into()));
                }
                b.x0 -= x0;
                b.y0 -= y0;
            }
            Some(m)
        }
    };
    if flip {
        image = image.flip_horizontal();
        lm = lm.map(|l| landmarks::flip_horizontal(&l, size as f64));
        flow = flow.map(|f| f.flip_horizontal());
        if let Some(m) = &mut mask {
            let [l, r] = m.boxes;
            let mirror = |b: RoiBox| RoiBox {
                x0: size - b.x0 - b.size,
                ..b
            };
            m.boxes = [mirror(r), mirror(l)];
            let [pl, pr] = &m.patches;
            m.patches = [pr.flip_horizontal(), pl.flip_horizontal()];
        }
    }
    Ok(Sample {
        image,
        labels: sample.labels.clone(),
        landmarks: lm,
        flow_target: flow,
        mask,
        subject_id: sample.subject_id.clone(),
        is_labeled: sample.is_labeled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Random crop and random horizontal flip.
    Train,
    /// Center crop only.
    Test,
}

/// Picks a crop/flip window for `sample` at output `size`.
///
/// Training crops are uniform over offsets that keep any mask boxes inside.
pub fn choose_window(sample: &Sample, size: usize, mode: AugmentMode, rng: &mut impl Rng) -> CropFlip {
    let (w, h) = (sample.image.width(), sample.image.height());
    let (mx, my) = (w.saturating_sub(size), h.saturating_sub(size));
    match mode {
        AugmentMode::Test => CropFlip {
            x0: mx / 2,
            y0: my / 2,
            flip: false,
        },
        AugmentMode::Train => {
            let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (0, mx, 0, my);
            if let Some(m) = &sample.mask {
                for b in &m.boxes {
                    lo_x = lo_x.max((b.x0 + b.size).saturating_sub(size));
                    hi_x = hi_x.min(b.x0);
                    lo_y = lo_y.max((b.y0 + b.size).saturating_sub(size));
                    hi_y = hi_y.min(b.y0);
                }
            }
            let pick = |lo: usize, hi: usize, center: usize, rng: &mut dyn rand::RngCore| {
                if lo <= hi {
                    rng.random_range(lo..=hi)
                } else {
                    center
                }
            };
            CropFlip {
                x0: pick(lo_x, hi_x, mx / 2, rng),
                y0: pick(lo_y, hi_y, my / 2, rng),
                flip: rng.random_bool(0.5),
            }
        }
    }
}

pub fn augment(sample: &Sample, size: usize, mode: AugmentMode, rng: &mut impl Rng) -> Result<Sample> {
    let window = choose_window(sample, size, mode, rng);
    crop_flip(sample, window, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::landmarks::template;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured_sample(size: usize) -> Sample {
        let data = (0..size * size * 3)
            .map(|i| ((i * 7919) % 251) as f32 / 251.0)
            .collect();
        let mut flow = FlowField::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                flow.set(x, y, [x as f32 * 0.01, -(y as f32) * 0.02]);
            }
        }
        Sample {
            image: Image::from_raw(size, size, data).unwrap(),
            labels: Some(vec![1, 0, 0, 1, 0, 0, 1, 0, 1, 0, 0, 1]),
            landmarks: Some(template(size as f64)),
            flow_target: Some(flow),
            mask: None,
            subject_id: "F001".into(),
            is_labeled: true,
        }
    }

    #[test]
    fn mask_fills_white_and_restores() {
        let spec = Config::preset("bp4d").unwrap().au;
        let s = textured_sample(200);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let m = apply_roi_mask(&s, &spec, &mut rng).unwrap();
            let d = m.mask.as_ref().unwrap();
            assert!(d.excluded.contains(&d.au_index));
            for b in &d.boxes {
                assert!(b.fits(200, 200));
                for y in b.y0..b.y0 + b.size {
                    for x in b.x0..b.x0 + b.size {
                        assert_eq!(m.image.pixel(x, y), [MASK_FILL; 3]);
                    }
                }
            }
            assert_eq!(m.intact_image(), s.image);
            assert_eq!(m.labels, s.labels);
        }
    }

    #[test]
    fn shared_lip_corner_rois_are_excluded_together() {
        let spec = Config::preset("bp4d").unwrap().au;
        let s = textured_sample(200);
        let i12 = spec.index_of(12).unwrap();
        let i15 = spec.index_of(15).unwrap();
        let m = mask_au(&s, &spec, i12).unwrap();
        let excluded = &m.mask.as_ref().unwrap().excluded;
        assert!(excluded.contains(&i12));
        assert!(excluded.contains(&i15));
        // brow AUs are far from the mouth
        assert!(!excluded.contains(&spec.index_of(1).unwrap()));
    }

    #[test]
    fn masking_needs_landmarks() {
        let spec = Config::preset("bp4d").unwrap().au;
        let mut s = textured_sample(200);
        s.landmarks = None;
        assert!(mask_au(&s, &spec, 0).is_err());
        assert!(mask_au(&textured_sample(200), &spec, 12).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let spec = Config::preset("bp4d").unwrap().au;
        let s = mask_au(&textured_sample(200), &spec, 2).unwrap();
        let window = CropFlip { x0: 5, y0: 3, flip: true };
        let once = crop_flip(&s, window, 192).unwrap();
        let twice = crop_flip(&once, CropFlip { x0: 0, y0: 0, flip: true }, 192).unwrap();
        let plain = crop_flip(&s, CropFlip { flip: false, ..window }, 192).unwrap();
        assert_eq!(twice.image, plain.image);
        assert_eq!(twice.flow_target, plain.flow_target);
        assert_eq!(twice.mask, plain.mask);
        let (a, b) = (twice.landmarks.unwrap(), plain.landmarks.unwrap());
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn flip_negates_constant_flow() {
        let mut s = textured_sample(16);
        s.flow_target = Some(FlowField::constant(16, 16, 1.0, 0.0));
        let f = crop_flip(&s, CropFlip { x0: 0, y0: 0, flip: true }, 16).unwrap();
        assert!(f
            .flow_target
            .unwrap()
            .data()
            .chunks_exact(2)
            .all(|uv| uv == [-1.0, 0.0]));
    }

    #[test]
    fn flipped_mask_still_matches_pixels() {
        let spec = Config::preset("bp4d").unwrap().au;
        let s = mask_au(&textured_sample(200), &spec, 0).unwrap();
        let f = crop_flip(&s, CropFlip { x0: 4, y0: 2, flip: true }, 192).unwrap();
        let m = f.mask.as_ref().unwrap();
        assert!(m.boxes[0].x0 <= m.boxes[1].x0);
        let intact = f.intact_image();
        let reference = crop_flip(
            &Sample { image: s.intact_image(), mask: None, ..s.clone() },
            CropFlip { x0: 4, y0: 2, flip: true },
            192,
        )
        .unwrap();
        assert_eq!(intact, reference.image);
    }

    #[test]
    fn crop_windows_stay_inside() {
        let spec = Config::preset("bp4d").unwrap().au;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = textured_sample(200);
        for i in 0..50 {
            let s = if i % 2 == 0 {
                apply_roi_mask(&base, &spec, &mut rng).unwrap()
            } else {
                base.clone()
            };
            let w = choose_window(&s, 192, AugmentMode::Train, &mut rng);
            assert!(w.x0 + 192 <= 200 && w.y0 + 192 <= 200);
            let out = crop_flip(&s, w, 192).unwrap();
            assert_eq!(out.image.width(), 192);
            assert_eq!(out.labels, s.labels);
        }
        let t = choose_window(&base, 192, AugmentMode::Test, &mut rng);
        assert_eq!(t, CropFlip { x0: 4, y0: 4, flip: false });
    }

    #[test]
    fn check_catches_bad_labels() {
        let mut s = textured_sample(8);
        assert!(s.check(12).is_ok());
        assert!(s.check(11).is_err());
        s.labels = Some(vec![2; 12]);
        assert!(s.check(12).is_err());
        s.labels = None;
        assert!(s.check(12).is_err());
    }
}
