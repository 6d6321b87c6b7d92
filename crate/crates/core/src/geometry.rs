//! Similarity alignment, AU center placement and RoI boxes.

use crate::config::AuSpec;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::{eye_centers, inter_ocular, Point};

/// Canonical eye positions as fractions of the aligned image side.
pub const CANONICAL_LEFT_EYE: Point = [0.3, 0.4];
pub const CANONICAL_RIGHT_EYE: Point = [0.7, 0.4];

/// 2x3 rotation + uniform scale + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub m: [[f64; 3]; 2],
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// `scale * R(angle)` followed by a translation.
    pub fn new(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Similarity {
            m: [[scale * c, -scale * s, tx], [scale * s, scale * c, ty]],
        }
    }

    /// The unique similarity sending `src_a -> dst_a` and `src_b -> dst_b`.
    pub fn from_point_pairs(src_a: Point, src_b: Point, dst_a: Point, dst_b: Point) -> Result<Self> {
        let sv = [src_b[0] - src_a[0], src_b[1] - src_a[1]];
        let dv = [dst_b[0] - dst_a[0], dst_b[1] - dst_a[1]];
        let norm = sv[0] * sv[0] + sv[1] * sv[1];
        if norm < 1e-12 {
            return Err(Error::Alignment("anchor points coincide".into()));
        }
        // complex division dv / sv gives scale * e^{i angle}
        let a = (dv[0] * sv[0] + dv[1] * sv[1]) / norm;
        let b = (dv[1] * sv[0] - dv[0] * sv[1]) / norm;
        let tx = dst_a[0] - (a * src_a[0] - b * src_a[1]);
        let ty = dst_a[1] - (b * src_a[0] + a * src_a[1]);
        Ok(Similarity {
            m: [[a, -b, tx], [b, a, ty]],
        })
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn scale(&self) -> f64 {
        (self.m[0][0].powi(2) + self.m[1][0].powi(2)).sqrt()
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.m[1][0].atan2(self.m[0][0])
    }

    pub fn inverse(&self) -> Similarity {
        let [[a, nb, tx], [b, _, ty]] = self.m;
        let det = a * a + nb * nb;
        let (ia, ib) = (a / det, -b / det);
        Similarity {
            m: [
                [ia, -ib, -(ia * tx - ib * ty)],
                [ib, ia, -(ib * tx + ia * ty)],
            ],
        }
    }

    pub fn compose(&self, first: &Similarity) -> Similarity {
        let a = &self.m;
        let b = &first.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            m[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Similarity { m }
    }
}

/// Resamples `image` into a `size` x `size` frame through `transform` (source to output).
pub fn warp(image: &Image, transform: &Similarity, size: usize) -> Image {
    let inv = transform.inverse();
    let mut out = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let src = inv.apply([x as f64 + 0.5, y as f64 + 0.5]);
            out.set_pixel(x, y, image.sample(src[0], src[1]));
        }
    }
    out
}

/// Similarity that puts the eye centers of `landmarks` on the canonical positions.
pub fn alignment_transform(landmarks: &[Point], aligned_size: usize) -> Result<Similarity> {
    let (left, right) = eye_centers(landmarks)?;
    let s = aligned_size as f64;
    Similarity::from_point_pairs(
        left,
        right,
        [CANONICAL_LEFT_EYE[0] * s, CANONICAL_LEFT_EYE[1] * s],
        [CANONICAL_RIGHT_EYE[0] * s, CANONICAL_RIGHT_EYE[1] * s],
    )
}

#[derive(Debug, Clone)]
pub struct Aligned {
    pub image: Image,
    pub transform: Similarity,
    pub landmarks: Vec<Point>,
}

pub fn align_face(raw: &Image, landmarks: &[Point], aligned_size: usize) -> Result<Aligned> {
    let transform = alignment_transform(landmarks, aligned_size)?;
    Ok(Aligned {
        image: warp(raw, &transform, aligned_size),
        transform,
        landmarks: landmarks.iter().map(|&p| transform.apply(p)).collect(),
    })
}

/// Axis-aligned square box with integer corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoiBox {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl RoiBox {
    /// Box of side `size` centered as close as possible to `center` while
    /// staying inside a `width` x `height` image.
    pub fn around(center: Point, size: usize, width: usize, height: usize) -> RoiBox {
        let half = size as f64 / 2.0;
        let place = |c: f64, extent: usize| -> usize {
            let max = extent.saturating_sub(size) as f64;
            (c - half).round().clamp(0.0, max) as usize
        };
        RoiBox {
            x0: place(center[0], width),
            y0: place(center[1], height),
            size,
        }
    }

    pub fn center(&self) -> Point {
        let half = self.size as f64 / 2.0;
        [self.x0 as f64 + half, self.y0 as f64 + half]
    }

    pub fn intersection_area(&self, other: &RoiBox) -> usize {
        let w = (self.x0 + self.size).min(other.x0 + other.size) as i64 - self.x0.max(other.x0) as i64;
        let h = (self.y0 + self.size).min(other.y0 + other.size) as i64 - self.y0.max(other.y0) as i64;
        if w <= 0 || h <= 0 {
            0
        } else {
            (w * h) as usize
        }
    }

    pub fn iou(&self, other: &RoiBox) -> f64 {
        let inter = self.intersection_area(other) as f64;
        let union = (self.size * self.size + other.size * other.size) as f64 - inter;
        inter / union
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 + self.size <= width && self.y0 + self.size <= height
    }
}

/// Left/right center of every AU, clamped so the `patch_size` box fits.
pub fn compute_au_centers(
    landmarks: &[Point],
    spec: &AuSpec,
    width: usize,
    height: usize,
) -> Result<Vec<[Point; 2]>> {
    if spec.max_landmark() >= landmarks.len() {
        return Err(Error::Data(format!(
            "RoI rules reference landmark {} but only {} are present",
            spec.max_landmark(),
            landmarks.len()
        )));
    }
    let unit = inter_ocular(landmarks)? / 2.0;
    let half = spec.patch_size as f64 / 2.0;
    let clamp = |v: f64, extent: usize| v.clamp(half, (extent as f64 - half).max(half));
    Ok(spec
        .roi_rules
        .iter()
        .map(|rule| {
            [rule.left, rule.right].map(|r| {
                let lm = landmarks[r.landmark];
                [
                    clamp(lm[0] + r.dx * unit, width),
                    clamp(lm[1] + r.dy * unit, height),
                ]
            })
        })
        .collect())
}

/// Integer boxes for the centers returned by [`compute_au_centers`].
pub fn roi_boxes(centers: &[[Point; 2]], size: usize, width: usize, height: usize) -> Vec<[RoiBox; 2]> {
    centers
        .iter()
        .map(|pair| pair.map(|c| RoiBox::around(c, size, width, height)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::landmarks::template;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn similarity_inverse_and_compose() {
        let t = Similarity::new(1.7, 0.4, 3.0, -2.0);
        let id = t.compose(&t.inverse());
        let p = [12.5, -7.25];
        assert!(close(id.apply(p), p, 1e-9));
        assert!((t.scale() - 1.7).abs() < 1e-12);
        assert!((t.angle() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn point_pairs_recovered() {
        let t = Similarity::new(0.8, -0.3, 10.0, 4.0);
        let (a, b) = ([3.0, 5.0], [20.0, 9.0]);
        let fit = Similarity::from_point_pairs(a, b, t.apply(a), t.apply(b)).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((fit.m[i][j] - t.m[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn canonical_face_aligns_to_identity() {
        let lm = template(200.0);
        let raw = Image::filled(200, 200, [0.5; 3]);
        let aligned = align_face(&raw, &lm, 200).unwrap();
        let id = Similarity::identity();
        for i in 0..2 {
            for j in 0..3 {
                assert!((aligned.transform.m[i][j] - id.m[i][j]).abs() < 1e-9);
            }
        }
        // a larger canvas with the same face maps through a pure scale
        let big: Vec<Point> = lm.iter().map(|p| [p[0] * 2.0, p[1] * 2.0]).collect();
        let t = alignment_transform(&big, 200).unwrap();
        assert!((t.scale() - 0.5).abs() < 1e-9);
        assert!(t.angle().abs() < 1e-9);
        assert!(t.m[0][2].abs() < 1e-9 && t.m[1][2].abs() < 1e-9);
    }

    #[test]
    fn rotated_face_is_levelled() {
        let lm = template(200.0);
        let rot = Similarity::new(1.0, 10f64.to_radians(), 30.0, -15.0);
        let rotated: Vec<Point> = lm.iter().map(|&p| rot.apply(p)).collect();
        let raw = Image::filled(260, 260, [0.5; 3]);
        let aligned = align_face(&raw, &rotated, 200).unwrap();
        let (l, r) = eye_centers(&aligned.landmarks).unwrap();
        let tilt = (r[1] - l[1]).atan2(r[0] - l[0]).to_degrees();
        assert!(tilt.abs() < 0.1, "tilt {tilt}");
        assert!((aligned.transform.angle().to_degrees() + 10.0).abs() < 1e-6);
    }

    #[test]
    fn coincident_eyes_rejected() {
        let lm = vec![[50.0, 50.0], [50.0, 50.0]];
        assert!(matches!(
            alignment_transform(&lm, 200),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn warp_moves_content() {
        let mut raw = Image::zeros(20, 20);
        raw.set_pixel(5, 5, [1.0; 3]);
        let shift = Similarity::new(1.0, 0.0, 3.0, 2.0);
        let out = warp(&raw, &shift, 20);
        assert_eq!(out.pixel(8, 7), [1.0; 3]);
        assert_eq!(out.pixel(5, 5), [0.0; 3]);
    }

    #[test]
    fn zero_offset_rule_hits_landmark() {
        let mut spec = Config::preset("bp4d").unwrap().au;
        let lm = template(200.0);
        let centers = compute_au_centers(&lm, &spec, 200, 200).unwrap();
        // AU12 uses the lip corners with no offset
        let i = spec.index_of(12).unwrap();
        assert!(close(centers[i][0], lm[48], 1e-9));
        assert!(close(centers[i][1], lm[54], 1e-9));
        spec.roi_rules[0].left.landmark = 80;
        assert!(compute_au_centers(&lm, &spec, 200, 200).is_err());
    }

    #[test]
    fn symmetric_face_gives_mirrored_centers() {
        for name in ["bp4d", "disfa", "synthetic"] {
            let cfg = Config::preset(name).unwrap();
            let size = cfg.hyper.aligned_size;
            let lm = template(size as f64);
            let centers = compute_au_centers(&lm, &cfg.au, size, size).unwrap();
            for [l, r] in centers {
                assert!((size as f64 - l[0] - r[0]).abs() < 0.5);
                assert!((l[1] - r[1]).abs() < 0.5);
            }
        }
    }

    #[test]
    fn border_centers_keep_box_inside() {
        let spec = Config::preset("bp4d").unwrap().au;
        let lm: Vec<Point> = template(200.0)
            .into_iter()
            .map(|p| [p[0] - 60.0, p[1] - 70.0])
            .collect();
        let centers = compute_au_centers(&lm, &spec, 200, 200).unwrap();
        for pair in roi_boxes(&centers, 48, 200, 200) {
            for b in pair {
                assert!(b.fits(200, 200));
            }
        }
    }

    #[test]
    fn box_overlap() {
        let a = RoiBox { x0: 0, y0: 0, size: 10 };
        let b = RoiBox { x0: 5, y0: 5, size: 10 };
        let c = RoiBox { x0: 10, y0: 0, size: 10 };
        assert_eq!(a.intersection_area(&b), 25);
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(a.intersection_area(&c), 0);
        assert_eq!(a.iou(&a), 1.0);
    }
}
