//! Procedural face videos with known AU labels and analytic motion.
//!
//! Each subject gets a jittered 68-point face drawn as an ellipse with eye,
//! brow, nose and mouth strokes. An active AU stamps a colored mark (disc for
//! even AU index, ring for odd) centered in both of its RoIs, so switching an
//! AU only changes pixels inside its RoI boxes. Marks oscillate along the
//! outward direction from the face center; flow targets are the exact mark
//! displacement between frame `t` and `t + flow_step` and zero elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AuSpec, Config};
use crate::flow::FlowField;
use crate::geometry::{compute_au_centers, roi_boxes};
use crate::image::Image;
use crate::landmarks::{template, Point};
use crate::sample::Sample;

const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.60, 0.15],
    [0.15, 0.20, 0.85],
    [0.80, 0.75, 0.05],
    [0.60, 0.10, 0.75],
    [0.05, 0.70, 0.75],
    [0.95, 0.45, 0.05],
    [0.35, 0.35, 0.35],
];

const BACKGROUND: [f32; 3] = [0.2, 0.22, 0.25];
const STROKE: [f32; 3] = [0.15, 0.1, 0.08];
const LIP: [f32; 3] = [0.55, 0.15, 0.15];
/// Frames per oscillation cycle of the marks.
const PERIOD: f64 = 12.0;

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub seed: u64,
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    pub labeled: bool,
    /// Attach flow targets where the later frame exists.
    pub with_flow: bool,
    pub subject_prefix: String,
}

impl SynthOptions {
    pub fn labeled(seed: u64, n_subjects: usize, frames_per_subject: usize) -> Self {
        SynthOptions {
            seed,
            n_subjects,
            frames_per_subject,
            labeled: true,
            with_flow: true,
            subject_prefix: "S".into(),
        }
    }

    pub fn unlabeled(seed: u64, n_subjects: usize, frames_per_subject: usize) -> Self {
        SynthOptions {
            labeled: false,
            subject_prefix: "U".into(),
            ..SynthOptions::labeled(seed, n_subjects, frames_per_subject)
        }
    }
}

/// Per-subject appearance.
#[derive(Debug, Clone)]
pub struct SubjectStyle {
    pub landmarks: Vec<Point>,
    pub skin: [f32; 3],
    pub phase: f64,
    pub activation_rate: f64,
}

impl SubjectStyle {
    pub fn new(seed: u64, subject: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let s = size as f64;
        let scale = rng.random_range(0.97..1.03);
        let (tx, ty) = (rng.random_range(-0.015..0.015) * s, rng.random_range(-0.015..0.015) * s);
        let c = s / 2.0;
        let landmarks = template(s)
            .into_iter()
            .map(|p| [c + (p[0] - c) * scale + tx, c + (p[1] - c) * scale + ty])
            .collect();
        SubjectStyle {
            landmarks,
            skin: [
                rng.random_range(0.75..0.95),
                rng.random_range(0.6..0.75),
                rng.random_range(0.5..0.65),
            ],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            activation_rate: rng.random_range(0.3..0.5),
        }
    }

    /// Oscillation state in `[-1, 1]` at `frame`.
    pub fn motion(&self, frame: usize) -> f64 {
        (std::f64::consts::TAU * frame as f64 / PERIOD + self.phase).sin()
    }
}

/// Unit direction each RoI moves along, and the oscillation amplitude.
fn motion_axes(centers: &[[Point; 2]], size: usize, patch: usize) -> (Vec<[Point; 2]>, f64) {
    let face = [size as f64 * 0.5, size as f64 * 0.55];
    let axes = centers
        .iter()
        .map(|pair| {
            pair.map(|c| {
                let (dx, dy) = (c[0] - face[0], c[1] - face[1]);
                let n = (dx * dx + dy * dy).sqrt().max(1e-9);
                [dx / n, dy / n]
            })
        })
        .collect();
    (axes, patch as f64 / 8.0)
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: Image,
    pub landmarks: Vec<Point>,
    /// Where each AU's mark sits in this frame, whether drawn or not.
    pub mark_centers: Vec<[Point; 2]>,
    pub mark_radius: f64,
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * vx - p[0], a[1] + t * vy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

fn draw_polyline(img: &mut Image, pts: &[Point], closed: bool, width: f64, color: [f32; 3]) {
    let n = pts.len();
    let segs = if closed { n } else { n - 1 };
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            if (0..segs).any(|i| dist_to_segment(p, pts[i], pts[(i + 1) % n]) <= width / 2.0) {
                img.set_pixel(x, y, color);
            }
        }
    }
}

fn blend(dst: [f32; 3], src: [f32; 3], alpha: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| dst[c] * (1.0 - alpha) + src[c] * alpha)
}

/// Face without AU marks.
fn render_base(style: &SubjectStyle, size: usize) -> Image {
    let s = size as f64;
    let lm = &style.landmarks;
    let mut img = Image::filled(size, size, BACKGROUND);
    let (cx, cy) = ((lm[0][0] + lm[16][0]) / 2.0, lm[0][1]);
    let (rx, ry_up, ry_down) = ((lm[16][0] - lm[0][0]) / 2.0, 0.3 * s, lm[8][1] - lm[0][1]);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let ry = if py < 0.0 { ry_up } else { ry_down };
            if (px / rx).powi(2) + (py / ry).powi(2) <= 1.0 {
                img.set_pixel(x, y, style.skin);
            }
        }
    }
    let w = (s / 60.0).max(1.0);
    draw_polyline(&mut img, &lm[17..22], false, w * 1.5, STROKE);
    draw_polyline(&mut img, &lm[22..27], false, w * 1.5, STROKE);
    draw_polyline(&mut img, &lm[27..31], false, w, STROKE);
    draw_polyline(&mut img, &lm[31..36], false, w, STROKE);
    draw_polyline(&mut img, &lm[36..42], true, w, STROKE);
    draw_polyline(&mut img, &lm[42..48], true, w, STROKE);
    draw_polyline(&mut img, &lm[48..60], true, w, LIP);
    img
}

/// Renders one frame for the given label vector and motion state.
pub fn render_frame(style: &SubjectStyle, labels: &[u8], motion: f64, spec: &AuSpec, size: usize) -> RenderedFrame {
    let mut image = render_base(style, size);
    let centers = compute_au_centers(&style.landmarks, spec, size, size)
        .expect("template landmarks satisfy every shipped rule set");
    let boxes = roi_boxes(&centers, spec.patch_size, size, size);
    let anchors: Vec<[Point; 2]> = boxes.iter().map(|pair| pair.map(|b| b.center())).collect();
    let (axes, amp) = motion_axes(&anchors, size, spec.patch_size);
    let radius = spec.patch_size as f64 / 4.0;
    let mark_centers: Vec<[Point; 2]> = anchors
        .iter()
        .zip(&axes)
        .map(|(pair, ax)| {
            [0, 1].map(|k| [pair[k][0] + motion * amp * ax[k][0], pair[k][1] + motion * amp * ax[k][1]])
        })
        .collect();
    for (i, (&on, pair)) in labels.iter().zip(&mark_centers).enumerate() {
        if on == 0 {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let ring = i % 2 == 1;
        for (k, c) in pair.iter().enumerate() {
            let b = boxes[i][k];
            for y in b.y0..b.y0 + b.size {
                for x in b.x0..b.x0 + b.size {
                    let d = ((x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2)).sqrt();
                    let inside = if ring { d <= radius && d >= radius * 0.5 } else { d <= radius };
                    if inside {
                        let px = image.pixel(x, y);
                        image.set_pixel(x, y, blend(px, color, 0.8));
                    }
                }
            }
        }
    }
    RenderedFrame {
        image,
        landmarks: style.landmarks.clone(),
        mark_centers,
        mark_radius: radius,
    }
}

/// Labels of `subject` at `frame`; constant over blocks of six frames.
pub fn frame_labels(seed: u64, subject: usize, frame: usize, style: &SubjectStyle, n: usize) -> Vec<u8> {
    let block = (frame / 6) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(31).wrapping_add(subject as u64).wrapping_mul(1_000_003).wrapping_add(block),
    );
    (0..n).map(|_| u8::from(rng.random_bool(style.activation_rate))).collect()
}

/// Flow from `from` to `to`: mark displacement on the marks drawn in `from`.
pub fn analytic_flow(from: &RenderedFrame, to: &RenderedFrame, labels: &[u8], size: usize) -> FlowField {
    let mut flow = FlowField::zeros(size, size);
    for (i, &on) in labels.iter().enumerate() {
        if on == 0 {
            continue;
        }
        let ring = i % 2 == 1;
        for k in 0..2 {
            let c = from.mark_centers[i][k];
            let d = [
                (to.mark_centers[i][k][0] - c[0]) as f32,
                (to.mark_centers[i][k][1] - c[1]) as f32,
            ];
            let r = from.mark_radius;
            let (x0, x1) = ((c[0] - r).floor().max(0.0) as usize, ((c[0] + r).ceil() as usize).min(size));
            let (y0, y1) = ((c[1] - r).floor().max(0.0) as usize, ((c[1] + r).ceil() as usize).min(size));
            for y in y0..y1 {
                for x in x0..x1 {
                    let dist = ((x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2)).sqrt();
                    let inside = if ring { dist <= r && dist >= r * 0.5 } else { dist <= r };
                    if inside {
                        flow.set(x, y, d);
                    }
                }
            }
        }
    }
    flow
}

/// Deterministic synthetic dataset at the config's aligned resolution.
pub fn synth_dataset(opts: &SynthOptions, config: &Config) -> Vec<Sample> {
    let size = config.hyper.aligned_size;
    let step = config.hyper.flow_step;
    let spec = &config.au;
    let n = spec.num_aus();
    let mut out = Vec::with_capacity(opts.n_subjects * opts.frames_per_subject);
    for subject in 0..opts.n_subjects {
        let style = SubjectStyle::new(opts.seed, subject, size);
        let subject_id = format!("{}{:03}", opts.subject_prefix, subject);
        for frame in 0..opts.frames_per_subject {
            let labels = frame_labels(opts.seed, subject, frame, &style, n);
            let now = render_frame(&style, &labels, style.motion(frame), spec, size);
            let flow_target = (opts.with_flow && frame + step < opts.frames_per_subject).then(|| {
                let later = render_frame(&style, &labels, style.motion(frame + step), spec, size);
                analytic_flow(&now, &later, &labels, size)
            });
            out.push(Sample {
                image: now.image,
                labels: opts.labeled.then_some(labels),
                landmarks: Some(now.landmarks),
                flow_target,
                mask: None,
                subject_id: subject_id.clone(),
                is_labeled: opts.labeled,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> Config {
        Config::preset("synthetic").unwrap()
    }

    #[test]
    fn deterministic() {
        let c = cfg();
        let a = synth_dataset(&SynthOptions::labeled(5, 2, 4), &c);
        let b = synth_dataset(&SynthOptions::labeled(5, 2, 4), &c);
        assert_eq!(a, b);
        let other = synth_dataset(&SynthOptions::labeled(6, 2, 4), &c);
        assert_ne!(a, other);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|s| s.check(c.au.num_aus()).is_ok()));
        // last `flow_step` frames of each subject have no later frame
        assert!(a[0].flow_target.is_some());
        assert!(a[3].flow_target.is_none());
    }

    #[test]
    fn au_marks_stay_inside_their_rois() {
        for name in ["synthetic", "bp4d"] {
            let c = Config::preset(name).unwrap();
            let size = c.hyper.aligned_size;
            let style = SubjectStyle::new(1, 0, size);
            let n = c.au.num_aus();
            let off = vec![0u8; n];
            let base = render_frame(&style, &off, 0.7, &c.au, size).image;
            let centers = compute_au_centers(&style.landmarks, &c.au, size, size).unwrap();
            let boxes = roi_boxes(&centers, c.au.patch_size, size, size);
            for i in 0..n {
                let mut on = off.clone();
                on[i] = 1;
                let img = render_frame(&style, &on, 0.7, &c.au, size).image;
                let mut changed = 0;
                for y in 0..size {
                    for x in 0..size {
                        if img.pixel(x, y) != base.pixel(x, y) {
                            changed += 1;
                            let inside = boxes[i].iter().any(|b| {
                                x >= b.x0 && x < b.x0 + b.size && y >= b.y0 && y < b.y0 + b.size
                            });
                            assert!(inside, "{name} AU index {i} changed pixel ({x},{y})");
                        }
                    }
                }
                assert!(changed > 0, "{name} AU index {i} left no mark");
            }
        }
    }

    #[test]
    fn flow_matches_mark_displacement() {
        let c = cfg();
        let size = c.hyper.aligned_size;
        let style = SubjectStyle::new(2, 1, size);
        let labels = vec![1u8; c.au.num_aus()];
        let (f0, f1) = (4, 4 + c.hyper.flow_step);
        let a = render_frame(&style, &labels, style.motion(f0), &c.au, size);
        let b = render_frame(&style, &labels, style.motion(f1), &c.au, size);
        let flow = analytic_flow(&a, &b, &labels, size);
        for i in [0usize, 2] {
            for k in 0..2 {
                let c0 = a.mark_centers[i][k];
                let c1 = b.mark_centers[i][k];
                let uv = flow.get(c0[0] as usize, c0[1] as usize);
                assert!((f64::from(uv[0]) - (c1[0] - c0[0])).abs() < 0.2);
                assert!((f64::from(uv[1]) - (c1[1] - c0[1])).abs() < 0.2);
            }
        }
        // the static face does not move
        assert_eq!(flow.get(1, 1), [0.0, 0.0]);
        assert!(flow.data().iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn unlabeled_has_no_labels() {
        let c = cfg();
        let u = synth_dataset(&SynthOptions::unlabeled(1, 1, 2), &c);
        assert!(u.iter().all(|s| !s.is_labeled && s.labels.is_none()));
        assert!(u[0].subject_id.starts_with('U'));
    }
}
