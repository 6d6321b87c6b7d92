//! Dense displacement fields: Middlebury `.flo` IO, resampling, and flow providers.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{warp, Similarity};
use crate::image::Image;

pub const FLO_MAGIC: f32 = 202021.25;

/// Row-major field of interleaved `(u, v)` displacements in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        let mut data = Vec::with_capacity(width * height * 2);
        for _ in 0..width * height {
            data.push(u);
            data.push(v);
        }
        FlowField {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x2 flow field",
                data.len()
            )));
        }
        Ok(FlowField {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        let o = (y * self.width + x) * 2;
        [self.data[o], self.data[o + 1]]
    }

    pub fn set(&mut self, x: usize, y: usize, uv: [f32; 2]) {
        let o = (y * self.width + x) * 2;
        self.data[o] = uv[0];
        self.data[o + 1] = uv[1];
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> [f64; 2] {
        self.mean_where(|_, _| true)
    }

    /// Mean displacement over the pixels selected by `keep(x, y)`.
    pub fn mean_where(&self, keep: impl Fn(usize, usize) -> bool) -> [f64; 2] {
        let mut acc = [0.0f64; 2];
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if keep(x, y) {
                    let uv = self.get(x, y);
                    acc[0] += f64::from(uv[0]);
                    acc[1] += f64::from(uv[1]);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return [0.0; 2];
        }
        [acc[0] / n as f64, acc[1] / n as f64]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<FlowField> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape("flow crop exceeds field".into()));
        }
        let mut data = Vec::with_capacity(width * height * 2);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 2;
            data.extend_from_slice(&self.data[start..start + width * 2]);
        }
        Ok(FlowField {
            width,
            height,
            data,
        })
    }

    /// Mirror image of the motion: columns reversed and `u` negated.
    pub fn flip_horizontal(&self) -> FlowField {
        let mut out = FlowField::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let [u, v] = self.get(x, y);
                out.set(self.width - 1 - x, y, [-u, v]);
            }
        }
        out
    }

    /// Area-averaged resize to `width` x `height` with displacement rescaling.
    ///
    /// Displacements are multiplied by `width / self.width` (u) and
    /// `height / self.height` (v), so they stay in target-resolution pixels.
    pub fn downsample(&self, width: usize, height: usize) -> Result<FlowField> {
        if width == 0
            || height == 0
            || self.width % width != 0
            || self.height % height != 0
        {
            return Err(Error::Shape(format!(
                "{width}x{height} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let fx = self.width / width;
        let fy = self.height / height;
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let area = (fx * fy) as f64;
        let mut out = FlowField::zeros(width, height);
        for ty in 0..height {
            for tx in 0..width {
                let mut acc = [0.0f64; 2];
                for y in ty * fy..(ty + 1) * fy {
                    for x in tx * fx..(tx + 1) * fx {
                        let uv = self.get(x, y);
                        acc[0] += f64::from(uv[0]);
                        acc[1] += f64::from(uv[1]);
                    }
                }
                out.set(
                    tx,
                    ty,
                    [(acc[0] / area * sx) as f32, (acc[1] / area * sy) as f32],
                );
            }
        }
        Ok(out)
    }

    /// Planar `[u-plane, v-plane]` copy for the network.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 2];
        for (i, uv) in self.data.chunks_exact(2).enumerate() {
            out[i] = uv[0];
            out[plane + i] = uv[1];
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[f32]) -> Result<FlowField> {
        let plane = width * height;
        if planar.len() != plane * 2 {
            return Err(Error::Shape("planar flow length mismatch".into()));
        }
        let mut data = Vec::with_capacity(plane * 2);
        for i in 0..plane {
            data.push(planar[i]);
            data.push(planar[plane + i]);
        }
        Ok(FlowField {
            width,
            height,
            data,
        })
    }

    pub fn write_flo(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&FLO_MAGIC.to_le_bytes())?;
        w.write_all(&(self.width as i32).to_le_bytes())?;
        w.write_all(&(self.height as i32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_flo(mut r: impl Read) -> Result<FlowField> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        let word = |i: usize| [header[i], header[i + 1], header[i + 2], header[i + 3]];
        let magic = f32::from_le_bytes(word(0));
        if magic != FLO_MAGIC {
            return Err(Error::Data(format!("bad .flo magic {magic}")));
        }
        let width = i32::from_le_bytes(word(4));
        let height = i32::from_le_bytes(word(8));
        if width <= 0 || height <= 0 || width > 1 << 16 || height > 1 << 16 {
            return Err(Error::Data(format!("bad .flo dimensions {width}x{height}")));
        }
        let (width, height) = (width as usize, height as usize);
        let mut bytes = vec![0u8; width * height * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FlowField {
            width,
            height,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FlowField> {
        let f = std::fs::File::open(path)?;
        FlowField::read_flo(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_flo(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Computes a displacement field from `from` to `to`.
pub trait FlowProvider: Send + Sync {
    fn estimate(&self, from: &Image, to: &Image) -> Result<FlowField>;
}

/// Single-channel float plane used by the Lucas-Kanade provider.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    fn gray(img: &Image) -> Plane {
        let v = img
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Plane {
            w: img.width(),
            h: img.height(),
            v,
        }
    }

    #[inline]
    fn at(&self, x: i64, y: i64) -> f32 {
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        self.v[y * self.w + x]
    }

    /// Bilinear read in pixel-index coordinates with edge clamping.
    fn sample(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let top = self.at(xi, yi) * (1.0 - fx) + self.at(xi + 1, yi) * fx;
        let bot = self.at(xi, yi + 1) * (1.0 - fx) + self.at(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn blur(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                tmp.v[y * self.w + x] = (0..5)
                    .map(|k| K[k] * self.at(x as i64 + k as i64 - 2, y as i64))
                    .sum();
            }
        }
        let mut out = tmp.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.v[y * self.w + x] = (0..5)
                    .map(|k| K[k] * tmp.at(x as i64, y as i64 + k as i64 - 2))
                    .sum();
            }
        }
        out
    }

    fn half(&self) -> Plane {
        let b = self.blur();
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                v.push(b.at(2 * x as i64, 2 * y as i64));
            }
        }
        Plane { w, h, v }
    }

    /// Sum over a `(2r+1)^2` window, clamped at the borders.
    fn box_sum(&self, r: usize) -> Plane {
        let (w, h) = (self.w, self.h);
        let mut integral = vec![0.0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0f64;
            for x in 0..w {
                row += f64::from(self.v[y * w + x]);
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1]
                    - integral[y1 * (w + 1) + x0]
                    + integral[y0 * (w + 1) + x0];
                v[y * w + x] = s as f32;
            }
        }
        Plane { w, h, v }
    }

    fn mul(&self, other: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&other.v).map(|(a, b)| a * b).collect(),
        }
    }
}

/// Coarse-to-fine dense Lucas-Kanade.
///
/// Stands in for an external TV-L1 solver: good enough for smooth, textured
/// motion such as synthetic translations, and pluggable like any provider.
#[derive(Debug, Clone)]
pub struct LucasKanade {
    pub levels: usize,
    pub window_radius: usize,
    pub iterations: usize,
}

impl Default for LucasKanade {
    fn default() -> Self {
        LucasKanade {
            levels: 4,
            window_radius: 4,
            iterations: 6,
        }
    }
}

impl LucasKanade {
    fn refine(&self, a: &Plane, b: &Plane, flow: &mut [[f32; 2]]) {
        let (w, h) = (a.w, a.h);
        let mut ix = Plane { w, h, v: vec![0.0; w * h] };
        let mut iy = ix.clone();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = y as usize * w + x as usize;
                ix.v[i] = 0.5 * (a.at(x + 1, y) - a.at(x - 1, y));
                iy.v[i] = 0.5 * (a.at(x, y + 1) - a.at(x, y - 1));
            }
        }
        let r = self.window_radius;
        let sxx = ix.mul(&ix).box_sum(r);
        let sxy = ix.mul(&iy).box_sum(r);
        let syy = iy.mul(&iy).box_sum(r);
        for _ in 0..self.iterations {
            let mut it = Plane { w, h, v: vec![0.0; w * h] };
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let [u, v] = flow[i];
                    it.v[i] = b.sample(x as f32 + u, y as f32 + v) - a.v[i];
                }
            }
            let bx = ix.mul(&it).box_sum(r);
            let by = iy.mul(&it).box_sum(r);
            for i in 0..w * h {
                let (a11, a12, a22) = (sxx.v[i], sxy.v[i], syy.v[i]);
                let det = a11 * a22 - a12 * a12;
                let trace = a11 + a22;
                if det <= 1e-6 * trace * trace || trace < 1e-8 {
                    continue;
                }
                let du = -(a22 * bx.v[i] - a12 * by.v[i]) / det;
                let dv = -(a11 * by.v[i] - a12 * bx.v[i]) / det;
                flow[i][0] += du.clamp(-2.0, 2.0);
                flow[i][1] += dv.clamp(-2.0, 2.0);
            }
        }
    }
}

impl FlowProvider for LucasKanade {
    fn estimate(&self, from: &Image, to: &Image) -> Result<FlowField> {
        if from.width() != to.width() || from.height() != to.height() {
            return Err(Error::Shape("flow frames differ in size".into()));
        }
        let mut pa = vec![Plane::gray(from).blur()];
        let mut pb = vec![Plane::gray(to).blur()];
        while pa.len() < self.levels.max(1) && pa.last().unwrap().w >= 16 && pa.last().unwrap().h >= 16 {
            let na = pa.last().unwrap().half();
            let nb = pb.last().unwrap().half();
            pa.push(na);
            pb.push(nb);
        }
        let mut flow: Vec<[f32; 2]> = Vec::new();
        let mut prev_w = 0;
        for level in (0..pa.len()).rev() {
            let (a, b) = (&pa[level], &pb[level]);
            flow = if flow.is_empty() {
                vec![[0.0; 2]; a.w * a.h]
            } else {
                let mut up = vec![[0.0; 2]; a.w * a.h];
                for y in 0..a.h {
                    for x in 0..a.w {
                        let src = flow[(y / 2).min(flow.len() / prev_w - 1) * prev_w + (x / 2).min(prev_w - 1)];
                        up[y * a.w + x] = [src[0] * 2.0, src[1] * 2.0];
                    }
                }
                up
            };
            self.refine(a, b, &mut flow);
            prev_w = a.w;
        }
        let data = flow.into_iter().flatten().collect();
        FlowField::from_raw(from.width(), from.height(), data)
    }
}

/// Aligned frame pair with the flow from `frame_t` to `frame_t3`.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub frame_t: Image,
    pub frame_t3: Image,
    pub flow: FlowField,
}

/// Where flow targets come from: a precomputed `.flo` file, a provider, or both.
pub struct FlowSource<'a> {
    pub flo_path: Option<&'a Path>,
    pub provider: Option<&'a dyn FlowProvider>,
}

/// Aligns both frames with the first frame's transform and attaches its flow.
pub fn prepare_flow_target(
    frame_t: &Image,
    frame_t3: &Image,
    transform_t: &Similarity,
    aligned_size: usize,
    source: &FlowSource<'_>,
    pair_name: &str,
) -> Result<FlowPair> {
    let a = warp(frame_t, transform_t, aligned_size);
    let b = warp(frame_t3, transform_t, aligned_size);
    let flow = match (source.flo_path.filter(|p| p.exists()), source.provider) {
        (Some(path), _) => FlowField::load(path)?,
        (None, Some(provider)) => provider.estimate(&a, &b)?,
        (None, None) => {
            return Err(Error::Data(format!(
                "no flow file and no provider for frame pair {pair_name}"
            )))
        }
    };
    if flow.width() != aligned_size || flow.height() != aligned_size {
        return Err(Error::Shape(format!(
            "flow for {pair_name} is {}x{}, expected {aligned_size}x{aligned_size}",
            flow.width(),
            flow.height()
        )));
    }
    if !flow.is_finite() {
        return Err(Error::Data(format!("non-finite flow for {pair_name}")));
    }
    Ok(FlowPair {
        frame_t: a,
        frame_t3: b,
        flow,
    })
}
