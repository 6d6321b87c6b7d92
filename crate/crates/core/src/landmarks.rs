//! Facial landmark sets and the 68-point layout conventions.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Mean 68-point face on the unit square; eye centers at (0.3, 0.4) and (0.7, 0.4).
#[rustfmt::skip]
pub const TEMPLATE_68: [Point; 68] = [
    // jaw 0..=16
    [0.1200, 0.3500], [0.1273, 0.4573], [0.1489, 0.5605], [0.1840, 0.6556], [0.2313, 0.7389],
    [0.2889, 0.8073], [0.3546, 0.8581], [0.4259, 0.8894], [0.5000, 0.9000], [0.5741, 0.8894],
    [0.6454, 0.8581], [0.7111, 0.8073], [0.7687, 0.7389], [0.8160, 0.6556], [0.8511, 0.5605],
    [0.8727, 0.4573], [0.8800, 0.3500],
    // right brow 17..=21 (image left)
    [0.200, 0.280], [0.250, 0.255], [0.310, 0.250], [0.370, 0.258], [0.420, 0.275],
    // left brow 22..=26
    [0.580, 0.275], [0.630, 0.258], [0.690, 0.250], [0.750, 0.255], [0.800, 0.280],
    // nose bridge 27..=30
    [0.500, 0.380], [0.500, 0.440], [0.500, 0.500], [0.500, 0.560],
    // nose base 31..=35
    [0.430, 0.600], [0.465, 0.612], [0.500, 0.620], [0.535, 0.612], [0.570, 0.600],
    // right eye 36..=41
    [0.240, 0.400], [0.280, 0.380], [0.320, 0.380], [0.360, 0.400], [0.320, 0.420], [0.280, 0.420],
    // left eye 42..=47
    [0.640, 0.400], [0.680, 0.380], [0.720, 0.380], [0.760, 0.400], [0.720, 0.420], [0.680, 0.420],
    // outer lip 48..=59
    [0.360, 0.750], [0.410, 0.720], [0.460, 0.710], [0.500, 0.715], [0.540, 0.710], [0.590, 0.720],
    [0.640, 0.750], [0.590, 0.790], [0.540, 0.800], [0.500, 0.805], [0.460, 0.800], [0.410, 0.790],
    // inner lip 60..=67
    [0.390, 0.750], [0.450, 0.740], [0.500, 0.740], [0.550, 0.740],
    [0.610, 0.750], [0.550, 0.760], [0.500, 0.765], [0.450, 0.760],
];

/// Index of each point's mirror partner under a horizontal flip.
#[rustfmt::skip]
pub const MIRROR_68: [usize; 68] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17,
    27, 28, 29, 30,
    35, 34, 33, 32, 31,
    45, 44, 43, 42, 47, 46,
    39, 38, 37, 36, 41, 40,
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55,
    64, 63, 62, 61, 60, 67, 66, 65,
];

fn mean(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

/// Image-left and image-right eye centers.
///
/// A 68-point set uses the eye contours; a 2-point set is taken to be the
/// eye centers themselves.
pub fn eye_centers(landmarks: &[Point]) -> Result<(Point, Point)> {
    match landmarks.len() {
        2 => Ok((landmarks[0], landmarks[1])),
        k if k >= 48 => Ok((mean(&landmarks[36..42]), mean(&landmarks[42..48]))),
        k => Err(Error::Alignment(format!(
            "cannot locate eye centers in a {k}-point landmark set"
        ))),
    }
}

pub fn inter_ocular(landmarks: &[Point]) -> Result<f64> {
    let (l, r) = eye_centers(landmarks)?;
    Ok(((r[0] - l[0]).powi(2) + (r[1] - l[1]).powi(2)).sqrt())
}

/// The template scaled to a `size` x `size` image.
pub fn template(size: f64) -> Vec<Point> {
    TEMPLATE_68.iter().map(|p| [p[0] * size, p[1] * size]).collect()
}

/// Mirrors points across the vertical midline of a `width`-wide image.
///
/// 68-point sets are re-indexed so every index keeps its anatomical meaning.
pub fn flip_horizontal(landmarks: &[Point], width: f64) -> Vec<Point> {
    let mirrored: Vec<Point> = landmarks.iter().map(|p| [width - p[0], p[1]]).collect();
    if mirrored.len() == 68 {
        MIRROR_68.iter().map(|&j| mirrored[j]).collect()
    } else {
        mirrored
    }
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<Vec<Point>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => out.push([x, y]),
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: expected `x y`",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn write_landmarks(path: impl AsRef<Path>, landmarks: &[Point]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in landmarks {
        writeln!(f, "{} {}", p[0], p[1])?;
    }
    f.flush()?;
    Ok(())
}
