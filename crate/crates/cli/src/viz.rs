//! PNG figures: flow panels, inpainting grids and indicator similarity.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use candle_core::{IndexOp, Tensor};
use clap::Args;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtatl_core::dataset::{ManifestDataset, SampleSource};
use rtatl_core::image::Image;
use rtatl_core::sample::{augment, mask_au, AugmentMode};
use rtatl_core::Sample;
use rtatl_model::{Batch, Mode, Rtatl};

use crate::run::{create_out_dir, flow_provider, load_model, read_records, CliError, RunManifest};
use crate::ModelArgs;

const GAP: usize = 4;
const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Args, Debug)]
pub struct FlowArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Manifest of frames; only frames with a flow target are shown.
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// AU id to erase; cycles through the AUs when absent.
    #[arg(long)]
    pub au: Option<u32>,
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RelationArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Pixels per matrix cell.
    #[arg(long, default_value_t = 24)]
    pub cell: usize,
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}

/// Symmetric scaling to [0, 1] around zero: the largest magnitude maps to
/// 0 or 1 and zero displacement to mid-gray.
pub fn flow_gray(values: &[f32]) -> Vec<f32> {
    let scale = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| 0.5 + 0.5 * v / scale).collect()
}

/// Grayscale image from row-major intensities in [0, 1], enlarged by `zoom`.
pub fn gray_image(values: &[f32], width: usize, height: usize, zoom: usize) -> Image {
    let mut img = Image::zeros(width * zoom, height * zoom);
    for y in 0..height * zoom {
        for x in 0..width * zoom {
            let v = values[(y / zoom) * width + x / zoom].clamp(0.0, 1.0);
            img.set_pixel(x, y, [v; 3]);
        }
    }
    img
}

/// Tiles equally sized rows of images with a white gap.
pub fn grid(rows: &[Vec<Image>]) -> Result<Image> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    ensure!(cols > 0, "empty grid");
    let cw = rows.iter().flatten().map(Image::width).max().unwrap_or(0);
    let ch = rows.iter().flatten().map(Image::height).max().unwrap_or(0);
    let mut out = Image::filled(cols * cw + (cols + 1) * GAP, rows.len() * ch + (rows.len() + 1) * GAP, BACKGROUND);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            out.paste(img, GAP + c * (cw + GAP), GAP + r * (ch + GAP))?;
        }
    }
    Ok(out)
}

/// N x N similarity heatmap; 1 is white and -1 black.
pub fn relation_heatmap(sim: &[Vec<f64>], cell: usize) -> Image {
    let n = sim.len();
    let vals: Vec<f32> = sim.iter().flatten().map(|&s| ((s + 1.0) / 2.0) as f32).collect();
    gray_image(&vals, n, n, cell)
}

fn planar_panels(flow: &Tensor, zoom: usize) -> Result<Vec<Image>> {
    let (_, h, w) = flow.dims3()?;
    (0..2)
        .map(|c| {
            let v: Vec<f32> = flow.i(c)?.flatten_all()?.to_vec1()?;
            Ok(gray_image(&flow_gray(&v), w, h, zoom))
        })
        .collect()
}

fn prepared(model: &Rtatl, data: &dyn SampleSource, keep: impl Fn(&Sample) -> bool, count: usize) -> Result<Vec<Sample>> {
    let size = model.config().hyper.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(count);
    for i in 0..data.len() {
        if out.len() == count {
            break;
        }
        let s = data.load(i)?;
        if keep(&s) {
            out.push(augment(&s, size, AugmentMode::Test, &mut rng)?);
        }
    }
    Ok(out)
}

pub fn flow(args: FlowArgs, argv: &[String]) -> Result<()> {
    let model = load_model(&args.model)?;
    let cfg = model.config().clone();
    let provider = flow_provider();
    let data = ManifestDataset::new(read_records(&args.labeled)?, &cfg, Some(&provider));
    let samples = prepared(&model, &data, |s| s.flow_target.is_some(), args.count)?;
    if samples.is_empty() {
        return Err(CliError::Usage("no frame in the manifest has a flow target".into()).into());
    }
    let batch = Batch::new(&samples, &cfg, model.device(), model.dtype())?;
    let out = model.forward(&batch.images, &batch.boxes, Mode::Eval)?;
    let pred = model.predict_flow(out.bundle.global_maps())?;
    let zoom = (96 / batch.flow_target.dim(2)?).max(1);
    let mut rows = Vec::with_capacity(2 * samples.len());
    for b in 0..samples.len() {
        rows.push(planar_panels(&batch.flow_target.i(b)?, zoom)?);
        rows.push(planar_panels(&pred.i(b)?, zoom)?);
    }
    create_out_dir(&args.out)?;
    let path = args.out.join("flow.png");
    grid(&rows)?.save(&path)?;
    RunManifest::new("viz-flow", argv, args.model.config.as_deref(), &cfg, &args.out).save(&args.out)?;
    info!("{} samples, rows alternate ground truth and prediction (I_x left, I_y right): {}", samples.len(), path.display());
    Ok(())
}

pub fn inpaint(args: InpaintArgs, argv: &[String]) -> Result<()> {
    let model = load_model(&args.model)?;
    let cfg = model.config().clone();
    let n = cfg.au.num_aus();
    let fixed = match args.au {
        Some(id) => Some(
            cfg.au
                .index_of(id)
                .ok_or_else(|| CliError::Usage(format!("AU{id} is not in the config")))?,
        ),
        None => None,
    };
    let provider = flow_provider();
    let data = ManifestDataset::new(read_records(&args.labeled)?, &cfg, Some(&provider));
    let samples = prepared(&model, &data, |s| s.landmarks.is_some(), args.count)?;
    if samples.is_empty() {
        return Err(CliError::Usage("no frame in the manifest has landmarks".into()).into());
    }
    let masked: Vec<Sample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| mask_au(s, &cfg.au, fixed.unwrap_or(i % n)))
        .collect::<rtatl_core::Result<_>>()?;
    let batch = Batch::new(&masked, &cfg, model.device(), model.dtype())?;
    let out = model.forward(&batch.images, &batch.boxes, Mode::Eval)?;
    let s = cfg.au.patch_size;
    let mut rows = vec![Vec::new(), Vec::new(), Vec::new()];
    for (b, m) in masked.iter().enumerate() {
        let d = m.mask.as_ref().context("mask missing")?;
        let tokens = out.attended.tokens.i(b)?.narrow(0, 2 * d.au_index, 2)?;
        let patches = model.generate(&tokens)?;
        let mut recovered = m.image.clone();
        for (k, bx) in d.boxes.iter().enumerate() {
            let chw: Vec<f32> = patches.i(k)?.flatten_all()?.to_vec1()?;
            recovered.paste(&Image::from_chw(s, s, &chw)?, bx.x0, bx.y0)?;
        }
        rows[0].push(m.image.clone());
        rows[1].push(m.intact_image());
        rows[2].push(recovered);
    }
    create_out_dir(&args.out)?;
    let path = args.out.join("inpaint.png");
    grid(&rows)?.save(&path)?;
    RunManifest::new("viz-inpaint", argv, args.model.config.as_deref(), &cfg, &args.out).save(&args.out)?;
    info!("rows: masked, original, recovered: {}", path.display());
    Ok(())
}

pub fn relations(args: RelationArgs, argv: &[String]) -> Result<()> {
    if args.cell == 0 {
        return Err(CliError::Usage("--cell must be positive".into()).into());
    }
    let model = load_model(&args.model)?;
    let cfg = model.config().clone();
    let sim = model.relation.indicator_similarity()?;
    create_out_dir(&args.out)?;
    let path = args.out.join("relations.png");
    relation_heatmap(&sim, args.cell).save(&path)?;
    let mut csv = String::from("au");
    for au in &cfg.au.au_ids {
        let _ = write!(csv, ",{au}");
    }
    csv.push('\n');
    for (au, row) in cfg.au.au_ids.iter().zip(&sim) {
        let _ = write!(csv, "{au}");
        for v in row {
            let _ = write!(csv, ",{v:.6}");
        }
        csv.push('\n');
    }
    std::fs::write(args.out.join("relations.csv"), csv)?;
    RunManifest::new("viz-relations", argv, args.model.config.as_deref(), &cfg, &args.out).save(&args.out)?;
    if args.model.checkpoint.is_none() {
        warn!("indicators are at their initial values");
    }
    info!("{}x{} similarity heatmap: {}", sim.len(), sim.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_gray_is_centered_on_zero() {
        let g = flow_gray(&[-2.0, 0.0, 1.0, 2.0]);
        assert_eq!(g, vec![0.0, 0.5, 0.75, 1.0]);
        assert_eq!(flow_gray(&[0.0, 0.0]), vec![0.5, 0.5]);
        // asymmetric ranges keep zero at mid-gray
        let g = flow_gray(&[0.5, 4.0]);
        assert!(g[0] > 0.5 && g[1] == 1.0);
    }

    #[test]
    fn heatmap_diagonal_is_brightest() {
        let sim = vec![vec![1.0, -0.2, 0.4], vec![-0.2, 1.0, 0.0], vec![0.4, 0.0, 1.0]];
        let img = relation_heatmap(&sim, 5);
        assert_eq!((img.width(), img.height()), (15, 15));
        let rgb = img.to_rgb8();
        for i in 0..3 {
            assert_eq!(rgb.get_pixel(5 * i as u32 + 2, 5 * i as u32 + 2).0, [255; 3]);
        }
        let max = rgb.pixels().map(|p| p.0[0]).max().unwrap();
        assert_eq!(max, 255);
        assert!(rgb.get_pixel(7, 2).0[0] < 255);
    }

    #[test]
    fn grid_layout() {
        let tile = Image::zeros(10, 8);
        let g = grid(&[vec![tile.clone(), tile.clone()], vec![tile.clone(), tile.clone()], vec![tile.clone(), tile]]).unwrap();
        assert_eq!(g.width(), 2 * 10 + 3 * GAP);
        assert_eq!(g.height(), 3 * 8 + 4 * GAP);
        assert_eq!(g.pixel(GAP, GAP), [0.0; 3]);
        assert_eq!(g.pixel(0, 0), BACKGROUND);
    }
}
