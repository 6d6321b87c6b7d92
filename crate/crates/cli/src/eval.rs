use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::{DType, Device};
use clap::Args;
use rtatl_core::dataset::{indices_for_subjects, ManifestDataset, SampleSource, Subset};
use rtatl_core::metrics::{make_folds, F1Scores};
use rtatl_core::Config;
use rtatl_model::checkpoint::{checkpoint_config, load_checkpoint};
use rtatl_model::evaluate;
use serde::Serialize;

use crate::run::{check_hash, create_out_dir, flow_provider, read_records, resolve_config, resolve_input, CliError, RunManifest};
use crate::train::FOLDS;

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest CSV of labeled test frames.
    #[arg(long)]
    pub labeled: PathBuf,
    /// Config the checkpoint must match; refused on a hash mismatch.
    #[arg(long)]
    pub config: Option<String>,
    /// Evaluate only the test subjects of this fold.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Fold seed; defaults to the seed stored in the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print JSON instead of the text table.
    #[arg(long)]
    pub json: bool,
    /// Directory for eval.csv, eval.json and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuScore {
    pub au: u32,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub fold: Option<usize>,
    pub test_subjects: Vec<String>,
    pub samples: usize,
    pub per_au: Vec<AuScore>,
    pub avg_f1: f64,
}

pub fn run(args: EvalArgs, argv: &[String]) -> Result<()> {
    let ck = resolve_input(&args.checkpoint)?;
    if let Some(spec) = &args.config {
        check_hash(&resolve_config(spec)?, &ck)?;
    }
    let mut cfg = checkpoint_config(&ck)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let model = load_checkpoint(&ck, DType::F32, &Device::Cpu).with_context(|| format!("loading {}", ck.display()))?;
    let records = read_records(&args.labeled)?;
    let provider = flow_provider();
    let data = ManifestDataset::new(records, &cfg, Some(&provider));
    let mut subjects: Vec<String> = (0..data.len()).map(|i| data.subject(i).to_string()).collect();
    subjects.sort();
    subjects.dedup();
    let test_subjects = match args.fold {
        Some(f) => make_folds(&subjects, FOLDS, cfg.train.seed)?
            .get(f)
            .ok_or_else(|| CliError::Usage(format!("fold {f} out of range 0..{FOLDS}")))?
            .test
            .clone(),
        None => subjects,
    };
    let set = Subset {
        indices: indices_for_subjects(&data, &test_subjects),
        source: &data,
    };
    let ev = evaluate(&model, &set, cfg.train.batch_size)?;
    let report = EvalReport {
        checkpoint: ck.display().to_string(),
        fold: args.fold,
        test_subjects,
        samples: ev.labels.len(),
        per_au: cfg
            .au
            .au_ids
            .iter()
            .zip(&ev.scores.per_au)
            .map(|(&au, &f1)| AuScore { au, f1 })
            .collect(),
        avg_f1: ev.scores.avg,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{}", text_table(&cfg, &ev.scores));
    }
    if let Some(out) = &args.out {
        create_out_dir(out)?;
        write_csv(&out.join("eval.csv"), &cfg, &ev.scores)?;
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
        RunManifest::new("eval", argv, args.config.as_deref(), &cfg, out).save(out)?;
    }
    Ok(())
}

/// One row per AU plus an `Avg` row, F1 in percent.
pub fn text_table(cfg: &Config, scores: &F1Scores) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {:>6}", "AU", "F1");
    for (au, f1) in cfg.au.au_ids.iter().zip(&scores.per_au) {
        let _ = writeln!(s, "{:<6} {:>6.1}", au, 100.0 * f1);
    }
    let _ = write!(s, "{:<6} {:>6.1}", "Avg", 100.0 * scores.avg);
    s
}

pub fn write_csv(path: &Path, cfg: &Config, scores: &F1Scores) -> Result<()> {
    let mut s = String::from("au,f1\n");
    for (au, f1) in cfg.au.au_ids.iter().zip(&scores.per_au) {
        let _ = writeln!(s, "{au},{f1:.6}");
    }
    let _ = writeln!(s, "Avg,{:.6}", scores.avg);
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
