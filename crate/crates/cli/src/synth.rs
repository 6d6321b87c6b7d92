use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use log::info;
use rtatl_core::dataset::export_samples;
use rtatl_core::synth::{synth_dataset, SynthOptions};

use crate::run::{create_out_dir, resolve_config, RunManifest};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Config file or preset name; sets the AU list and image size.
    #[arg(long, default_value = "synthetic")]
    pub config: String,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub unlabeled_subjects: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Writes `labeled/manifest.csv` and, when requested, `unlabeled/manifest.csv`.
pub fn run(args: SynthArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve_config(&args.config)?;
    cfg.train.seed = args.seed;
    create_out_dir(&args.out)?;
    let lab = synth_dataset(&SynthOptions::labeled(args.seed, args.subjects, args.frames), &cfg);
    let m = export_samples(&lab, &args.out.join("labeled"), "manifest.csv")?;
    info!("{} labeled frames, manifest {}", lab.len(), m.display());
    if args.unlabeled_subjects > 0 {
        let unl = synth_dataset(
            &SynthOptions::unlabeled(args.seed ^ 0xfeed, args.unlabeled_subjects, args.frames),
            &cfg,
        );
        let m = export_samples(&unl, &args.out.join("unlabeled"), "manifest.csv")?;
        info!("{} unlabeled frames, manifest {}", unl.len(), m.display());
    }
    RunManifest::new("synth", argv, Some(&args.config), &cfg, &args.out).save(&args.out)?;
    Ok(())
}
