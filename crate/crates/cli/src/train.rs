use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use candle_core::{DType, Device};
use clap::Args;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtatl_core::dataset::{indices_for_subjects, ManifestDataset, SampleSource, Subset};
use rtatl_core::metrics::{make_folds, FoldResult};
use rtatl_core::sample::{augment, AugmentMode};
use rtatl_core::synth::{synth_dataset, SynthOptions};
use rtatl_core::Config;
use rtatl_model::checkpoint::{load_trunk, save_checkpoint};
use rtatl_model::train::{FitEvent, FitSummary};
use rtatl_model::{evaluate, Rtatl, Trainer};

use crate::run::{create_out_dir, flow_provider, read_records, resolve_config, CliError, RunManifest};

pub const FOLDS: usize = 3;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file or preset name.
    #[arg(long)]
    pub config: String,
    /// Manifest CSV of labeled frames.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    /// Manifest CSV of unlabeled frames.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train on the training subjects of this subject-independent fold and
    /// evaluate on its test subjects.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Validate the config and run one step on a synthetic batch.
    #[arg(long)]
    pub dry_run: bool,
}

pub fn run(args: TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    if args.dry_run {
        return dry_run(&cfg);
    }
    let labeled_path = args
        .labeled
        .as_ref()
        .ok_or_else(|| CliError::Usage("--labeled is required unless --dry-run is given".into()))?;
    let labeled_records = read_records(labeled_path)?;
    let unlabeled_records = args.unlabeled.as_ref().map(|p| read_records(p)).transpose()?;
    create_out_dir(&args.out)?;
    let manifest = RunManifest::new("train", argv, Some(&args.config), &cfg, &args.out);
    manifest.save(&args.out)?;
    std::fs::write(args.out.join("config.cfg"), cfg.serialize())?;

    let provider = flow_provider();
    let labeled = ManifestDataset::new(labeled_records, &cfg, Some(&provider));
    let unlabeled = unlabeled_records.map(|r| ManifestDataset::new(r, &cfg, Some(&provider)));

    let subjects = subjects_of(&labeled);
    let (train_subjects, test_subjects) = match args.fold {
        Some(f) => {
            let folds = make_folds(&subjects, FOLDS, cfg.train.seed)?;
            let split = folds
                .get(f)
                .ok_or_else(|| CliError::Usage(format!("fold {f} out of range 0..{FOLDS}")))?;
            (split.train.clone(), split.test.clone())
        }
        None => (subjects, Vec::new()),
    };
    let (fit_subjects, val_subjects) = validation_split(&train_subjects, cfg.train.val_fraction, cfg.train.seed);
    info!(
        "{} training subjects ({} held out for validation), {} test subjects",
        train_subjects.len(),
        val_subjects.len(),
        test_subjects.len()
    );
    let train_set = Subset {
        indices: indices_for_subjects(&labeled, &fit_subjects),
        source: &labeled,
    };
    let val_set = Subset {
        indices: indices_for_subjects(&labeled, &val_subjects),
        source: &labeled,
    };

    let model = Rtatl::new(&cfg, DType::F32, &Device::Cpu, cfg.train.seed)?;
    if let Some(init) = &cfg.train.trunk_init {
        let n = load_trunk(&model, init).with_context(|| format!("loading trunk weights {init}"))?;
        info!("initialized {n} trunk tensors from {init}");
    }
    let mut trainer = Trainer::new(model)?;
    let summary = fit(&mut trainer, &cfg, &train_set, unlabeled.as_ref(), &val_set, &args.out)?;
    info!(
        "{} epochs, {} steps, best validation F1 {:?} at epoch {:?}",
        summary.epochs_run, summary.steps, summary.best_val_f1, summary.best_epoch
    );
    let model = trainer.into_model();
    let ck = args.out.join("model.safetensors");
    save_checkpoint(&model, &ck)?;
    info!("checkpoint written to {}", ck.display());

    if let Some(f) = args.fold {
        let test_set = Subset {
            indices: indices_for_subjects(&labeled, &test_subjects),
            source: &labeled,
        };
        let ev = evaluate(&model, &test_set, cfg.train.batch_size)?;
        let result = FoldResult {
            fold_index: f,
            per_au_f1: ev.scores.per_au.clone(),
            avg_f1: ev.scores.avg,
            train_subjects,
            test_subjects,
        };
        std::fs::write(args.out.join("fold.json"), serde_json::to_string_pretty(&result)?)?;
        crate::eval::write_csv(&args.out.join("fold_f1.csv"), &cfg, &ev.scores)?;
        println!("{}", crate::eval::text_table(&cfg, &ev.scores));
    }
    Ok(())
}

fn fit(
    trainer: &mut Trainer,
    cfg: &Config,
    train_set: &dyn SampleSource,
    unlabeled: Option<&ManifestDataset<'_>>,
    val_set: &dyn SampleSource,
    out: &std::path::Path,
) -> Result<FitSummary> {
    let mut steps = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(steps, "{}", rtatl_model::LossReport::CSV_HEADER)?;
    let mut epochs = BufWriter::new(File::create(out.join("epochs.csv"))?);
    let au_cols: Vec<String> = cfg.au.au_ids.iter().map(|a| format!("au{a}")).collect();
    writeln!(epochs, "epoch,val_avg_f1,{}", au_cols.join(","))?;
    let mut io_error = None;
    let mut observer = |ev: FitEvent<'_>| {
        let r = match ev {
            FitEvent::Step(r) => {
                if r.step % 10 == 0 {
                    info!("step {} total {:.4} sup {:.4} g {:.4} f {:.4}", r.step, r.total, r.l_sup, r.l_g, r.l_f);
                }
                writeln!(steps, "{}", r.csv_row())
            }
            FitEvent::Epoch { epoch, validation } => {
                let (avg, per) = match validation {
                    Some(s) => (
                        format!("{:.6}", s.avg),
                        s.per_au.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>(),
                    ),
                    None => (String::new(), vec![String::new(); au_cols.len()]),
                };
                info!("epoch {epoch} validation F1 {avg}");
                writeln!(epochs, "{epoch},{avg},{}", per.join(","))
            }
        };
        if let Err(e) = r {
            io_error.get_or_insert(e);
        }
    };
    let unl: Option<&dyn SampleSource> = unlabeled.map(|u| u as &dyn SampleSource);
    let val: Option<&dyn SampleSource> = (!val_set.is_empty()).then_some(val_set);
    let summary = trainer.fit(train_set, unl, val, &mut observer)?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    steps.flush()?;
    epochs.flush()?;
    Ok(summary)
}

fn subjects_of(source: &dyn SampleSource) -> Vec<String> {
    let mut s: Vec<String> = (0..source.len()).map(|i| source.subject(i).to_string()).collect();
    s.sort();
    s.dedup();
    s
}

/// Holds out `fraction` of the subjects (at least one when there are two or more).
fn validation_split(subjects: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut shuffled = subjects.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a1));
    let n_val = if fraction <= 0.0 || subjects.len() < 2 {
        0
    } else {
        ((fraction * subjects.len() as f64).round() as usize).clamp(1, subjects.len() - 1)
    };
    let val = shuffled.split_off(subjects.len() - n_val);
    (shuffled, val)
}

fn dry_run(cfg: &Config) -> Result<()> {
    let mut synth_cfg = cfg.clone();
    synth_cfg.hyper.aligned_size = cfg.hyper.aligned_size.max(cfg.hyper.input_size);
    let frames = cfg.hyper.flow_step + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut prep = |opts: SynthOptions| -> Result<Vec<_>> {
        synth_dataset(&opts, &synth_cfg)
            .iter()
            .take(2)
            .map(|s| Ok(augment(s, cfg.hyper.input_size, AugmentMode::Train, &mut rng)?))
            .collect()
    };
    let lab = prep(SynthOptions::labeled(cfg.train.seed, 1, frames))?;
    let unl = prep(SynthOptions::unlabeled(cfg.train.seed, 1, frames))?;
    let model = Rtatl::new(cfg, DType::F32, &Device::Cpu, cfg.train.seed)?;
    let mut trainer = Trainer::new(model)?;
    let r = trainer.train_step(&lab, &unl)?;
    println!("config ok ({} AUs, hash {})", cfg.au.num_aus(), cfg.architecture_hash());
    println!("{}", rtatl_model::LossReport::CSV_HEADER);
    println!("{}", r.csv_row());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let subjects: Vec<String> = (0..10).map(|i| format!("S{i}")).collect();
        let (a, b) = validation_split(&subjects, 0.2, 4);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert!(b.iter().all(|s| !a.contains(s)));
        assert_eq!(validation_split(&subjects, 0.2, 4), (a, b));
        let (a, b) = validation_split(&subjects[..2], 0.1, 0);
        assert_eq!((a.len(), b.len()), (1, 1));
        let (a, b) = validation_split(&subjects[..1], 0.5, 0);
        assert_eq!((a.len(), b.len()), (1, 0));
        assert_eq!(validation_split(&subjects, 0.0, 0).1.len(), 0);
    }
}
