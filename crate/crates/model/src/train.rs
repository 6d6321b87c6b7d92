//! Joint training step, evaluation and the epoch loop.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtatl_core::dataset::SampleSource;
use rtatl_core::metrics::{binarize, f1_scores, F1Scores};
use rtatl_core::sample::{apply_roi_mask, augment, AugmentMode};
use rtatl_core::Sample;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Rtatl};
use crate::nn::Mode;
use crate::ofe::flow_loss;
use crate::roii::{discriminator_phase, generator_phase, pseudo_label, RoiiLosses};
use crate::roii::binary_cross_entropy;

/// Mean binary cross-entropy over the entries where `include` is one.
/// Excluded entries get exactly zero gradient.
pub fn supervised_loss(probs: &Tensor, labels: &Tensor, include: &Tensor) -> Result<Tensor> {
    if probs.dims() != labels.dims() || probs.dims() != include.dims() {
        return Err(Error::Shape(format!(
            "probs {:?}, labels {:?}, include {:?}",
            probs.dims(),
            labels.dims(),
            include.dims()
        )));
    }
    let count = include.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        warn!("every AU excluded from supervision in this batch");
        return Ok(Tensor::zeros((), probs.dtype(), probs.device())?);
    }
    let bce = binary_cross_entropy(probs, labels)?;
    Ok((bce.mul(include)?.sum_all()? / count)?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l_sup: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_f: f64,
    pub total: f64,
    pub roii: RoiiLosses,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_masked: usize,
    pub n_flow: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_sup,l_d,l_g,l_f,total,l_adv,l_adv_g,l_rec,l_c,l_c_g";

    /// `l_sup + l_d + l_g + λ_f·l_f`
    pub fn compose_total(&self, lambda_f: f64) -> f64 {
        self.l_sup + self.l_d + self.l_g + lambda_f * self.l_f
    }

    pub fn csv_row(&self) -> String {
        let r = &self.roii;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step, self.l_sup, self.l_d, self.l_g, self.l_f, self.total, r.l_adv, r.l_adv_g, r.l_rec, r.l_c, r.l_c_g
        )
    }

    pub fn is_finite(&self) -> bool {
        let r = &self.roii;
        [self.l_sup, self.l_d, self.l_g, self.l_f, self.total, r.l_adv, r.l_adv_g, r.l_rec, r.l_c, r.l_c_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_finite(step: usize, what: &str, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let snapshot = values
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    Err(Error::NonFinite {
        step,
        snapshot: format!("{what}: {snapshot}"),
    })
}

/// Patch pairs of every masked RoI in a batch.
struct PatchPairs {
    tokens: Tensor,
    reals: Tensor,
    y_hat: Vec<u8>,
}

fn gather_pairs(batch: &Batch, out: &ForwardOutput, pseudo: &[u8]) -> Result<Option<PatchPairs>> {
    if batch.masked.is_empty() {
        return Ok(None);
    }
    let (b, t, d) = out.attended.tokens.dims3()?;
    let flat = out.attended.tokens.reshape((b * t, d))?;
    let mut idx = Vec::with_capacity(2 * batch.masked.len());
    let mut reals = Vec::with_capacity(batch.masked.len());
    let mut y_hat = Vec::with_capacity(2 * batch.masked.len());
    for (k, m) in batch.masked.iter().enumerate() {
        idx.push((m.sample * t + 2 * m.au) as u32);
        idx.push((m.sample * t + 2 * m.au + 1) as u32);
        reals.push(m.patches.clone());
        let y = match &batch.labels[m.sample] {
            Some(l) => l[m.au],
            None => pseudo[k],
        };
        y_hat.extend([y, y]);
    }
    let idx = Tensor::new(idx.as_slice(), flat.device())?;
    Ok(Some(PatchPairs {
        tokens: flat.index_select(&idx, 0)?,
        reals: Tensor::cat(&reals, 0)?,
        y_hat,
    }))
}

pub struct Trainer {
    model: Rtatl,
    main_opt: AdamW,
    disc_opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Rtatl) -> Result<Self> {
        let lr = model.config().hyper.lr;
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        let seed = model.config().train.seed;
        Ok(Trainer {
            main_opt: AdamW::new(model.main_vars(), params.clone())?,
            disc_opt: AdamW::new(model.disc_vars(), params)?,
            model,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
            step: 0,
        })
    }

    pub fn model(&self) -> &Rtatl {
        &self.model
    }

    pub fn into_model(self) -> Rtatl {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn mask_some(&mut self, samples: &[Sample]) -> Result<Vec<Sample>> {
        let mut out = samples.to_vec();
        let cfg = self.model.config();
        if !cfg.train.roii || out.is_empty() {
            return Ok(out);
        }
        let k = ((cfg.train.mask_fraction * out.len() as f64).round() as usize).min(out.len());
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.shuffle(&mut self.rng);
        for &i in &order[..k] {
            out[i] = apply_roi_mask(&out[i], &cfg.au, &mut self.rng)?;
        }
        Ok(out)
    }

    /// One joint update on already augmented sub-batches: the D/C phase on
    /// patch pairs first, then the main phase on `L_Sup + L_G + λ_f·L_F`.
    pub fn train_step(&mut self, labeled: &[Sample], unlabeled: &[Sample]) -> Result<LossReport> {
        self.train_step_observed(labeled, unlabeled, &mut |_, _| {})
    }

    /// Like [`Trainer::train_step`], calling `hook` at each phase boundary.
    pub fn train_step_observed(
        &mut self,
        labeled: &[Sample],
        unlabeled: &[Sample],
        hook: &mut dyn FnMut(StepPhase, &Rtatl),
    ) -> Result<LossReport> {
        let step = self.step;
        self.step += 1;
        let labeled = self.mask_some(labeled)?;
        let unlabeled = self.mask_some(unlabeled)?;
        let model = &self.model;
        let cfg = model.config().clone();
        let (dev, dtype) = (model.device().clone(), model.dtype());
        let hp = &cfg.hyper;

        let lb = (!labeled.is_empty()).then(|| Batch::new(&labeled, &cfg, &dev, dtype)).transpose()?;
        let ub = (!unlabeled.is_empty()).then(|| Batch::new(&unlabeled, &cfg, &dev, dtype)).transpose()?;

        // pseudo labels from the intact unlabeled images, without gradient
        let pseudo: Vec<u8> = match &ub {
            Some(b) if !b.masked.is_empty() => {
                let probs = model
                    .forward(&b.intact, &b.boxes, Mode::TrainNoUpdate)?
                    .prediction
                    .probs_fused
                    .detach()
                    .to_dtype(DType::F64)?
                    .to_vec2::<f64>()?;
                b.masked
                    .iter()
                    .map(|m| pseudo_label(probs[m.sample][m.au], hp.pseudo_threshold))
                    .collect()
            }
            _ => Vec::new(),
        };

        hook(StepPhase::Start, model);
        let lout = lb.as_ref().map(|b| model.forward(&b.images, &b.boxes, Mode::Train)).transpose()?;
        let uout = ub.as_ref().map(|b| model.forward(&b.images, &b.boxes, Mode::Train)).transpose()?;

        let mut report = LossReport {
            step,
            n_labeled: labeled.len(),
            n_unlabeled: unlabeled.len(),
            ..Default::default()
        };
        let mut main_terms: Vec<Tensor> = Vec::new();

        if let (Some(b), Some(o)) = (&lb, &lout) {
            let l_sup = supervised_loss(&o.prediction.probs_fused, &b.label_tensor, &b.include)?;
            report.l_sup = value(&l_sup)?;
            main_terms.push(l_sup);
        }

        if cfg.train.roii {
            let mut pairs = Vec::new();
            if let (Some(b), Some(o)) = (&lb, &lout) {
                pairs.extend(gather_pairs(b, o, &[])?);
            }
            if let (Some(b), Some(o)) = (&ub, &uout) {
                pairs.extend(gather_pairs(b, o, &pseudo)?);
            }
            if !pairs.is_empty() {
                let tokens = Tensor::cat(&pairs.iter().map(|p| p.tokens.clone()).collect::<Vec<_>>(), 0)?;
                let reals = Tensor::cat(&pairs.iter().map(|p| p.reals.clone()).collect::<Vec<_>>(), 0)?;
                let y_hat: Vec<u8> = pairs.iter().flat_map(|p| p.y_hat.iter().copied()).collect();
                report.n_masked = y_hat.len() / 2;
                let fakes = model.generate(&tokens)?;

                let disc = discriminator_phase(model.discriminator(), model.classifier(), &reals, &fakes, &y_hat)?;
                report.roii.l_adv = value(&disc.l_adv)?;
                report.roii.l_c = value(&disc.l_c)?;
                report.roii.l_d = -report.roii.l_adv;
                ensure_finite(step, "discriminator phase", &[("l_adv", report.roii.l_adv), ("l_c", report.roii.l_c)])?;
                self.disc_opt.backward_step(&disc.disc_objective)?;
                hook(StepPhase::AfterDiscriminator, model);

                let gen = generator_phase(
                    model.discriminator(),
                    model.classifier(),
                    &reals,
                    &fakes,
                    &y_hat,
                    hp.lambda1,
                    hp.lambda2,
                )?;
                report.roii.l_adv_g = value(&gen.l_adv_g)?;
                report.roii.l_rec = value(&gen.l_rec)?;
                report.roii.l_c_g = value(&gen.l_c_g)?;
                report.roii.l_g = value(&gen.l_g)?;
                main_terms.push(gen.l_g);
            }
        }
        report.l_d = report.roii.l_d;
        report.l_g = report.roii.l_g;

        if cfg.train.ofe {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut valid = Vec::new();
            for (b, o) in [(&lb, &lout), (&ub, &uout)] {
                if let (Some(b), Some(o)) = (b, o) {
                    if b.flow_valid.iter().any(|&v| v) {
                        preds.push(model.predict_flow(o.bundle.global_maps())?);
                        targets.push(b.flow_target.clone());
                        valid.extend_from_slice(&b.flow_valid);
                    }
                }
            }
            if !preds.is_empty() {
                let l_f = flow_loss(&Tensor::cat(&preds, 0)?, &Tensor::cat(&targets, 0)?, &valid)?;
                report.n_flow = valid.iter().filter(|&&v| v).count();
                report.l_f = value(&l_f)?;
                main_terms.push((l_f * hp.lambda_f)?);
            }
        }

        report.total = report.compose_total(hp.lambda_f);
        ensure_finite(
            step,
            "main phase",
            &[
                ("l_sup", report.l_sup),
                ("l_g", report.l_g),
                ("l_f", report.l_f),
                ("total", report.total),
            ],
        )?;
        if let Some(first) = main_terms.first() {
            let mut objective = first.clone();
            for t in &main_terms[1..] {
                objective = (objective + t)?;
            }
            self.main_opt.backward_step(&objective)?;
        }
        hook(StepPhase::AfterMain, model);
        Ok(report)
    }

    fn load_batch(&mut self, source: &dyn SampleSource, indices: &[usize]) -> Result<Vec<Sample>> {
        let size = self.model.config().hyper.input_size;
        indices
            .iter()
            .map(|&i| Ok(augment(&source.load(i)?, size, AugmentMode::Train, &mut self.rng)?))
            .collect()
    }

    /// Epoch loop with early stopping on validation average F1. The best
    /// weights seen are restored at the end.
    pub fn fit(
        &mut self,
        labeled: &dyn SampleSource,
        unlabeled: Option<&dyn SampleSource>,
        validation: Option<&dyn SampleSource>,
        observer: &mut dyn FnMut(FitEvent<'_>),
    ) -> Result<FitSummary> {
        let tp = self.model.config().train.clone();
        if labeled.is_empty() {
            return Err(Error::Shape("no labeled samples".into()));
        }
        let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
        let mut stale = 0;
        let mut unl_order: Vec<usize> = Vec::new();
        let mut unl_pos = 0;
        let mut epochs_run = 0;
        for epoch in 0..tp.epochs {
            epochs_run += 1;
            let mut order: Vec<usize> = (0..labeled.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(tp.batch_size.max(1)) {
                let lab = self.load_batch(labeled, chunk)?;
                let unl = match unlabeled {
                    Some(u) if !u.is_empty() => {
                        let mut idx = Vec::with_capacity(chunk.len());
                        while idx.len() < chunk.len() {
                            if unl_pos >= unl_order.len() {
                                unl_order = (0..u.len()).collect();
                                unl_order.shuffle(&mut self.rng);
                                unl_pos = 0;
                            }
                            idx.push(unl_order[unl_pos]);
                            unl_pos += 1;
                        }
                        self.load_batch(u, &idx)?
                    }
                    _ => Vec::new(),
                };
                let report = self.train_step(&lab, &unl)?;
                observer(FitEvent::Step(&report));
            }
            let val = validation
                .filter(|v| !v.is_empty())
                .map(|v| evaluate(&self.model, v, tp.batch_size))
                .transpose()?;
            observer(FitEvent::Epoch {
                epoch,
                validation: val.as_ref().map(|e| &e.scores),
            });
            if let Some(ev) = val {
                let score = ev.scores.avg;
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    best = Some((score, epoch, self.model.state()?));
                    stale = 0;
                } else {
                    stale += 1;
                    if tp.patience > 0 && stale >= tp.patience {
                        info!("early stop after epoch {epoch}: no improvement for {stale} epochs");
                        break;
                    }
                }
            }
        }
        let (best_f1, best_epoch) = match best {
            Some((f, e, state)) => {
                let state: HashMap<String, Tensor> = state.into_iter().collect();
                self.model.load_state(&state, true)?;
                (Some(f), Some(e))
            }
            None => (None, None),
        };
        Ok(FitSummary {
            epochs_run,
            steps: self.step,
            best_val_f1: best_f1,
            best_epoch,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Start,
    /// Only reached when the batch has masked RoIs.
    AfterDiscriminator,
    AfterMain,
}

pub enum FitEvent<'a> {
    Step(&'a LossReport),
    Epoch {
        epoch: usize,
        validation: Option<&'a F1Scores>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub best_val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scores: F1Scores,
    pub probabilities: Vec<Vec<f32>>,
    pub predictions: Vec<Vec<u8>>,
    pub labels: Vec<Vec<u8>>,
}

/// Center-cropped intact images through the inference path, thresholded at 0.5.
pub fn evaluate(model: &Rtatl, source: &dyn SampleSource, batch_size: usize) -> Result<Evaluation> {
    let cfg = model.config();
    let size = cfg.hyper.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probabilities = Vec::new();
    let mut labels = Vec::new();
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut samples = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let mut s = source.load(i)?;
            if !s.is_labeled {
                continue;
            }
            if s.mask.is_some() {
                s.image = s.intact_image();
                s.mask = None;
            }
            samples.push(augment(&s, size, AugmentMode::Test, &mut rng)?);
        }
        if samples.is_empty() {
            continue;
        }
        let batch = Batch::new(&samples, cfg, model.device(), model.dtype())?;
        let pred = model.infer(&batch.images, &batch.boxes)?;
        probabilities.extend(pred.fused_rows()?);
        labels.extend(samples.into_iter().map(|s| s.labels.expect("labeled")));
    }
    if labels.is_empty() {
        return Err(Error::Label("evaluation set has no labeled samples".into()));
    }
    let predictions: Vec<Vec<u8>> = probabilities.iter().map(|p| binarize(p, 0.5)).collect();
    let scores = f1_scores(&predictions, &labels)?;
    Ok(Evaluation {
        scores,
        probabilities,
        predictions,
        labels,
    })
}
