//! Dataset, AU inventory, RoI geometry and hyperparameter configuration.
//!
//! Config files are TOML key-value documents. Hyperparameters live at the top
//! level, RoI rules are an array of `[[roi]]` tables, and the optional
//! `[model]` and `[train]` tables override architecture widths and training
//! schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Datasets whose AU inventories are fixed.
const KNOWN_DATASETS: &[(&str, Option<usize>)] =
    &[("bp4d", Some(12)), ("disfa", Some(8)), ("synthetic", None)];

pub const BP4D_CFG: &str = include_str!("../../../configs/bp4d.cfg");
pub const DISFA_CFG: &str = include_str!("../../../configs/disfa.cfg");
pub const SYNTHETIC_CFG: &str = include_str!("../../../configs/synthetic.cfg");

/// One RoI center: a landmark plus an offset in half inter-ocular units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, f64, f64)", into = "(usize, f64, f64)")]
pub struct CenterRule {
    pub landmark: usize,
    pub dx: f64,
    pub dy: f64,
}

impl From<(usize, f64, f64)> for CenterRule {
    fn from((landmark, dx, dy): (usize, f64, f64)) -> Self {
        CenterRule { landmark, dx, dy }
    }
}

impl From<CenterRule> for (usize, f64, f64) {
    fn from(r: CenterRule) -> Self {
        (r.landmark, r.dx, r.dy)
    }
}

/// Left/right center rules of one AU. Left is image-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiRule {
    pub left: CenterRule,
    pub right: CenterRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuSpec {
    pub dataset_name: String,
    pub au_ids: Vec<u32>,
    /// Indexed like `au_ids`.
    pub roi_rules: Vec<RoiRule>,
    pub patch_size: usize,
    pub positive_intensity_threshold: Option<u8>,
}

impl AuSpec {
    pub fn num_aus(&self) -> usize {
        self.au_ids.len()
    }

    pub fn index_of(&self, au: u32) -> Option<usize> {
        self.au_ids.iter().position(|&a| a == au)
    }

    /// Largest landmark index referenced by any rule.
    pub fn max_landmark(&self) -> usize {
        self.roi_rules
            .iter()
            .flat_map(|r| [r.left.landmark, r.right.landmark])
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub d: usize,
    pub heads: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_f: f64,
    pub lr: f64,
    pub input_size: usize,
    pub aligned_size: usize,
    pub flow_step: usize,
    pub pseudo_threshold: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            d: 128,
            heads: 8,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda_f: 0.2,
            lr: 0.0003,
            input_size: 192,
            aligned_size: 200,
            flow_step: 3,
            pseudo_threshold: 0.5,
        }
    }
}

/// Channel widths of every learned module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Output widths of the four residual stages.
    pub trunk_widths: [usize; 4],
    pub fused_channels: usize,
    /// Width of the first convolution in each per-AU branch.
    pub branch_hidden: usize,
    /// Side of the bilinear RoI crop grid.
    pub roi_cells: usize,
    /// Transposed-convolution widths of the patch generator, seed side first.
    pub generator_widths: [usize; 4],
    /// Convolution widths shared by the discriminator and the AU classifier.
    pub critic_widths: [usize; 4],
    pub ofe_hidden: usize,
    /// Feed-forward inner width as a multiple of `d`.
    pub ffn_mult: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            trunk_widths: [64, 128, 256, 512],
            fused_channels: 128,
            branch_hidden: 256,
            roi_cells: 6,
            generator_widths: [1024, 512, 256, 128],
            critic_widths: [128, 256, 512, 1024],
            ofe_hidden: 256,
            ffn_mult: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    /// Size of each of the labeled and unlabeled sub-batches.
    pub batch_size: usize,
    pub mask_fraction: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub roii: bool,
    pub ofe: bool,
    /// Optional safetensors file with trunk weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trunk_init: Option<String>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            batch_size: 8,
            mask_fraction: 0.5,
            epochs: 20,
            patience: 3,
            val_fraction: 0.1,
            seed: 0,
            roii: true,
            ofe: true,
            trunk_init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub au: AuSpec,
    pub hyper: HyperParams,
    pub model: ModelDims,
    pub train: TrainParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoiEntry {
    au: u32,
    left: CenterRule,
    right: CenterRule,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset_name: Option<String>,
    au_ids: Option<Vec<u32>>,
    patch_size: Option<usize>,
    positive_intensity_threshold: Option<u8>,
    d: Option<usize>,
    heads: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    lambda_f: Option<f64>,
    lr: Option<f64>,
    input_size: Option<usize>,
    aligned_size: Option<usize>,
    flow_step: Option<usize>,
    pseudo_threshold: Option<f64>,
    model: Option<ModelDims>,
    train: Option<TrainParams>,
    roi: Option<Vec<RoiEntry>>,
}

#[derive(Serialize)]
struct FileConfig<'a> {
    dataset_name: &'a str,
    au_ids: &'a [u32],
    patch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    positive_intensity_threshold: Option<u8>,
    d: usize,
    heads: usize,
    lambda1: f64,
    lambda2: f64,
    lambda_f: f64,
    lr: f64,
    input_size: usize,
    aligned_size: usize,
    flow_step: usize,
    pseudo_threshold: f64,
    model: &'a ModelDims,
    train: &'a TrainParams,
    roi: Vec<RoiEntry>,
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(key, "missing required key"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // serde reports unknown and malformed keys inside the message
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".to_string());
            Error::config(key, msg)
        })?;

        let dataset_name = required(raw.dataset_name, "dataset_name")?;
        let au_ids = required(raw.au_ids, "au_ids")?;
        let roi = required(raw.roi, "roi")?;
        let mut roi_rules = Vec::with_capacity(au_ids.len());
        for &au in &au_ids {
            let mut matching = roi.iter().filter(|r| r.au == au);
            let entry = matching
                .next()
                .ok_or_else(|| Error::config("roi", format!("no rule for AU{au}")))?;
            if matching.next().is_some() {
                return Err(Error::config("roi", format!("duplicate rule for AU{au}")));
            }
            roi_rules.push(RoiRule {
                left: entry.left,
                right: entry.right,
            });
        }
        if let Some(extra) = roi.iter().find(|r| !au_ids.contains(&r.au)) {
            return Err(Error::config(
                "roi",
                format!("rule for AU{} which is not in au_ids", extra.au),
            ));
        }

        let au = AuSpec {
            dataset_name,
            au_ids,
            roi_rules,
            patch_size: required(raw.patch_size, "patch_size")?,
            positive_intensity_threshold: raw.positive_intensity_threshold,
        };
        let hyper = HyperParams {
            d: required(raw.d, "d")?,
            heads: required(raw.heads, "heads")?,
            lambda1: required(raw.lambda1, "lambda1")?,
            lambda2: required(raw.lambda2, "lambda2")?,
            lambda_f: required(raw.lambda_f, "lambda_f")?,
            lr: required(raw.lr, "lr")?,
            input_size: required(raw.input_size, "input_size")?,
            aligned_size: required(raw.aligned_size, "aligned_size")?,
            flow_step: required(raw.flow_step, "flow_step")?,
            pseudo_threshold: required(raw.pseudo_threshold, "pseudo_threshold")?,
        };
        let config = Config {
            au,
            hyper,
            model: raw.model.unwrap_or_default(),
            train: raw.train.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn serialize(&self) -> String {
        let file = FileConfig {
            dataset_name: &self.au.dataset_name,
            au_ids: &self.au.au_ids,
            patch_size: self.au.patch_size,
            positive_intensity_threshold: self.au.positive_intensity_threshold,
            d: self.hyper.d,
            heads: self.hyper.heads,
            lambda1: self.hyper.lambda1,
            lambda2: self.hyper.lambda2,
            lambda_f: self.hyper.lambda_f,
            lr: self.hyper.lr,
            input_size: self.hyper.input_size,
            aligned_size: self.hyper.aligned_size,
            flow_step: self.hyper.flow_step,
            pseudo_threshold: self.hyper.pseudo_threshold,
            model: &self.model,
            train: &self.train,
            roi: self
                .au
                .au_ids
                .iter()
                .zip(&self.au.roi_rules)
                .map(|(&au, r)| RoiEntry {
                    au,
                    left: r.left,
                    right: r.right,
                })
                .collect(),
        };
        toml::to_string(&file).expect("config is always representable as TOML")
    }

    pub fn preset(name: &str) -> Result<Config> {
        match name {
            "bp4d" => Config::parse(BP4D_CFG),
            "disfa" => Config::parse(DISFA_CFG),
            "synthetic" => Config::parse(SYNTHETIC_CFG),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    /// Hash of everything that shapes the parameter tensors.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.au.dataset_name.as_bytes());
        for au in &self.au.au_ids {
            h.update(au.to_le_bytes());
        }
        for v in [
            self.au.patch_size,
            self.hyper.d,
            self.hyper.heads,
            self.hyper.input_size,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(toml::to_string(&self.model).unwrap_or_default().as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let au = &self.au;
        let expected = KNOWN_DATASETS
            .iter()
            .find(|(name, _)| *name == au.dataset_name)
            .ok_or_else(|| Error::UnknownDataset(au.dataset_name.clone()))?
            .1;
        if au.au_ids.is_empty() {
            return Err(Error::config("au_ids", "empty AU list"));
        }
        if let Some(n) = expected {
            if au.num_aus() != n {
                return Err(Error::config(
                    "au_ids",
                    format!("{} expects {n} AUs, got {}", au.dataset_name, au.num_aus()),
                ));
            }
        }
        let mut sorted = au.au_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != au.au_ids.len() {
            return Err(Error::config("au_ids", "duplicate AU id"));
        }
        if au.roi_rules.len() != au.num_aus() {
            return Err(Error::config("roi", "one rule pair per AU required"));
        }
        for (id, rule) in au.au_ids.iter().zip(&au.roi_rules) {
            let (l, r) = (rule.left, rule.right);
            if l.dx != -r.dx || l.dy != r.dy {
                return Err(Error::config(
                    "roi",
                    format!("AU{id} rules are not mirror-symmetric"),
                ));
            }
            if ![l.dx, l.dy].iter().all(|v| v.is_finite()) {
                return Err(Error::config("roi", format!("AU{id} has non-finite offset")));
            }
        }
        if au.patch_size == 0 || au.patch_size % 2 != 0 {
            return Err(Error::config("patch_size", "must be positive and even"));
        }
        if let Some(t) = au.positive_intensity_threshold {
            if t > 5 {
                return Err(Error::config(
                    "positive_intensity_threshold",
                    "must lie in 0..=5",
                ));
            }
        }

        let hp = &self.hyper;
        if hp.d == 0 || hp.heads == 0 || hp.d % hp.heads != 0 {
            return Err(Error::config("heads", "d must be divisible by heads"));
        }
        for (key, w) in [
            ("lambda1", hp.lambda1),
            ("lambda2", hp.lambda2),
            ("lambda_f", hp.lambda_f),
        ] {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::config(key, "weight must lie in (0, 1]"));
            }
        }
        if !(hp.lr > 0.0 && hp.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(hp.pseudo_threshold > 0.0 && hp.pseudo_threshold < 1.0) {
            return Err(Error::config("pseudo_threshold", "must lie in (0, 1)"));
        }
        if hp.input_size == 0 || hp.input_size % 32 != 0 {
            return Err(Error::config("input_size", "must be a positive multiple of 32"));
        }
        if hp.input_size > hp.aligned_size {
            return Err(Error::config("input_size", "must not exceed aligned_size"));
        }
        if hp.flow_step == 0 {
            return Err(Error::config("flow_step", "must be at least 1"));
        }
        if au.patch_size > hp.input_size {
            return Err(Error::config("patch_size", "must not exceed input_size"));
        }

        let m = &self.model;
        if m.trunk_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("model.trunk_widths", "widths must be positive"));
        }
        if m.fused_channels == 0 || m.branch_hidden == 0 || m.ofe_hidden == 0 {
            return Err(Error::config("model", "widths must be positive"));
        }
        if m.roi_cells == 0 {
            return Err(Error::config("model.roi_cells", "must be positive"));
        }
        if m.ffn_mult == 0 {
            return Err(Error::config("model.ffn_mult", "must be positive"));
        }
        if m.generator_widths.iter().chain(&m.critic_widths).any(|&w| w == 0) {
            return Err(Error::config("model", "generator/critic widths must be positive"));
        }

        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&t.mask_fraction) {
            return Err(Error::config("train.mask_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::config("train.val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Config::parse(&text)
}

/// Maps an AU intensity (0..=5) to a binary label using the dataset threshold.
pub fn binarize_intensity(intensity: i32, spec: &AuSpec) -> Result<u8> {
    let threshold = spec.positive_intensity_threshold.ok_or_else(|| {
        Error::Domain(format!(
            "{} has no positive_intensity_threshold",
            spec.dataset_name
        ))
    })?;
    if !(0..=5).contains(&intensity) {
        return Err(Error::Domain(format!("intensity {intensity} outside 0..=5")));
    }
    Ok(u8::from(intensity > i32::from(threshold)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bp4d_preset() {
        let c = Config::preset("bp4d").unwrap();
        assert_eq!(c.au.au_ids, vec![1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24]);
        assert_eq!(c.au.num_aus(), 12);
        assert_eq!(c.au.patch_size, 48);
        assert_eq!(c.au.positive_intensity_threshold, None);
        assert_eq!(c.hyper, HyperParams::default());
    }

    #[test]
    fn disfa_preset() {
        let c = Config::preset("disfa").unwrap();
        assert_eq!(c.au.au_ids, vec![1, 2, 4, 6, 9, 12, 25, 26]);
        assert_eq!(c.au.positive_intensity_threshold, Some(1));
    }

    #[test]
    fn missing_lambda_f_is_named() {
        let text: String = BP4D_CFG
            .lines()
            .filter(|l| !l.trim_start().starts_with("lambda_f"))
            .collect::<Vec<_>>()
            .join("\n");
        match Config::parse(&text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "lambda_f"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dataset_rejected() {
        let text = BP4D_CFG.replace("dataset_name = \"bp4d\"", "dataset_name = \"ck+\"");
        assert!(matches!(Config::parse(&text), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("lambda3 = 0.5\n{BP4D_CFG}");
        match Config::parse(&text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "lambda3"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_au_count_for_bp4d() {
        let mut c = Config::preset("bp4d").unwrap();
        c.au.au_ids.pop();
        c.au.roi_rules.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn invariants_enforced() {
        let base = Config::preset("bp4d").unwrap();
        let mut c = base.clone();
        c.au.patch_size = 47;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.hyper.heads = 7;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.hyper.input_size = 224;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.hyper.lambda2 = 1.5;
        assert!(c.validate().is_err());
        let mut c = base;
        c.au.roi_rules[0].right.dx += 0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn presets_round_trip() {
        for name in ["bp4d", "disfa", "synthetic"] {
            let c = Config::preset(name).unwrap();
            let again = Config::parse(&c.serialize()).unwrap();
            assert_eq!(c, again, "{name}");
        }
    }

    #[test]
    fn rules_mirror() {
        for name in ["bp4d", "disfa", "synthetic"] {
            let c = Config::preset(name).unwrap();
            for r in &c.au.roi_rules {
                assert_eq!(r.left.dx, -r.right.dx);
                assert_eq!(r.left.dy, r.right.dy);
            }
        }
    }

    #[test]
    fn binarize() {
        let spec = Config::preset("disfa").unwrap().au;
        assert_eq!(binarize_intensity(2, &spec).unwrap(), 1);
        assert_eq!(binarize_intensity(1, &spec).unwrap(), 0);
        assert_eq!(binarize_intensity(0, &spec).unwrap(), 0);
        assert_eq!(binarize_intensity(5, &spec).unwrap(), 1);
        assert!(matches!(binarize_intensity(6, &spec), Err(Error::Domain(_))));
        assert!(matches!(binarize_intensity(-1, &spec), Err(Error::Domain(_))));
        let bp4d = Config::preset("bp4d").unwrap().au;
        assert!(binarize_intensity(3, &bp4d).is_err());
    }

    #[test]
    fn architecture_hash_tracks_widths() {
        let a = Config::preset("bp4d").unwrap();
        let mut b = a.clone();
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        b.train.epochs += 1;
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        b.model.branch_hidden = 128;
        assert_ne!(a.architecture_hash(), b.architecture_hash());
    }
}
