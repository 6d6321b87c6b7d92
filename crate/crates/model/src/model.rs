//! Full network: backbone, relation module, heads and auxiliary modules.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Linear, VarBuilder, VarMap};
use rtatl_core::geometry::RoiBox;
use rtatl_core::Config;

use crate::backbone::{crop_roi_features, global_pool, predict, roi_branches_forward, AuHeads, Fusion, Prediction, RoiBranch, Trunk};
use crate::error::{Error, Result};
use crate::nn::{reseed, Buffers, Mode};
use crate::ofe::FlowHead;
use crate::relation::{AttentionOutput, RelationTransformer};
use crate::roii::{Critic, Generator};

/// Parameter name prefixes of the modules kept at inference time.
pub const INFERENCE_PREFIXES: [&str; 3] = ["backbone.", "relation.", "heads."];
/// Parameter name prefixes updated by the discriminator phase.
pub const DISC_PREFIXES: [&str; 2] = ["discriminator.", "classifier."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    Inference,
    Training,
}

/// Invocation counters of the auxiliary modules.
#[derive(Debug, Default)]
pub struct CallTrace {
    generator: AtomicUsize,
    discriminator: AtomicUsize,
    classifier: AtomicUsize,
    flow_head: AtomicUsize,
}

impl CallTrace {
    /// Generator, discriminator, classifier and flow-head call counts.
    pub fn counts(&self) -> [usize; 4] {
        [
            self.generator.load(Ordering::Relaxed),
            self.discriminator.load(Ordering::Relaxed),
            self.classifier.load(Ordering::Relaxed),
            self.flow_head.load(Ordering::Relaxed),
        ]
    }

    pub fn reset(&self) {
        for c in [&self.generator, &self.discriminator, &self.classifier, &self.flow_head] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// Trunk stage outputs at strides 4, 8, 16 and 32.
    pub stages: [Tensor; 4],
    pub fused: Tensor,
    /// (B, 2N, C_f, p, p)
    pub roi_patches: Tensor,
    /// (B, 2N, d)
    pub roi_features: Tensor,
    pub global_vec: Tensor,
}

impl FeatureBundle {
    pub fn global_maps(&self) -> &Tensor {
        &self.stages[3]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub bundle: FeatureBundle,
    pub attended: AttentionOutput,
    pub prediction: Prediction,
}

pub struct Rtatl {
    config: Config,
    device: Device,
    dtype: DType,
    params: VarMap,
    buffers: Buffers,
    pub trunk: Trunk,
    pub fusion: Fusion,
    pub branches: Vec<RoiBranch>,
    pub relation: RelationTransformer,
    pub roi_head: AuHeads,
    pub global_head: Linear,
    generator: Generator,
    discriminator: Critic,
    classifier: Critic,
    flow_head: FlowHead,
    pub trace: CallTrace,
}

impl Rtatl {
    pub fn new(config: &Config, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = VarMap::new();
        let buffers = Buffers::new(dtype, device);
        let vb = VarBuilder::from_varmap(&params, dtype, device);
        let (h, m, n, s) = (&config.hyper, &config.model, config.au.num_aus(), config.au.patch_size);
        let bb = vb.pp("backbone");
        let trunk = Trunk::new(m.trunk_widths, bb.pp("trunk"), &buffers)?;
        let fusion = Fusion::new(m.trunk_widths, m.fused_channels, bb.pp("fusion"))?;
        let branches = (0..n)
            .map(|i| RoiBranch::new(m.fused_channels, m.branch_hidden, h.d, bb.pp(format!("branch{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let relation = RelationTransformer::new(h.d, h.heads, n, m.ffn_mult, vb.pp("relation"))?;
        let roi_head = AuHeads::new(n, h.d, vb.pp("heads.roi"))?;
        let global_head = candle_nn::linear(m.trunk_widths[3], n, vb.pp("heads.global"))?;
        let generator = Generator::new(h.d, m.generator_widths, s, vb.pp("generator"))?;
        let discriminator = Critic::new(m.critic_widths, s, vb.pp("discriminator"))?;
        let classifier = Critic::new(m.critic_widths, s, vb.pp("classifier"))?;
        let flow_head = FlowHead::new(m.trunk_widths[3], m.ofe_hidden, vb.pp("ofe"))?;
        reseed(&params, seed)?;
        Ok(Rtatl {
            config: config.clone(),
            device: device.clone(),
            dtype,
            params,
            buffers,
            trunk,
            fusion,
            branches,
            relation,
            roi_head,
            global_head,
            generator,
            discriminator,
            classifier,
            flow_head,
            trace: CallTrace::default(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_aus(&self) -> usize {
        self.config.au.num_aus()
    }

    pub fn features(&self, images: &Tensor, boxes: &[Vec<[RoiBox; 2]>], mode: Mode) -> Result<FeatureBundle> {
        let (_, _, ih, iw) = images.dims4()?;
        let stages = self.trunk.forward(images, mode)?;
        let fused = self.fusion.forward(&stages)?;
        let roi_patches = crop_roi_features(&fused, boxes, (iw, ih), self.config.model.roi_cells)?;
        let roi_features = roi_branches_forward(&self.branches, &roi_patches)?;
        let global_vec = global_pool(&stages[3])?;
        Ok(FeatureBundle {
            stages,
            fused,
            roi_patches,
            roi_features,
            global_vec,
        })
    }

    /// Backbone, relation module and prediction heads.
    pub fn forward(&self, images: &Tensor, boxes: &[Vec<[RoiBox; 2]>], mode: Mode) -> Result<ForwardOutput> {
        let bundle = self.features(images, boxes, mode)?;
        let attended = self.relation.forward(&bundle.roi_features)?;
        let prediction = predict(&self.global_head, &self.roi_head, &bundle.global_vec, &attended.per_au)?;
        Ok(ForwardOutput {
            bundle,
            attended,
            prediction,
        })
    }

    /// Inference path on intact images; auxiliary modules are never touched.
    pub fn infer(&self, images: &Tensor, boxes: &[Vec<[RoiBox; 2]>]) -> Result<Prediction> {
        Ok(self.forward(images, boxes, Mode::Eval)?.prediction)
    }

    /// (n, d) attended tokens -> (n, 3, s, s) patches.
    pub fn generate(&self, x: &Tensor) -> Result<Tensor> {
        self.trace.generator.fetch_add(1, Ordering::Relaxed);
        self.generator.forward(x)
    }

    pub fn discriminator(&self) -> &Critic {
        self.trace.discriminator.fetch_add(1, Ordering::Relaxed);
        &self.discriminator
    }

    pub fn classifier(&self) -> &Critic {
        self.trace.classifier.fetch_add(1, Ordering::Relaxed);
        &self.classifier
    }

    pub fn predict_flow(&self, global_maps: &Tensor) -> Result<Tensor> {
        self.trace.flow_head.fetch_add(1, Ordering::Relaxed);
        self.flow_head.forward(global_maps)
    }

    pub fn named_params(&self) -> BTreeMap<String, Var> {
        self.params
            .data()
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn named_buffers(&self) -> BTreeMap<String, Var> {
        self.buffers
            .varmap()
            .data()
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn is_inference_param(name: &str) -> bool {
        INFERENCE_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    pub fn is_disc_param(name: &str) -> bool {
        DISC_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Backbone, relation module, heads, generator and flow head.
    pub fn main_vars(&self) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .filter(|(k, _)| !Self::is_disc_param(k))
            .map(|(_, v)| v)
            .collect()
    }

    /// Discriminator and AU classifier.
    pub fn disc_vars(&self) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .filter(|(k, _)| Self::is_disc_param(k))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn count_parameters(&self, scope: ParamScope) -> usize {
        self.named_params()
            .iter()
            .filter(|(k, _)| scope == ParamScope::Training || Self::is_inference_param(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Deep copy of every parameter and buffer.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_params()
            .into_iter()
            .chain(self.named_buffers())
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    /// Copies tensors into matching parameters and buffers. With `strict`,
    /// every model tensor must be present with the same shape.
    pub fn load_state(&self, state: &HashMap<String, Tensor>, strict: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in self.named_params().into_iter().chain(self.named_buffers()) {
            match state.get(&name) {
                Some(t) if t.dims() == var.as_tensor().dims() => {
                    var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                    loaded += 1;
                }
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "{name}: stored shape {:?}, model shape {:?}",
                        t.dims(),
                        var.as_tensor().dims()
                    )))
                }
                None if strict => return Err(Error::Shape(format!("{name} missing from state"))),
                None => {}
            }
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rtatl_core::landmarks::template;
    use rtatl_core::geometry::{compute_au_centers, roi_boxes};

    #[test]
    fn synthetic_model_runs_and_traces() {
        let cfg = Config::preset("synthetic").unwrap();
        let model = Rtatl::new(&cfg, DType::F32, &Device::Cpu, 0).unwrap();
        let size = cfg.hyper.input_size;
        let lm = template(size as f64);
        let centers = compute_au_centers(&lm, &cfg.au, size, size).unwrap();
        let boxes = roi_boxes(&centers, cfg.au.patch_size, size, size);
        let x = Tensor::rand(0.0f32, 1.0, (2, 3, size, size), &Device::Cpu).unwrap();
        let pred = model.infer(&x, &[boxes.clone(), boxes]).unwrap();
        assert_eq!(pred.probs_fused.dims(), &[2, 5]);
        assert_eq!(model.trace.counts(), [0; 4]);
        let _ = model.predict_flow(&Tensor::zeros((1, 64, 2, 2), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(model.trace.counts(), [0, 0, 0, 1]);
        assert!(model.count_parameters(ParamScope::Inference) < model.count_parameters(ParamScope::Training));
        let disc: usize = model.disc_vars().iter().map(|v| v.elem_count()).sum();
        let main: usize = model.main_vars().iter().map(|v| v.elem_count()).sum();
        assert_eq!(disc + main, model.count_parameters(ParamScope::Training));
    }

    #[test]
    fn construction_is_seeded() {
        let cfg = Config::preset("synthetic").unwrap();
        let a = Rtatl::new(&cfg, DType::F32, &Device::Cpu, 3).unwrap().state().unwrap();
        let b = Rtatl::new(&cfg, DType::F32, &Device::Cpu, 3).unwrap().state().unwrap();
        for (k, t) in &a {
            let d = (t - &b[k]).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0, "{k}");
        }
    }
}
