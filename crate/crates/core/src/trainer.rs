//! Training loop, ablation variants, sweeps and rollout evaluation.
//!
//! Every random draw of a run comes from `rng::stream(seed, label)` with
//! labels `batch-{step}`, `timesteps-{step}`, `noise-{step}`, `cka-{step}`
//! and `eval-{clip}`, so a run is a pure function of its config.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::{debug, info};
use rand::Rng;

use crate::align::{self, LossBreakdown, ProjectorBank};
use crate::backbone::{Backbone, BackboneConfig, BackboneVariant};
use crate::error::{Error, Result};
use crate::experts::{default_experts, Expert, Modality};
use crate::flowmatch::{fm_loss, interpolate, rollout, sample_timesteps, OracleVelocity, RolloutConfig, TimestepMode, VelocityModel};
use crate::format::Bundle;
use crate::metrics;
use crate::numcore::{Graph, NumError, Scalar, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::synthworld::{clip_from_seed, dataset, ControlSignal, MotionModel, SceneConfig, TriModalClip};

/// Ablation variants: which alignment and decoupling terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Baseline,
    RepaRgb,
    RepaDepth,
    RepaMask,
    NaiveMulti,
    M2repaCos2,
    M2repaCka,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decouple {
    None,
    Cos2,
    Cka,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::RepaRgb,
        Variant::RepaDepth,
        Variant::RepaMask,
        Variant::NaiveMulti,
        Variant::M2repaCos2,
        Variant::M2repaCka,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::RepaRgb => "repa-rgb",
            Variant::RepaDepth => "repa-depth",
            Variant::RepaMask => "repa-mask",
            Variant::NaiveMulti => "naive-multi",
            Variant::M2repaCos2 => "m2repa-cos2",
            Variant::M2repaCka => "m2repa-cka",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of {}", Self::names().join(", "))))
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|v| v.name()).collect()
    }

    /// Experts whose features are aligned to.
    pub fn experts(self) -> &'static [Modality] {
        match self {
            Variant::Baseline => &[],
            Variant::RepaRgb => &[Modality::Rgb],
            Variant::RepaDepth => &[Modality::Depth],
            Variant::RepaMask => &[Modality::Mask],
            _ => &Modality::ALL,
        }
    }

    pub fn decouple(self) -> Decouple {
        match self {
            Variant::M2repaCos2 => Decouple::Cos2,
            Variant::M2repaCka => Decouple::Cka,
            _ => Decouple::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    Short,
    Long,
}

impl Horizon {
    pub fn name(self) -> &'static str {
        match self {
            Horizon::Short => "short",
            Horizon::Long => "long",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Horizon::Short),
            "long" => Ok(Horizon::Long),
            _ => Err(Error::Config(format!("horizon must be short or long, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Frames per training clip T.
    pub frames: usize,
    /// Clean context frames at the start of every clip.
    pub context: usize,
    pub clips: usize,
    pub split: f64,
    pub objects: usize,
    pub motion: MotionModel,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { frames: 8, context: 2, clips: 64, split: 0.875, objects: 3, motion: MotionModel::DriftPan }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub lambda_align: f64,
    pub lambda_decouple: f64,
    /// Layers per projector MLP.
    pub projector_depth: usize,
    pub expert_dim: usize,
    pub expert_layers: usize,
    /// Seed of the frozen experts; shared by every run so targets never move.
    pub expert_seed: u64,
    pub cka_rows: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda_align: align::DEFAULT_LAMBDA_ALIGN,
            lambda_decouple: align::DEFAULT_LAMBDA_DECOUPLE,
            projector_depth: 3,
            expert_dim: 24,
            expert_layers: 2,
            expert_seed: 0x5EED,
            cka_rows: align::DEFAULT_CKA_ROWS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub val_clips: usize,
    pub short_frames: usize,
    pub long_frames: usize,
    pub steps_per_frame: usize,
    pub horizon: Horizon,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { val_clips: 4, short_frames: 8, long_frames: 40, steps_per_frame: 8, horizon: Horizon::Short }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: usize,
    pub batch: usize,
    /// Desk-scale default 1e-3; the large pretrained setting uses 8e-6 at batch 8.
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub timesteps: TimestepMode,
    pub model: BackboneConfig,
    pub data: DataConfig,
    pub align: AlignConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::M2repaCka,
            steps: 500,
            batch: 8,
            lr: 1e-3,
            seed: 1,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            timesteps: TimestepMode::UniformIid,
            model: BackboneConfig::default(),
            data: DataConfig::default(),
            align: AlignConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.model.height,
            width: self.model.width,
            channels: self.model.mask_channels,
            objects: self.data.objects,
            motion: self.data.motion,
            control: self.model.conditioning,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene().validate()?;
        align::check_lambdas(self.align.lambda_align, self.align.lambda_decouple)?;
        if self.model.variant == BackboneVariant::LatentRgb {
            return Err(Error::Config("training needs a tri-modal backbone (pixel-concat or latent-sum)".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config(format!("batch {} and steps {} must be positive", self.batch, self.steps)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.data.context == 0 || self.data.context >= self.data.frames {
            return Err(Error::Config(format!("context {} must lie in 1..{}", self.data.context, self.data.frames)));
        }
        if self.align.projector_depth == 0 || self.align.expert_dim < 4 {
            return Err(Error::Config("projector depth ≥ 1 and expert dim ≥ 4 required".into()));
        }
        if self.eval.val_clips == 0 || self.eval.steps_per_frame == 0 {
            return Err(Error::Config("eval needs at least one clip and one Euler step".into()));
        }
        for f in [self.eval.short_frames, self.eval.long_frames] {
            if f <= self.data.context {
                return Err(Error::Config(format!("eval length {f} must exceed the context {}", self.data.context)));
            }
        }
        Ok(())
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig { window: self.data.frames, steps_per_frame: self.eval.steps_per_frame, max_horizon: 64 }
    }

    pub fn eval_frames(&self, horizon: Horizon) -> usize {
        match horizon {
            Horizon::Short => self.eval.short_frames,
            Horizon::Long => self.eval.long_frames,
        }
    }
}

/// Loss terms and the flow-state check of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Largest deviation from the per-frame mixing identity in this batch.
    pub mixing_error: f64,
}

/// Extra detail of a single update, for inspection.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    /// Parameters that received a gradient.
    pub touched: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub miou: f64,
    pub matched_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: TrainConfig,
    pub history: Vec<StepRecord>,
    pub metrics: Option<MetricRow>,
    /// Mean pairwise linear CKA of the projected features on validation
    /// inputs; absent with fewer than two projectors.
    pub projected_cka: Option<f64>,
    pub wall_clock_secs: f64,
    pub code_hash: &'static str,
    pub expert_checksums: Vec<u64>,
}

impl RunReport {
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.history[range];
        s.iter().map(|r| r.loss.total).sum::<f64>() / s.len() as f64
    }
}

/// Content hash of the library sources, computed at build time.
pub const CODE_HASH: &str = env!("M2REPA_SOURCE_HASH");

struct ClipData<T: Scalar> {
    /// `[T, C_flow, h, w]`.
    flow: Tensor<T>,
    controls: Vec<ControlSignal>,
    /// Per expert, `[T, N, D_k]`, from clean pixel frames.
    features: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments<T: Scalar> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: u64,
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Backbone<T>,
    /// Absent for the baseline.
    pub bank: Option<ProjectorBank<T>>,
    pub experts: Vec<Expert<T>>,
    moments: Moments<T>,
    train: Vec<ClipData<T>>,
    pub val_seeds: Vec<u64>,
    pub step: usize,
}

fn expert_index(m: Modality) -> usize {
    Modality::ALL.iter().position(|&x| x == m).unwrap()
}

fn num_to_term(step: usize, term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Num(NumError::NonFinite { .. }) => Error::NonFiniteLoss { step, term },
        other => other,
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Backbone::new(config.model.clone(), derive_seed(config.seed, "model-init"))?;
        let bank = Self::new_bank(&config)?;
        Self::assemble(config, model, bank, Moments::default(), 0)
    }

    fn new_bank(config: &TrainConfig) -> Result<Option<ProjectorBank<T>>> {
        let k = config.variant.experts().len();
        if k == 0 {
            return Ok(None);
        }
        let dims = vec![config.align.expert_dim; k];
        Ok(Some(ProjectorBank::new(config.model.dim, &dims, config.align.projector_depth, derive_seed(config.seed, "projector-init"))?))
    }

    fn assemble(config: TrainConfig, model: Backbone<T>, bank: Option<ProjectorBank<T>>, moments: Moments<T>, step: usize) -> Result<Self> {
        let m = &config.model;
        let experts: Vec<Expert<T>> = default_experts::<T>(config.align.expert_seed, m.height, m.width, m.patch, m.mask_channels)?
            .into_iter()
            .map(|mut e| {
                if e.spec.dim != config.align.expert_dim || e.spec.layers != config.align.expert_layers {
                    let mut spec = e.spec.clone();
                    spec.dim = config.align.expert_dim;
                    spec.layers = config.align.expert_layers;
                    e = crate::experts::build_expert(spec)?;
                }
                Ok(e)
            })
            .collect::<Result<_>>()?;
        let (train_seeds, val_seeds) = dataset(config.seed, config.data.clips, config.data.split)?;
        let scene = config.scene();
        let train = train_seeds
            .iter()
            .map(|&s| {
                let clip = clip_from_seed::<T>(s, &scene, config.data.frames, config.data.context)?;
                let pixels = clip.to_tensor();
                let features = experts.iter().map(|e| e.extract(&pixels)).collect::<Result<Vec<_>>>()?;
                Ok(ClipData { flow: model.to_flow(&pixels)?, controls: clip.controls, features })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, model, bank, experts, moments, train, val_seeds, step })
    }

    pub fn train_clips(&self) -> usize {
        self.train.len()
    }

    pub fn expert_checksums(&self) -> Vec<u64> {
        self.experts.iter().map(|e| e.checksum()).collect()
    }

    /// Clip indices of the batch for `step`, drawn with replacement.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = stream(self.config.seed, &format!("batch-{step}"));
        (0..self.config.batch).map(|_| rng.random_range(0..self.train.len())).collect()
    }

    /// One optimization step on the scheduled batch.
    pub fn run_step(&mut self) -> Result<StepRecord> {
        let batch = self.batch_indices(self.step);
        Ok(self.step_on(&batch)?.record)
    }

    /// One optimization step on the given clips.
    pub fn step_on(&mut self, batch: &[usize]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.train.len()) {
            return Err(Error::Config(format!("clip index {bad} outside the {} training clips", self.train.len())));
        }
        let step = self.step;
        let cfg = &self.config;
        let fpc = cfg.data.frames;
        let bt = batch.len() * fpc;

        let x1_parts: Vec<&Tensor<T>> = batch.iter().map(|&i| &self.train[i].flow).collect();
        let x1 = Tensor::cat_rows(&x1_parts)?;
        let controls: Vec<ControlSignal> = batch.iter().flat_map(|&i| self.train[i].controls.iter().cloned()).collect();
        let t_vec = sample_timesteps::<T, _>(bt, cfg.timesteps, &mut stream(cfg.seed, &format!("timesteps-{step}")));
        let x0 = Tensor::randn(x1.shape(), 1.0, &mut stream(cfg.seed, &format!("noise-{step}")));
        let state = interpolate(&x1, &x0, &t_vec)?;
        let mixing_error = state.mixing_error();

        let mut g = Graph::new();
        let mut mb = Binder::trainable(&self.model.params);
        let mut pb = self.bank.as_ref().map(|b| Binder::trainable(&b.params));
        let xt = g.constant(state.x_t.clone())?;
        let out = self.model.forward(&mut g, &mut mb, xt, t_vec.as_slice(), &controls, fpc).map_err(num_to_term(step, "fm"))?;
        let vt = g.constant(state.v_target.clone())?;
        let fm = fm_loss(&mut g, out.velocity, vt).map_err(num_to_term(step, "fm"))?;

        let (mut align_v, mut dec_v): (Option<Var>, Option<Var>) = (None, None);
        if let (Some(bank), Some(pb)) = (self.bank.as_ref(), pb.as_mut()) {
            let projected = bank.project(&mut g, pb, out.tap).map_err(num_to_term(step, "align"))?;
            let targets = cfg
                .variant
                .experts()
                .iter()
                .map(|&m| {
                    let parts: Vec<&Tensor<T>> = batch.iter().map(|&i| &self.train[i].features[expert_index(m)]).collect();
                    g.constant(Tensor::cat_rows(&parts)?).map_err(Error::from)
                })
                .collect::<Result<Vec<_>>>()?;
            align_v = Some(align::m2repa_loss(&mut g, &projected, &targets).map_err(num_to_term(step, "align"))?);
            dec_v = match cfg.variant.decouple() {
                Decouple::None => None,
                Decouple::Cka => Some(
                    align::decouple_loss(&mut g, &projected, cfg.align.cka_rows, derive_seed(cfg.seed, &format!("cka-{step}")))
                        .map_err(num_to_term(step, "decouple"))?,
                ),
                Decouple::Cos2 => Some(align::cos2_decouple_loss(&mut g, &projected).map_err(num_to_term(step, "decouple"))?),
            };
        }
        let (la, ld) = (cfg.align.lambda_align, cfg.align.lambda_decouple);
        let total = align::total_loss_var(&mut g, fm, align_v, dec_v, la, ld).map_err(num_to_term(step, "total"))?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        let loss = align::total_loss(val(Some(fm)), val(align_v), val(dec_v), la, ld)?;
        for (term, v) in [("fm", loss.fm), ("align", loss.align), ("decouple", loss.decouple), ("total", g.value(total).item().as_f64())] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step, term });
            }
        }

        let grads = g.backward(total).map_err(Error::from).map_err(num_to_term(step, "total"))?;
        let model_grads = mb.collect(&grads);
        let bank_grads = pb.as_ref().map(|b| b.collect(&grads)).unwrap_or_default();
        drop(mb);
        drop(pb);
        let mut touched = BTreeSet::new();
        for (name, gr) in &model_grads {
            touched.insert(name.clone());
            self.update(name, gr, Target::Model)?;
        }
        for (name, gr) in &bank_grads {
            touched.insert(name.clone());
            self.update(name, gr, Target::Bank)?;
        }
        self.moments.t += 1;
        self.step += 1;
        let record = StepRecord { step, loss, mixing_error };
        debug!("step {step}: fm {:.5} align {:.5} decouple {:.5} total {:.5}", loss.fm, loss.align, loss.decouple, loss.total);
        Ok(StepOutcome { record, touched })
    }

    fn update(&mut self, name: &str, grad: &Tensor<T>, target: Target) -> Result<()> {
        let cfg = &self.config;
        let store = match target {
            Target::Model => &mut self.model.params,
            Target::Bank => &mut self.bank.as_mut().expect("bank gradients imply a bank").params,
        };
        let p = store.get_mut(name)?;
        let lr = T::lit(cfg.lr);
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (w, &gv) in p.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * gv;
                }
            }
            OptimizerKind::Adam => {
                let key = format!("{}{name}", target.prefix());
                let m = self.moments.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
                let v = self.moments.v.entry(key).or_insert_with(|| Tensor::zeros(grad.shape()));
                let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
                let t = (self.moments.t + 1) as i32;
                let c1 = T::one() - T::lit(cfg.beta1.powi(t));
                let c2 = T::one() - T::lit(cfg.beta2.powi(t));
                let eps = T::lit(cfg.eps);
                for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    *mi = b1 * *mi + (T::one() - b1) * gv;
                    *vi = b2 * *vi + (T::one() - b2) * gv * gv;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Runs the remaining configured steps and evaluates on the validation split.
    pub fn run_loop(&mut self) -> Result<RunReport> {
        let start = Instant::now();
        let before = self.expert_checksums();
        let mut history = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            let r = self.run_step()?;
            if r.step % 50 == 0 || r.step + 1 == self.config.steps {
                info!("{} step {}: total {:.5}", self.config.variant.name(), r.step, r.loss.total);
            }
            history.push(r);
        }
        let after = self.expert_checksums();
        if before != after {
            return Err(Error::Config("expert parameters changed during training".into()));
        }
        let metrics = Some(self.evaluate(self.config.eval.horizon)?);
        let projected_cka = self.projected_cka()?;
        Ok(RunReport {
            config: self.config.clone(),
            history,
            metrics,
            projected_cka,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            code_hash: CODE_HASH,
            expert_checksums: after,
        })
    }

    /// Rollout metrics of the current model on the validation clips.
    pub fn evaluate(&self, horizon: Horizon) -> Result<MetricRow> {
        evaluate_with(|_| Ok(&self.model), &self.val_seeds, &self.config, horizon)
    }

    /// Mean pairwise CKA of projected features on noisy validation frames at
    /// t = 0.5.
    pub fn projected_cka(&self) -> Result<Option<f64>> {
        let bank = match &self.bank {
            Some(b) if b.len() >= 2 => b,
            _ => return Ok(None),
        };
        let cfg = &self.config;
        let scene = cfg.scene();
        let fpc = cfg.data.frames;
        let mut flows = Vec::new();
        let mut controls = Vec::new();
        for &s in &self.val_seeds {
            let clip = clip_from_seed::<T>(s, &scene, fpc, cfg.data.context)?;
            flows.push(self.model.to_flow(&clip.to_tensor())?);
            controls.extend(clip.controls);
        }
        let refs: Vec<&Tensor<T>> = flows.iter().collect();
        let x1 = Tensor::cat_rows(&refs)?;
        let x0 = Tensor::randn(x1.shape(), 1.0, &mut stream(cfg.seed, "cka-probe"));
        let t = crate::flowmatch::TimestepVector::constant(x1.shape()[0], T::lit(0.5))?;
        let state = interpolate(&x1, &x0, &t)?;
        let mut g = Graph::new();
        let mut mb = Binder::frozen(&self.model.params);
        let mut pb = Binder::frozen(&bank.params);
        let xt = g.constant(state.x_t)?;
        let out = self.model.forward(&mut g, &mut mb, xt, t.as_slice(), &controls, fpc)?;
        let projected = bank.project(&mut g, &mut pb, out.tap)?;
        let c = align::decouple_loss(&mut g, &projected, cfg.align.cka_rows, derive_seed(cfg.seed, "cka-probe-rows"))?;
        Ok(Some(g.value(c).item().as_f64()))
    }

    /// Parameters, projector bank, optimizer moments and config text.
    pub fn checkpoint(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.push_bytes("meta.config", crate::config::to_text(&self.config).as_bytes());
        b.push_tensor("meta.step", &Tensor::<f64>::from_f64(&[2], &[self.step as f64, self.moments.t as f64])?);
        for (k, v) in self.model.params.iter() {
            b.push_tensor(format!("model.{k}"), v);
        }
        if let Some(bank) = &self.bank {
            for (k, v) in bank.params.iter() {
                b.push_tensor(format!("bank.{k}"), v);
            }
        }
        for (k, v) in &self.moments.m {
            b.push_tensor(format!("opt.m.{k}"), v);
        }
        for (k, v) in &self.moments.v {
            b.push_tensor(format!("opt.v.{k}"), v);
        }
        Ok(b)
    }

    pub fn from_checkpoint(bundle: &Bundle) -> Result<Self> {
        let text = std::str::from_utf8(bundle.bytes("meta.config")?).map_err(|_| Error::Format("config record is not UTF-8".into()))?;
        let config = crate::config::parse(text)?;
        config.validate()?;
        let meta = bundle.tensor::<f64>("meta.step")?;
        let (step, t) = (meta.data()[0] as usize, meta.data()[1] as u64);
        let mut model_params = ParamStore::new();
        let mut bank_params = ParamStore::new();
        let mut moments = Moments { t, ..Moments::default() };
        for r in &bundle.records {
            if r.name.starts_with("meta.") {
                continue;
            }
            let tensor = bundle.tensor::<T>(&r.name)?;
            if let Some(k) = r.name.strip_prefix("model.") {
                model_params.insert(k, tensor);
            } else if let Some(k) = r.name.strip_prefix("bank.") {
                bank_params.insert(k, tensor);
            } else if let Some(k) = r.name.strip_prefix("opt.m.") {
                moments.m.insert(k.to_string(), tensor);
            } else if let Some(k) = r.name.strip_prefix("opt.v.") {
                moments.v.insert(k.to_string(), tensor);
            } else {
                return Err(Error::Format(format!("unexpected checkpoint record {}", r.name)));
            }
        }
        let model = Backbone::from_params(config.model.clone(), model_params)?;
        let k = config.variant.experts().len();
        let bank = if k == 0 {
            if !bank_params.is_empty() {
                return Err(Error::Format("baseline checkpoint carries projector weights".into()));
            }
            None
        } else {
            Some(ProjectorBank::from_params(bank_params, k, config.align.projector_depth)?)
        };
        Self::assemble(config, model, bank, moments, step)
    }
}

#[derive(Clone, Copy)]
enum Target {
    Model,
    Bank,
}

impl Target {
    fn prefix(self) -> &'static str {
        match self {
            Target::Model => "model.",
            Target::Bank => "bank.",
        }
    }
}

fn channel_block<T: Scalar>(x: &Tensor<T>, c0: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let hw = s[2] * s[3];
    Tensor::from_fn(&[s[0], len, s[2], s[3]], |i| {
        let (f, c, p) = (i / (len * hw), (i / hw) % len, i % hw);
        x.data()[(f * s[1] + c0 + c) * hw + p]
    })
}

/// Metric row of one rolled-out video against ground truth, both
/// `[T, 3+1+C, H, W]`; the first `context` frames are excluded.
pub fn video_metrics<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, context: usize) -> Result<MetricRow> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("rollout {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let s = gt.shape();
    let c = s[1] - 4;
    let frames = s[0] - context;
    let tail = |x: &Tensor<T>| x.slice_rows(context, frames);
    let (p, g) = (tail(pred)?, tail(gt)?);
    let (pr, gr) = (channel_block(&p, 0, 3), channel_block(&g, 0, 3));
    let (pd, gd) = (channel_block(&p, 3, 1), channel_block(&g, 3, 1));
    let depth = metrics::evaluate_depth(&pd, &gd)?;
    let masks = metrics::mask_video_miou(&channel_block(pred, 4, c), &channel_block(gt, 4, c), context)?;
    Ok(MetricRow {
        psnr: metrics::psnr(&pr, &gr, 1.0)?,
        ssim: metrics::ssim(&pr, &gr)?,
        abs_rel: depth.abs_rel,
        delta1: depth.delta1,
        miou: masks.overall,
        matched_fraction: masks.matched_fraction,
    })
}

fn mean_rows(rows: &[MetricRow]) -> MetricRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricRow {
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
        abs_rel: avg(|r| r.abs_rel),
        delta1: avg(|r| r.delta1),
        miou: avg(|r| r.miou),
        matched_fraction: avg(|r| r.matched_fraction),
    }
}

/// Rolls out a model per validation clip and averages the metric rows.
/// `make` receives the ground-truth clip, which lets tests plant oracles.
pub fn evaluate_with<'m, T, M, F>(make: F, val_seeds: &[u64], cfg: &TrainConfig, horizon: Horizon) -> Result<MetricRow>
where
    T: Scalar,
    M: VelocityModel<T> + 'm,
    F: Fn(&TriModalClip<T>) -> Result<M>,
{
    let total = cfg.eval_frames(horizon);
    let ctx = cfg.data.context;
    let rcfg = cfg.rollout_config();
    if total - ctx > rcfg.max_horizon {
        return Err(Error::Horizon { horizon: total - ctx, max: rcfg.max_horizon });
    }
    let scene = cfg.scene();
    let mut rows = Vec::new();
    for (i, &s) in val_seeds.iter().take(cfg.eval.val_clips).enumerate() {
        let clip = clip_from_seed::<T>(s, &scene, total, ctx)?;
        let truth = clip.to_tensor();
        let model = make(&clip)?;
        let context = truth.slice_rows(0, ctx)?;
        let out = rollout(&model, &context, &clip.controls, total - ctx, &rcfg, derive_seed(cfg.seed, &format!("eval-{i}")))?;
        rows.push(video_metrics(&out, &truth, ctx)?);
    }
    if rows.is_empty() {
        return Err(Error::Config("no validation clips to evaluate".into()));
    }
    Ok(mean_rows(&rows))
}

impl<T: Scalar, M: VelocityModel<T> + ?Sized> VelocityModel<T> for &M {
    fn frame_channels(&self) -> usize {
        (**self).frame_channels()
    }
    fn to_flow(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        (**self).to_flow(pixels)
    }
    fn from_flow(&self, flow: &Tensor<T>) -> Result<Tensor<T>> {
        (**self).from_flow(flow)
    }
    fn velocity(&self, x_t: &Tensor<T>, t: &crate::flowmatch::TimestepVector<T>, controls: &[ControlSignal], frames: &[usize]) -> Result<Tensor<T>> {
        (**self).velocity(x_t, t, controls, frames)
    }
}

/// Oracle that drives every rollout straight to the ground-truth clip.
pub fn oracle_for<T: Scalar>(clip: &TriModalClip<T>) -> Result<OracleVelocity<T>> {
    Ok(OracleVelocity { truth: clip.to_tensor() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaDecouple,
    TapLayer,
    ProjectorDepth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LambdaDecouple => "lambda_decouple",
            SweepAxis::TapLayer => "tap_layer",
            SweepAxis::ProjectorDepth => "projector_depth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda_decouple" => Ok(SweepAxis::LambdaDecouple),
            "tap_layer" => Ok(SweepAxis::TapLayer),
            "projector_depth" => Ok(SweepAxis::ProjectorDepth),
            _ => Err(Error::Config(format!("invalid sweep axis {s:?}; expected lambda_decouple, tap_layer or projector_depth"))),
        }
    }

    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = base.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {v}", self.name())))
            }
        };
        match self {
            SweepAxis::LambdaDecouple => c.align.lambda_decouple = value,
            SweepAxis::TapLayer => c.model.tap_layer = as_count(value)?,
            SweepAxis::ProjectorDepth => c.align.projector_depth = as_count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

/// The decoupling-weight grid of the sensitivity study.
pub const LAMBDA_GRID: [f64; 5] = [0.05, 0.5, 35.0, 100.0, 200.0];

/// One seeded run per value; runs share the base seed and so the data split.
pub fn sweep<T: Scalar>(axis: SweepAxis, values: &[f64], base: &TrainConfig) -> Result<Vec<RunReport>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let cfg = axis.apply(base, v)?;
            info!("sweep {} = {v}", axis.name());
            Trainer::<T>::new(cfg)?.run_loop()
        })
        .collect()
}

/// Worker cap from `M2REPA_THREADS`, defaulting to the logical core count.
pub fn worker_threads() -> usize {
    std::env::var("M2REPA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `jobs` on up to `threads` workers, returning results in job order.
pub fn run_parallel<R: Send, F: Fn(usize) -> R + Sync>(jobs: usize, threads: usize, f: F) -> Vec<R> {
    let threads = threads.clamp(1, jobs.max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<R>>> = (0..jobs).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran")).collect()
}
