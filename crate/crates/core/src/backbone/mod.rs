//! Tri-modal velocity network.
//!
//! Two input/output paths share one transformer trunk:
//!
//! * **pixel-concat**: per-modality patch encoders, channel concat, a fuse
//!   MLP; a split MLP and per-modality decoders on the way out.
//! * **latent-sum**: frames are first mapped by the frozen [`LatentCodec`];
//!   per-modality patch embeddings are summed; the RGB head predicts the RGB
//!   velocity while an auxiliary 3×3×3 convolution branch, fed with noisy
//!   depth/mask latents and the denoised RGB estimate, predicts depth and
//!   mask. [`Backbone::extend_from_rgb`] grows an RGB-only latent model into
//!   this form with every new module zero-initialized.
//!
//! The trunk attends over all tokens of a clip (frames × spatial tokens) and
//! exposes the hidden state after block `tap_layer` for alignment.

pub mod codec;
pub mod layout;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flowmatch::{TimestepVector, VelocityModel};
use crate::numcore::{Graph, Scalar, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::rng::stream;
use crate::synthworld::{ControlKind, ControlSignal, ACTION_COUNT};

pub use codec::LatentCodec;

const TIME_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneVariant {
    PixelConcat,
    LatentSum,
    /// RGB-only latent model, the starting point of [`Backbone::extend_from_rgb`].
    LatentRgb,
}

impl BackboneVariant {
    pub fn name(self) -> &'static str {
        match self {
            BackboneVariant::PixelConcat => "pixel-concat",
            BackboneVariant::LatentSum => "latent-sum",
            BackboneVariant::LatentRgb => "latent-rgb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pixel-concat" => Some(Self::PixelConcat),
            "latent-sum" => Some(Self::LatentSum),
            "latent-rgb" => Some(Self::LatentRgb),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub mask_channels: usize,
    /// Pixel patch size; latent variants use `patch / 2` on the half-size latent grid.
    pub patch: usize,
    pub dim: usize,
    /// Trunk blocks L.
    pub depth: usize,
    /// Alignment tap after block ℓ, 1-based.
    pub tap_layer: usize,
    pub mlp_ratio: usize,
    pub variant: BackboneVariant,
    pub conditioning: ControlKind,
    pub latent_channels: usize,
    pub aux_channels: usize,
    pub codec_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            mask_channels: 3,
            patch: 4,
            dim: 32,
            depth: 6,
            tap_layer: 2,
            mlp_ratio: 4,
            variant: BackboneVariant::PixelConcat,
            conditioning: ControlKind::CameraPose,
            latent_channels: 4,
            aux_channels: 16,
            codec_seed: 0xC0DE,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap_layer == 0 || self.tap_layer > self.depth {
            return Err(Error::Config(format!("tap layer {} outside 1..={}", self.tap_layer, self.depth)));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!("patch {} must divide {}×{}", self.patch, self.height, self.width)));
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!("embed dim {} must be a positive multiple of 4", self.dim)));
        }
        if self.mask_channels == 0 {
            return Err(Error::Config("at least one mask channel required".into()));
        }
        if self.is_latent() && (self.patch % 2 != 0 || self.latent_channels == 0 || self.latent_channels > 4) {
            return Err(Error::Config(format!(
                "latent variants need an even patch and 1..=4 latent channels (patch {}, latent {})",
                self.patch, self.latent_channels
            )));
        }
        Ok(())
    }

    pub fn is_latent(&self) -> bool {
        self.variant != BackboneVariant::PixelConcat
    }

    /// Spatial tokens per frame.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Channels of one pixel-space input frame.
    pub fn frame_channels(&self) -> usize {
        match self.variant {
            BackboneVariant::LatentRgb => 3,
            _ => 4 + self.mask_channels,
        }
    }

    /// Channel counts of each modality in pixel space.
    pub fn modality_channels(&self) -> [usize; 3] {
        [3, 1, self.mask_channels]
    }

    /// Channels of a frame in the space the flow runs in.
    pub fn flow_channels(&self) -> usize {
        match self.variant {
            BackboneVariant::PixelConcat => 4 + self.mask_channels,
            BackboneVariant::LatentSum => 3 * self.latent_channels,
            BackboneVariant::LatentRgb => self.latent_channels,
        }
    }

    /// Spatial size of a flow-space frame.
    pub fn flow_hw(&self) -> (usize, usize) {
        if self.is_latent() {
            (self.height / 2, self.width / 2)
        } else {
            (self.height, self.width)
        }
    }

    fn flow_patch(&self) -> usize {
        if self.is_latent() {
            self.patch / 2
        } else {
            self.patch
        }
    }

    fn cond_features(&self) -> usize {
        match self.conditioning {
            ControlKind::CameraPose => 6,
            ControlKind::DiscreteAction => ACTION_COUNT,
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B·T, flow_channels, h, w]`.
    pub velocity: Var,
    /// Hidden state after block ℓ, `[B·T, N, d]`.
    pub tap: Var,
    /// Trunk output after the final norm, `[B·T, N, d]`.
    pub tokens: Var,
}

const MODALITIES: [&str; 3] = ["rgb", "depth", "mask"];

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    codec: Option<LatentCodec<T>>,
}

fn init_params<T: Scalar>(c: &BackboneConfig, seed: u64) -> ParamStore<T> {
    let mut rng = stream(seed, "backbone-init");
    let mut p = ParamStore::new();
    let d = c.dim;
    let fp = c.flow_patch();
    p.init_linear("temb.l1", TIME_FEATURES, d, 1.0, &mut rng);
    p.init_linear("temb.l2", d, d, 1.0, &mut rng);
    p.init_linear("cond.l1", c.cond_features(), d, 1.0, &mut rng);
    p.init_linear("cond.l2", d, d, 1.0, &mut rng);
    for i in 0..c.depth {
        let b = format!("blocks.{i}");
        p.init_norm(&format!("{b}.ln1"), d);
        for n in ["q", "k", "v", "o"] {
            p.init_linear(&format!("{b}.attn.{n}"), d, d, 1.0, &mut rng);
        }
        p.init_norm(&format!("{b}.ln2"), d);
        p.init_linear(&format!("{b}.mlp.l1"), d, c.mlp_ratio * d, 1.0, &mut rng);
        p.init_linear(&format!("{b}.mlp.l2"), c.mlp_ratio * d, d, 1.0, &mut rng);
    }
    p.init_norm("final_ln", d);
    match c.variant {
        BackboneVariant::PixelConcat => {
            for (m, ch) in MODALITIES.iter().zip(c.modality_channels()) {
                p.init_linear(&format!("enc.{m}"), fp * fp * ch, d, 1.0, &mut rng);
            }
            p.init_linear("fuse.l1", 3 * d, d, 1.0, &mut rng);
            p.init_linear("fuse.l2", d, d, 1.0, &mut rng);
            p.init_linear("split", d, 3 * d, 1.0, &mut rng);
            for (m, ch) in MODALITIES.iter().zip(c.modality_channels()) {
                p.init_zero_linear(&format!("dec.{m}"), d, fp * fp * ch);
            }
            p.init_linear("skip.l1", TIME_FEATURES, d, 1.0, &mut rng);
            p.init_zero_linear("skip.l2", d, c.frame_channels());
        }
        BackboneVariant::LatentRgb | BackboneVariant::LatentSum => {
            let l = c.latent_channels;
            p.init_linear("in.rgb", fp * fp * l, d, 1.0, &mut rng);
            p.init_zero_linear("head", d, fp * fp * l);
            if c.variant == BackboneVariant::LatentSum {
                let w = p.get("in.rgb.w").unwrap().clone();
                for m in ["depth", "mask"] {
                    p.insert(format!("in.{m}.w"), w.clone());
                    p.insert(format!("in.{m}.b"), Tensor::zeros(&[d]));
                    p.insert(format!("in.{m}.gate"), Tensor::zeros(&[d]));
                }
                init_aux(&mut p, c, &mut rng);
            }
        }
    }
    p
}

fn init_aux<T: Scalar, R: rand::Rng + ?Sized>(p: &mut ParamStore<T>, c: &BackboneConfig, rng: &mut R) {
    let (l, a, fp) = (c.latent_channels, c.aux_channels, c.flow_patch());
    p.init_zero_linear("aux.conv", 27 * 3 * l, a);
    p.init_linear("aux.hproj", c.dim, fp * fp * a, 1.0, rng);
    p.init_zero_linear("aux.dm_depth", a, l);
    p.init_zero_linear("aux.dm_mask", a, l);
}

/// Sinusoidal features `[sin(t·ω_i), cos(t·ω_i)]`, ω_i = 1000^(1 − i/(k/2)).
fn sinusoid(v: f64, k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut out = Vec::with_capacity(k);
    for i in 0..half {
        let w = 1000f64.powf(1.0 - i as f64 / half as f64);
        out.push((v * w).sin());
    }
    for i in 0..half {
        let w = 1000f64.powf(1.0 - i as f64 / half as f64);
        out.push((v * w).cos());
    }
    out
}

fn time_features<T: Scalar>(g: &mut Graph<T>, t: &[T]) -> Result<Var> {
    let tf: Vec<f64> = t.iter().flat_map(|v| sinusoid(v.as_f64(), TIME_FEATURES)).collect();
    Ok(g.constant(Tensor::from_f64(&[t.len(), TIME_FEATURES], &tf)?)?)
}

/// Fixed position code: the first half of the channels encode the spatial
/// token, the second half the frame's index within its window.
fn position_table<T: Scalar>(frames: usize, tokens: usize, dim: usize, fpc: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(frames * tokens * dim);
    for f in 0..frames {
        let local = (f % fpc) as f64;
        for n in 0..tokens {
            let mut s = sinusoid(n as f64 / 64.0, half);
            s.extend(sinusoid(local / 64.0, half));
            data.extend(s);
        }
    }
    Tensor::from_f64(&[frames, tokens, dim], &data).expect("position table")
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        let codec = Self::make_codec(&config)?;
        Ok(Self { config, params, codec })
    }

    fn make_codec(config: &BackboneConfig) -> Result<Option<LatentCodec<T>>> {
        if config.is_latent() {
            Ok(Some(LatentCodec::new(config.codec_seed, config.latent_channels, config.mask_channels)?))
        } else {
            Ok(None)
        }
    }

    /// Rebuilds a model from stored parameters, checking every name and shape.
    pub fn from_params(config: BackboneConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = init_params::<T>(&config, 0);
        for (name, t) in reference.iter() {
            let got = params.get(name).map_err(|_| Error::Shape(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Shape(format!("unexpected parameter {extra}")));
        }
        let codec = Self::make_codec(&config)?;
        Ok(Self { config, params, codec })
    }

    pub fn codec(&self) -> Option<&LatentCodec<T>> {
        self.codec.as_ref()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Adds N(0, std²) noise to every parameter. Stands in for a trained
    /// checkpoint in tests where zero-initialized heads would hide paths.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = stream(seed, "perturb");
        for (_, t) in self.params.iter_mut() {
            let noise = Tensor::<T>::randn(t.shape(), std, &mut rng);
            for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                *a += *b;
            }
        }
    }

    fn check_input(&self, g: &Graph<T>, x: Var, t: &[T], controls: &[ControlSignal], fpc: usize) -> Result<usize> {
        let s = g.shape(x);
        let (fh, fw) = self.config.flow_hw();
        if s.len() != 4 || s[1] != self.config.flow_channels() || s[2] != fh || s[3] != fw {
            return Err(Error::Shape(format!(
                "input {s:?} does not match [_, {}, {fh}, {fw}]",
                self.config.flow_channels()
            )));
        }
        let bt = s[0];
        if t.len() != bt || controls.len() != bt {
            return Err(Error::Shape(format!("{} frames, {} timesteps, {} controls", bt, t.len(), controls.len())));
        }
        if fpc == 0 || bt % fpc != 0 {
            return Err(Error::Shape(format!("{bt} frames do not split into clips of {fpc}")));
        }
        if let Some(c) = controls.iter().find(|c| c.kind() != self.config.conditioning) {
            return Err(Error::Config(format!("control {c:?} does not match {:?} conditioning", self.config.conditioning)));
        }
        Ok(bt)
    }

    /// Pixel-concat input path: per-modality patch encoders, concat, fuse MLP.
    pub fn encode(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        if self.config.variant != BackboneVariant::PixelConcat {
            return self.embed_latent(g, b, x);
        }
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.frame_channels() {
            return Err(Error::Shape(format!("input {s:?} needs {} channels", self.config.frame_channels())));
        }
        let (bt, c_total, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.config.patch;
        let n = self.config.tokens();
        let mut parts = Vec::with_capacity(3);
        let mut ch0 = 0;
        for (m, ch) in MODALITIES.iter().zip(self.config.modality_channels()) {
            let idx = Arc::new(layout::patchify(bt, c_total, h, w, p, ch0, ch));
            let tok = g.gather(x, idx, &[bt, n, p * p * ch])?;
            parts.push(b.linear(g, &format!("enc.{m}"), tok)?);
            ch0 += ch;
        }
        let cat = g.concat(&parts)?;
        let f = b.linear(g, "fuse.l1", cat)?;
        let f = g.silu(f)?;
        b.linear(g, "fuse.l2", f)
    }

    /// Latent input path: summed per-modality patch embeddings.
    fn embed_latent(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (bt, c_total, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.config.flow_patch();
        let n = self.config.tokens();
        let l = self.config.latent_channels;
        let embed = |g: &mut Graph<T>, b: &mut Binder<T>, m: &str, ch0: usize| -> Result<Var> {
            let idx = Arc::new(layout::patchify(bt, c_total, h, w, p, ch0, l));
            let tok = g.gather(x, idx, &[bt, n, p * p * l])?;
            b.linear(g, &format!("in.{m}"), tok)
        };
        let mut e = embed(g, b, "rgb", 0)?;
        if self.config.variant == BackboneVariant::LatentSum {
            for (i, m) in ["depth", "mask"].iter().enumerate() {
                let y = embed(g, b, m, (i + 1) * l)?;
                let gate = b.get(g, &format!("in.{m}.gate"))?;
                let y = g.mul(y, gate)?;
                e = g.add(e, y)?;
            }
        }
        Ok(e)
    }

    fn conditioning(&self, g: &mut Graph<T>, b: &mut Binder<T>, t: &[T], controls: &[ControlSignal]) -> Result<Var> {
        let bt = t.len();
        let d = self.config.dim;
        let tf = time_features(g, t)?;
        let te = b.linear(g, "temb.l1", tf)?;
        let te = g.silu(te)?;
        let te = b.linear(g, "temb.l2", te)?;

        let k = self.config.cond_features();
        let mut cf = vec![0.0; bt * k];
        for (i, c) in controls.iter().enumerate() {
            match c {
                ControlSignal::CameraPose(pose) => cf[i * k..(i + 1) * k].copy_from_slice(pose),
                ControlSignal::DiscreteAction(a) => cf[i * k + *a as usize] = 1.0,
            }
        }
        let cf = g.constant(Tensor::from_f64(&[bt, k], &cf)?)?;
        let ce = b.linear(g, "cond.l1", cf)?;
        let ce = g.silu(ce)?;
        let ce = b.linear(g, "cond.l2", ce)?;
        let sum = g.add(te, ce)?;
        Ok(g.reshape(sum, &[bt, 1, d])?)
    }

    fn block(&self, g: &mut Graph<T>, b: &mut Binder<T>, i: usize, x: Var) -> Result<Var> {
        let name = format!("blocks.{i}");
        let d = self.config.dim;
        let h = b.norm(g, &format!("{name}.ln1"), x)?;
        let q = b.linear(g, &format!("{name}.attn.q"), h)?;
        let k = b.linear(g, &format!("{name}.attn.k"), h)?;
        let v = b.linear(g, &format!("{name}.attn.v"), h)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, T::one() / T::lit(d as f64).sqrt())?;
        let att = g.softmax(scores)?;
        let o = g.matmul(att, v)?;
        let o = b.linear(g, &format!("{name}.attn.o"), o)?;
        let x = g.add(x, o)?;
        let h = b.norm(g, &format!("{name}.ln2"), x)?;
        let m = b.linear(g, &format!("{name}.mlp.l1"), h)?;
        let m = g.silu(m)?;
        let m = b.linear(g, &format!("{name}.mlp.l2"), m)?;
        Ok(g.add(x, m)?)
    }

    /// Trunk over embedded tokens `e: [B·T, N, d]`. Returns the normalized
    /// output tokens and the hidden state after block ℓ.
    pub fn trunk(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        e: Var,
        t: &[T],
        controls: &[ControlSignal],
        frames_per_clip: usize,
    ) -> Result<(Var, Var)> {
        let (n, d) = (self.config.tokens(), self.config.dim);
        let bt = t.len();
        if g.shape(e) != [bt, n, d] {
            return Err(Error::Shape(format!("embedding {:?} vs [{bt}, {n}, {d}]", g.shape(e))));
        }
        let pos = g.constant(position_table(bt, n, d, frames_per_clip))?;
        let x = g.add(e, pos)?;
        let cond = self.conditioning(g, b, t, controls)?;
        let x = g.add(x, cond)?;
        let clips = bt / frames_per_clip;
        let mut x = g.reshape(x, &[clips, frames_per_clip * n, d])?;
        let mut tap = None;
        for i in 0..self.config.depth {
            x = self.block(g, b, i, x)?;
            if i + 1 == self.config.tap_layer {
                tap = Some(g.reshape(x, &[bt, n, d])?);
            }
        }
        let x = g.reshape(x, &[bt, n, d])?;
        let out = b.norm(g, "final_ln", x)?;
        let tap = tap.ok_or_else(|| Error::Config(format!("tap layer {} out of range", self.config.tap_layer)))?;
        Ok((out, tap))
    }

    /// Pixel-concat output path: split MLP, per-modality decoders, unpatchify.
    pub fn decode(&self, g: &mut Graph<T>, b: &mut Binder<T>, tokens: Var) -> Result<Var> {
        if self.config.variant != BackboneVariant::PixelConcat {
            return Err(Error::Config("decode belongs to the pixel-concat variant".into()));
        }
        let (n, d, p) = (self.config.tokens(), self.config.dim, self.config.patch);
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != n || s[2] != d {
            return Err(Error::Shape(format!("tokens {s:?} vs [_, {n}, {d}]")));
        }
        let bt = s[0];
        let sp = b.linear(g, "split", tokens)?;
        let sp = g.silu(sp)?;
        let chunks = g.split(sp, &[d, d, d])?;
        let mut outs = Vec::with_capacity(3);
        for (m, c) in MODALITIES.iter().zip(chunks) {
            outs.push(b.linear(g, &format!("dec.{m}"), c)?);
        }
        let cat = g.concat(&outs)?;
        let c_total = self.config.frame_channels();
        let (h, w) = (self.config.height, self.config.width);
        let idx = Arc::new(layout::unpatchify(bt, c_total, h, w, p));
        Ok(g.gather(cat, idx, &[bt, c_total, h, w])?)
    }

    /// Adds `c(t) ⊙ x_t`, one coefficient per frame and channel from a
    /// zero-initialized time MLP.
    fn skip(&self, g: &mut Graph<T>, b: &mut Binder<T>, x_t: Var, t: &[T], v: Var) -> Result<Var> {
        let s = g.shape(x_t).to_vec();
        let (bt, c, hw) = (s[0], s[1], s[2] * s[3]);
        let tf = time_features(g, t)?;
        let k = b.linear(g, "skip.l1", tf)?;
        let k = g.silu(k)?;
        let k = b.linear(g, "skip.l2", k)?;
        let idx: Vec<usize> = (0..bt * c * hw).map(|i| i / hw).collect();
        let k = g.gather(k, Arc::new(idx), &s)?;
        let kx = g.mul(k, x_t)?;
        Ok(g.add(v, kx)?)
    }

    /// Depth/mask velocities of the latent-sum variant, pixel-major
    /// `[B·T, h·w, l]` each.
    ///
    /// `x_t` is the noisy tri-modal latent input, `v_rgb` the RGB head's
    /// velocity (pixel-major); the denoised RGB estimate is
    /// `x_rgb + (1 − t)·v_rgb`. `tokens` are the trunk's output tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn aux_branch(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        x_t: Var,
        v_rgb: Var,
        tokens: Var,
        t: &[T],
        frames_per_clip: usize,
    ) -> Result<(Var, Var)> {
        if self.config.variant != BackboneVariant::LatentSum {
            return Err(Error::Config(format!(
                "auxiliary branch requires the latent-sum variant, model is {}",
                self.config.variant.name()
            )));
        }
        let l = self.config.latent_channels;
        let a = self.config.aux_channels;
        let p = self.config.flow_patch();
        let (h, w) = self.config.flow_hw();
        let bt = t.len();
        let hw = h * w;
        let c_total = 3 * l;
        let z_dm = g.gather(x_t, Arc::new(layout::channels_to_pixels(bt, c_total, h, w, l, 2 * l)), &[bt, hw, 2 * l])?;
        let z_rgb = g.gather(x_t, Arc::new(layout::channels_to_pixels(bt, c_total, h, w, 0, l)), &[bt, hw, l])?;
        let remaining: Vec<T> = t.iter().map(|&v| T::one() - v).collect();
        let remaining = g.constant(Tensor::new(vec![bt, 1, 1], remaining)?)?;
        let step = g.mul(v_rgb, remaining)?;
        let denoised = g.add(z_rgb, step)?;
        let u = g.concat(&[z_dm, denoised])?;
        let clips = bt / frames_per_clip;
        let cols = g.gather(u, Arc::new(layout::im2col3(clips, frames_per_clip, h, w, 3 * l)), &[bt * hw, 27 * 3 * l])?;
        let conv = b.linear(g, "aux.conv", cols)?;
        let conv = g.reshape(conv, &[bt, hw, a])?;
        let hp = b.linear(g, "aux.hproj", tokens)?;
        let hp = g.gather(hp, Arc::new(layout::tokens_to_pixels(bt, a, h, w, p)), &[bt, hw, a])?;
        let f = g.add(conv, hp)?;
        let f = g.silu(f)?;
        let vd = b.linear(g, "aux.dm_depth", f)?;
        let vm = b.linear(g, "aux.dm_mask", f)?;
        Ok((vd, vm))
    }

    /// Full forward pass on flow-space input `x_t: [B·T, C, h, w]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        x_t: Var,
        t: &[T],
        controls: &[ControlSignal],
        frames_per_clip: usize,
    ) -> Result<ForwardOutput> {
        let bt = self.check_input(g, x_t, t, controls, frames_per_clip)?;
        let e = match self.config.variant {
            BackboneVariant::PixelConcat => self.encode(g, b, x_t)?,
            _ => self.embed_latent(g, b, x_t)?,
        };
        let (tokens, tap) = self.trunk(g, b, e, t, controls, frames_per_clip)?;
        let velocity = match self.config.variant {
            BackboneVariant::PixelConcat => {
                let v = self.decode(g, b, tokens)?;
                self.skip(g, b, x_t, t, v)?
            }
            BackboneVariant::LatentRgb => {
                let (l, p) = (self.config.latent_channels, self.config.flow_patch());
                let (h, w) = self.config.flow_hw();
                let v = b.linear(g, "head", tokens)?;
                g.gather(v, Arc::new(layout::unpatchify(bt, l, h, w, p)), &[bt, l, h, w])?
            }
            BackboneVariant::LatentSum => {
                let (l, p) = (self.config.latent_channels, self.config.flow_patch());
                let (h, w) = self.config.flow_hw();
                let v = b.linear(g, "head", tokens)?;
                let v_rgb = g.gather(v, Arc::new(layout::tokens_to_pixels(bt, l, h, w, p)), &[bt, h * w, l])?;
                let (vd, vm) = self.aux_branch(g, b, x_t, v_rgb, tokens, t, frames_per_clip)?;
                let all = g.concat(&[v_rgb, vd, vm])?;
                g.gather(all, Arc::new(layout::pixels_to_channels(bt, 3 * l, h, w)), &[bt, 3 * l, h, w])?
            }
        };
        Ok(ForwardOutput { velocity, tap, tokens })
    }

    /// Inference-only forward: velocity and hidden tap as plain tensors.
    pub fn predict(&self, x_t: &Tensor<T>, t: &[T], controls: &[ControlSignal], frames_per_clip: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(x_t.clone())?;
        let out = self.forward(&mut g, &mut b, x, t, controls, frames_per_clip)?;
        Ok((g.value(out.velocity).clone(), g.value(out.tap).clone()))
    }

    /// Grows an RGB-only latent model into the tri-modal latent-sum variant.
    ///
    /// Depth and mask embedders start as copies of the RGB patch embedding
    /// behind zero gates; the auxiliary convolution and the depth/mask output
    /// projectors start at zero. At initialization the RGB velocity equals the
    /// source model's output exactly.
    pub fn extend_from_rgb(rgb: &Backbone<T>, seed: u64) -> Result<Backbone<T>> {
        if rgb.config.variant != BackboneVariant::LatentRgb {
            return Err(Error::Config(format!(
                "extension needs an RGB-only latent model, got {}",
                rgb.config.variant.name()
            )));
        }
        let base = Backbone::from_params(rgb.config.clone(), rgb.params.clone())?;
        let mut config = base.config.clone();
        config.variant = BackboneVariant::LatentSum;
        let d = config.dim;
        let mut params = base.params.clone();
        let w = params.get("in.rgb.w")?.clone();
        let bias = params.get("in.rgb.b")?.clone();
        for m in ["depth", "mask"] {
            params.insert(format!("in.{m}.w"), w.clone());
            params.insert(format!("in.{m}.b"), bias.clone());
            params.insert(format!("in.{m}.gate"), Tensor::zeros(&[d]));
        }
        let mut rng = stream(seed, "aux-init");
        init_aux(&mut params, &config, &mut rng);
        Backbone::from_params(config, params)
    }
}

impl<T: Scalar> VelocityModel<T> for Backbone<T> {
    fn frame_channels(&self) -> usize {
        self.config.frame_channels()
    }

    fn to_flow(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        match (&self.codec, self.config.variant) {
            (Some(c), BackboneVariant::LatentRgb) => c.encode_rgb(pixels),
            (Some(c), _) => c.encode(pixels),
            (None, _) => Ok(pixels.clone()),
        }
    }

    fn from_flow(&self, flow: &Tensor<T>) -> Result<Tensor<T>> {
        match (&self.codec, self.config.variant) {
            (Some(c), BackboneVariant::LatentRgb) => c.decode_rgb(flow),
            (Some(c), _) => c.decode(flow),
            (None, _) => Ok(flow.clone()),
        }
    }

    fn velocity(&self, x_t: &Tensor<T>, t: &TimestepVector<T>, controls: &[ControlSignal], _frames: &[usize]) -> Result<Tensor<T>> {
        let fpc = x_t.shape()[0];
        Ok(self.predict(x_t, t.as_slice(), controls, fpc)?.0)
    }
}
