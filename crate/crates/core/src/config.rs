//! Run configuration files (TOML). Every key is optional; absent keys keep
//! their defaults, unknown sections or keys are errors.

use std::path::Path;

use toml::{Table, Value};

use crate::backbone::BackboneVariant;
use crate::error::{Error, Result};
use crate::flowmatch::TimestepMode;
use crate::synthworld::{ControlKind, MotionModel};
use crate::trainer::{Horizon, OptimizerKind, TrainConfig, Variant};

fn motion_name(m: MotionModel) -> &'static str {
    match m {
        MotionModel::Static => "static",
        MotionModel::Drift => "drift",
        MotionModel::Pan => "pan",
        MotionModel::DriftPan => "drift-pan",
    }
}

fn control_name(c: ControlKind) -> &'static str {
    match c {
        ControlKind::CameraPose => "camera-pose",
        ControlKind::DiscreteAction => "discrete-action",
    }
}

fn timestep_name(t: TimestepMode) -> &'static str {
    match t {
        TimestepMode::UniformIid => "per-frame",
        TimestepMode::Shared => "shared",
    }
}

fn optimizer_name(o: OptimizerKind) -> &'static str {
    match o {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
    }
}

fn choice<T: Copy>(key: &str, s: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == s).map(|&(_, v)| v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("{key}: unknown value {s:?}; expected one of {}", names.join(", ")))
    })
}

struct Section<'a> {
    name: &'a str,
    table: &'a Table,
}

impl Section<'_> {
    fn key(&self, k: &str) -> String {
        format!("[{}] {k}", self.name)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.table.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {} (allowed: {})", self.key(k), allowed.join(", "))));
            }
        }
        Ok(())
    }

    fn usize(&self, k: &str, out: &mut usize) -> Result<()> {
        if let Some(v) = self.table.get(k) {
            *out = match v {
                Value::Integer(i) if *i >= 0 => *i as usize,
                _ => return Err(Error::Config(format!("{} must be a non-negative integer, got {v}", self.key(k)))),
            };
        }
        Ok(())
    }

    fn u64(&self, k: &str, out: &mut u64) -> Result<()> {
        if let Some(v) = self.table.get(k) {
            *out = match v {
                Value::Integer(i) if *i >= 0 => *i as u64,
                // Seeds above i64::MAX are written as strings.
                Value::String(s) => s.parse().map_err(|_| Error::Config(format!("{} is not a u64: {s:?}", self.key(k))))?,
                _ => return Err(Error::Config(format!("{} must be a non-negative integer, got {v}", self.key(k)))),
            };
        }
        Ok(())
    }

    fn f64(&self, k: &str, out: &mut f64) -> Result<()> {
        if let Some(v) = self.table.get(k) {
            *out = match v {
                Value::Float(f) => *f,
                Value::Integer(i) => *i as f64,
                _ => return Err(Error::Config(format!("{} must be a number, got {v}", self.key(k)))),
            };
        }
        Ok(())
    }

    fn str(&self, k: &str) -> Result<Option<&str>> {
        match self.table.get(k) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(Error::Config(format!("{} must be a string, got {v}", self.key(k)))),
        }
    }
}

/// Parses a config file body on top of the defaults.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {e}")))?;
    let mut c = TrainConfig::default();
    for (name, v) in &root {
        let table = v
            .as_table()
            .ok_or_else(|| Error::Config(format!("top-level key {name:?} must be a section such as [model]")))?;
        let s = Section { name, table };
        match name.as_str() {
            "model" => {
                s.check_keys(&[
                    "height", "width", "mask_channels", "patch", "dim", "depth", "tap_layer", "mlp_ratio", "variant",
                    "conditioning", "latent_channels", "aux_channels", "codec_seed",
                ])?;
                let m = &mut c.model;
                s.usize("height", &mut m.height)?;
                s.usize("width", &mut m.width)?;
                s.usize("mask_channels", &mut m.mask_channels)?;
                s.usize("patch", &mut m.patch)?;
                s.usize("dim", &mut m.dim)?;
                s.usize("depth", &mut m.depth)?;
                s.usize("tap_layer", &mut m.tap_layer)?;
                s.usize("mlp_ratio", &mut m.mlp_ratio)?;
                s.usize("latent_channels", &mut m.latent_channels)?;
                s.usize("aux_channels", &mut m.aux_channels)?;
                s.u64("codec_seed", &mut m.codec_seed)?;
                if let Some(v) = s.str("variant")? {
                    m.variant = BackboneVariant::parse(v)
                        .ok_or_else(|| Error::Config(format!("[model] variant: unknown value {v:?}; expected pixel-concat, latent-sum or latent-rgb")))?;
                }
                if let Some(v) = s.str("conditioning")? {
                    m.conditioning = choice(
                        "[model] conditioning",
                        v,
                        &[("camera-pose", ControlKind::CameraPose), ("discrete-action", ControlKind::DiscreteAction)],
                    )?;
                }
            }
            "train" => {
                s.check_keys(&["variant", "steps", "batch", "lr", "optimizer", "seed", "beta1", "beta2", "eps", "timesteps"])?;
                if let Some(v) = s.str("variant")? {
                    c.variant = Variant::parse(v)?;
                }
                s.usize("steps", &mut c.steps)?;
                s.usize("batch", &mut c.batch)?;
                s.f64("lr", &mut c.lr)?;
                s.u64("seed", &mut c.seed)?;
                s.f64("beta1", &mut c.beta1)?;
                s.f64("beta2", &mut c.beta2)?;
                s.f64("eps", &mut c.eps)?;
                if let Some(v) = s.str("optimizer")? {
                    c.optimizer = choice("[train] optimizer", v, &[("sgd", OptimizerKind::Sgd), ("adam", OptimizerKind::Adam)])?;
                }
                if let Some(v) = s.str("timesteps")? {
                    c.timesteps = choice("[train] timesteps", v, &[("per-frame", TimestepMode::UniformIid), ("shared", TimestepMode::Shared)])?;
                }
            }
            "data" => {
                s.check_keys(&["frames", "context", "clips", "split", "objects", "motion"])?;
                s.usize("frames", &mut c.data.frames)?;
                s.usize("context", &mut c.data.context)?;
                s.usize("clips", &mut c.data.clips)?;
                s.f64("split", &mut c.data.split)?;
                s.usize("objects", &mut c.data.objects)?;
                if let Some(v) = s.str("motion")? {
                    c.data.motion = choice(
                        "[data] motion",
                        v,
                        &[
                            ("static", MotionModel::Static),
                            ("drift", MotionModel::Drift),
                            ("pan", MotionModel::Pan),
                            ("drift-pan", MotionModel::DriftPan),
                        ],
                    )?;
                }
            }
            "align" => {
                s.check_keys(&["lambda_align", "lambda_decouple", "projector_depth", "expert_dim", "expert_layers", "expert_seed", "cka_rows"])?;
                let a = &mut c.align;
                s.f64("lambda_align", &mut a.lambda_align)?;
                s.f64("lambda_decouple", &mut a.lambda_decouple)?;
                s.usize("projector_depth", &mut a.projector_depth)?;
                s.usize("expert_dim", &mut a.expert_dim)?;
                s.usize("expert_layers", &mut a.expert_layers)?;
                s.u64("expert_seed", &mut a.expert_seed)?;
                s.usize("cka_rows", &mut a.cka_rows)?;
            }
            "eval" => {
                s.check_keys(&["val_clips", "short_frames", "long_frames", "steps_per_frame", "horizon"])?;
                let e = &mut c.eval;
                s.usize("val_clips", &mut e.val_clips)?;
                s.usize("short_frames", &mut e.short_frames)?;
                s.usize("long_frames", &mut e.long_frames)?;
                s.usize("steps_per_frame", &mut e.steps_per_frame)?;
                if let Some(v) = s.str("horizon")? {
                    e.horizon = Horizon::parse(v)?;
                }
            }
            other => {
                return Err(Error::Config(format!("unknown section [{other}]; expected model, train, data, align or eval")));
            }
        }
    }
    Ok(c)
}

fn seed_value(s: u64) -> String {
    if s <= i64::MAX as u64 {
        s.to_string()
    } else {
        format!("\"{s}\"")
    }
}

/// Writes every field; `parse(&to_text(c)) == c`.
pub fn to_text(c: &TrainConfig) -> String {
    let m = &c.model;
    let (d, a, e) = (&c.data, &c.align, &c.eval);
    // `{:?}` on f64 always keeps a decimal point and round-trips exactly.
    format!(
        "[model]\nheight = {}\nwidth = {}\nmask_channels = {}\npatch = {}\ndim = {}\ndepth = {}\ntap_layer = {}\nmlp_ratio = {}\n\
variant = \"{}\"\nconditioning = \"{}\"\nlatent_channels = {}\naux_channels = {}\ncodec_seed = {}\n\n\
[train]\nvariant = \"{}\"\nsteps = {}\nbatch = {}\nlr = {:?}\noptimizer = \"{}\"\nseed = {}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\ntimesteps = \"{}\"\n\n\
[data]\nframes = {}\ncontext = {}\nclips = {}\nsplit = {:?}\nobjects = {}\nmotion = \"{}\"\n\n\
[align]\nlambda_align = {:?}\nlambda_decouple = {:?}\nprojector_depth = {}\nexpert_dim = {}\nexpert_layers = {}\nexpert_seed = {}\ncka_rows = {}\n\n\
[eval]\nval_clips = {}\nshort_frames = {}\nlong_frames = {}\nsteps_per_frame = {}\nhorizon = \"{}\"\n",
        m.height,
        m.width,
        m.mask_channels,
        m.patch,
        m.dim,
        m.depth,
        m.tap_layer,
        m.mlp_ratio,
        m.variant.name(),
        control_name(m.conditioning),
        m.latent_channels,
        m.aux_channels,
        seed_value(m.codec_seed),
        c.variant.name(),
        c.steps,
        c.batch,
        c.lr,
        optimizer_name(c.optimizer),
        seed_value(c.seed),
        c.beta1,
        c.beta2,
        c.eps,
        timestep_name(c.timesteps),
        d.frames,
        d.context,
        d.clips,
        d.split,
        d.objects,
        motion_name(d.motion),
        a.lambda_align,
        a.lambda_decouple,
        a.projector_depth,
        a.expert_dim,
        a.expert_layers,
        seed_value(a.expert_seed),
        a.cka_rows,
        e.val_clips,
        e.short_frames,
        e.long_frames,
        e.steps_per_frame,
        e.horizon.name(),
    )
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults_and_edits() {
        let mut c = TrainConfig::default();
        assert_eq!(parse(&to_text(&c)).unwrap(), c);
        c.seed = u64::MAX;
        c.lr = 8e-6;
        c.variant = Variant::RepaDepth;
        c.model.variant = BackboneVariant::LatentSum;
        c.data.motion = MotionModel::Static;
        assert_eq!(parse(&to_text(&c)).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_values_are_named() {
        let e = parse("[train]\nstepz = 3\n").unwrap_err().to_string();
        assert!(e.contains("[train] stepz"), "{e}");
        let e = parse("[oops]\n").unwrap_err().to_string();
        assert!(e.contains("[oops]"), "{e}");
        let e = parse("[train]\nvariant = \"x\"\n").unwrap_err().to_string();
        assert!(e.contains("m2repa-cka"), "{e}");
        let e = parse("[train]\nsteps = = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 2") || e.contains("malformed"), "{e}");
        assert_eq!(parse("").unwrap(), TrainConfig::default());
    }
}
