//! Flow matching along straight noise→data paths with one timestep per
//! frame, and windowed autoregressive Euler sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};
use crate::rng::stream;
use crate::synthworld::ControlSignal;

/// Per-frame timesteps, each in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepVector<T: Scalar>(Vec<T>);

impl<T: Scalar> TimestepVector<T> {
    pub fn new(t: Vec<T>) -> Result<Self> {
        if let Some(bad) = t.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Timestep(bad.as_f64()));
        }
        Ok(Self(t))
    }

    pub fn constant(frames: usize, t: T) -> Result<Self> {
        Self::new(vec![t; frames])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepMode {
    /// Each frame draws its own t ~ U[0,1].
    UniformIid,
    /// One t for the whole clip (plain flow matching).
    Shared,
}

pub fn sample_timesteps<T: Scalar, R: Rng + ?Sized>(frames: usize, mode: TimestepMode, rng: &mut R) -> TimestepVector<T> {
    let t = match mode {
        TimestepMode::UniformIid => (0..frames).map(|_| T::lit(rng.random::<f64>())).collect(),
        TimestepMode::Shared => vec![T::lit(rng.random::<f64>()); frames],
    };
    TimestepVector(t)
}

/// A noised clip and its regression target. The first axis of every tensor
/// indexes frames.
#[derive(Clone, Debug)]
pub struct FlowState<T: Scalar> {
    pub x_t: Tensor<T>,
    pub t_vec: TimestepVector<T>,
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub v_target: Tensor<T>,
}

impl<T: Scalar> FlowState<T> {
    /// Largest deviation from `x_t[i] = t_i·x1[i] + (1 − t_i)·x0[i]`.
    pub fn mixing_error(&self) -> f64 {
        let frames = self.t_vec.len();
        let per = self.x1.numel() / frames;
        let mut worst = 0.0f64;
        for (i, &t) in self.t_vec.as_slice().iter().enumerate() {
            let t = t.as_f64();
            for j in i * per..(i + 1) * per {
                let want = t * self.x1.data()[j].as_f64() + (1.0 - t) * self.x0.data()[j].as_f64();
                worst = worst.max((self.x_t.data()[j].as_f64() - want).abs());
            }
        }
        worst
    }
}

/// Mixes clean `x1` with noise `x0` frame by frame.
pub fn interpolate<T: Scalar>(x1: &Tensor<T>, x0: &Tensor<T>, t_vec: &TimestepVector<T>) -> Result<FlowState<T>> {
    if x1.shape() != x0.shape() {
        return Err(Error::Shape(format!("clip {:?} vs noise {:?}", x1.shape(), x0.shape())));
    }
    let frames = x1.shape()[0];
    if t_vec.len() != frames {
        return Err(Error::Shape(format!("{} timesteps for {frames} frames", t_vec.len())));
    }
    let per = x1.numel() / frames;
    let mut xt = x1.clone();
    let mut v = x1.clone();
    for (i, &t) in t_vec.as_slice().iter().enumerate() {
        for j in i * per..(i + 1) * per {
            let (a, b) = (x1.data()[j], x0.data()[j]);
            xt.data_mut()[j] = t * a + (T::one() - t) * b;
            v.data_mut()[j] = a - b;
        }
    }
    let state = FlowState { x_t: xt, t_vec: t_vec.clone(), x0: x0.clone(), x1: x1.clone(), v_target: v };
    debug_assert!(state.mixing_error() <= 1e-6, "mixing identity violated");
    Ok(state)
}

/// Mean squared error between predicted and target velocities.
pub fn fm_loss<T: Scalar>(g: &mut Graph<T>, v_pred: Var, v_target: Var) -> Result<Var> {
    if g.shape(v_pred) != g.shape(v_target) {
        return Err(Error::Shape(format!("velocity {:?} vs target {:?}", g.shape(v_pred), g.shape(v_target))));
    }
    let d = g.sub(v_pred, v_target)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

pub fn fm_loss_value<T: Scalar>(v_pred: &Tensor<T>, v_target: &Tensor<T>) -> Result<f64> {
    if v_pred.shape() != v_target.shape() {
        return Err(Error::Shape(format!("velocity {:?} vs target {:?}", v_pred.shape(), v_target.shape())));
    }
    let s: f64 = v_pred.data().iter().zip(v_target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(s / v_pred.numel() as f64)
}

/// `x + dt·v`.
pub fn euler_step<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>, dt: T) -> Result<Tensor<T>> {
    if x.shape() != v.shape() {
        return Err(Error::Shape(format!("state {:?} vs velocity {:?}", x.shape(), v.shape())));
    }
    if dt <= T::zero() {
        return Err(Error::Config(format!("Euler step size must be positive, got {dt}")));
    }
    Ok(x.zip_with(v, "euler_step", |a, b| a + dt * b)?)
}

/// Anything that predicts per-frame velocities for a window of frames.
pub trait VelocityModel<T: Scalar> {
    /// Channels of a pixel-space frame.
    fn frame_channels(&self) -> usize;

    /// Maps pixel frames `[F, C, H, W]` into the space the flow runs in.
    fn to_flow(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(pixels.clone())
    }

    fn from_flow(&self, flow: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(flow.clone())
    }

    /// Velocity for every frame of `x_t` (flow space). `frames` holds the
    /// absolute clip index of each window frame.
    fn velocity(&self, x_t: &Tensor<T>, t: &TimestepVector<T>, controls: &[ControlSignal], frames: &[usize]) -> Result<Tensor<T>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    /// Frames per sampling window, context included.
    pub window: usize,
    /// Euler steps from t=0 to t=1 per window.
    pub steps_per_frame: usize,
    pub max_horizon: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { window: 8, steps_per_frame: 8, max_horizon: 64 }
    }
}

/// Generates `horizon` frames after `context` (`[N_ctx, C, H, W]` pixels).
///
/// Context frames stay at t = 1. Each window integrates its new frames from
/// t = 0 to 1; the last `N_ctx` frames produced then seed the next window.
/// `controls` covers the whole output (`N_ctx + horizon` entries). The output
/// starts with `context` itself, bit for bit.
pub fn rollout<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    context: &Tensor<T>,
    controls: &[ControlSignal],
    horizon: usize,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    let n_ctx = context.shape()[0];
    if n_ctx == 0 {
        return Err(Error::Config("rollout needs at least one context frame".into()));
    }
    if context.shape()[1] != model.frame_channels() {
        return Err(Error::Shape(format!(
            "context has {} channels, model expects {}",
            context.shape()[1],
            model.frame_channels()
        )));
    }
    if horizon > cfg.max_horizon {
        return Err(Error::Horizon { horizon, max: cfg.max_horizon });
    }
    if horizon == 0 {
        return Ok(context.clone());
    }
    if cfg.window <= n_ctx || cfg.steps_per_frame == 0 {
        return Err(Error::Config(format!(
            "window {} must exceed context {n_ctx} and steps must be positive",
            cfg.window
        )));
    }
    if controls.len() < n_ctx + horizon {
        return Err(Error::Shape(format!("{} controls for {} frames", controls.len(), n_ctx + horizon)));
    }

    let flow_ctx = model.to_flow(context)?;
    let frame_shape = flow_ctx.shape()[1..].to_vec();
    let per: usize = frame_shape.iter().product();
    let mut frames: Vec<Tensor<T>> = (0..n_ctx).map(|i| flow_ctx.slice_rows(i, 1).unwrap()).collect();
    let mut rng: ChaCha8Rng = stream(seed, "rollout-noise");
    let dt = T::one() / T::lit(cfg.steps_per_frame as f64);

    while frames.len() < n_ctx + horizon {
        let start = frames.len() - n_ctx;
        let new = (cfg.window - n_ctx).min(n_ctx + horizon - frames.len());
        let mut shape = vec![new];
        shape.extend_from_slice(&frame_shape);
        let noise = Tensor::<T>::randn(&shape, 1.0, &mut rng);
        let ctx_refs: Vec<&Tensor<T>> = frames[start..].iter().collect();
        let ctx = Tensor::cat_rows(&ctx_refs)?;
        let mut x = Tensor::cat_rows(&[&ctx, &noise])?;
        let idx: Vec<usize> = (start..start + n_ctx + new).collect();
        let ctrl = &controls[start..start + n_ctx + new];
        for k in 0..cfg.steps_per_frame {
            let tk = T::lit(k as f64) * dt;
            let mut t = vec![T::one(); n_ctx];
            t.extend(std::iter::repeat_n(tk, new));
            let t = TimestepVector::new(t)?;
            let v = model.velocity(&x, &t, ctrl, &idx)?;
            if v.shape() != x.shape() {
                return Err(Error::Shape(format!("model velocity {:?} for window {:?}", v.shape(), x.shape())));
            }
            let xd = x.data_mut();
            for j in n_ctx * per..xd.len() {
                xd[j] += dt * v.data()[j];
            }
        }
        for i in n_ctx..n_ctx + new {
            frames.push(x.slice_rows(i, 1)?);
        }
    }

    let gen_refs: Vec<&Tensor<T>> = frames[n_ctx..].iter().collect();
    let generated = model.from_flow(&Tensor::cat_rows(&gen_refs)?)?;
    Ok(Tensor::cat_rows(&[context, &generated])?)
}

/// Planted model whose velocity carries each frame straight to a known clip:
/// `v = (x1 − x_t) / (1 − t)`, and zero for clean frames.
pub struct OracleVelocity<T: Scalar> {
    /// `[T_total, C, H, W]` ground truth in flow space.
    pub truth: Tensor<T>,
}

impl<T: Scalar> VelocityModel<T> for OracleVelocity<T> {
    fn frame_channels(&self) -> usize {
        self.truth.shape()[1]
    }

    fn velocity(&self, x_t: &Tensor<T>, t: &TimestepVector<T>, _controls: &[ControlSignal], frames: &[usize]) -> Result<Tensor<T>> {
        let per = x_t.numel() / x_t.shape()[0];
        let mut v = Tensor::zeros(x_t.shape());
        for (w, (&fi, &ti)) in frames.iter().zip(t.as_slice()).enumerate() {
            if ti >= T::one() {
                continue;
            }
            let truth = &self.truth.data()[fi * per..(fi + 1) * per];
            for j in 0..per {
                v.data_mut()[w * per + j] = (truth[j] - x_t.data()[w * per + j]) / (T::one() - ti);
            }
        }
        Ok(v)
    }
}
