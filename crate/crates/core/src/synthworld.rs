//! Deterministic tri-modal scenes: colored rectangles and discs at distinct
//! depth planes on a toroidal canvas, viewed by a panning camera.
//!
//! Every clip is a pure function of `(seed, SceneConfig)`. Frame `i` is
//! `render(step(state_{i-1}, controls[i]))`, and [`SceneState::step`] is public
//! so tests can replay the controls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numcore::{Scalar, Tensor};
use crate::rng::derive_seed;

/// Background depth; all depths live in (0, D_MAX].
pub const D_MAX: f64 = 1.0;

/// Discrete camera moves: stay, left, right, up, down (1 px each).
pub const ACTION_COUNT: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("object count {objects} must be in 1..={channels} (mask channels)")]
    ObjectCount { objects: usize, channels: usize },
    #[error("frame size {0} not supported (16, 32 or 64)")]
    FrameSize(usize),
    #[error("clip needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("context count {context} must be in 1..{frames}")]
    Context { context: usize, frames: usize },
    #[error("dataset needs at least 2 clips, got {0}")]
    TooFewClips(usize),
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    SplitRatio(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionModel {
    /// Nothing moves; every control is the identity.
    Static,
    /// Objects drift with their own integer velocities; camera fixed.
    Drift,
    /// Objects fixed; the camera random-walks.
    Pan,
    /// Both.
    DriftPan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlKind {
    CameraPose,
    DiscreteAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Mask channels C.
    pub channels: usize,
    pub objects: usize,
    pub motion: MotionModel,
    pub control: ControlKind,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            objects: 3,
            motion: MotionModel::DriftPan,
            control: ControlKind::CameraPose,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for s in [self.height, self.width] {
            if ![16, 32, 64].contains(&s) {
                return Err(SynthError::FrameSize(s));
            }
        }
        if self.objects == 0 || self.objects > self.channels {
            return Err(SynthError::ObjectCount { objects: self.objects, channels: self.channels });
        }
        Ok(())
    }

    /// Channels of a fused frame: RGB + depth + masks.
    pub fn frame_channels(&self) -> usize {
        3 + 1 + self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { half_w: f64, half_h: f64 },
    Disc { radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: [f64; 3],
    pub depth: f64,
    /// World position of the center, in pixels.
    pub pos: [f64; 2],
    /// Pixels per frame.
    pub vel: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub config: SceneConfig,
    pub objects: Vec<SceneObject>,
    /// Camera offset in pixels; screen = world − camera.
    pub camera: [f64; 2],
    pub background: [f64; 3],
    /// Seeds the camera random walk.
    walk_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ControlSignal {
    /// Translation xyz then Euler rotation xyz.
    CameraPose([f64; 6]),
    DiscreteAction(u8),
}

impl ControlSignal {
    pub fn identity(kind: ControlKind) -> Self {
        match kind {
            ControlKind::CameraPose => ControlSignal::CameraPose([0.0; 6]),
            ControlKind::DiscreteAction => ControlSignal::DiscreteAction(0),
        }
    }

    pub fn kind(&self) -> ControlKind {
        match self {
            ControlSignal::CameraPose(_) => ControlKind::CameraPose,
            ControlSignal::DiscreteAction(_) => ControlKind::DiscreteAction,
        }
    }

    /// Camera translation in pixels implied by the control.
    pub fn camera_delta(&self) -> [f64; 2] {
        match self {
            ControlSignal::CameraPose(p) => [p[0], p[1]],
            ControlSignal::DiscreteAction(a) => match a {
                1 => [-1.0, 0.0],
                2 => [1.0, 0.0],
                3 => [0.0, -1.0],
                4 => [0.0, 1.0],
                _ => [0.0, 0.0],
            },
        }
    }

    fn from_delta(kind: ControlKind, d: [f64; 2]) -> Self {
        match kind {
            ControlKind::CameraPose => ControlSignal::CameraPose([d[0], d[1], 0.0, 0.0, 0.0, 0.0]),
            ControlKind::DiscreteAction => ControlSignal::DiscreteAction(match (d[0] as i64, d[1] as i64) {
                (-1, 0) => 1,
                (1, 0) => 2,
                (0, -1) => 3,
                (0, 1) => 4,
                _ => 0,
            }),
        }
    }

    /// One line of a controls file: `pose x y z rx ry rz` or `action a`.
    pub fn to_line(&self) -> String {
        match self {
            ControlSignal::CameraPose(p) => {
                let vals: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
                format!("pose {}", vals.join(" "))
            }
            ControlSignal::DiscreteAction(a) => format!("action {a}"),
        }
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace();
        match parts.next()? {
            "pose" => {
                let v: Vec<f64> = parts.map(|p| p.parse().ok()).collect::<Option<_>>()?;
                let arr: [f64; 6] = v.try_into().ok()?;
                Some(ControlSignal::CameraPose(arr))
            }
            "action" => {
                let a: u8 = parts.next()?.parse().ok()?;
                if parts.next().is_some() || a as usize >= ACTION_COUNT {
                    return None;
                }
                Some(ControlSignal::DiscreteAction(a))
            }
            _ => None,
        }
    }
}

/// Pixel-aligned RGB, depth and soft-mask planes of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TriModalFrame<T: Scalar> {
    /// `[3, H, W]` in [0, 1].
    pub rgb: Tensor<T>,
    /// `[1, H, W]` in (0, D_MAX].
    pub depth: Tensor<T>,
    /// `[C, H, W]` in [0, 1].
    pub mask: Tensor<T>,
}

impl<T: Scalar> TriModalFrame<T> {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn mask_channels(&self) -> usize {
        self.mask.shape()[0]
    }

    /// The fused `[3+1+C, H, W]` frame.
    pub fn fused(&self) -> Tensor<T> {
        Tensor::cat_rows(&[&self.rgb, &self.depth, &self.mask]).expect("aligned modalities")
    }

    pub fn from_fused(x: &Tensor<T>) -> Self {
        let c = x.shape()[0];
        Self {
            rgb: x.slice_rows(0, 3).expect("rgb planes"),
            depth: x.slice_rows(3, 1).expect("depth plane"),
            mask: x.slice_rows(4, c - 4).expect("mask planes"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriModalClip<T: Scalar> {
    pub frames: Vec<TriModalFrame<T>>,
    /// `controls[i]` maps frame i−1 to frame i; `controls[0]` is the identity.
    pub controls: Vec<ControlSignal>,
    pub context_count: usize,
}

impl<T: Scalar> TriModalClip<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `[T, 3+1+C, H, W]`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let fused: Vec<Tensor<T>> = self.frames.iter().map(|f| f.fused()).collect();
        let refs: Vec<&Tensor<T>> = fused.iter().collect();
        let stacked = Tensor::cat_rows(&refs).expect("uniform frames");
        let s = fused[0].shape();
        stacked.reshape(&[self.frames.len(), s[0], s[1], s[2]]).expect("frame stack")
    }

    pub fn from_tensor(x: &Tensor<T>, controls: Vec<ControlSignal>, context_count: usize) -> Self {
        let s = x.shape();
        let frames = (0..s[0])
            .map(|i| {
                let f = x.slice_rows(i, 1).unwrap().reshape(&s[1..]).unwrap();
                TriModalFrame::from_fused(&f)
            })
            .collect();
        Self { frames, controls, context_count }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames.len() < 2 {
            return Err(SynthError::TooFewFrames(self.frames.len()));
        }
        if self.context_count == 0 || self.context_count >= self.frames.len() {
            return Err(SynthError::Context { context: self.context_count, frames: self.frames.len() });
        }
        Ok(())
    }
}

fn wrap(v: f64, n: usize) -> f64 {
    v.rem_euclid(n as f64)
}

/// Minimal signed distance on a ring of size `n`.
fn ring_delta(a: f64, b: f64, n: usize) -> f64 {
    let n = n as f64;
    let d = (a - b).rem_euclid(n);
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

impl SceneObject {
    /// Whether the pixel center `(px, py)` lies inside the object drawn at
    /// screen position `center` on a toroidal canvas.
    fn covers(&self, center: [f64; 2], px: f64, py: f64, w: usize, h: usize) -> bool {
        let dx = ring_delta(px, center[0], w);
        let dy = ring_delta(py, center[1], h);
        match self.shape {
            Shape::Rect { half_w, half_h } => dx.abs() < half_w && dy.abs() < half_h,
            Shape::Disc { radius } => dx * dx + dy * dy < radius * radius,
        }
    }
}

/// Builds a scene fully determined by `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneState, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene"));
    let (w, h) = (config.width as f64, config.height as f64);
    let scale = config.width as f64 / 16.0;
    let n = config.objects;
    // one depth per stratum of (0.15, 0.85) guarantees distinct planes
    let mut strata: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        strata.swap(i, j);
    }
    let objects = (0..n)
        .map(|k| {
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    half_w: rng.random_range(1.5..3.5) * scale,
                    half_h: rng.random_range(1.5..3.5) * scale,
                }
            } else {
                Shape::Disc { radius: rng.random_range(2.0..3.8) * scale }
            };
            let lo = 0.15 + 0.7 * strata[k] as f64 / n as f64;
            let hi = 0.15 + 0.7 * (strata[k] as f64 + 0.8) / n as f64;
            let vel = match config.motion {
                MotionModel::Drift | MotionModel::DriftPan => {
                    [rng.random_range(-1i32..=1) as f64, rng.random_range(-1i32..=1) as f64]
                }
                _ => [0.0, 0.0],
            };
            SceneObject {
                shape,
                color: [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
                depth: rng.random_range(lo..hi),
                pos: [rng.random_range(0.0..w).floor() + 0.5, rng.random_range(0.0..h).floor() + 0.5],
                vel,
            }
        })
        .collect();
    Ok(SceneState {
        config: config.clone(),
        objects,
        camera: [0.0, 0.0],
        background: [rng.random_range(0.0..0.15), rng.random_range(0.0..0.15), rng.random_range(0.0..0.15)],
        walk_seed: derive_seed(seed, "camera-walk"),
    })
}

impl SceneState {
    /// Advances one frame: objects move by their velocity, the camera by the control.
    pub fn step(&self, control: &ControlSignal) -> SceneState {
        let mut next = self.clone();
        for o in &mut next.objects {
            o.pos = [o.pos[0] + o.vel[0], o.pos[1] + o.vel[1]];
        }
        let d = control.camera_delta();
        next.camera = [self.camera[0] + d[0], self.camera[1] + d[1]];
        next
    }

    /// The control applied between frame `i-1` and `i` under the motion model.
    fn control_for(&self, frame: usize) -> ControlSignal {
        let kind = self.config.control;
        match self.config.motion {
            MotionModel::Static | MotionModel::Drift => ControlSignal::identity(kind),
            MotionModel::Pan | MotionModel::DriftPan => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.walk_seed, &format!("frame-{frame}")));
                let d = match rng.random_range(0..ACTION_COUNT) {
                    1 => [-1.0, 0.0],
                    2 => [1.0, 0.0],
                    3 => [0.0, -1.0],
                    4 => [0.0, 1.0],
                    _ => [0.0, 0.0],
                };
                ControlSignal::from_delta(kind, d)
            }
        }
    }

    /// Renders the current state. Nearest object wins at every pixel in all
    /// three modalities.
    pub fn render<T: Scalar>(&self) -> TriModalFrame<T> {
        let (h, w, c) = (self.config.height, self.config.width, self.config.channels);
        let mut rgb = vec![0.0f64; 3 * h * w];
        let mut depth = vec![D_MAX; h * w];
        let mut mask = vec![0.0f64; c * h * w];
        let centers: Vec<[f64; 2]> = self
            .objects
            .iter()
            .map(|o| [wrap(o.pos[0] - self.camera[0], w), wrap(o.pos[1] - self.camera[1], h)])
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut best: Option<usize> = None;
                for (k, o) in self.objects.iter().enumerate() {
                    if o.covers(centers[k], px, py, w, h) && best.is_none_or(|b| o.depth < self.objects[b].depth) {
                        best = Some(k);
                    }
                }
                let p = y * w + x;
                let color = match best {
                    Some(k) => {
                        depth[p] = self.objects[k].depth;
                        mask[k * h * w + p] = 1.0;
                        self.objects[k].color
                    }
                    None => self.background,
                };
                for ch in 0..3 {
                    rgb[ch * h * w + p] = color[ch];
                }
            }
        }
        let conv = |v: Vec<f64>, s: &[usize]| Tensor::from_f64(s, &v).expect("render shape");
        TriModalFrame { rgb: conv(rgb, &[3, h, w]), depth: conv(depth, &[1, h, w]), mask: conv(mask, &[c, h, w]) }
    }

    /// Which objects cover pixel `(x, y)` in the current state.
    pub fn coverage(&self, x: usize, y: usize) -> Vec<usize> {
        let (h, w) = (self.config.height, self.config.width);
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                let c = [wrap(o.pos[0] - self.camera[0], w), wrap(o.pos[1] - self.camera[1], h)];
                o.covers(c, x as f64 + 0.5, y as f64 + 0.5, w, h)
            })
            .map(|(k, _)| k)
            .collect()
    }
}

/// Renders `frames` frames starting from `scene`, with `context_count` clean
/// context frames declared.
pub fn render_clip<T: Scalar>(scene: &SceneState, frames: usize, context_count: usize) -> Result<TriModalClip<T>, SynthError> {
    if frames < 2 {
        return Err(SynthError::TooFewFrames(frames));
    }
    if context_count == 0 || context_count >= frames {
        return Err(SynthError::Context { context: context_count, frames });
    }
    let mut state = scene.clone();
    let mut out = Vec::with_capacity(frames);
    let mut controls = Vec::with_capacity(frames);
    out.push(state.render());
    controls.push(ControlSignal::identity(scene.config.control));
    for i in 1..frames {
        let c = state.control_for(i);
        state = state.step(&c);
        out.push(state.render());
        controls.push(c);
    }
    Ok(TriModalClip { frames: out, controls, context_count })
}

/// Seed of clip `index` under `master`: `splitmix64(master ^ splitmix64(index))`.
pub fn clip_seed(master: u64, index: usize) -> u64 {
    crate::rng::splitmix64(master ^ crate::rng::splitmix64(index as u64))
}

/// Clip seeds for a deterministic train/validation split. The first
/// `round(n·ratio)` seeds (clamped to leave both sides nonempty) train.
pub fn dataset(master: u64, n_clips: usize, split_ratio: f64) -> Result<(Vec<u64>, Vec<u64>), SynthError> {
    if n_clips < 2 {
        return Err(SynthError::TooFewClips(n_clips));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(SynthError::SplitRatio(split_ratio));
    }
    let n_train = ((n_clips as f64 * split_ratio).round() as usize).clamp(1, n_clips - 1);
    let seeds: Vec<u64> = (0..n_clips).map(|i| clip_seed(master, i)).collect();
    Ok((seeds[..n_train].to_vec(), seeds[n_train..].to_vec()))
}

/// Renders the clip for one dataset seed.
pub fn clip_from_seed<T: Scalar>(seed: u64, config: &SceneConfig, frames: usize, context_count: usize) -> Result<TriModalClip<T>, SynthError> {
    let scene = generate_scene(seed, config)?;
    render_clip(&scene, frames, context_count)
}
