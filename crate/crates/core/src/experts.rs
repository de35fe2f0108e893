//! Frozen per-modality feature extractors and the external feature path.
//!
//! Each mock expert reads only its own modality's channels: a patch
//! embedding followed by `layers` residual mixing blocks, every weight drawn
//! from a fixed seed and never updated.

use std::path::Path;

use crate::backbone::layout;
use crate::error::{Error, Result};
use crate::format::read_tensor_file;
use crate::numcore::{Scalar, Tensor};
use crate::params::ParamStore;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Mask,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Mask];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Mask => "mask",
        }
    }

    /// `(first channel, channel count)` inside a fused `[3+1+C]` frame.
    pub fn channel_range(self, mask_channels: usize) -> (usize, usize) {
        match self {
            Modality::Rgb => (0, 3),
            Modality::Depth => (3, 1),
            Modality::Mask => (4, mask_channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSpec {
    pub modality: Modality,
    pub seed: u64,
    /// Feature dim D_k.
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub mask_channels: usize,
    /// Mixing blocks after the patch embedding.
    pub layers: usize,
}

impl ExpertSpec {
    pub fn new(modality: Modality, seed: u64) -> Self {
        Self { modality, seed, dim: 24, height: 16, width: 16, patch: 4, mask_channels: 3, layers: 2 }
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::Config(format!("expert dim {} below 4", self.dim)));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!("expert patch {} must divide {}×{}", self.patch, self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T: Scalar> {
    pub spec: ExpertSpec,
    params: ParamStore<T>,
}

pub fn build_expert<T: Scalar>(spec: ExpertSpec) -> Result<Expert<T>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &format!("expert-{}", spec.modality.name()));
    let (_, ch) = spec.modality.channel_range(spec.mask_channels);
    let (n, d) = (spec.tokens(), spec.dim);
    let mut p = ParamStore::new();
    p.init_linear("embed", spec.patch * spec.patch * ch, d, 2.0, &mut rng);
    p.insert("pos", Tensor::randn(&[n, d], 0.5, &mut rng));
    for i in 0..spec.layers {
        p.insert(format!("mix.{i}.tok"), Tensor::randn(&[n, n], 1.0 / (n as f64).sqrt(), &mut rng));
        p.init_linear(&format!("mix.{i}.ch"), d, d, 1.5, &mut rng);
    }
    Ok(Expert { spec, params: p })
}

impl<T: Scalar> Expert<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Features `[F, N, D_k]` of clean frames `[F, 3+1+C, H, W]`.
    pub fn extract(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &self.spec;
        let sh = frames.shape();
        if sh.len() != 4 || sh[1] != 4 + s.mask_channels || sh[2] != s.height || sh[3] != s.width {
            return Err(Error::Shape(format!(
                "expert {} expects [_, {}, {}, {}], got {sh:?}",
                s.modality.name(),
                4 + s.mask_channels,
                s.height,
                s.width
            )));
        }
        let f = sh[0];
        let (ch0, ch) = s.modality.channel_range(s.mask_channels);
        let (n, d) = (s.tokens(), s.dim);
        let idx = layout::patchify(f, sh[1], s.height, s.width, s.patch, ch0, ch);
        let patches = frames.gather(&idx, &[f, n, s.patch * s.patch * ch])?;
        let w = self.params.get("embed.w")?;
        let b = self.params.get("embed.b")?;
        let mut h = patches.matmul(w)?.add(b)?.add(self.params.get("pos")?)?.map(|v| v.tanh());
        for i in 0..s.layers {
            // token mixing as (hᵀ·Mᵀ)ᵀ, then a channel map
            let tok = self.params.get(&format!("mix.{i}.tok"))?;
            let mixed = h.transpose()?.matmul(&tok.transpose()?)?.transpose()?;
            let cw = self.params.get(&format!("mix.{i}.ch.w"))?;
            let cb = self.params.get(&format!("mix.{i}.ch.b"))?;
            let u = mixed.matmul(cw)?.add(cb)?.map(|v| v.tanh());
            h = h.add(&u)?;
        }
        debug_assert_eq!(h.shape(), &[f, n, d]);
        Ok(h.check_finite("expert features")?)
    }
}

/// The three default experts with distinct seeds derived from `seed`.
pub fn default_experts<T: Scalar>(seed: u64, height: usize, width: usize, patch: usize, mask_channels: usize) -> Result<Vec<Expert<T>>> {
    Modality::ALL
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let mut spec = ExpertSpec::new(m, crate::rng::derive_seed(seed, &format!("expert{i}")));
            spec.height = height;
            spec.width = width;
            spec.patch = patch;
            spec.mask_channels = mask_channels;
            build_expert(spec)
        })
        .collect()
}

/// Loads precomputed features `[B·T, N, D_k]` from a tensor file.
///
/// `expected` pins `(N, D_k)`; the frame extent is free.
pub fn ingest_features<T: Scalar>(path: &Path, expected: Option<(usize, usize)>) -> Result<Tensor<T>> {
    let (_, t) = read_tensor_file::<T>(path)?;
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("{}: feature tensor has rank {}, expected 3", path.display(), s.len())));
    }
    if let Some((n, d)) = expected {
        if s[1] != n {
            return Err(Error::Shape(format!("{}: expected N = {n} tokens, found {}", path.display(), s[1])));
        }
        if s[2] != d {
            return Err(Error::Shape(format!("{}: expected D = {d} channels, found {}", path.display(), s[2])));
        }
    }
    Ok(t.check_finite("ingested features")?)
}
