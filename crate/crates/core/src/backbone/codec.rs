//! Frozen stand-in for a pretrained VAE: each modality's 2×2 pixel patches
//! are projected onto `l` orthonormal directions; decoding applies the
//! transpose.

use super::layout;
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec<T: Scalar> {
    pub latent_channels: usize,
    pub mask_channels: usize,
    /// Row-orthonormal `[l, 4·c_m]` per modality.
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub mask: Tensor<T>,
}

/// `rows` orthonormal vectors of length `cols` by Gram–Schmidt on Gaussian draws.
fn orthonormal_rows<T: Scalar>(rows: usize, cols: usize, seed: u64, label: &str) -> Result<Tensor<T>> {
    if rows > cols {
        return Err(Error::Config(format!("cannot fit {rows} orthonormal rows in dimension {cols}")));
    }
    let mut rng = stream(seed, label);
    let raw = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut rng);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut v = raw.data()[r * cols..(r + 1) * cols].to_vec();
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= d * b;
                }
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.iter().map(|a| a / n).collect());
    }
    let flat: Vec<f64> = q.into_iter().flatten().collect();
    Ok(Tensor::from_f64(&[rows, cols], &flat)?)
}

impl<T: Scalar> LatentCodec<T> {
    pub fn new(seed: u64, latent_channels: usize, mask_channels: usize) -> Result<Self> {
        Ok(Self {
            latent_channels,
            mask_channels,
            rgb: orthonormal_rows(latent_channels, 12, seed, "codec-rgb")?,
            depth: orthonormal_rows(latent_channels, 4, seed, "codec-depth")?,
            mask: orthonormal_rows(latent_channels, 4 * mask_channels, seed, "codec-mask")?,
        })
    }

    fn encode_planes(&self, x: &Tensor<T>, ch0: usize, len: usize, q: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("codec needs even frame size, got {h}×{w}")));
        }
        let l = self.latent_channels;
        let tok = x.gather(&layout::patchify(f, c, h, w, 2, ch0, len), &[f, (h / 2) * (w / 2), 4 * len])?;
        let z = tok.matmul(&q.transpose()?)?;
        Ok(z.gather(&layout::pixels_to_channels(f, l, h / 2, w / 2), &[f, l, h / 2, w / 2])?)
    }

    fn decode_planes(&self, z: &Tensor<T>, ch0: usize, c: usize, q: &Tensor<T>) -> Result<Tensor<T>> {
        let s = z.shape();
        let (f, lt, h, w) = (s[0], s[1], s[2], s[3]);
        let l = self.latent_channels;
        let pm = z.gather(&layout::channels_to_pixels(f, lt, h, w, ch0, l), &[f, h * w, l])?;
        let tok = pm.matmul(q)?;
        Ok(tok.gather(&layout::unpatchify(f, c, 2 * h, 2 * w, 2), &[f, c, 2 * h, 2 * w])?)
    }

    /// `[F, 3+1+C, H, W]` → `[F, 3l, H/2, W/2]` (RGB, depth, mask latents).
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = x.shape()[1];
        if c != 4 + self.mask_channels {
            return Err(Error::Shape(format!("codec expects {} channels, got {c}", 4 + self.mask_channels)));
        }
        let zr = self.encode_planes(x, 0, 3, &self.rgb)?;
        let zd = self.encode_planes(x, 3, 1, &self.depth)?;
        let zm = self.encode_planes(x, 4, self.mask_channels, &self.mask)?;
        stack_channels(&[&zr, &zd, &zm])
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.latent_channels;
        let xr = self.decode_planes(z, 0, 3, &self.rgb)?;
        let xd = self.decode_planes(z, l, 1, &self.depth)?;
        let xm = self.decode_planes(z, 2 * l, self.mask_channels, &self.mask)?;
        stack_channels(&[&xr, &xd, &xm])
    }

    /// `[F, 3, H, W]` → `[F, l, H/2, W/2]`.
    pub fn encode_rgb(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.encode_planes(x, 0, 3, &self.rgb)
    }

    pub fn decode_rgb(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_planes(z, 0, 3, &self.rgb)
    }
}

/// Concatenates `[F, c_i, H, W]` tensors along the channel axis.
pub fn stack_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let s = parts[0].shape().to_vec();
    let plane = s[2] * s[3];
    let mut c_total = 0;
    for p in parts {
        let ps = p.shape();
        if ps.len() != 4 || ps[0] != s[0] || ps[2] != s[2] || ps[3] != s[3] {
            return Err(Error::Shape(format!("cannot stack {ps:?} onto {s:?}")));
        }
        c_total += ps[1];
    }
    let mut data = Vec::with_capacity(s[0] * c_total * plane);
    for i in 0..s[0] {
        for p in parts {
            let per = p.shape()[1] * plane;
            data.extend_from_slice(&p.data()[i * per..(i + 1) * per]);
        }
    }
    Ok(Tensor::new(vec![s[0], c_total, s[2], s[3]], data)?)
}
