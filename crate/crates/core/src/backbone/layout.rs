//! Gather index maps between image layouts. All maps are read by
//! [`Graph::gather`](crate::numcore::Graph::gather): entry `i` names the flat
//! source element of output element `i`, `usize::MAX` reads zero.
//!
//! Token `n` of a `p`-patched `H×W` image covers rows `(n / (W/p))·p ..` and
//! columns `(n % (W/p))·p ..`; features inside a token are ordered
//! `(channel, dy, dx)`. "Pixel-major" means `[B, H·W, C]`.

/// `[B, C, H, W]` → `[B, N, p·p·len]` using channels `ch0 .. ch0+len`.
pub fn patchify(b: usize, c_total: usize, h: usize, w: usize, p: usize, ch0: usize, len: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * gh * gw * p * p * len);
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                for c in 0..len {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (ty * p + dy, tx * p + dx);
                            idx.push(((bi * c_total + ch0 + c) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// `[B, N, p·p·c]` → `[B, c, H, W]`.
pub fn unpatchify(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let gw = w / p;
    let n_tok = (h / p) * gw;
    let feat = p * p * c;
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let n = (y / p) * gw + x / p;
                    let f = ch * p * p + (y % p) * p + x % p;
                    idx.push((bi * n_tok + n) * feat + f);
                }
            }
        }
    }
    idx
}

/// `[B, N, p·p·c]` → pixel-major `[B, H·W, c]`.
pub fn tokens_to_pixels(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let gw = w / p;
    let n_tok = (h / p) * gw;
    let feat = p * p * c;
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let n = (y / p) * gw + x / p;
                for ch in 0..c {
                    idx.push((bi * n_tok + n) * feat + ch * p * p + (y % p) * p + x % p);
                }
            }
        }
    }
    idx
}

/// Pixel-major `[B, H·W, c]` → `[B, N, p·p·c]`.
pub fn pixels_to_tokens(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (ty * p + dy, tx * p + dx);
                            idx.push((bi * h * w + y * w + x) * c + ch);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Pixel-major `[B, H·W, c]` → `[B, c, H, W]`.
pub fn pixels_to_channels(b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ch in 0..c {
            for p in 0..h * w {
                idx.push((bi * h * w + p) * c + ch);
            }
        }
    }
    idx
}

/// `[B, C, H, W]` → pixel-major `[B, H·W, len]` using channels `ch0 .. ch0+len`.
pub fn channels_to_pixels(b: usize, c_total: usize, h: usize, w: usize, ch0: usize, len: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * w * len);
    for bi in 0..b {
        for p in 0..h * w {
            for ch in 0..len {
                idx.push((bi * c_total + ch0 + ch) * h * w + p);
            }
        }
    }
    idx
}

/// 3×3×3 zero-padded im2col over clips of `t` frames: input pixel-major
/// `[B·T, H·W, c]`, output `[B·T·H·W, 27·c]` with columns ordered
/// `(dt, dy, dx, channel)`.
pub fn im2col3(clips: usize, t: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(clips * t * h * w * 27 * c);
    for bi in 0..clips {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for dt in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (st, sy, sx) = (ti as isize + dt - 1, y as isize + dy - 1, x as isize + dx - 1);
                                let inside = st >= 0 && (st as usize) < t && sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w;
                                for ch in 0..c {
                                    idx.push(if inside {
                                        (((bi * t + st as usize) * h + sy as usize) * w + sx as usize) * c + ch
                                    } else {
                                        usize::MAX
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}
