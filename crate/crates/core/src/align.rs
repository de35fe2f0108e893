//! Decoupling projectors, the multi-expert alignment loss, linear CKA and the
//! decoupling regularizers.

use std::sync::Arc;

use log::warn;
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::rng::stream;

/// Norm below which a token counts as zero in cosine terms.
pub const ZERO_NORM: f64 = 1e-8;

pub const DEFAULT_LAMBDA_ALIGN: f64 = 0.5;
pub const DEFAULT_LAMBDA_DECOUPLE: f64 = 0.05;
pub const DEFAULT_CKA_ROWS: usize = 1024;

/// One MLP per expert: `depth − 1` layers d → d, then d → D_k, SiLU between.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorBank<T: Scalar> {
    pub params: ParamStore<T>,
    pub input_dim: usize,
    pub output_dims: Vec<usize>,
    pub depth: usize,
}

impl<T: Scalar> ProjectorBank<T> {
    pub fn new(input_dim: usize, output_dims: &[usize], depth: usize, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("projector depth must be at least 1".into()));
        }
        if output_dims.is_empty() {
            return Err(Error::Config("projector bank needs at least one expert".into()));
        }
        let mut rng = stream(seed, "projectors");
        let mut params = ParamStore::new();
        for (k, &dk) in output_dims.iter().enumerate() {
            for i in 0..depth {
                let out = if i + 1 == depth { dk } else { input_dim };
                params.init_linear(&format!("proj.{k}.l{i}"), input_dim, out, 1.0, &mut rng);
            }
        }
        Ok(Self { params, input_dim, output_dims: output_dims.to_vec(), depth })
    }

    /// Rebuilds a bank from stored parameters, inferring dims from the weights.
    pub fn from_params(params: ParamStore<T>, count: usize, depth: usize) -> Result<Self> {
        let first = params.get("proj.0.l0.w")?;
        let input_dim = first.shape()[0];
        let mut output_dims = Vec::with_capacity(count);
        for k in 0..count {
            output_dims.push(params.get(&format!("proj.{k}.l{}.w", depth - 1))?.shape()[1]);
        }
        let reference = Self::new(input_dim, &output_dims, depth, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape(format!("projector {name}: expected {:?}, found {:?}", t.shape(), got.shape())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Shape(format!("projector bank has {} tensors, expected {}", params.len(), reference.params.len())));
        }
        Ok(Self { params, input_dim, output_dims, depth })
    }

    pub fn len(&self) -> usize {
        self.output_dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output_dims.is_empty()
    }

    /// `g_k(h)` for every projector; `h: [.., d]`.
    pub fn project(&self, g: &mut Graph<T>, b: &mut Binder<T>, h: Var) -> Result<Vec<Var>> {
        let d = *g.shape(h).last().unwrap();
        if d != self.input_dim {
            return Err(Error::Shape(format!("projector input dim {} vs hidden dim {d}", self.input_dim)));
        }
        (0..self.len())
            .map(|k| {
                let mut x = h;
                for i in 0..self.depth {
                    if i > 0 {
                        x = g.silu(x)?;
                    }
                    x = b.linear(g, &format!("proj.{k}.l{i}"), x)?;
                }
                Ok(x)
            })
            .collect()
    }
}

/// Negative mean token cosine, averaged over experts. Targets are treated as
/// constants whatever their tape status.
pub fn m2repa_loss<T: Scalar>(g: &mut Graph<T>, projected: &[Var], targets: &[Var]) -> Result<Var> {
    if projected.len() != targets.len() || projected.is_empty() {
        return Err(Error::Shape(format!("{} projected features vs {} targets", projected.len(), targets.len())));
    }
    let eps = T::lit(ZERO_NORM);
    let mut acc: Option<Var> = None;
    for (&p, &t) in projected.iter().zip(targets) {
        if g.shape(p) != g.shape(t) {
            return Err(Error::Shape(format!("projected {:?} vs target {:?}", g.shape(p), g.shape(t))));
        }
        let detached = g.value(t).clone();
        let t = g.constant(detached)?;
        let pn = g.l2_normalize(p, eps)?;
        let tn = g.l2_normalize(t, eps)?;
        let prod = g.mul(pn, tn)?;
        // mean over the last axis × D = sum; mean over all tokens of the batch
        let d = *g.shape(p).last().unwrap();
        let m = g.mean(prod)?;
        let cos = g.mul_scalar(m, T::lit(d as f64))?;
        acc = Some(match acc {
            Some(a) => g.add(a, cos)?,
            None => cos,
        });
    }
    let k = projected.len() as f64;
    Ok(g.mul_scalar(acc.unwrap(), T::lit(-1.0 / k))?)
}

fn center<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let mu = g.mean_axis(x, 0)?;
    Ok(g.sub(x, mu)?)
}

fn is_degenerate<T: Scalar>(raw: &Tensor<T>, centered: &Tensor<T>) -> bool {
    let tol = T::epsilon() * T::lit(64.0) * (T::one() + raw.max_abs());
    centered.max_abs() <= tol
}

/// Linear CKA `‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)` on column-centered `X: [n, p1]`,
/// `Y: [n, p2]`. A matrix that is all zero after centering gives 0.
pub fn linear_cka<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[0] {
        return Err(Error::Shape(format!("CKA needs [n, p] inputs with shared n, got {sx:?} and {sy:?}")));
    }
    if sx[0] < 2 {
        return Err(Error::Shape(format!("CKA needs at least 2 samples, got {}", sx[0])));
    }
    let xc = center(g, x)?;
    let yc = center(g, y)?;
    if is_degenerate(g.value(x), g.value(xc)) || is_degenerate(g.value(y), g.value(yc)) {
        warn!("linear CKA on a constant feature matrix; returning 0");
        return Ok(g.constant(Tensor::scalar(T::zero()))?);
    }
    let ycx = g.transpose(yc)?;
    let xcx = g.transpose(xc)?;
    let yx = g.matmul(ycx, xc)?;
    let xx = g.matmul(xcx, xc)?;
    let yy = g.matmul(ycx, yc)?;
    let num = frob_sq(g, yx)?;
    let nx = frob_sq(g, xx)?;
    let nx = g.sqrt(nx)?;
    let ny = frob_sq(g, yy)?;
    let ny = g.sqrt(ny)?;
    let den = g.mul(nx, ny)?;
    Ok(g.div(num, den)?)
}

fn frob_sq<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.square(x)?;
    Ok(g.sum(s)?)
}

/// Plain-value CKA for reporting and tests.
pub fn linear_cka_value<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let yv = g.constant(y.clone())?;
    let c = linear_cka(&mut g, xv, yv)?;
    Ok(g.value(c).item().as_f64())
}

/// Flattens `[.., D]` features to `[rows, D]`.
fn flatten<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let d = *s.last().unwrap();
    Ok(g.reshape(x, &[s.iter().product::<usize>() / d, d])?)
}

/// Row indices kept by the CKA subsampler: all rows if `rows ≤ cap`, else a
/// seeded uniform sample of `cap` rows in ascending order.
pub fn cka_rows(rows: usize, cap: usize, seed: u64) -> Vec<usize> {
    if rows <= cap {
        return (0..rows).collect();
    }
    let mut rng = stream(seed, "cka-rows");
    let mut idx = sample(&mut rng, rows, cap).into_vec();
    idx.sort_unstable();
    idx
}

fn select_rows<T: Scalar>(g: &mut Graph<T>, x: Var, rows: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if rows.len() == s[0] {
        return Ok(x);
    }
    let d = s[1];
    let index: Vec<usize> = rows.iter().flat_map(|&r| (0..d).map(move |c| r * d + c)).collect();
    Ok(g.gather(x, Arc::new(index), &[rows.len(), d])?)
}

/// `2/(K(K−1)) · Σ_{i<j} CKA(ĥ_i, ĥ_j)` over token rows, at most `cap` rows
/// (shared across experts, drawn from `seed`).
pub fn decouple_loss<T: Scalar>(g: &mut Graph<T>, projected: &[Var], cap: usize, seed: u64) -> Result<Var> {
    let k = projected.len();
    if k < 2 {
        return Err(Error::Config(format!("decoupling needs at least 2 experts, got {k}")));
    }
    let flat = projected.iter().map(|&p| flatten(g, p)).collect::<Result<Vec<_>>>()?;
    let n = g.shape(flat[0])[0];
    if let Some(&bad) = flat.iter().find(|&&f| g.shape(f)[0] != n) {
        return Err(Error::Shape(format!("expert rows differ: {n} vs {}", g.shape(bad)[0])));
    }
    let rows = cka_rows(n, cap.max(2), seed);
    let flat = flat.iter().map(|&f| select_rows(g, f, &rows)).collect::<Result<Vec<_>>>()?;
    let mut acc: Option<Var> = None;
    for i in 0..k {
        for j in i + 1..k {
            let c = linear_cka(g, flat[i], flat[j])?;
            acc = Some(match acc {
                Some(a) => g.add(a, c)?,
                None => c,
            });
        }
    }
    let coef = 2.0 / (k * (k - 1)) as f64;
    Ok(g.mul_scalar(acc.unwrap(), T::lit(coef))?)
}

/// Averages channels congruent modulo `to`, mapping `[.., from]` to `[.., to]`.
fn pool_channels<T: Scalar>(g: &mut Graph<T>, x: Var, to: usize) -> Result<Var> {
    let from = *g.shape(x).last().unwrap();
    if from == to {
        return Ok(x);
    }
    let mut counts = vec![0usize; to];
    for c in 0..from {
        counts[c % to] += 1;
    }
    let m = Tensor::from_fn(&[from, to], |i| {
        let (r, c) = (i / to, i % to);
        if r % to == c {
            T::one() / T::lit(counts[c] as f64)
        } else {
            T::zero()
        }
    });
    let m = g.constant(m)?;
    Ok(g.matmul(x, m)?)
}

/// Token-wise `cos²` between every expert pair, averaged over tokens, times
/// `2/(K(K−1))` (1/3 for three experts). Unequal feature dims are pooled to
/// the smaller one.
pub fn cos2_decouple_loss<T: Scalar>(g: &mut Graph<T>, projected: &[Var]) -> Result<Var> {
    let k = projected.len();
    if k < 2 {
        return Err(Error::Config(format!("cos² decoupling needs at least 2 experts, got {k}")));
    }
    let eps = T::lit(ZERO_NORM);
    let mut acc: Option<Var> = None;
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (projected[i], projected[j]);
            let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
            if sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(Error::Shape(format!("cos² pairs tokens of {sa:?} and {sb:?}")));
            }
            let d = (*sa.last().unwrap()).min(*sb.last().unwrap());
            let a = pool_channels(g, a, d)?;
            let b = pool_channels(g, b, d)?;
            let an = g.l2_normalize(a, eps)?;
            let bn = g.l2_normalize(b, eps)?;
            let prod = g.mul(an, bn)?;
            let cos = g.sum_axis(prod, sa.len() - 1)?;
            let sq = g.square(cos)?;
            let m = g.mean(sq)?;
            acc = Some(match acc {
                Some(x) => g.add(x, m)?,
                None => m,
            });
        }
    }
    let coef = 2.0 / (k * (k - 1)) as f64;
    Ok(g.mul_scalar(acc.unwrap(), T::lit(coef))?)
}

/// Scalar loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub fm: f64,
    pub align: f64,
    pub decouple: f64,
    pub total: f64,
    pub lambda_align: f64,
    pub lambda_decouple: f64,
}

pub fn check_lambdas(lambda_align: f64, lambda_decouple: f64) -> Result<()> {
    if !(lambda_align >= 0.0 && lambda_decouple >= 0.0) || !lambda_align.is_finite() || !lambda_decouple.is_finite() {
        return Err(Error::Config(format!(
            "loss weights must be finite and non-negative (λ_align {lambda_align}, λ_decouple {lambda_decouple})"
        )));
    }
    Ok(())
}

pub fn total_loss(fm: f64, align: f64, decouple: f64, lambda_align: f64, lambda_decouple: f64) -> Result<LossBreakdown> {
    check_lambdas(lambda_align, lambda_decouple)?;
    Ok(LossBreakdown { fm, align, decouple, total: fm + lambda_align * align + lambda_decouple * decouple, lambda_align, lambda_decouple })
}

/// Tape version of [`total_loss`]; absent terms count as zero.
pub fn total_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    fm: Var,
    align: Option<Var>,
    decouple: Option<Var>,
    lambda_align: f64,
    lambda_decouple: f64,
) -> Result<Var> {
    check_lambdas(lambda_align, lambda_decouple)?;
    let mut total = fm;
    if let Some(a) = align {
        let a = g.mul_scalar(a, T::lit(lambda_align))?;
        total = g.add(total, a)?;
    }
    if let Some(d) = decouple {
        let d = g.mul_scalar(d, T::lit(lambda_decouple))?;
        total = g.add(total, d)?;
    }
    Ok(total)
}
