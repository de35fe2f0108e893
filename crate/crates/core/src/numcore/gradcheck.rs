use super::{Graph, NumError, Result, Scalar, Tensor, Var};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / (|numeric| + 1e-8)
    pub max_rel_error: f64,
    /// (input, flat index) of the worst coordinate
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

fn eval<T, F>(f: &F, xs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = xs.iter().map(|x| g.constant(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(NumError::NonScalarOutput(v.shape().to_vec()));
    }
    let v = v.item().as_f64();
    if !v.is_finite() {
        return Err(NumError::NonFinite { op: "finite_diff_check" });
    }
    Ok(v)
}

/// Compares the tape gradient of `f` against central differences with step
/// `h`, over every coordinate of every input tensor.
///
/// `f` receives the graph and one leaf per input and must return a
/// single-element node.
pub fn finite_diff_check_many<T, F>(f: F, xs: &[Tensor<T>], h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = xs.iter().map(|x| g.param(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let analytic = if g.requires_grad(out) {
        g.grad(out, &vars)?
    } else {
        xs.iter().map(|x| Tensor::zeros(x.shape())).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor<T>> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            work[ti].data_mut()[i] = T::lit(orig.as_f64() + h);
            let fp = eval(&f, &work)?;
            work[ti].data_mut()[i] = T::lit(orig.as_f64() - h);
            let fm = eval(&f, &work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[i].as_f64();
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, i);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`finite_diff_check_many`]; returns the max relative error.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}
