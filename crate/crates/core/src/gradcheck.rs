//! Central finite-difference checks of autodiff gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::DenseTensor;

/// Magnitude below which gradients are compared absolutely. Central
/// differences with `h = 1e-6` carry roundoff near `1e-10`, which would
/// dominate the relative error of an exactly-zero gradient.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Relative error with denominator `max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

fn eval(f: &impl Fn(&mut Graph, Var) -> Result<Var>, x: &DenseTensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.input(x, false);
    let out = f(&mut g, v)?;
    let y = g.scalar(out);
    if !y.is_finite() {
        return Err(Error::NonFinite("finite difference probe".into()));
    }
    Ok(y)
}

/// Compares the autodiff gradient of `f` at `x` with central differences
/// and returns the largest relative error.
pub fn finite_diff_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &DenseTensor,
    h: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.input(x, true);
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check over stored parameters. `f` builds the scalar
/// loss from the store; each listed parameter entry is perturbed in turn.
/// Returns the largest relative error.
pub fn param_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    let entries: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).tensor.numel()).map(move |i| (id, i)))
        .collect();
    param_check_entries(store, &entries, f, h)
}

/// Like [`param_check`], restricted to the `(parameter, flat index)` pairs
/// in `entries`.
pub fn param_check_entries(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    store.collect_grads(&g)?;
    let analytic: Vec<f64> = entries
        .iter()
        .map(|&(id, i)| store.get(id).tensor.grad().map_or(0.0, |s| s[i]))
        .collect();
    let mut worst: f64 = 0.0;
    for (&(id, i), a) in entries.iter().zip(analytic) {
        let orig = store.get(id).tensor.data()[i];
        let probe = |delta: f64, store: &mut ParamStore| -> Result<f64> {
            store.get_mut(id).tensor.data_mut()[i] = orig + delta;
            let mut g = Graph::new();
            let out = f(&mut g, store)?;
            Ok(g.scalar(out))
        };
        let up = probe(h, store);
        let down = probe(-h, store);
        store.get_mut(id).tensor.data_mut()[i] = orig;
        let numeric = (up? - down?) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite difference probe".into()));
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
