//! Finite-difference verification of reverse-mode gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum CheckStatus {
    Checked,
    /// Reduced-precision runs are reported but not held to the fp64 bound.
    SkippedByPolicy,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name of the entry with the largest error, e.g. `input0[2,1]` or `w.weight[0,3]`.
    pub worst_entry: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    pub entries: usize,
    pub status: CheckStatus,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.status == CheckStatus::Checked && self.max_rel_err < tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Relative error after discounting `slack`, the rounding error a central
/// difference can carry. Structurally zero gradients would otherwise
/// compare pure rounding noise against the 1e-8 floor.
pub fn rel_err_with_slack(a: f64, b: f64, slack: f64) -> f64 {
    ((a - b).abs() - slack).max(0.0) / a.abs().max(b.abs()).max(1e-8)
}

/// Bound on the rounding error of `(plus - minus) / (2 eps)` when each side
/// is a sum whose terms have absolute total `mag`.
fn fd_slack<T: Scalar>(mag: f64, eps: f64) -> f64 {
    let unit = if T::NAME == "f64" { f64::EPSILON } else { f32::EPSILON as f64 };
    4.0 * unit * mag / eps
}

fn scalarized<T: Scalar>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    upstream: &Tensor<T>,
    build: &impl Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let value = g.value(out);
    value.expect_shape(upstream.shape(), "grad_check output")?;
    let terms = value.data().iter().zip(upstream.data()).map(|(&a, &b)| (a * b).to_f64_lossy());
    Ok(terms.fold((0.0, 0.0), |(s, m), t| (s + t, m + t.abs())))
}

/// Compare reverse-mode gradients with central differences on every entry
/// of every input and every parameter in `store`.
///
/// The operation's output is reduced to a scalar through a random upstream
/// weighting, so every output entry participates.
pub fn grad_check<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    inputs: &[Tensor<T>],
    build: impl Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
    eps: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let (analytic_inputs, analytic_params, upstream) = {
        let mut g = Graph::new(&*store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let [r, c] = g.shape(out);
        let upstream = Tensor::<T>::randn(r, c, 1.0, rng);
        let grads = g.backward_with(out, upstream.clone())?;
        let gi: Vec<Tensor<T>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        let gp = grads.param_grads();
        (gi, gp, upstream)
    };

    let mut worst = (0.0f64, String::from("-"), (0.0, 0.0));
    let mut entries = 0usize;
    let mut note = |name: String, a: f64, n: f64, slack: f64| -> Result<()> {
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        let e = rel_err_with_slack(a, n, slack);
        entries += 1;
        if e > worst.0 || !e.is_finite() {
            worst = (e, name, (a, n));
        }
        Ok(())
    };

    let mut work = inputs.to_vec();
    for (k, grad) in analytic_inputs.iter().enumerate() {
        for idx in 0..work[k].len() {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + T::lit(eps);
            let plus = scalarized(store, &work, &upstream, &build)?;
            work[k].data_mut()[idx] = orig - T::lit(eps);
            let minus = scalarized(store, &work, &upstream, &build)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus.0 - minus.0) / (2.0 * eps);
            let slack = fd_slack::<T>(plus.1 + minus.1, eps);
            let cols = work[k].cols();
            note(format!("input{k}[{},{}]", idx / cols, idx % cols), grad.data()[idx].to_f64_lossy(), numeric, slack)?;
        }
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = analytic_params.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g.clone());
        let n = store.get(id).tensor.len();
        let cols = store.get(id).tensor.cols();
        let name = store.get(id).name.clone();
        for idx in 0..n {
            let orig = store.get(id).tensor.data()[idx];
            store.get_mut(id).tensor.data_mut()[idx] = orig + T::lit(eps);
            let plus = scalarized(store, &work, &upstream, &build)?;
            store.get_mut(id).tensor.data_mut()[idx] = orig - T::lit(eps);
            let minus = scalarized(store, &work, &upstream, &build)?;
            store.get_mut(id).tensor.data_mut()[idx] = orig;
            let numeric = (plus.0 - minus.0) / (2.0 * eps);
            let slack = fd_slack::<T>(plus.1 + minus.1, eps);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[idx].to_f64_lossy());
            note(format!("{name}[{},{}]", idx / cols, idx % cols), a, numeric, slack)?;
        }
    }

    let status = if T::NAME == "f64" { CheckStatus::Checked } else { CheckStatus::SkippedByPolicy };
    Ok(GradCheckReport { max_rel_err: worst.0, worst_entry: worst.1, worst_pair: worst.2, entries, status })
}
