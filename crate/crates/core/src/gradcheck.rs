//! Central-difference gradient checking.
//!
//! The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` and a check
//! reports the maximum over all coordinates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{GpnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const REL_FLOOR: f64 = 1e-8;
/// Step reductions allowed when a stencil point crosses a ReLU kink.
pub const MAX_REFINE: u32 = 6;

/// Finite-difference rule used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`
    FivePoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Difference {
    pub h: f64,
    pub stencil: Stencil,
}

impl Difference {
    pub fn central(h: f64) -> Self {
        Difference {
            h,
            stencil: Stencil::Central,
        }
    }

    pub fn five_point(h: f64) -> Self {
        Difference {
            h,
            stencil: Stencil::FivePoint,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(GpnError::Config(format!(
                "gradcheck step must be positive, got {}",
                self.h
            )));
        }
        Ok(())
    }

    /// Numeric derivative at `x`. `eval` returns the function value and
    /// whether the point lies on the same ReLU piece as `x`; when a stencil
    /// point leaves it the step is quartered, up to [`MAX_REFINE`] times.
    fn derivative<E>(&self, x: f64, mut eval: E) -> Result<f64>
    where
        E: FnMut(f64) -> Result<(f64, bool)>,
    {
        let mut h = self.h;
        let mut refine = 0;
        loop {
            let offsets: &[(f64, f64)] = match self.stencil {
                Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
                Stencil::FivePoint => &[
                    (2.0, -1.0 / 12.0),
                    (1.0, 8.0 / 12.0),
                    (-1.0, -8.0 / 12.0),
                    (-2.0, 1.0 / 12.0),
                ],
            };
            let mut acc = 0.0;
            let mut same = true;
            for &(k, w) in offsets {
                let (v, on_piece) = eval(x + k * h)?;
                same &= on_piece;
                acc += w * v;
            }
            if same || refine == MAX_REFINE {
                return Ok(acc / h);
            }
            h /= 4.0;
            refine += 1;
        }
    }
}

impl From<f64> for Difference {
    fn from(h: f64) -> Self {
        Difference::central(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Name (or input position) and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            worst: None,
            worst_values: None,
            coordinates: 0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(err);
            self.worst = Some((name.to_string(), index));
            self.worst_values = Some((analytic, numeric));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn finite_scalar(g: &Graph, v: Var, what: &str, index: usize) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(GpnError::NonScalarLoss(t.shape().to_vec()));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(GpnError::NonFinite {
            context: format!("gradcheck evaluation perturbing {what}[{index}]"),
        });
    }
    Ok(x)
}

/// Check gradients w.r.t. free input tensors. `f` builds a scalar from the
/// leaves it is handed.
pub fn check_inputs<F, D>(inputs: &[Tensor], diff: D, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    D: Into<Difference>,
{
    let diff = diff.into();
    diff.validate()?;
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    finite_scalar(&g, out, "analytic pass", 0)?;
    let grads = g.backward(out)?;
    let pattern = g.relu_pattern();
    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let name = format!("input{slot}");
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[slot].shape()));
        for i in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[i];
            let numeric = diff.derivative(orig, |x| {
                work[slot].data_mut()[i] = x;
                let (g, _, out) = eval(&work)?;
                Ok((finite_scalar(&g, out, &name, i)?, g.relu_pattern() == pattern))
            })?;
            work[slot].data_mut()[i] = orig;
            report.record(&name, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Check gradients w.r.t. every parameter in `store`. `f` must read the
/// parameters through [`Graph::param`] on each call.
pub fn check_params<F, D>(store: &mut ParamStore, diff: D, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    D: Into<Difference>,
{
    check_params_filtered(store, diff, |_| true, f)
}

/// Like [`check_params`] restricted to parameters whose name passes `keep`.
pub fn check_params_filtered<F, K, D>(store: &mut ParamStore, diff: D, keep: K, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    K: Fn(&str) -> bool,
    D: Into<Difference>,
{
    let diff = diff.into();
    diff.validate()?;
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    finite_scalar(&g, out, "analytic pass", 0)?;
    let grads = g.backward(out)?;
    let pattern = g.relu_pattern();
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, gr) in grads.param_grads() {
        analytic[id.index()].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
    }
    drop(g);

    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut report = GradCheckReport::new();
    for (id, name) in ids {
        if !keep(&name) {
            continue;
        }
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            let numeric = diff.derivative(orig, |x| {
                store.value_mut(id).data_mut()[i] = x;
                let mut g = Graph::new();
                let out = f(&mut g, store)?;
                Ok((finite_scalar(&g, out, &name, i)?, g.relu_pattern() == pattern))
            })?;
            store.value_mut(id).data_mut()[i] = orig;
            report.record(&name, i, analytic[id.index()][i], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let x = Tensor::scalar(0.7);
        let r = check_inputs(&[x], Difference::five_point(0.1), |g, v| {
            let x2 = g.mul(v[0], v[0])?;
            let x4 = g.mul(x2, x2)?;
            Ok(g.sum(x4))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-12, "{r:?}");
    }

    #[test]
    fn kinks_shrink_the_step() {
        // |x| near zero: a step of 0.1 straddles the kink, the refined one does not
        let x = Tensor::scalar(0.01);
        let f = |g: &mut Graph, v: &[Var]| {
            let a = g.relu(v[0]);
            let n = g.scale(v[0], -1.0);
            let b = g.relu(n);
            g.add(a, b)
        };
        let r = check_inputs(&[x], Difference::central(0.1), f).unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let r = check_inputs(&[Tensor::scalar(1.0)], 0.0, |g, v| Ok(g.sum(v[0])));
        assert!(r.is_err());
    }

    #[test]
    fn reports_non_finite_with_index() {
        // log of a value pushed negative by the perturbation stays finite
        // because of clamping; use a division-like blowup instead.
        let x = Tensor::row(&[1.0, 0.0]);
        let r = check_inputs(&[x], 1e-3, |g, v| {
            let t = g.value(v[0]).clone();
            if t.data()[1] > 0.0 {
                let bad = g.constant(Tensor::scalar(f64::INFINITY));
                return Ok(bad);
            }
            Ok(g.sum(v[0]))
        });
        let err = r.unwrap_err().to_string();
        assert!(err.contains("input0[1]"), "{err}");
    }
}
