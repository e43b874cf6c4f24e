//! Central-difference verification of analytic gradients.
//!
//! The checker owns nothing about the model: the caller supplies a
//! deterministic scalar loss as a closure over a named parameter set
//! plus the analytic gradient map to verify. When a sample budget is
//! set, each parameter group is checked at its largest-magnitude
//! gradient elements: those carry the optimization signal, and their
//! relative error stays meaningful, whereas near-zero elements drown in
//! difference-quotient roundoff (about 1e-10 absolute at h = 1e-6 in
//! 64-bit) long before a wrong backward rule could hide there.

use crate::error::{Error, Result};
use crate::tensor::{GradMap, Tensor};

/// Named parameter tensors in a fixed order.
pub type ParamSet = Vec<(String, Tensor)>;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the per-element error.
    pub tol: f64,
    /// Elements checked per parameter tensor; 0 checks every element.
    pub samples_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-6,
            tol: 1e-5,
            samples_per_param: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    /// One line per parameter plus a verdict, for the CLI report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            out.push_str(&format!(
                "{:<6} {:<32} checked {:>4}  max err {:>12.3e}  (analytic {: >13.6e}, numeric {: >13.6e} at [{}])\n",
                if p.pass { "ok" } else { "FAIL" },
                p.name,
                p.checked,
                p.max_err,
                p.worst_analytic,
                p.worst_numeric,
                p.worst_index,
            ));
        }
        out.push_str(&format!(
            "gradient check: {}\n",
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }

    /// Name of the first failing parameter, if any.
    pub fn first_failure(&self) -> Option<&str> {
        self.params.iter().find(|p| !p.pass).map(|p| p.name.as_str())
    }
}

/// Relative error with an absolute fallback for near-zero analytic
/// gradients.
fn element_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < 1e-8 {
        diff
    } else {
        diff / analytic.abs()
    }
}

/// Indices of the `samples` largest |gradient| entries (all of them
/// when `samples` is 0), in ascending index order.
fn sample_indices(grads: &[f64], samples: usize) -> Vec<usize> {
    if samples == 0 || samples >= grads.len() {
        return (0..grads.len()).collect();
    }
    let mut idx: Vec<usize> = (0..grads.len()).collect();
    idx.sort_by(|&a, &b| {
        grads[b]
            .abs()
            .partial_cmp(&grads[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked = idx[..samples].to_vec();
    picked.sort_unstable();
    picked
}

/// Compares `analytic` against central differences of `loss_fn`.
///
/// `loss_fn` must be a pure function of the parameter set; the checker
/// evaluates it twice at the starting point and rejects any mismatch as
/// non-determinism before perturbing anything.
pub fn grad_check(
    loss_fn: &mut dyn FnMut(&ParamSet) -> Result<f64>,
    params: &mut ParamSet,
    analytic: &GradMap,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut report = GradCheckReport {
        params: Vec::new(),
        pass: true,
    };

    for pi in 0..params.len() {
        let name = params[pi].0.clone();
        let numel = params[pi].1.numel();
        let grads = analytic.get(&name).ok_or_else(|| {
            Error::GradCheck(format!("no analytic gradient for parameter \"{name}\""))
        })?;
        if grads.len() != numel {
            return Err(Error::GradCheck(format!(
                "gradient length {} does not match parameter \"{name}\" ({numel})",
                grads.len()
            )));
        }

        let indices = sample_indices(grads, cfg.samples_per_param);
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            pass: true,
        };
        for &i in &indices {
            let original = params[pi].1.data()[i];
            params[pi].1.data_mut()[i] = original + cfg.h;
            let f_plus = loss_fn(params)?;
            params[pi].1.data_mut()[i] = original - cfg.h;
            let f_minus = loss_fn(params)?;
            params[pi].1.data_mut()[i] = original;

            let numeric = (f_plus - f_minus) / (2.0 * cfg.h);
            let a = grads[i];
            let err = element_error(a, numeric);
            if err > check.max_err {
                check.max_err = err;
                check.worst_index = i;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        check.pass = check.max_err <= cfg.tol;
        report.pass &= check.pass;
        report.params.push(check);
    }
    Ok(report)
}
