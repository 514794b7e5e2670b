//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is ~0 are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERR_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a check of an objective with value `f` at step
/// `eps`. Central differences cannot resolve derivatives much below
/// `ε_mach·|f|/eps`; coordinates under a million times that resolution are
/// compared in absolute terms so rounding noise contributes at most ~1e-6.
pub fn resolution_floor(f: f64, eps: f64) -> f64 {
    REL_ERR_FLOOR.max(1e6 * f64::EPSILON * f.abs().max(1.0) / eps)
}

fn check_eps(eps: f64) -> Result<()> {
    if (1e-6..=1e-4).contains(&eps) {
        Ok(())
    } else {
        Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-4]")))
    }
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{what} evaluated to {value}")))
    }
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns the worst relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(t.clone());
        let out = f(&mut tape, v)?;
        finite(tape.scalar(out), "objective")
    };
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = f(&mut tape, v)?;
    let floor = resolution_floor(finite(tape.scalar(out), "objective")?, eps);
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(v).unwrap_or(&zeros).to_vec();

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error_floored(analytic[i], numeric, floor));
    }
    Ok(worst)
}

/// Outcome of checking every coordinate of a parameter store.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Finite-difference check of `f` with respect to every parameter in `store`.
///
/// `f` must be deterministic: any randomness it uses has to be re-seeded on
/// every call. Coordinates are split into chunks that run under `exec`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64, exec: Exec) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var> + Sync + Send,
{
    check_eps(eps)?;
    let (analytic, floor): (Vec<Vec<f64>>, f64) = {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let floor = resolution_floor(finite(tape.scalar(out), "objective")?, eps);
        let grads = tape.backward(out)?;
        let g = store
            .ids()
            .map(|id| grads.param(id).map_or_else(|| vec![0.0; store.get(id).len()], <[f64]>::to_vec))
            .collect();
        (g, floor)
    };

    let coords: Vec<(ParamId, usize)> =
        store.ids().flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i))).collect();
    const CHUNK: usize = 32;
    let chunks: Vec<&[(ParamId, usize)]> = coords.chunks(CHUNK).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        finite(tape.scalar(out), "objective")
    };
    let results: Vec<Result<Vec<f64>>> = exec.map(&chunks, |chunk| {
        let mut local = store.clone();
        chunk
            .iter()
            .map(|&(id, i)| {
                let orig = local.get(id).data()[i];
                local.get_mut(id).data_mut()[i] = orig + eps;
                let plus = eval(&local)?;
                local.get_mut(id).data_mut()[i] = orig - eps;
                let minus = eval(&local)?;
                local.get_mut(id).data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * eps))
            })
            .collect()
    });

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, worst_values: (0.0, 0.0), coordinates: coords.len() };
    for (chunk, res) in chunks.iter().zip(results) {
        for (&(id, i), numeric) in chunk.iter().zip(res?) {
            let a = analytic[id.index()][i];
            let err = relative_error_floored(a, numeric, floor);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((store.name(id).to_string(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
