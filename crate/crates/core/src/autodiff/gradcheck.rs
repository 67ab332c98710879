//! Central-difference gradient checking.
//!
//! Relu kinks: a coordinate is excluded when nudging it by `±eps` changes
//! the sign pattern of any relu input relative to the unperturbed point.
//! A relu input sitting exactly at zero flips under the `+eps` probe, and
//! inputs close enough to zero for the difference to straddle the kink flip
//! under one of the two probes.

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Probe {
    value: f64,
    kinks: Vec<bool>,
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    tape.value(v)
        .item()
        .ok_or_else(|| Error::Usage("gradient check needs a scalar function".into()))
}

/// Checks `f` at `point` against its reverse-mode gradient.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var> + Sync + Send,
{
    let store = ParamStore::new();
    let probe = |x: &Tensor| -> Result<Probe> {
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.clone())?;
        let out = f(&mut tape, xv)?;
        let kinks = tape.kink_pattern();
        Ok(Probe {
            value: scalar_of(&tape, out)?,
            kinks: kinks.to_vec(),
        })
    };

    let mut tape = Tape::new(&store);
    let xv = tape.input(point.clone())?;
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    let base_kinks = tape.kink_pattern().to_vec();
    let (_, inputs) = tape.backward(out)?;
    let analytic = inputs
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let results = Execution::default().map_range(point.len(), |i| -> Result<Option<f64>> {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (p, m) = (probe(&plus)?, probe(&minus)?);
        if p.kinks != base_kinks || m.kinks != base_kinks {
            return Ok(None);
        }
        let numeric = (p.value - m.value) / (2.0 * eps);
        Ok(Some(relative_error(analytic.data()[i], numeric)))
    });
    summarize(results)
}

/// Checks selected parameter coordinates of `loss_fn`, which rebuilds the
/// loss on a fresh tape over the given store.
pub fn grad_check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var> + Sync + Send,
{
    let probe = |s: &ParamStore| -> Result<Probe> {
        let mut tape = Tape::new(s);
        let out = loss_fn(&mut tape)?;
        let kinks = tape.kink_pattern();
        Ok(Probe {
            value: scalar_of(&tape, out)?,
            kinks: kinks.to_vec(),
        })
    };

    let mut tape = Tape::new(store);
    let out = loss_fn(&mut tape)?;
    scalar_of(&tape, out)?;
    let base_kinks = tape.kink_pattern().to_vec();
    let (grads, _) = tape.backward(out)?;

    let results = Execution::default().map(coords, |&(id, i)| -> Result<Option<f64>> {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let mut plus = store.clone();
        plus.get_mut(id).value.data_mut()[i] += eps;
        let mut minus = store.clone();
        minus.get_mut(id).value.data_mut()[i] -= eps;
        let (p, m) = (probe(&plus)?, probe(&minus)?);
        if p.kinks != base_kinks || m.kinks != base_kinks {
            return Ok(None);
        }
        let numeric = (p.value - m.value) / (2.0 * eps);
        Ok(Some(relative_error(analytic, numeric)))
    });
    summarize(results)
}

fn summarize(results: Vec<Result<Option<f64>>>) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for r in results {
        match r? {
            Some(e) => {
                report.checked += 1;
                report.max_rel_error = report.max_rel_error.max(e);
            }
            None => report.excluded += 1,
        }
    }
    Ok(report)
}
