//! Central finite-difference checks of reverse-mode gradients.
//!
//! A coordinate is skipped when the `+step` or `-step` evaluation changes the
//! graph's kink pattern (relu signs, BCE clamps, zero-norm rows): the
//! function is not differentiable between the probes, so a central
//! difference says nothing about the analytic gradient there.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - central| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        }
    }

    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped_kinks: self.skipped_kinks + other.skipped_kinks,
        }
    }
}

/// Scalar value of a forward evaluation plus its kink pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub kinks: Vec<bool>,
}

impl Probe {
    pub fn of(tape: &Tape, out: NodeId) -> Result<Probe> {
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape(format!(
                "gradient check needs a scalar, got {} values",
                v.len()
            )));
        }
        if !v[0].is_finite() {
            return Err(Error::NonFinite(format!("function value {}", v[0])));
        }
        Ok(Probe {
            value: v[0],
            kinks: tape.kink_pattern(),
        })
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn check_coordinate(
    analytic: f64,
    step: f64,
    center: &Probe,
    mut eval_at: impl FnMut(f64) -> Result<Probe>,
    report: &mut GradCheckReport,
) -> Result<()> {
    if !analytic.is_finite() {
        return Err(Error::NonFinite(format!("analytic gradient {analytic}")));
    }
    let plus = eval_at(step)?;
    let minus = eval_at(-step)?;
    if plus.kinks != center.kinks || minus.kinks != center.kinks {
        report.skipped_kinks += 1;
        return Ok(());
    }
    let numeric = (plus.value - minus.value) / (2.0 * step);
    report.max_rel_error = report.max_rel_error.max(rel_error(analytic, numeric));
    report.checked += 1;
    Ok(())
}

/// Checks the gradient of scalar `f` with respect to every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if !point.is_finite() {
        return Err(Error::NonFinite("gradient check point".into()));
    }
    let eval = |x: &Tensor| -> Result<Probe> {
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let out = f(&mut tape, id)?;
        Probe::of(&tape, out)
    };
    let tracked = point.clone().with_grad(true);
    let mut tape = Tape::new();
    let id = tape.leaf(&tracked);
    let out = f(&mut tape, id)?;
    let center = Probe::of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(id)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut report = GradCheckReport::empty();
    for (i, &a) in analytic.iter().enumerate() {
        check_coordinate(
            a,
            step,
            &center,
            |h| {
                let mut x = point.clone();
                x.data_mut()[i] += h;
                eval(&x)
            },
            &mut report,
        )?;
    }
    Ok(report)
}

/// Which parameter coordinates a [`check_params`] run probes.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Parameter names to include; empty means all.
    pub names: Vec<String>,
    /// Probe at most this many random coordinates per tensor.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Selection {
    pub fn all_tensors(per_tensor: usize, seed: u64) -> Self {
        Selection {
            names: Vec::new(),
            per_tensor,
            seed,
        }
    }

    pub fn only(names: &[&str], per_tensor: usize, seed: u64) -> Self {
        Selection {
            names: names.iter().map(|s| s.to_string()).collect(),
            per_tensor,
            seed,
        }
    }
}

/// Compares `analytic` (one gradient vector per parameter, in store order)
/// against central differences of `oracle` over the selected coordinates.
pub fn check_params<O>(
    params: &ParamStore,
    analytic: &[Vec<f64>],
    oracle: O,
    step: f64,
    select: &Selection,
) -> Result<GradCheckReport>
where
    O: Fn(&ParamStore) -> Result<Probe>,
{
    if analytic.len() != params.len() {
        return Err(Error::shape("analytic gradient set does not match parameters"));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let center = oracle(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(select.seed);
    let mut report = GradCheckReport::empty();
    for (ti, (name, tensor)) in params.iter().enumerate() {
        if !select.names.is_empty() && !select.names.iter().any(|n| n == name) {
            continue;
        }
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= select.per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, select.per_tensor).into_vec()
        };
        let name = name.to_string();
        for i in coords {
            check_coordinate(
                analytic[ti][i],
                step,
                &center,
                |h| {
                    let mut p = params.clone();
                    p.get_mut(&name).expect("name from iteration").data_mut()[i] += h;
                    oracle(&p)
                },
                &mut report,
            )?;
        }
    }
    Ok(report)
}
