use super::params::ParamStore;
use crate::error::{Error, Result};

/// Plain stochastic gradient descent: `p <- p - lr * grad(p)`, then clears
/// every gradient. Fails without touching anything if a parameter has no
/// gradient.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    for (_, t) in params.iter_mut() {
        let g = t.grad().expect("checked above").to_vec();
        for (p, d) in t.data_mut().iter_mut().zip(&g) {
            *p -= lr * d;
        }
        t.clear_grad();
    }
    Ok(())
}
