//! Central-difference gradient oracle.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(g: &Graph, out: Var) -> Result<f64> {
    let shape = g.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must be scalar-valued, got shape {shape:?}"),
        ));
    }
    g.scalar(out)
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let g = Graph::new();
    let x = g.var(point.clone());
    let y = f(&g, x)?;
    eval_scalar(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let empty = ParamStore::new();
    let eval_at = |p: Tensor| -> Result<f64> {
        let g = Graph::inference(&empty);
        let x = g.input(p);
        let y = f(&g, x)?;
        eval_scalar(&g, y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check of a loss over stored parameters.
///
/// `f` builds the loss on the graph it is given and must be deterministic
/// (re-seed any randomness inside it). Coordinates are checked for every
/// parameter in `ids`; when `max_coords` is set, at most that many evenly
/// spaced coordinates per parameter are perturbed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&Graph) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let g = Graph::with_params(store);
    let y = f(&g)?;
    eval_scalar(&g, y)?;
    let grads = g.backward(y)?;

    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let g = Graph::inference(work);
        let y = f(&g)?;
        eval_scalar(&g, y)
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let err = grad_check(
            |g, x| g.sum(g.square(x)?),
            &Tensor::vector(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |g, _x| g.sum(g.input(Tensor::vector(&[4.0]))),
            &Tensor::vector(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_rejected() {
        let r = grad_check(|g, x| g.square(x), &Tensor::vector(&[1.0, 2.0]), 1e-5);
        assert!(r.is_err());
        let r = grad_check(|g, x| g.sum(x), &Tensor::vector(&[1.0]), 0.0);
        assert!(r.is_err());
    }
}
