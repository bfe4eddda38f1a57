//! Central finite differences, the independent gradient oracle.

use crate::autodiff::ParamStore;
use crate::error::Result;

/// Central-difference gradient of `f` with respect to every scalar in the
/// store, returned flat in store order. `f` must be deterministic.
pub fn finite_difference_gradient<F>(
    mut f: F,
    store: &mut ParamStore,
    step: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let base = store.flatten();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        store.unflatten(&probe);
        let plus = f(store)?;
        probe[i] = base[i] - step;
        store.unflatten(&probe);
        let minus = f(store)?;
        probe[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    store.unflatten(&base);
    Ok(grad)
}

/// Central-difference gradient of a plain vector function.
pub fn finite_difference_vec<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_vec(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_vec(|_| Ok(4.25), &[1.0, -2.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }
}
