//! Central finite-difference oracle for analytic gradients.

use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
///
/// `loss_fn` returns the loss and its analytic gradients for the current
/// store values. It is probed twice at the unperturbed point; differing
/// results are reported as non-determinism. The store is restored on return.
pub fn finite_diff_check<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    epsilon: T,
    mut loss_fn: F,
) -> Result<T>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<(T, Gradients<T>)>,
{
    if epsilon.is_nan() || epsilon <= T::zero() {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let (base, grads) = loss_fn(store)?;
    let (again, _) = loss_fn(store)?;
    if base != again {
        return Err(Error::NonDeterministic(
            base.to_f64().unwrap_or(f64::NAN),
            again.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let two = T::one() + T::one();
    let mut worst = T::zero();
    for &id in params {
        let analytic = grads.dense(store, id);
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + epsilon;
            let plus = loss_fn(store).map(|r| r.0);
            store.value_mut(id).data_mut()[i] = orig - epsilon;
            let minus = loss_fn(store).map(|r| r.0);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (two * epsilon);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / T::one().max(a.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Checks every parameter in the store.
pub fn finite_diff_check_all<T, F>(store: &mut ParamStore<T>, epsilon: T, loss_fn: F) -> Result<T>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<(T, Gradients<T>)>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check(store, &ids, epsilon, loss_fn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::Graph;
    use crate::tensor::Tensor;

    fn quadratic(store: &ParamStore<f64>) -> Result<(f64, Gradients<f64>)> {
        // L = Σ (p_i − c_i)², c = (1, -2, 0.5)
        let id = store.require("p")?;
        let mut g = Graph::new(store);
        let p = g.param(id);
        let c = g.input(Tensor::new(vec![3], vec![-1.0, 2.0, -0.5])?);
        let d = g.add(p, c)?;
        let sq = g.mul(d, d)?;
        let l = g.sum(sq);
        let grads = g.backward(l)?;
        Ok((g.value(l).item(), grads))
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut s = ParamStore::new();
        s.register("p", Tensor::new(vec![3], vec![0.3, 1.7, -4.0]).unwrap()).unwrap();
        let err = finite_diff_check_all(&mut s, 1e-5, quadratic).unwrap();
        assert!(err < 1e-8, "err {err}");
        assert_eq!(s.value(s.id("p").unwrap()).data(), &[0.3, 1.7, -4.0]);
    }

    #[test]
    fn no_parameters_gives_zero() {
        let mut s = ParamStore::<f64>::new();
        let err = finite_diff_check_all(&mut s, 1e-5, |st| Ok((1.0, Gradients::empty(st.len())))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nondeterministic_loss_detected() {
        let mut s = ParamStore::<f64>::new();
        let mut calls = 0.0;
        let r = finite_diff_check_all(&mut s, 1e-5, |st| {
            calls += 1.0;
            Ok((calls, Gradients::empty(st.len())))
        });
        assert!(matches!(r, Err(Error::NonDeterministic(..))));
    }
}
