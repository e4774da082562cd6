use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Default central-difference step at 64-bit.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` w.r.t. each listed parameter.
///
/// Every coordinate is perturbed by `±h` in place and restored afterwards, so
/// the store is unchanged on return.
pub fn finite_diff_grad<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).len();
        let mut grad = Tensor::zeros(store.value(id).shape());
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = f(store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = f(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "finite_diff_grad: non-finite objective at {}[{k}]",
                    store.get(id).name
                )));
            }
            grad.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(store: &mut ParamStore, value: f64) -> ParamId {
        store.add("theta", Tensor::scalar(value), true).unwrap()
    }

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        let id = single(&mut s, 3.0);
        let g = finite_diff_grad(&mut s, &[id], DEFAULT_FD_STEP, |s| Ok(s.value(id).data()[0].powi(2))).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() <= 1e-8);
        assert_eq!(s.value(id).data()[0], 3.0);
    }

    #[test]
    fn constant_and_linear() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]), true).unwrap();
        let g = finite_diff_grad(&mut s, &[id], DEFAULT_FD_STEP, |_| Ok(4.2)).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(&mut s, &[id], DEFAULT_FD_STEP, |s| Ok(s.value(id).sum())).unwrap();
        assert!(g[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut s = ParamStore::new();
        let id = single(&mut s, 1.0);
        let r = finite_diff_grad(&mut s, &[id], DEFAULT_FD_STEP, |_| Ok(f64::INFINITY));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
