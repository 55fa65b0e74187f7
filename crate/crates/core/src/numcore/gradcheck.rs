use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over every coordinate of every parameter.
    pub max_rel_err: f64,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    /// Parameters whose worst error is at or above `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&(String, f64)> {
        self.per_param.iter().filter(|(_, e)| *e >= tol).collect()
    }
}

/// Denominator floor of [`rel_err`]. Central differences at `eps = 1e-5`
/// carry roundoff near `1e-11`, so smaller gradients are compared on an
/// absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(REL_ERR_FLOOR, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<T: Scalar, F>(f: &F, store: &ParamStore<T>) -> Result<f64>
where
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::invalid("gradient check needs a scalar function"));
    }
    let v = v.item().as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    Ok(v)
}

/// Compares backward() against central differences `(f(p+eps) - f(p-eps)) / 2eps`
/// for every coordinate of every parameter in `store`.
///
/// `f` must be a deterministic function of the parameters. Values are
/// restored afterwards; stored gradients are left untouched.
pub fn grad_check<T: Scalar, F>(f: F, store: &mut ParamStore<T>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let ids: Vec<_> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        let mut param_worst = 0.0f64;
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + T::of(eps);
            let plus = eval(&f, store);
            store.get_mut(id).value.data_mut()[k] = orig - T::of(eps);
            let minus = eval(&f, store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k].as_f64());
            if !analytic.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of {}", store.get(id).name)));
            }
            param_worst = param_worst.max(rel_err(analytic, numeric));
        }
        worst = worst.max(param_worst);
        per_param.push((store.get(id).name.clone(), param_worst));
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Parameter, Tensor};

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::<f64>::new();
        store.insert(Parameter::new("p", Tensor::vector(vec![0.3, -1.2]), true)).unwrap();
        let report = grad_check(
            |tape| Ok(tape.constant(Tensor::scalar(4.0))),
            &mut store,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn quadratic_form() {
        // f(x) = xᵀ A x with A fixed; gradient (A + Aᵀ) x.
        let mut store = ParamStore::<f64>::new();
        let x = store
            .insert(Parameter::new("x", Tensor::from_f64_rows(&[&[0.5], &[-1.5], &[2.0]]).unwrap(), true))
            .unwrap();
        let a = Tensor::from_f64_rows(&[&[2.0, 0.5, 0.0], &[0.1, 1.0, -0.3], &[0.0, 0.7, 3.0]]).unwrap();
        let report = grad_check(
            |tape| {
                let xv = tape.param(x);
                let av = tape.constant(a.clone());
                let ax = tape.matmul(av, xv)?;
                let p = tape.mul(xv, ax)?;
                Ok(tape.sum(p))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }
}
