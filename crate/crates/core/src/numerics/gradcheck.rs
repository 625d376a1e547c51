//! Central-difference verification of reverse-mode gradients.

use crate::error::Result;

use super::graph::{Graph, Var};
use super::optim::ParamStore;
use super::tensor::Tensor;

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the gradient of the scalar `f` at `x` against
/// `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` and returns the largest relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let xv = g.input(x.clone());
        let loss = f(&g, xv)?;
        g.backward(loss)?.get(xv).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let xv = g.input(t);
        let out = f(&g, xv)?;
        let v = out.value().item();
        Ok(v)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter result of [`check_parameter_gradients`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Like [`finite_difference_check`], but perturbs every scalar of every
/// parameter in `store`. `f` must build the loss from `store` alone.
pub fn check_parameter_gradients<F>(store: &ParamStore, f: F, h: f64) -> Result<Vec<ParamCheck>>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let g = Graph::new();
        let loss = f(&g, store)?;
        g.backward(loss)?.accumulate_into(&mut analytic);
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let out = f(&g, s)?;
        let v = out.value().item();
        Ok(v)
    };

    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for (id, param) in store.iter().filter(|(_, p)| p.trainable) {
        let grad = analytic.get(id).grad.clone().expect("zeroed above");
        let mut worst = 0.0f64;
        for i in 0..param.value.numel() {
            let orig = param.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(grad.data()[i], (up - down) / (2.0 * h)));
        }
        report.push(ParamCheck {
            name: param.name.clone(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact_to_roundoff() {
        let err = finite_difference_check(|_, x| x.mul(&x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let err = finite_difference_check(|_, x| Ok(x.sigmoid()), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from backward but not from the probe
        let err = finite_difference_check(|_, x| x.detach().mul(&x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err > 0.1);
    }
}
