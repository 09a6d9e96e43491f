use super::graph::{Graph, Var};
use super::params::{Binder, ParamStore};
use super::TensorError;

/// Agreement between reverse-mode gradients and central differences.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
    /// Parameters for which some probe produced a non-finite loss.
    pub non_finite_probes: Vec<String>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_parameter_errors
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)` in the 2-norm.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Checks every element of every parameter in `params`.
pub fn grad_check<F, E>(loss_fn: F, params: &ParamStore, step: f64) -> Result<GradReport, E>
where
    F: for<'g> Fn(&Binder<'g, '_, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    grad_check_sampled(loss_fn, params, step, usize::MAX)
}

/// Like [`grad_check`] but probes at most `max_probes` evenly strided
/// elements per parameter.
pub fn grad_check_sampled<F, E>(loss_fn: F, params: &ParamStore, step: f64, max_probes: usize) -> Result<GradReport, E>
where
    F: for<'g> Fn(&Binder<'g, '_, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    grad_check_where(loss_fn, params, step, max_probes, |_| true)
}

/// Like [`grad_check_sampled`] restricted to parameters whose name matches
/// `select`. Useful where a stop-gradient makes the analytic gradient of
/// some parameters differ from the finite difference on purpose.
pub fn grad_check_where<F, E>(
    loss_fn: F,
    params: &ParamStore,
    step: f64,
    max_probes: usize,
    select: impl Fn(&str) -> bool,
) -> Result<GradReport, E>
where
    F: for<'g> Fn(&Binder<'g, '_, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = {
        let g = Graph::new();
        let b = Binder::new(&g, params);
        let loss = loss_fn(&b)?;
        let grads = g.backward(loss)?;
        b.grads(&grads)
    };
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let g = Graph::new();
        let b = Binder::frozen(&g, store);
        Ok(loss_fn(&b)?.item())
    };

    let mut report = GradReport::default();
    let mut work = params.clone();
    for id in params.ids().filter(|&id| select(params.name(id))) {
        let n = params.get(id).numel();
        let stride = n.div_ceil(max_probes.max(1)).max(1);
        let probes: Vec<usize> = (0..n).step_by(stride).collect();
        let mut numeric = Vec::with_capacity(probes.len());
        let mut finite = true;
        for &i in &probes {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                finite = false;
            }
            numeric.push((up - down) / (2.0 * step));
        }
        let name = params.name(id).to_string();
        let err = if finite {
            let a: Vec<f64> = match analytic.get(id) {
                Some(g) => probes.iter().map(|&i| g[i]).collect(),
                None => vec![0.0; probes.len()],
            };
            relative_error(&a, &numeric)
        } else {
            report.non_finite_probes.push(name.clone());
            f64::INFINITY
        };
        report.max_relative_error = report.max_relative_error.max(err);
        report.per_parameter_errors.push((name, err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_single_param() {
        let mut store = ParamStore::new();
        let p = store.insert("x", Tensor::vector(vec![1.7]));
        let report = grad_check(
            |b| {
                let x = b.get(p);
                Ok::<_, TensorError>(x.square()?.scale(3.0).sum())
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let mut store = ParamStore::new();
        let p = store.insert("x", Tensor::vector(vec![1e-6]));
        let report = grad_check(|b| Ok::<_, TensorError>(b.get(p).log().sum()), &store, 1e-5).unwrap();
        assert_eq!(report.non_finite_probes, vec!["x".to_string()]);
        assert!(report.max_relative_error.is_infinite());
    }
}
