//! Central finite-difference checks of analytic parameter gradients.

use crate::nn::Parameters;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic| + |numeric|, floor)` over the
    /// whole tensor (L2 norms).
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Perturbs every parameter by `±step` and compares `(f(+) - f(-)) / 2step`
/// with `grad`. Tensors whose gradients are both below `floor` count as
/// exact matches.
pub fn check_gradients<P>(
    params: &P,
    grad: &P,
    step: f64,
    floor: f64,
    objective: impl Fn(&P) -> f64,
) -> Vec<TensorCheck>
where
    P: Parameters<f64> + Clone,
{
    let analytic: Vec<(String, Vec<f64>)> = grad
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut out = Vec::with_capacity(analytic.len());
    for (index, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut i = 0;
                p.visit_mut("", &mut |_, t| {
                    if i == index {
                        t.data_mut()[k] += delta;
                    }
                    i += 1;
                });
                objective(&p)
            };
            *slot = (eval(step) - eval(-step)) / (2.0 * step);
        }
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let an = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let relative_error = if an + nn < floor { 0.0 } else { diff / (an + nn) };
        out.push(TensorCheck {
            name: name.clone(),
            relative_error,
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    out
}
