//! Central finite differences over a parameter set.
//!
//! Only forward evaluations of the loss are used, so the result is an
//! oracle independent of the tape's backward rules.

use crate::params::ParamSet;

/// Numerical gradient of `loss` at `params` with central step `h`.
pub fn numeric_gradient<F>(params: &ParamSet, h: f64, mut loss: F) -> ParamSet
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let len = params.get(name).unwrap().len();
        for i in 0..len {
            let orig = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            grads.get_mut(name).unwrap().data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps near-zero components from dominating; entries where both
/// values are below it are compared on an absolute scale.
pub fn max_relative_error(analytic: &ParamSet, numeric: &ParamSet, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
