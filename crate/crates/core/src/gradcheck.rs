//! Central finite-difference oracle for hand-written gradients.

use crate::params::ParamTable;

/// Largest relative error between an analytic gradient and central
/// differences of `loss` over every coordinate of `params`.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// coordinates whose true gradient is numerically zero from dominating.
pub fn max_relative_error<P: ParamTable>(
    params: &P,
    analytic: &P,
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> GradCheck {
    let base = params.flatten();
    let grad = analytic.flatten();
    assert_eq!(base.len(), grad.len(), "gradient table shape differs");
    let mut probe = params.clone();
    let mut worst = GradCheck::default();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + step;
        probe.set_flat(&v).unwrap();
        let up = loss(&probe);
        v[i] = base[i] - step;
        probe.set_flat(&v).unwrap();
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * step);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(floor);
        worst.checked += 1;
        if rel > worst.max_rel {
            worst.max_rel = rel;
            worst.index = i;
            worst.analytic = grad[i];
            worst.numeric = numeric;
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}
