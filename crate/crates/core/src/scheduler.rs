//! Continuous-time variance-preserving schedule with a linear rate.
//!
//! With `B(t) = beta_min * t + (beta_max - beta_min) * t^2 / 2` the integrated
//! rate, the schedule uses `alpha_bar(t) = exp(-B(t) / 2)`,
//! `alpha = sqrt(alpha_bar)`, `sigma = sqrt(1 - alpha_bar)`, and
//! `log_snr = log(alpha^2 / sigma^2)`. All quantities are `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_min: 1e-4,
            t_max: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValue {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub log_snr: f64,
}

/// Scalars of the reverse conditional `q(x_s | x_t, x0)`:
/// `mean = coef_xt * x_t + coef_x0 * x0`, isotropic variance `var`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_xt: f64,
    pub coef_x0: f64,
    pub var: f64,
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_min: f64, t_max: f64) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            t_min,
            t_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite(),
            InvalidArgument,
            "need 0 < beta_min < beta_max, got {} and {}",
            self.beta_min,
            self.beta_max
        );
        ensure!(
            self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0,
            InvalidArgument,
            "need 0 < t_min < t_max <= 1, got {} and {}",
            self.t_min,
            self.t_max
        );
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    pub fn clamp_t(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }

    /// `log alpha_bar(t)` on the clamped time.
    pub fn log_alpha_bar(&self, t: f64) -> f64 {
        let t = self.clamp_t(t);
        -0.5 * self.beta_min * t - 0.25 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn at(&self, t: f64) -> Result<ScheduleValue> {
        ensure!(t.is_finite(), InvalidArgument, "non-finite time {t}");
        let t = self.clamp_t(t);
        let la = self.log_alpha_bar(t);
        // 1 - alpha_bar without cancellation near t = 0
        let one_minus = -la.exp_m1();
        Ok(ScheduleValue {
            t,
            alpha: (0.5 * la).exp(),
            sigma: one_minus.sqrt(),
            log_snr: la - one_minus.ln(),
        })
    }

    pub fn posterior_coeffs(&self, s: f64, t: f64) -> Result<PosteriorCoeffs> {
        ensure!(
            s.is_finite() && t.is_finite() && s < t,
            InvalidArgument,
            "posterior needs s < t, got s={s} t={t}"
        );
        let (s, t) = (self.clamp_t(s), self.clamp_t(t));
        let (la_s, la_t) = (self.log_alpha_bar(s), self.log_alpha_bar(t));
        let var_s = -la_s.exp_m1();
        let var_t = -la_t.exp_m1();
        let alpha_s = (0.5 * la_s).exp();
        // alpha_{t|s} and sigma^2_{t|s} = 1 - alpha_bar_t / alpha_bar_s
        let alpha_ts = (0.5 * (la_t - la_s)).exp();
        let var_ts = -(la_t - la_s).exp_m1();
        Ok(PosteriorCoeffs {
            coef_xt: alpha_ts * var_s / var_t,
            coef_x0: alpha_s * var_ts / var_t,
            var: var_ts * var_s / var_t,
        })
    }

    pub fn posterior_params(
        &self,
        x_t: &Image,
        x0_hat: &Image,
        s: f64,
        t: f64,
    ) -> Result<(Image, f64)> {
        x_t.ensure_same_shape(x0_hat, "posterior_params")?;
        let c = self.posterior_coeffs(s, t)?;
        let mean: Vec<f64> = x_t
            .data()
            .iter()
            .zip(x0_hat.data())
            .map(|(&xt, &x0)| c.coef_xt * xt + c.coef_x0 * x0)
            .collect();
        Ok((Image::from_vec(x_t.shape(), mean)?, c.var))
    }

    /// `n_steps + 1` times, uniform, from `t_max` down to `t_min`.
    pub fn timestep_grid(&self, n_steps: usize) -> Result<Vec<f64>> {
        ensure!(
            n_steps >= 1,
            InvalidArgument,
            "need at least one sampling step"
        );
        let span = self.t_max - self.t_min;
        Ok((0..=n_steps)
            .map(|i| {
                if i == n_steps {
                    self.t_min
                } else {
                    self.t_max - span * (i as f64 / n_steps as f64)
                }
            })
            .collect())
    }
}

/// Forward marginal `alpha * x0 + sigma * noise`.
pub fn q_sample(sv: &ScheduleValue, x0: &Image, noise: &Image) -> Result<Image> {
    x0.ensure_same_shape(noise, "q_sample")?;
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| sv.alpha * x + sv.sigma * n)
        .collect();
    Image::from_vec(x0.shape(), data)
}

/// Invert the forward marginal for an epsilon prediction, optionally clipping
/// to the pixel range.
pub fn eps_to_x0(sv: &ScheduleValue, x_t: &Image, eps_hat: &Image, clip: bool) -> Result<Image> {
    x_t.ensure_same_shape(eps_hat, "eps_to_x0")?;
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| {
            let v = (x - sv.sigma * e) / sv.alpha;
            if clip {
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Image::from_vec(x_t.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::rng::{normal, RngStream};
    use proptest::prelude::*;

    /// Composite Simpson quadrature of the rate, independent of the closed form.
    fn integrated_beta(s: &NoiseSchedule, t: f64) -> f64 {
        let n = 1000;
        let h = t / n as f64;
        let mut acc = s.beta(0.0) + s.beta(t);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * s.beta(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let s = NoiseSchedule::default();
        for i in 0..=50 {
            let t = s.t_min + (s.t_max - s.t_min) * i as f64 / 50.0;
            let quad = (-0.5 * integrated_beta(&s, t)).exp();
            let sv = s.at(t).unwrap();
            assert!((sv.alpha * sv.alpha - quad).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn reference_point() {
        let sv = NoiseSchedule::default().at(0.5).unwrap();
        let abar = sv.alpha * sv.alpha;
        assert!((abar - 0.2811).abs() < 1e-4, "{abar}");
        assert!((sv.log_snr + 0.940).abs() < 2e-3, "{}", sv.log_snr);
    }

    #[test]
    fn clamps_and_rejects() {
        let s = NoiseSchedule::default();
        assert_eq!(s.at(0.0).unwrap().t, s.t_min);
        assert_eq!(s.at(3.0).unwrap().t, s.t_max);
        assert!(s.at(f64::NAN).is_err());
        assert!(NoiseSchedule::new(1.0, 0.5, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::new(0.1, 20.0, 0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.1, 20.0, 1e-4, 1.5).is_err());
    }

    #[test]
    fn grid_shapes() {
        let s = NoiseSchedule::default();
        assert_eq!(s.timestep_grid(1).unwrap(), vec![s.t_max, s.t_min]);
        let g = s.timestep_grid(32).unwrap();
        assert_eq!(g.len(), 33);
        let d0 = g[0] - g[1];
        for w in g.windows(2) {
            assert!(((w[0] - w[1]) - d0).abs() < 1e-12);
        }
        let g = s.timestep_grid(100).unwrap();
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert!(s.timestep_grid(0).is_err());
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let s = NoiseSchedule::default();
        let sv = s.at(0.3).unwrap();
        let shape = Shape::square(2, 1);
        let x0 = Image::from_vec(shape, vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let z = Image::zeros(shape);
        let out = q_sample(&sv, &x0, &z).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, sv.alpha * x);
        }
        let out = q_sample(&sv, &z, &x0).unwrap();
        for (o, n) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, sv.sigma * n);
        }
        assert!(q_sample(&sv, &x0, &Image::zeros(Shape::square(3, 1))).is_err());
    }

    #[test]
    fn q_sample_variance_matches_sigma_squared() {
        let sv = NoiseSchedule::default().at(0.4).unwrap();
        let mut rng = RngStream::new(3).rng();
        let n = 100_000;
        let shape = Shape::square(1, 1);
        let x0 = Image::filled(shape, 0.3);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let noise = Image::filled(shape, normal(&mut rng));
            xs.push(q_sample(&sv, &x0, &noise).unwrap().data()[0]);
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s2 = sv.sigma * sv.sigma;
        // standard error of a Gaussian sample variance
        let se = s2 * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - s2).abs() < 3.0 * se, "var {var} sigma^2 {s2}");
    }

    #[test]
    fn posterior_limits() {
        let s = NoiseSchedule::default();
        let shape = Shape::square(2, 1);
        let xt = Image::from_vec(shape, vec![0.3, -0.7, 0.1, 0.9]).unwrap();
        let x0 = Image::from_vec(shape, vec![-0.2, 0.5, 0.0, 0.4]).unwrap();
        let (mean, var) = s.posterior_params(&xt, &x0, 0.5 - 1e-9, 0.5).unwrap();
        assert!(var < 1e-8);
        assert!(mean.l2_distance(&xt) < 1e-6);
        let z = Image::zeros(shape);
        let (mean, _) = s.posterior_params(&z, &z, 0.2, 0.5).unwrap();
        assert!(mean.data().iter().all(|&v| v == 0.0));
        assert!(s.posterior_params(&xt, &x0, 0.5, 0.5).is_err());
        assert!(s.posterior_params(&xt, &x0, 0.6, 0.5).is_err());
    }

    /// Simulate x_s ~ q(x_s|x0) then x_t ~ q(x_t|x_s) on scalars, regress x_s
    /// on x_t in a thin band, and compare with the closed-form posterior.
    #[test]
    fn posterior_matches_forward_conditional_moments() {
        let sched = NoiseSchedule::default();
        let (s, t) = (0.3, 0.45);
        let (sv_s, sv_t) = (sched.at(s).unwrap(), sched.at(t).unwrap());
        let a_ts = sv_t.alpha / sv_s.alpha;
        let sig_ts = (1.0 - a_ts * a_ts).sqrt();
        let x0 = 0.6;
        let target_xt = 0.2;
        let band = 0.01;
        let mut rng = RngStream::new(11).rng();
        let mut kept = Vec::new();
        for _ in 0..2_000_000 {
            let xs = sv_s.alpha * x0 + sv_s.sigma * normal(&mut rng);
            let xt = a_ts * xs + sig_ts * normal(&mut rng);
            if (xt - target_xt).abs() < band {
                kept.push((xs, xt));
            }
        }
        let c = sched.posterior_coeffs(s, t).unwrap();
        // remove the small within-band drift of the mean
        let resid: Vec<f64> = kept
            .iter()
            .map(|&(xs, xt)| xs - c.coef_xt * (xt - target_xt))
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect_mean = c.coef_xt * target_xt + c.coef_x0 * x0;
        let se = (c.var / n).sqrt();
        assert!(
            (mean - expect_mean).abs() < 4.0 * se,
            "{mean} vs {expect_mean}"
        );
        assert!(
            (var / c.var - 1.0).abs() < 4.0 * (2.0 / n).sqrt() + 1e-3,
            "{var} vs {}",
            c.var
        );
    }

    #[test]
    fn two_hop_forward_matches_one_shot_marginal() {
        let sched = NoiseSchedule::default();
        let (s, t) = (0.2, 0.6);
        let (sv_s, sv_t) = (sched.at(s).unwrap(), sched.at(t).unwrap());
        let a_ts = sv_t.alpha / sv_s.alpha;
        let sig_ts = (1.0 - a_ts * a_ts).sqrt();
        let x0 = -0.4;
        let mut rng = RngStream::new(5).rng();
        let n = 200_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let xs = sv_s.alpha * x0 + sv_s.sigma * normal(&mut rng);
                a_ts * xs + sig_ts * normal(&mut rng)
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s2 = sv_t.sigma * sv_t.sigma;
        assert!((mean - sv_t.alpha * x0).abs() < 4.0 * (s2 / n as f64).sqrt());
        assert!((var - s2).abs() < 4.0 * s2 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn eps_inversion() {
        let sv = NoiseSchedule::default().at(0.7).unwrap();
        let shape = Shape::square(2, 3);
        let mut rng = RngStream::new(2).rng();
        let x0 = Image::from_vec(shape, crate::rng::normal_vec(&mut rng, 12)).unwrap();
        let n = Image::from_vec(shape, crate::rng::normal_vec(&mut rng, 12)).unwrap();
        let xt = q_sample(&sv, &x0, &n).unwrap();
        let back = eps_to_x0(&sv, &xt, &n, false).unwrap();
        assert!(back.l2_distance(&x0) < 1e-12);
        let zero = eps_to_x0(&sv, &xt, &Image::zeros(shape), false).unwrap();
        for (z, x) in zero.data().iter().zip(xt.data()) {
            assert_eq!(*z, x / sv.alpha);
        }
        let clipped = eps_to_x0(&sv, &xt, &Image::zeros(shape), true).unwrap();
        assert!(clipped.linf_norm() <= 1.0);
    }

    proptest! {
        #[test]
        fn variance_preserving_and_monotone(t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let s = NoiseSchedule::default();
            let (a, b) = (s.at(t1).unwrap(), s.at(t2).unwrap());
            prop_assert!((a.alpha * a.alpha + a.sigma * a.sigma - 1.0).abs() < 1e-12);
            prop_assert!((a.log_snr - (a.alpha * a.alpha / (a.sigma * a.sigma)).ln()).abs() < 1e-10);
            let (lo, hi) = if a.t < b.t { (a, b) } else { (b, a) };
            if lo.t < hi.t {
                prop_assert!(lo.log_snr > hi.log_snr);
                prop_assert!(lo.alpha > hi.alpha);
                prop_assert!(lo.sigma < hi.sigma);
            }
        }
    }
}
