use super::*;
use crate::params::ParamTable;
use proptest::prelude::*;

fn small_base() -> DenoiserParams {
    let mut c = DenoiserConfig::base(4, 1);
    c.hidden = vec![16, 16];
    DenoiserParams::init(c, &RngStream::new(1)).unwrap()
}

fn small_sr(stage: Stage, res: usize) -> DenoiserParams {
    let mut c = DenoiserConfig::super_resolution(stage, res);
    c.hidden = vec![8];
    DenoiserParams::init(c, &RngStream::new(2 + res as u64)).unwrap()
}

fn small_cascade_config() -> CascadeConfig {
    CascadeConfig {
        resolutions: [4, 8, 16],
        steps_per_stage: [5, 3, 2],
        guidance_scale: [2.0, 1.0, 1.0],
        clip_x0: true,
    }
}

fn noise_image(shape: Shape, seed: u64) -> Image {
    Image::from_vec(
        shape,
        normal_vec(&mut RngStream::new(seed).rng(), shape.len()),
    )
    .unwrap()
}

#[test]
fn guidance_endpoints_are_exact() {
    let p = small_base();
    let x = noise_image(p.config.image_shape(), 3);
    let cond = Conditioning::text(vec![0, 4]);
    let eps_c = p.forward(&x, 0.7, &cond).unwrap();
    let eps_u = p.forward(&x, 0.7, &cond.as_null()).unwrap();
    assert_ne!(eps_c, eps_u);
    assert_eq!(guided_eps(&p, &x, 0.7, &cond, 1.0).unwrap(), eps_c);
    assert_eq!(guided_eps(&p, &x, 0.7, &cond, 0.0).unwrap(), eps_u);
    let g = guided_eps(&p, &x, 0.7, &cond, 3.0).unwrap();
    for ((g, c), u) in g.data().iter().zip(eps_c.data()).zip(eps_u.data()) {
        assert!((g - (u + 3.0 * (c - u))).abs() < 1e-12);
    }
}

#[test]
fn guidance_is_irrelevant_without_text_pathway() {
    let mut p = small_base();
    p.config.text_conditioned = false;
    let x = noise_image(p.config.image_shape(), 4);
    let cond = Conditioning::text(vec![2]);
    let a = guided_eps(&p, &x, 0.1, &cond, 1.0).unwrap();
    for scale in [0.0, 0.5, 2.0, 7.5] {
        assert_eq!(guided_eps(&p, &x, 0.1, &cond, scale).unwrap(), a);
    }
}

#[test]
fn final_step_is_deterministic_mean() {
    let p = small_base();
    let sched = NoiseSchedule::default();
    let x = noise_image(p.config.image_shape(), 5);
    let cond = Conditioning::text(vec![1]);
    let opts = StageOptions::default();
    let (a, td) = p_sample_step(
        &p,
        &sched,
        &x,
        0.05,
        sched.t_min,
        &cond,
        &opts,
        7,
        &RngStream::new(1),
    )
    .unwrap();
    let (b, _) = p_sample_step(
        &p,
        &sched,
        &x,
        0.05,
        sched.t_min,
        &cond,
        &opts,
        7,
        &RngStream::new(2),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a, td.mean);
    assert_eq!(td.var, 0.0);
    assert!(td.log_density_per_patch.is_empty());
    assert_eq!(td.step_index, 7);
}

#[test]
fn step_rejects_reversed_times() {
    let p = small_base();
    let sched = NoiseSchedule::default();
    let x = noise_image(p.config.image_shape(), 6);
    let cond = Conditioning::text(vec![1]);
    let opts = StageOptions::default();
    assert!(p_sample_step(
        &p,
        &sched,
        &x,
        0.3,
        0.3,
        &cond,
        &opts,
        0,
        &RngStream::new(1)
    )
    .is_err());
    assert!(p_sample_step(
        &p,
        &sched,
        &x,
        0.3,
        0.5,
        &cond,
        &opts,
        0,
        &RngStream::new(1)
    )
    .is_err());
}

#[test]
fn intermediate_step_density_matches_draw() {
    let p = small_base();
    let sched = NoiseSchedule::default();
    let x = noise_image(p.config.image_shape(), 8);
    let cond = Conditioning::text(vec![1]);
    let opts = StageOptions {
        patch: Some(PatchSpec::grid(4, 4, 2).unwrap()),
        ..StageOptions::default()
    };
    let (xs, td) = p_sample_step(
        &p,
        &sched,
        &x,
        0.6,
        0.5,
        &cond,
        &opts,
        0,
        &RngStream::new(9),
    )
    .unwrap();
    let (again, _) = p_sample_step(
        &p,
        &sched,
        &x,
        0.6,
        0.5,
        &cond,
        &opts,
        0,
        &RngStream::new(9),
    )
    .unwrap();
    assert_eq!(xs, again);
    assert_eq!(td.log_density_per_patch.len(), 4);
    // independent evaluation of the isotropic Gaussian density
    let d = xs.shape().len() as f64;
    let sq: f64 = xs
        .data()
        .iter()
        .zip(td.mean.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let whole = -0.5 * d * (2.0 * std::f64::consts::PI * td.var).ln() - sq / (2.0 * td.var);
    assert!((td.total() - whole).abs() < 1e-10);
    assert_eq!(td.var, sched.posterior_coeffs(0.5, 0.6).unwrap().var);
}

#[test]
fn standard_normal_at_mode() {
    let shape = Shape::square(1, 1);
    let ld = gaussian_log_density(
        &Image::zeros(shape),
        &Image::zeros(shape),
        1.0,
        &PatchSpec::whole(1, 1),
    )
    .unwrap();
    assert!((ld[0] + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    assert!((ld[0] + 0.9189).abs() < 1e-4);
}

proptest! {
    #[test]
    fn patch_log_densities_add_up(
        seed in 0u64..1000,
        var in 1e-4f64..4.0,
        assignment in proptest::collection::vec(0usize..5, 16),
    ) {
        // relabel to dense ids
        let mut ids: Vec<usize> = assignment.clone();
        ids.sort();
        ids.dedup();
        let dense: Vec<usize> = assignment.iter().map(|a| ids.binary_search(a).unwrap()).collect();
        let spec = PatchSpec::from_assignment(4, 4, dense).unwrap();
        let shape = Shape::square(4, 3);
        let x = noise_image(shape, seed);
        let m = noise_image(shape, seed + 5000);
        let parts = gaussian_log_density(&x, &m, var, &spec).unwrap();
        let whole = gaussian_log_density(&x, &m, var, &PatchSpec::whole(4, 4)).unwrap();
        prop_assert_eq!(parts.len(), spec.n_patches());
        prop_assert!((parts.iter().sum::<f64>() - whole[0]).abs() < 1e-10);
    }
}

#[test]
fn zero_denoiser_single_step() {
    let mut p = small_base();
    let head = p.layers.last_mut().unwrap();
    head.weight.fill(0.0);
    head.bias.fill(0.0);
    let t = p.template.as_mut().unwrap();
    // the initial bias holds a zero mean and the configured variances
    t.w2.fill(0.0);
    p.skip_gate.fill(1.0);
    let sched = NoiseSchedule::default();
    let opts = StageOptions {
        steps: 1,
        ..StageOptions::default()
    };
    let cond = Conditioning::text(vec![3]);
    let stream = RngStream::new(11);
    let (img, tds) = sample_stage(&p, &sched, &opts, &cond, &stream).unwrap();
    // the initial state is the first draw of the stream
    let shape = p.config.image_shape();
    let x_t = Image::from_vec(shape, normal_vec(&mut stream.rng(), shape.len())).unwrap();
    let sv = sched.at(sched.t_max).unwrap();
    let c = sched.posterior_coeffs(sched.t_min, sched.t_max).unwrap();
    // what is left is the skip path: grey and chroma parts scaled apart
    let gain = |v: f64| sv.sigma / (sv.alpha * sv.alpha * v + sv.sigma * sv.sigma);
    let (gl, gc) = (gain(p.config.skip_var[0]), gain(p.config.skip_var[1]));
    let mut expect = x_t.clone();
    for px in expect.data_mut().chunks_mut(3) {
        let m = px.iter().sum::<f64>() / 3.0;
        for v in px.iter_mut() {
            let eps = gl * m + gc * (*v - m);
            let x0 = ((*v - sv.sigma * eps) / sv.alpha).clamp(-1.0, 1.0);
            *v = (c.coef_xt * *v + c.coef_x0 * x0).clamp(-1.0, 1.0);
        }
    }
    assert!(img.l2_distance(&expect) < 1e-12);
    assert_eq!(tds.len(), 1);
    assert_eq!(
        sample_stage(&p, &sched, &opts, &cond, &stream).unwrap().0,
        img
    );
}

#[test]
fn seeds_change_samples_and_range_is_bounded() {
    let p = small_base();
    let sched = NoiseSchedule::default();
    let opts = StageOptions {
        steps: 6,
        ..StageOptions::default()
    };
    let cond = Conditioning::text(vec![0]);
    let (a, tds) = sample_stage(&p, &sched, &opts, &cond, &RngStream::new(1)).unwrap();
    let (b, _) = sample_stage(&p, &sched, &opts, &cond, &RngStream::new(2)).unwrap();
    assert!(a.l2_distance(&b) > 0.0);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(tds.len(), 6);
    assert!(tds[..5].iter().all(|t| t.log_density_per_patch.len() == 1));
}

#[test]
fn batched_sampling_matches_individual_runs() {
    let p = small_base();
    let sched = NoiseSchedule::default();
    let opts = StageOptions {
        steps: 4,
        guidance: 2.0,
        keep_states: true,
        ..StageOptions::default()
    };
    let conds: Vec<Conditioning> = (0..5).map(|i| Conditioning::text(vec![i])).collect();
    let streams: Vec<RngStream> = (0..5).map(|i| RngStream::new(100).fork_index(i)).collect();
    let batch = sample_stage_batch(&p, &sched, &opts, &conds, &streams).unwrap();
    for i in 0..5 {
        let single = sample_stage_batch(&p, &sched, &opts, &conds[i..=i], &streams[i..=i]).unwrap();
        assert_eq!(single[0].image, batch[i].image);
        assert_eq!(single[0].densities, batch[i].densities);
        assert_eq!(batch[i].states.len(), 5);
    }
}

/// Exact epsilon for scalar data `x0 ~ N(mu, s^2)`:
/// `E[eps | x_t] = sigma (x_t - alpha mu) / (alpha^2 s^2 + sigma^2)`.
struct GaussianOracle {
    config: DenoiserConfig,
    mu: f64,
    s: f64,
}

impl GaussianOracle {
    fn new(mu: f64, s: f64) -> Self {
        let mut config = DenoiserConfig::base(1, 1);
        config.channels = 1;
        config.text_conditioned = false;
        Self { config, mu, s }
    }

    fn alpha_sigma(log_snr: f64) -> (f64, f64) {
        let a2 = 1.0 / (1.0 + (-log_snr).exp());
        (a2.sqrt(), (1.0 - a2).sqrt())
    }

    fn eps(&self, x: f64, log_snr: f64) -> f64 {
        let (a, sg) = Self::alpha_sigma(log_snr);
        sg * (x - a * self.mu) / (a * a * self.s * self.s + sg * sg)
    }
}

impl EpsModel for GaussianOracle {
    fn denoiser_config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn predict(&self, input: &BatchInput) -> Result<Array2<f64>> {
        let mut out = input.x.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| self.eps(x, input.log_snr[i]));
        }
        Ok(out)
    }
}

/// Moments of the sampler output for the Gaussian oracle, propagated exactly
/// through the linear recursion `x_s = a x_t + b + sqrt(var) z`.
fn sampler_moments(sched: &NoiseSchedule, steps: usize, mu: f64, s: f64) -> (f64, f64) {
    let grid = sched.timestep_grid(steps).unwrap();
    let (mut m, mut v) = (0.0, 1.0);
    for k in 0..steps {
        let sv = sched.at(grid[k]).unwrap();
        let c = sched.posterior_coeffs(grid[k + 1], grid[k]).unwrap();
        let denom = sv.alpha * sv.alpha * s * s + sv.sigma * sv.sigma;
        // x0_hat = g x + h
        let g = (1.0 - sv.sigma * sv.sigma / denom) / sv.alpha;
        let h = sv.sigma * sv.sigma * mu / denom;
        let a = c.coef_xt + c.coef_x0 * g;
        let b = c.coef_x0 * h;
        let var = if k + 1 == steps { 0.0 } else { c.var };
        m = a * m + b;
        v = a * a * v + var;
    }
    (m, v)
}

fn oracle_samples(steps: usize, n: usize, mu: f64, s: f64) -> (f64, f64) {
    let oracle = GaussianOracle::new(mu, s);
    let opts = StageOptions {
        steps,
        clip_x0: false,
        ..StageOptions::default()
    };
    let conds = vec![Conditioning::default(); n];
    let streams: Vec<RngStream> = (0..n as u64)
        .map(|i| RngStream::new(77).fork_index(i))
        .collect();
    let samples: Vec<f64> =
        sample_stage_batch(&oracle, &NoiseSchedule::default(), &opts, &conds, &streams)
            .unwrap()
            .iter()
            .map(|s| s.image.data()[0])
            .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

#[test]
fn analytic_denoiser_samples_follow_exact_recursion() {
    let (mu, s) = (0.3, 0.2);
    let (m, v) = sampler_moments(&NoiseSchedule::default(), 32, mu, s);
    let n = 4000;
    let (mean, var) = oracle_samples(32, n, mu, s);
    assert!(
        (mean - m).abs() < 4.0 * (v / n as f64).sqrt(),
        "mean {mean} vs {m}"
    );
    assert!(
        (var - v).abs() < 4.0 * v * (2.0 / (n - 1) as f64).sqrt(),
        "var {var} vs {v}"
    );
}

#[test]
fn analytic_denoiser_recovers_gaussian_data_with_fine_steps() {
    let (mu, s) = (0.3, 0.2);
    let sched = NoiseSchedule::default();
    // coarse grids under-disperse; the gap closes as the step shrinks
    let gap = |steps| {
        let (m, v) = sampler_moments(&sched, steps, mu, s);
        ((m - mu).abs(), (v.sqrt() - s).abs())
    };
    assert!(gap(1000).1 < gap(100).1 && gap(100).1 < gap(32).1);
    let (dm, ds) = gap(1000);
    assert!(dm < 1e-3 && ds < 5e-3, "{dm} {ds}");
    let n = 2000;
    let (mean, var) = oracle_samples(1000, n, mu, s);
    assert!(
        (mean - mu).abs() < 4.0 * s / (n as f64).sqrt() + dm,
        "mean {mean}"
    );
    assert!(
        (var - s * s).abs() < 4.0 * s * s * (2.0 / (n - 1) as f64).sqrt() + 2.0 * s * ds,
        "var {var}"
    );
}

/// Super-resolution block that returns its low-resolution input.
struct IdentityUpsampler {
    stage: Stage,
    shape: Shape,
}

impl CascadeStage for IdentityUpsampler {
    fn stage(&self) -> Stage {
        self.stage
    }

    fn shape(&self) -> Shape {
        self.shape
    }

    fn generate(
        &self,
        _: &NoiseSchedule,
        _: &StageOptions,
        conds: &[Conditioning],
        _: &[RngStream],
    ) -> Result<Vec<Image>> {
        Ok(conds.iter().map(|c| c.lowres.clone().unwrap()).collect())
    }
}

#[test]
fn cascade_shape_and_determinism() {
    let base = small_base();
    let sr1 = small_sr(Stage::Sr1, 8);
    let sr2 = small_sr(Stage::Sr2, 16);
    let sched = NoiseSchedule::default();
    let cfg = small_cascade_config();
    let img = sample_cascade(
        [&base, &sr1, &sr2],
        &sched,
        &cfg,
        &[0, 5],
        &RngStream::new(3),
    )
    .unwrap();
    assert_eq!(img.shape(), Shape::square(16, 3));
    let again = sample_cascade(
        [&base, &sr1, &sr2],
        &sched,
        &cfg,
        &[0, 5],
        &RngStream::new(3),
    )
    .unwrap();
    assert_eq!(img, again);
    assert!(img.is_finite());
}

#[test]
fn identity_super_resolution_returns_upsampled_base() {
    let base = small_base();
    let sched = NoiseSchedule::default();
    let cfg = small_cascade_config();
    let id1 = IdentityUpsampler {
        stage: Stage::Sr1,
        shape: Shape::square(8, 3),
    };
    let id2 = IdentityUpsampler {
        stage: Stage::Sr2,
        shape: Shape::square(16, 3),
    };
    let stream = RngStream::new(4);
    let out = sample_cascade([&base, &id1, &id2], &sched, &cfg, &[1], &stream).unwrap();
    let (low, _) = sample_stage(
        &base,
        &sched,
        &cfg.stage_options(Stage::Base),
        &Conditioning::text(vec![1]),
        &stream.fork("base"),
    )
    .unwrap();
    assert_eq!(out, low.upsample_nearest(4));
}

#[test]
fn cascade_rejects_mismatched_models() {
    let base = small_base();
    let sr1 = small_sr(Stage::Sr1, 8);
    let sched = NoiseSchedule::default();
    let cfg = small_cascade_config();
    let wrong = small_sr(Stage::Sr2, 8);
    assert!(sample_cascade(
        [&base, &sr1, &wrong],
        &sched,
        &cfg,
        &[0],
        &RngStream::new(1)
    )
    .is_err());
    assert!(sample_cascade([&base, &sr1, &sr1], &sched, &cfg, &[0], &RngStream::new(1)).is_err());
    let mut bad = cfg.clone();
    bad.resolutions = [4, 8, 12];
    assert!(bad.validate().is_err());
}

#[test]
fn missing_lowres_is_rejected() {
    let sr = small_sr(Stage::Sr1, 8);
    let sched = NoiseSchedule::default();
    let opts = StageOptions::default();
    assert!(sample_stage(
        &sr,
        &sched,
        &opts,
        &Conditioning::text(vec![1]),
        &RngStream::new(1)
    )
    .is_err());
    let base = small_base();
    let cond = Conditioning::text(vec![1]).with_lowres(Image::zeros(base.config.image_shape()));
    assert!(sample_stage(&base, &sched, &opts, &cond, &RngStream::new(1)).is_err());
    assert!(base.all_finite());
}
