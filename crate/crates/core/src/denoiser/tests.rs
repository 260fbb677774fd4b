use super::*;
use crate::gradcheck::max_relative_error;
use crate::image::Shape;
use crate::rng::RngStream;

fn tiny_base() -> DenoiserConfig {
    DenoiserConfig {
        stage: Stage::Base,
        resolution: 2,
        channels: 3,
        tile: 2,
        text_conditioned: true,
        hidden: vec![5, 4],
        cond_dim: 3,
        vocab: 6,
        time_freqs: 2,
        template_hidden: 3,
        lowres_halo: 0,
        skip_var: [0.3, 0.1],
    }
}

fn tiny_sr() -> DenoiserConfig {
    DenoiserConfig {
        stage: Stage::Sr1,
        resolution: 4,
        channels: 1,
        tile: 2,
        text_conditioned: true,
        hidden: vec![4],
        cond_dim: 2,
        vocab: 6,
        time_freqs: 2,
        template_hidden: 0,
        lowres_halo: 1,
        skip_var: [0.3, 0.1],
    }
}

fn random_image(shape: Shape, stream: &RngStream) -> Image {
    Image::from_vec(shape, normal_vec(&mut stream.rng(), shape.len()))
        .unwrap()
        .map(|v| 0.5 * v)
}

/// Params with a non-trivial adapter and open skip gates so every tensor has
/// a live gradient.
fn with_live_lora(mut p: DenoiserParams, seed: u64) -> DenoiserParams {
    p.skip_gate = ndarray::arr1(&[0.8, 0.6]);
    p.attach_lora(2, 1.5, &RngStream::new(seed)).unwrap();
    for (i, l) in p.layers.iter_mut().enumerate() {
        let lora = l.lora.as_mut().unwrap();
        let (r, c) = lora.b.dim();
        lora.b = gaussian(&RngStream::new(seed).fork_index(i as u64), r, c, 0.3);
    }
    p
}

fn batch_for(config: &DenoiserConfig, n: usize, seed: u64) -> Vec<TrainExample> {
    let root = RngStream::new(seed);
    (0..n)
        .map(|i| {
            let s = root.fork_index(i as u64);
            let mut cond = Conditioning::text(vec![(i % 6) as u32, ((i + 2) % 6) as u32]);
            if i == 1 {
                cond.null = true;
            }
            if config.is_super_resolution() {
                cond.lowres = Some(random_image(config.image_shape(), &s.fork("low")));
            }
            TrainExample {
                x0: random_image(config.image_shape(), &s.fork("x0")),
                cond,
            }
        })
        .collect()
}

fn check_gradients(config: DenoiserConfig, seed: u64) {
    let params = with_live_lora(
        DenoiserParams::init(config.clone(), &RngStream::new(seed)).unwrap(),
        seed + 1,
    );
    let batch = batch_for(&config, 3, seed + 2);
    let sched = NoiseSchedule::default();
    let draws = draw_noise(
        &sched,
        config.image_shape().len(),
        3,
        &RngStream::new(seed + 3),
    );
    let (_, grad) = loss_and_grad_with(&params, &batch, &sched, &draws).unwrap();
    let check = max_relative_error(&params, &grad, 1e-5, 1e-6, |p| {
        loss_and_grad_with(p, &batch, &sched, &draws).unwrap().0
    });
    assert!(check.checked == params.param_count());
    assert!(check.max_rel < 1e-4, "{check:?}");
}

#[test]
fn gradients_match_finite_differences_base() {
    check_gradients(tiny_base(), 10);
}

#[test]
fn gradients_match_finite_differences_super_resolution() {
    check_gradients(tiny_sr(), 20);
}

#[test]
fn every_parameter_group_receives_gradient() {
    let config = tiny_base();
    let params = with_live_lora(
        DenoiserParams::init(config.clone(), &RngStream::new(1)).unwrap(),
        2,
    );
    let batch = batch_for(&config, 3, 3);
    let (_, grad) = loss_and_grad(
        &params,
        &batch,
        &NoiseSchedule::default(),
        &RngStream::new(4),
    )
    .unwrap();
    for (name, t) in grad.tensors() {
        assert!(
            t.iter().any(|v| *v != 0.0),
            "{name} has an all-zero gradient"
        );
    }
}

#[test]
fn zero_head_and_template_leave_the_skip_path() {
    let mut p = DenoiserParams::init(tiny_base(), &RngStream::new(5)).unwrap();
    let head = p.layers.last_mut().unwrap();
    head.weight.fill(0.0);
    head.bias.fill(0.0);
    let t = p.template.as_mut().unwrap();
    // the initial bias holds a zero mean and the configured variances
    t.w2.fill(0.0);
    p.skip_gate = ndarray::arr1(&[0.7, 1.3]);
    let x = random_image(p.config.image_shape(), &RngStream::new(6));
    let out = p.forward(&x, 1.3, &Conditioning::text(vec![1, 2])).unwrap();
    let (a2, s2) = (1.0 / (1.0 + (-1.3f64).exp()), 1.0 / (1.0 + 1.3f64.exp()));
    let (kl, kc) = (
        0.7 * s2.sqrt() / (0.3 * a2 + s2),
        1.3 * s2.sqrt() / (0.1 * a2 + s2),
    );
    for (o, v) in out.data().chunks(3).zip(x.data().chunks(3)) {
        let m = v.iter().sum::<f64>() / 3.0;
        for (o, v) in o.iter().zip(v) {
            assert!((o - (kl * m + kc * (v - m))).abs() < 1e-14);
        }
    }
}

#[test]
fn null_flag_equals_zero_embedding() {
    let mut p = DenoiserParams::init(tiny_base(), &RngStream::new(7)).unwrap();
    let x = random_image(p.config.image_shape(), &RngStream::new(8));
    let cond = Conditioning::text(vec![0, 3]);
    let null = p.forward(&x, -0.4, &cond.as_null()).unwrap();
    p.embed.fill(0.0);
    let zeroed = p.forward(&x, -0.4, &cond).unwrap();
    assert_eq!(null, zeroed);
}

#[test]
fn conditions_change_the_output() {
    let p = DenoiserParams::init(tiny_base(), &RngStream::new(9)).unwrap();
    let x = random_image(p.config.image_shape(), &RngStream::new(10));
    let a = p.forward(&x, 0.5, &Conditioning::text(vec![0])).unwrap();
    let b = p.forward(&x, 0.5, &Conditioning::text(vec![4])).unwrap();
    assert!(a.l2_distance(&b) > 0.0);
}

#[test]
fn zero_b_adapter_is_identity_and_merges_exactly() {
    let p = DenoiserParams::init(tiny_base(), &RngStream::new(11)).unwrap();
    let mut q = p.clone();
    q.attach_lora(4, 1.0, &RngStream::new(12)).unwrap();
    let x = random_image(p.config.image_shape(), &RngStream::new(13));
    let cond = Conditioning::text(vec![1]);
    assert_eq!(
        p.forward(&x, 0.2, &cond).unwrap(),
        q.forward(&x, 0.2, &cond).unwrap()
    );
    let merged = q.lora_merge().unwrap();
    for (a, b) in merged.layers.iter().zip(&p.layers) {
        assert_eq!(a.weight, b.weight);
        assert!(a.lora.is_none());
    }
    assert!(merged.lora_merge().is_err());
}

#[test]
fn merged_adapter_preserves_outputs() {
    let p = with_live_lora(
        DenoiserParams::init(tiny_base(), &RngStream::new(14)).unwrap(),
        15,
    );
    let merged = p.lora_merge().unwrap();
    let root = RngStream::new(16);
    for i in 0..100 {
        let s = root.fork_index(i);
        let x = random_image(p.config.image_shape(), &s);
        let cond = Conditioning::text(vec![(i % 6) as u32]);
        let snr = (i as f64 / 10.0) - 5.0;
        let a = p.forward(&x, snr, &cond).unwrap();
        let b = merged.forward(&x, snr, &cond).unwrap();
        assert!(a.l2_distance(&b) < 1e-10);
    }
}

#[test]
fn lora_scale_interpolates_from_base() {
    let p = with_live_lora(
        DenoiserParams::init(tiny_base(), &RngStream::new(17)).unwrap(),
        18,
    );
    let base = DenoiserParams {
        layers: p
            .layers
            .iter()
            .map(|l| Dense {
                lora: None,
                ..l.clone()
            })
            .collect(),
        ..p.clone()
    };
    let x = random_image(p.config.image_shape(), &RngStream::new(19));
    let cond = Conditioning::text(vec![2]);
    let scaled = |lambda: f64| {
        let mut q = p.clone();
        for l in &mut q.layers {
            l.lora.as_mut().unwrap().scale *= lambda;
        }
        q.forward(&x, 0.0, &cond).unwrap()
    };
    assert_eq!(scaled(0.0), base.forward(&x, 0.0, &cond).unwrap());
    // smooth in lambda: second differences vanish with the step
    let d = |h: f64| {
        let (a, b, c) = (scaled(0.5 - h), scaled(0.5), scaled(0.5 + h));
        a.data()
            .iter()
            .zip(b.data())
            .zip(c.data())
            .map(|((a, b), c)| (a - 2.0 * b + c).abs())
            .fold(0.0, f64::max)
    };
    assert!(d(1e-3) < 1e-4);
}

#[test]
fn ema_update_rules() {
    let p = DenoiserParams::init(tiny_base(), &RngStream::new(20)).unwrap();
    let e0 = DenoiserParams::init(tiny_base(), &RngStream::new(21)).unwrap();
    assert_eq!(ema_update(&e0, &p, 0.0).unwrap().flatten(), p.flatten());
    assert_eq!(ema_update(&e0, &p, 1.0).unwrap().flatten(), e0.flatten());
    assert!(ema_update(&e0, &p, 1.5).is_err());
    assert!(ema_update(&e0, &p, -0.1).is_err());
    let d: f64 = 0.9;
    let k = 25;
    let mut e = e0.clone();
    for _ in 0..k {
        e = ema_update(&e, &p, d).unwrap();
    }
    let dk = d.powi(k);
    for ((a, b), c) in e.flatten().iter().zip(e0.flatten()).zip(p.flatten()) {
        assert!((a - (dk * b + (1.0 - dk) * c)).abs() < 1e-10);
    }
}

#[test]
fn duplicated_batch_keeps_loss_and_gradient() {
    let config = tiny_base();
    let p = DenoiserParams::init(config.clone(), &RngStream::new(22)).unwrap();
    let batch = batch_for(&config, 3, 23);
    let sched = NoiseSchedule::default();
    let draws = draw_noise(&sched, config.image_shape().len(), 3, &RngStream::new(24));
    let (l1, g1) = loss_and_grad_with(&p, &batch, &sched, &draws).unwrap();
    let batch2: Vec<_> = batch.iter().chain(&batch).cloned().collect();
    let draws2: Vec<_> = draws.iter().chain(&draws).cloned().collect();
    let (l2, g2) = loss_and_grad_with(&p, &batch2, &sched, &draws2).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let noise = [vec![0.3, -1.2, 0.5], vec![2.0, 0.0, -0.1]];
    let pred = Array2::from_shape_vec((2, 3), noise.concat()).unwrap();
    let rows: Vec<&[f64]> = noise.iter().map(|v| v.as_slice()).collect();
    let (loss, grad) = eps_mse(&pred, &rows).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
    let (loss, _) = eps_mse(&(pred + 1.0), &rows).unwrap();
    assert!((loss - 1.0).abs() < 1e-15);
}

#[test]
fn input_validation() {
    let p = DenoiserParams::init(tiny_sr(), &RngStream::new(25)).unwrap();
    let x = random_image(p.config.image_shape(), &RngStream::new(26));
    assert!(p.forward(&x, 0.0, &Conditioning::text(vec![1])).is_err());
    let wrong = random_image(Shape::square(2, 1), &RngStream::new(27));
    let cond = Conditioning::text(vec![1]).with_lowres(x.clone());
    assert!(p.forward(&wrong, 0.0, &cond).is_err());
    assert!(p.forward(&x, 0.0, &cond).is_ok());
    let bad = Conditioning::text(vec![99]).with_lowres(x.clone());
    assert!(p.forward(&x, 0.0, &bad).is_err());
    let sched = NoiseSchedule::default();
    assert!(loss_and_grad(&p, &[], &sched, &RngStream::new(1)).is_err());
}

#[test]
fn unconditioned_stage_ignores_tokens() {
    let mut config = tiny_sr();
    config.text_conditioned = false;
    let p = DenoiserParams::init(config, &RngStream::new(28)).unwrap();
    let x = random_image(p.config.image_shape(), &RngStream::new(29));
    let a = p
        .forward(&x, 0.0, &Conditioning::text(vec![1]).with_lowres(x.clone()))
        .unwrap();
    let b = p
        .forward(&x, 0.0, &Conditioning::text(vec![3]).with_lowres(x.clone()))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_with_adapters_and_ema() {
    let mut p = with_live_lora(
        DenoiserParams::init(tiny_sr(), &RngStream::new(30)).unwrap(),
        31,
    );
    p.ema = Some(Box::new(p.without_ema()));
    let back = DenoiserParams::from_table(&p.to_table()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn batch_rows_match_single_evaluation_bitwise() {
    let config = DenoiserConfig::base(8, 1);
    let p = DenoiserParams::init(config.clone(), &RngStream::new(32)).unwrap();
    let imgs: Vec<Image> = (0..7)
        .map(|i| random_image(config.image_shape(), &RngStream::new(40 + i)))
        .collect();
    let conds: Vec<Conditioning> = (0..7).map(|i| Conditioning::text(vec![i as u32])).collect();
    let snrs: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
    let input = BatchInput::from_images(
        &config,
        &imgs.iter().collect::<Vec<_>>(),
        &snrs,
        &conds.iter().collect::<Vec<_>>(),
    )
    .unwrap();
    let batch = p.predict(&input).unwrap();
    for i in 0..7 {
        let single = p.forward(&imgs[i], snrs[i], &conds[i]).unwrap();
        assert_eq!(batch.row(i).to_vec(), single.data().to_vec());
    }
}
