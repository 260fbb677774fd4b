use ndarray::{arr1, Array1, ArrayViewD, ArrayViewMutD};

use super::*;
use crate::curation::{synth_corpus, SynthConfig};
use crate::denoiser::Stage;

#[derive(Clone, Debug, PartialEq)]
struct Vector(Array1<f64>);

impl ParamTable for Vector {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("theta".into(), self.0.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![("theta".into(), self.0.view_mut().into_dyn())]
    }
}

fn default_adam() -> Adam {
    Adam {
        learning_rate: 1e-4,
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
    }
}

#[test]
fn adam_first_step_magnitude() {
    let p = Vector(arr1(&[0.0]));
    let g = Vector(arr1(&[1.0]));
    let (q, st) = adam_step(&p, &g, &AdamState::new(&p), &default_adam()).unwrap();
    let expected = 1e-4 * (1.0 / (1.0 + 1e-8));
    assert!((q.0[0] + expected).abs() < 1e-19);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_matches_scalar_recursion() {
    let h = Adam {
        learning_rate: 0.01,
        ..default_adam()
    };
    let grads = [0.3, -1.2, 2.0, 0.0, 0.7, -0.1];
    let mut p = Vector(arr1(&[1.0, -2.0]));
    let mut st = AdamState::new(&p);
    let (mut theta, mut m, mut v) = ([1.0, -2.0], [0.0; 2], [0.0; 2]);
    for (t, &g) in grads.iter().enumerate() {
        let gv = [g, -2.0 * g];
        let (np, ns) = adam_step(&p, &Vector(arr1(&gv)), &st, &h).unwrap();
        p = np;
        st = ns;
        for k in 0..2 {
            m[k] = 0.9 * m[k] + 0.1 * gv[k];
            v[k] = 0.98 * v[k] + 0.02 * gv[k] * gv[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v[k] / (1.0 - 0.98f64.powi(t as i32 + 1));
            theta[k] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
    }
    for k in 0..2 {
        assert!((p.0[k] - theta[k]).abs() < 1e-14);
    }
}

#[test]
fn adam_zero_gradient_and_determinism() {
    let p = Vector(arr1(&[0.1, 0.2, 0.3]));
    let st = AdamState::new(&p);
    let (q, _) = adam_step(&p, &p.zeros_like(), &st, &default_adam()).unwrap();
    assert_eq!(q, p);
    let g = Vector(arr1(&[1.0, -3.0, 0.5]));
    let a = adam_step(&p, &g, &st, &default_adam()).unwrap();
    let b = adam_step(&p, &g, &st, &default_adam()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let p = Vector(arr1(&[0.1]));
    let err = adam_step(
        &p,
        &Vector(arr1(&[f64::NAN])),
        &AdamState::new(&p),
        &default_adam(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("theta"), "{err}");
}

#[test]
fn ema_warmup_schedule() {
    assert_eq!(ema_decay_at(0.999, 0), 0.1);
    assert_eq!(ema_decay_at(0.999, 8), 0.5);
    assert_eq!(ema_decay_at(0.999, 1_000_000), 0.999);
    assert_eq!(ema_decay_at(0.0, 5), 0.0);
}

fn records(n: usize) -> Vec<CorpusRecord> {
    synth_corpus(n, &SynthConfig::default(), &RngStream::new(21)).unwrap()
}

fn tiny(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        total_steps: steps,
        eval_every: 5,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn stage_examples_have_stage_shapes() {
    let r = &records(1)[0];
    let base = stage_example(&DenoiserConfig::base(8, 1), r).unwrap();
    assert_eq!(base.x0.shape().height, 8);
    assert!(base.cond.lowres.is_none());
    let sr = stage_example(&DenoiserConfig::super_resolution(Stage::Sr1, 16), r).unwrap();
    assert_eq!(sr.x0.shape().height, 16);
    let low = sr.cond.lowres.unwrap();
    assert_eq!(low, r.image().resize_to(8).unwrap().upsample_nearest(2));
}

#[test]
fn zero_steps_return_the_initialisation() {
    let recs = records(10);
    let cfg = tiny(0);
    let out = pretrain(
        DenoiserConfig::base(8, 1),
        &recs,
        &NoiseSchedule::default(),
        &cfg,
        &mut no_checkpoints,
    )
    .unwrap();
    let init = DenoiserParams::init(
        DenoiserConfig::base(8, 1),
        &RngStream::new(3).fork("init").fork("base"),
    )
    .unwrap();
    assert_eq!(out.released, init);
    assert!(out.metrics.is_empty());
}

#[test]
fn runs_are_reproducible_and_checkpoint_on_schedule() {
    let recs = records(30);
    let sched = NoiseSchedule::default();
    let cfg = tiny(12);
    let mut seen = Vec::new();
    let a = pretrain(
        DenoiserConfig::base(8, 1),
        &recs,
        &sched,
        &cfg,
        &mut |step, p| {
            seen.push((step, p.clone()));
            Ok(())
        },
    )
    .unwrap();
    let b = pretrain(
        DenoiserConfig::base(8, 1),
        &recs,
        &sched,
        &cfg,
        &mut no_checkpoints,
    )
    .unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.released, b.released);
    assert_eq!(a.metrics.len(), 12);
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![5, 10]);
    assert!(a
        .metrics
        .iter()
        .all(|m| m.stage == "pretrain-base" && m.loss > 0.0));
    assert_eq!(a.trained.ema.as_deref(), Some(&a.released));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    write_jsonl(&path, &a.metrics).unwrap();
    let back: Vec<StepMetrics> = read_jsonl(&path).unwrap();
    assert_eq!(back, a.metrics);
}

#[test]
fn finetune_at_zero_rate_leaves_weights_alone() {
    let recs = records(20);
    let sched = NoiseSchedule::default();
    let pre = pretrain(
        DenoiserConfig::base(8, 1),
        &recs,
        &sched,
        &tiny(6),
        &mut no_checkpoints,
    )
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..tiny(7)
    };
    let ft = finetune(&pre.released, &recs, &sched, &cfg, &mut no_checkpoints).unwrap();
    assert_eq!(ft.released, pre.released);
    assert_eq!(ft.metrics.len(), 7);
    assert!(ft.metrics.iter().all(|m| m.stage == "finetune"));
}

#[test]
fn short_base_run_reduces_loss() {
    let recs = records(400);
    let cfg = TrainConfig {
        total_steps: 300,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let out = pretrain(
        DenoiserConfig::base(8, 3),
        &recs,
        &NoiseSchedule::default(),
        &cfg,
        &mut no_checkpoints,
    )
    .unwrap();
    let (first, last) = loss_drop(&out.metrics, 50).unwrap();
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            p_uncond: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let empty: Vec<CorpusRecord> = Vec::new();
    assert!(pretrain(
        DenoiserConfig::base(8, 1),
        &empty,
        &NoiseSchedule::default(),
        &tiny(1),
        &mut no_checkpoints
    )
    .is_err());
}
