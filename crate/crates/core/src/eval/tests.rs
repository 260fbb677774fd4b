use super::*;
use crate::image::Shape;
use crate::trainer::StepMetrics;
use proptest::prelude::*;

fn record(votes: &[Vote]) -> VoteRecord {
    VoteRecord {
        pair_id: 0,
        prompt_id: 0,
        assessor_votes: votes.to_vec(),
        criterion_trace: None,
    }
}

/// Brute-force two-sided p-value from the pmf in rationals over 2^n.
fn brute_p(w: u64, l: u64) -> f64 {
    let n = w + l;
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for k in 1..row.len() {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
    }
    let obs = row[w as usize];
    let total: u128 = row.iter().filter(|&&c| c <= obs).sum();
    total as f64 / (1u128 << n) as f64
}

#[test]
fn majority_gets_the_point() {
    use Vote::*;
    assert_eq!(aggregate_pair(&record(&[A, A, B])).unwrap(), Point::A);
    assert_eq!(aggregate_pair(&record(&[B, Tie, B])).unwrap(), Point::B);
    assert_eq!(aggregate_pair(&record(&[A, Tie, Tie])).unwrap(), Point::A);
    assert_eq!(
        aggregate_pair(&record(&[Tie, Tie, Tie])).unwrap(),
        Point::None
    );
    assert_eq!(aggregate_pair(&record(&[A, B, Tie])).unwrap(), Point::None);
    assert!(aggregate_pair(&record(&[A, B])).is_err());
    assert!(aggregate_pair(&record(&[A, B, A, A])).is_err());
}

#[test]
fn aggregation_is_label_symmetric() {
    use Vote::*;
    let all = [A, B, Tie];
    for a in all {
        for b in all {
            for c in all {
                let p = aggregate_pair(&record(&[a, b, c])).unwrap();
                let q = aggregate_pair(&record(&[a.swapped(), b.swapped(), c.swapped()])).unwrap();
                let flipped = match p {
                    Point::A => Point::B,
                    Point::B => Point::A,
                    Point::None => Point::None,
                };
                assert_eq!(q, flipped);
            }
        }
    }
}

#[test]
fn binomial_matches_enumeration() {
    for n in 1..=20u64 {
        for w in 0..=n {
            let p = binomial_two_sided(w, n - w).unwrap();
            assert!((p - brute_p(w, n - w)).abs() < 1e-12, "{w}/{n}: {p}");
        }
    }
    assert!((binomial_two_sided(7, 3).unwrap() - 0.34375).abs() < 1e-12);
    assert_eq!(binomial_two_sided(5, 5).unwrap(), 1.0);
    assert!(binomial_two_sided(0, 0).is_err());
}

#[test]
fn binomial_at_three_hundred_matches_direct_summation() {
    // direct summation of C(300, k) / 2^300 in log space
    let n = 300u64;
    let lc = |k: u64| -> f64 {
        (1..=k)
            .map(|i| ((n - k + i) as f64 / i as f64).ln())
            .sum::<f64>()
            - n as f64 * 2f64.ln()
    };
    let tail: f64 = (170..=300).map(|k| lc(k).exp()).sum();
    let p = binomial_two_sided(170, 130).unwrap();
    assert!((p - 2.0 * tail).abs() < 1e-12, "{p} vs {}", 2.0 * tail);
    assert!((p - 0.0241).abs() < 0.001, "{p}");
}

#[test]
fn normal_approximation_is_close_above_the_limit() {
    let exact = binomial_two_sided(520, 480).unwrap();
    let approx = binomial_two_sided(530, 481).unwrap();
    assert!(approx > 0.0 && approx < 1.0);
    assert!(exact > 0.2 && exact < 0.25, "{exact}");
    assert_eq!(binomial_two_sided(600, 600).unwrap(), 1.0);
    assert!(binomial_two_sided(2000, 1000).unwrap() < 1e-20);
}

proptest! {
    #[test]
    fn binomial_is_symmetric_and_bounded(w in 0u64..600, l in 0u64..600) {
        prop_assume!(w + l > 0);
        let p = binomial_two_sided(w, l).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p, binomial_two_sided(l, w).unwrap());
    }

    #[test]
    fn wilson_interval_brackets_the_rate(k in 0u64..200, extra in 0u64..200) {
        let n = k + extra;
        prop_assume!(n > 0);
        let (lo, hi) = wilson_interval(k, n, 1.96);
        let p = k as f64 / n as f64;
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12 && lo >= 0.0 && hi <= 1.0);
    }
}

fn judge() -> JudgeConfig {
    JudgeConfig {
        noise_sigma: 0.0,
        band: 0.1,
        scale: [0.05, 0.3, 0.5],
    }
}

fn oracle_image(prompt: usize, aesthetic: f64, defect: f64, seed: u64) -> (Image, Conditioning) {
    let p = &eval_prompts()[prompt];
    let src = OracleSource {
        side: 16,
        aesthetic,
        defect,
    };
    let img = src
        .generate(std::slice::from_ref(&p.tokens), &[RngStream::new(seed)])
        .unwrap()
        .remove(0);
    (img, Conditioning::text(p.tokens.clone()))
}

#[test]
fn identical_images_tie() {
    let (img, c) = oracle_image(3, 1.0, 0.0, 1);
    for s in 0..5 {
        assert_eq!(
            simulated_judge(&img, &img, &c, &judge(), &RngStream::new(s)).unwrap(),
            (Vote::Tie, Criterion::None)
        );
    }
}

#[test]
fn defects_decide_first() {
    let (img, c) = oracle_image(5, 1.0, 0.0, 2);
    let mut rng = RngStream::new(3).rng();
    let noisy = Image::from_vec(
        img.shape(),
        img.data()
            .iter()
            .map(|v| v + 0.5 * normal(&mut rng))
            .collect(),
    )
    .unwrap()
    .clamp(-1.0, 1.0);
    assert_eq!(
        simulated_judge(&img, &noisy, &c, &judge(), &RngStream::new(0)).unwrap(),
        (Vote::A, Criterion::Defects)
    );
    assert_eq!(
        simulated_judge(&noisy, &img, &c, &judge(), &RngStream::new(0)).unwrap(),
        (Vote::B, Criterion::Defects)
    );
}

#[test]
fn defects_outrank_aesthetics() {
    let (ugly, c) = oracle_image(7, 0.0, 0.0, 4);
    let (pretty, _) = oracle_image(7, 1.0, 0.0, 4);
    let [da, _, aa] = criterion_scores(&ugly, &c).unwrap();
    let mut rng = RngStream::new(5).rng();
    let damaged = Image::from_vec(
        pretty.shape(),
        pretty
            .data()
            .iter()
            .map(|v| v + 0.3 * normal(&mut rng))
            .collect(),
    )
    .unwrap()
    .clamp(-1.0, 1.0);
    let [db, _, ab] = criterion_scores(&damaged, &c).unwrap();
    assert!(
        ab > aa,
        "the defective image must be prettier for the test to bite"
    );
    assert!(da > db);
    assert_eq!(
        simulated_judge(&ugly, &damaged, &c, &judge(), &RngStream::new(0))
            .unwrap()
            .0,
        Vote::A
    );
}

#[test]
fn noiseless_judge_is_antisymmetric() {
    for i in 0..12 {
        let (a, c) = oracle_image(i, 0.3 + 0.05 * i as f64, 0.0, i as u64);
        let (b, _) = oracle_image(i, 1.0, 0.02 * i as f64, 100 + i as u64);
        let ab = simulated_judge(&a, &b, &c, &judge(), &RngStream::new(1)).unwrap();
        let ba = simulated_judge(&b, &a, &c, &judge(), &RngStream::new(9)).unwrap();
        assert_eq!(ab.0, ba.0.swapped());
        assert_eq!(ab.1, ba.1);
    }
}

#[test]
fn judge_rejects_mismatched_shapes() {
    let a = Image::zeros(Shape::square(8, 3));
    let b = Image::zeros(Shape::square(16, 3));
    assert!(simulated_judge(
        &a,
        &b,
        &Conditioning::default(),
        &judge(),
        &RngStream::new(0)
    )
    .is_err());
}

#[test]
fn calibration_measures_spreads() {
    let prompts = eval_prompts();
    let imgs: Vec<(Image, Conditioning)> = (0..30)
        .map(|i| {
            let (img, c) = oracle_image(i, (i % 5) as f64 / 4.0, (i % 3) as f64 * 0.3, i as u64);
            // every fourth image carries another prompt's caption
            let c = if i % 4 == 0 {
                Conditioning::text(prompts[(i + 7) % 48].tokens.clone())
            } else {
                c
            };
            (img, c)
        })
        .collect();
    let j = JudgeConfig::calibrate(&imgs, 0.05).unwrap();
    assert!(j.scale.iter().all(|s| *s > 0.0));
    assert_eq!(j.band, 0.1);
    let same = vec![imgs[1].clone(), imgs[1].clone()];
    assert!(JudgeConfig::calibrate(&same, 0.05).is_err());
}

fn oracle(defect: f64) -> OracleSource {
    OracleSource {
        side: 8,
        aesthetic: 0.8,
        defect,
    }
}

#[test]
fn same_model_under_noiseless_judges_is_all_ties() {
    let prompts = eval_prompts();
    let (r, votes) = sbs_compare(
        &oracle(0.0),
        &oracle(0.0),
        &prompts,
        2,
        &judge(),
        &RngStream::new(1),
    )
    .unwrap();
    assert_eq!(r.pairs(), 96);
    assert_eq!(votes.len(), 96);
    assert_eq!(r.ties, 96);
    assert_eq!(r.win_rate_a, 0.5);
    assert!(!r.significant);
}

#[test]
fn defect_injection_loses_every_pair() {
    let prompts = eval_prompts();
    let bad = DefectInjector {
        inner: oracle(0.0),
        amplitude: 0.5,
    };
    let (r, votes) = sbs_compare(
        &oracle(0.0),
        &bad,
        &prompts,
        1,
        &judge(),
        &RngStream::new(2),
    )
    .unwrap();
    assert_eq!(r.wins_a, 48);
    assert_eq!(r.win_rate_a, 1.0);
    assert!(r.significant && r.p_value < 1e-10);
    assert!(votes.iter().all(|v| v
        .criterion_trace
        .as_ref()
        .unwrap()
        .iter()
        .all(|&c| c == Criterion::Defects)));
}

#[test]
fn null_comparison_is_calibrated() {
    let prompts = eval_prompts();
    let j = JudgeConfig {
        noise_sigma: 0.5,
        ..judge()
    };
    let mut flagged = 0;
    let mut covered = 0;
    for run in 0..100 {
        let (r, _) = sbs_compare(
            &oracle(0.2),
            &oracle(0.2),
            &prompts[..30],
            10,
            &j,
            &RngStream::new(1000 + run),
        )
        .unwrap();
        assert_eq!(r.pairs(), 300);
        flagged += r.significant as usize;
        covered += (r.ci_low <= 0.5 && 0.5 <= r.ci_high) as usize;
    }
    assert!(flagged <= 8, "{flagged} of 100 null runs significant");
    assert!(covered >= 92, "{covered}");
}

#[test]
fn sbs_is_deterministic() {
    let prompts = eval_prompts();
    let j = JudgeConfig {
        noise_sigma: 0.3,
        ..judge()
    };
    let a = sbs_compare(
        &oracle(0.0),
        &oracle(0.3),
        &prompts,
        1,
        &j,
        &RngStream::new(5),
    )
    .unwrap();
    let b = sbs_compare(
        &oracle(0.0),
        &oracle(0.3),
        &prompts,
        1,
        &j,
        &RngStream::new(5),
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn vote_records_round_trip_as_json() {
    let prompts = eval_prompts();
    let (_, votes) = sbs_compare(
        &oracle(0.0),
        &oracle(0.3),
        &prompts[..4],
        1,
        &judge(),
        &RngStream::new(5),
    )
    .unwrap();
    for v in votes {
        let line = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<VoteRecord>(&line).unwrap(), v);
    }
}

#[test]
fn correlation_examples() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let c = correlation_report(&a, &a).unwrap();
    assert!((c.pearson - 1.0).abs() < 1e-12 && (c.spearman - 1.0).abs() < 1e-12);
    let rev = [4.0, 3.0, 2.0, 1.0];
    assert!((correlation_report(&a, &rev).unwrap().spearman + 1.0).abs() < 1e-12);
    let b = [1.1, 2.1, 2.9, 4.2];
    // direct formula
    let mb = b.iter().sum::<f64>() / 4.0;
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - 2.5) * (y - mb)).sum();
    let den = (a.iter().map(|x| (x - 2.5f64).powi(2)).sum::<f64>()
        * b.iter().map(|y| (y - mb).powi(2)).sum::<f64>())
    .sqrt();
    let r = correlation_report(&a, &b).unwrap();
    assert!((r.pearson - num / den).abs() < 1e-12);
    assert!(r.pearson > 0.99);
    assert!(correlation_report(&a, &[1.0; 4]).is_err());
    assert!(correlation_report(&a[..2], &b[..2]).is_err());
    assert!(correlation_report(&a, &b[..3]).is_err());
}

#[test]
fn ranks_average_ties() {
    assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

fn metrics(losses: &[f64]) -> Vec<StepMetrics> {
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| StepMetrics {
            step: i + 1,
            stage: "t".into(),
            loss,
            grad_norm: 0.0,
            lr: 0.0,
        })
        .collect()
}

#[test]
fn threshold_uses_the_trailing_mean() {
    let m = metrics(&[1.0, 0.9, 0.5, 0.4, 0.3, 0.2]);
    assert_eq!(steps_to_threshold(&m, 0.45, 2), Some(4));
    assert_eq!(steps_to_threshold(&m, 0.1, 2), None);
    assert_eq!(steps_to_threshold(&m, 2.0, 1), Some(1));
    assert_eq!(steps_to_threshold(&m, 2.0, 0), None);
}

fn sweep_fixture(dir: &std::path::Path, steps: &[usize]) -> Vec<(usize, std::path::PathBuf)> {
    steps
        .iter()
        .map(|&s| {
            let p = dir.join(format!("ckpt-{s}.txt"));
            // checkpoint "files" here only carry the defect level
            std::fs::write(&p, format!("{}", 0.4 / s as f64)).unwrap();
            (s, p)
        })
        .collect()
}

fn oracle_loader(p: &std::path::Path) -> Result<Box<dyn ImageSource>> {
    let defect: f64 = std::fs::read_to_string(p).unwrap().trim().parse().unwrap();
    Ok(Box::new(OracleSource {
        side: 8,
        aesthetic: 0.8,
        defect,
    }))
}

#[test]
fn sweep_emits_six_rows_per_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpts = sweep_fixture(dir.path(), &[1, 2, 3, 4]);
    let weak = oracle(0.5);
    let other = oracle(0.3);
    let j = JudgeConfig {
        noise_sigma: 0.2,
        ..judge()
    };
    let rows = sweep_harness(
        &ckpts,
        &oracle_loader,
        [("weak", &weak), ("other", &other)],
        2,
        &eval_prompts()[..12],
        1,
        &j,
        &RngStream::new(1),
    )
    .unwrap();
    assert_eq!(rows.len(), 2 * 6);
    assert!(rows.iter().all(|r| r.step % 2 == 0 && r.n_pairs == 12));
    let one = sweep_harness(
        &ckpts[..1],
        &oracle_loader,
        [("weak", &weak), ("other", &other)],
        1,
        &eval_prompts()[..12],
        1,
        &j,
        &RngStream::new(1),
    )
    .unwrap();
    assert_eq!(one.len(), 6);
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,baseline,repeat,win_rate,p_value,n_pairs"));
    assert_eq!(read_sweep_csv(&path).unwrap(), rows);
    let summary = summarize_sweep(&rows);
    assert_eq!(summary.len(), 4);
    assert!(summary.iter().all(|p| p.repeats == 3));
}

#[test]
fn improving_series_has_rising_win_rates() {
    let dir = tempfile::tempdir().unwrap();
    let ckpts = sweep_fixture(dir.path(), &[1, 2, 4, 8, 16]);
    let weak = oracle(0.15);
    let j = JudgeConfig {
        noise_sigma: 0.2,
        ..judge()
    };
    let rows = sweep_harness(
        &ckpts,
        &oracle_loader,
        [("weak", &weak), ("weak2", &weak)],
        1,
        &eval_prompts()[..24],
        1,
        &j,
        &RngStream::new(2),
    )
    .unwrap();
    let pts: Vec<SweepPoint> = summarize_sweep(&rows)
        .into_iter()
        .filter(|p| p.baseline == "weak")
        .collect();
    let steps: Vec<f64> = pts.iter().map(|p| p.step as f64).collect();
    let wins: Vec<f64> = pts.iter().map(|p| p.mean).collect();
    assert!(
        correlation_report(&steps, &wins).unwrap().spearman > 0.0,
        "{wins:?}"
    );
}

#[test]
fn sweep_names_missing_checkpoints() {
    let weak = oracle(0.5);
    let missing = vec![(2usize, std::path::PathBuf::from("/nonexistent/ckpt-2"))];
    let err = sweep_harness(
        &missing,
        &oracle_loader,
        [("weak", &weak), ("w", &weak)],
        1,
        &eval_prompts(),
        1,
        &judge(),
        &RngStream::new(0),
    )
    .unwrap_err();
    assert!(err.to_string().contains("/nonexistent/ckpt-2"), "{err}");
}
