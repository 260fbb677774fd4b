//! Side-by-side evaluation with simulated assessors: a clean renderer against
//! the same renderer with injected pixel noise, and a null comparison.
//!
//! cargo run --release --example side_by_side

use yaart::eval::{
    eval_prompts, sbs_compare, DefectInjector, JudgeConfig, OracleSource, SbsResult,
};
use yaart::rng::RngStream;

fn show(name: &str, r: &SbsResult) {
    println!(
        "{name:<22} A {:>3}  B {:>3}  tie {:>3}  win rate {:.3}  95% CI [{:.3}, {:.3}]  p = {:.2e}{}",
        r.wins_a,
        r.wins_b,
        r.ties,
        r.win_rate_a,
        r.ci_low,
        r.ci_high,
        r.p_value,
        if r.significant { "  *" } else { "" }
    );
}

fn main() -> yaart::Result<()> {
    let judge = JudgeConfig::from_synthetic(1000, 8, 0.05, &RngStream::new(1))?;
    let prompts = eval_prompts();
    let clean = OracleSource {
        side: 8,
        aesthetic: 0.6,
        defect: 0.0,
    };
    let noisy = DefectInjector {
        inner: clean.clone(),
        amplitude: 0.15,
    };
    let (r, votes) = sbs_compare(&clean, &noisy, &prompts, 4, &judge, &RngStream::new(2))?;
    show("clean vs noisy", &r);
    let (r0, _) = sbs_compare(&clean, &clean, &prompts, 4, &judge, &RngStream::new(3))?;
    show("clean vs clean", &r0);
    println!("first vote record: {}", serde_json::to_string(&votes[0])?);
    Ok(())
}
