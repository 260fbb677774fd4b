//! Print the continuous-time noise schedule and the reverse-step posterior
//! coefficients of a 10-step sampling grid.
//!
//! cargo run --example noise_schedule

use yaart::scheduler::NoiseSchedule;

fn main() -> yaart::Result<()> {
    let sched = NoiseSchedule::default();
    println!("{:>6} {:>9} {:>9} {:>9}", "t", "alpha", "sigma", "log_snr");
    for i in 0..=10 {
        let v = sched.at(i as f64 / 10.0)?;
        println!(
            "{:>6.3} {:>9.5} {:>9.5} {:>9.3}",
            v.t, v.alpha, v.sigma, v.log_snr
        );
    }
    let grid = sched.timestep_grid(10)?;
    println!(
        "\n{:>6} {:>6} {:>9} {:>9} {:>9}",
        "t", "s", "coef_xt", "coef_x0", "var"
    );
    for w in grid.windows(2) {
        let c = sched.posterior_coeffs(w[1], w[0])?;
        println!(
            "{:>6.3} {:>6.3} {:>9.5} {:>9.5} {:>9.2e}",
            w[0], w[1], c.coef_xt, c.coef_x0, c.var
        );
    }
    Ok(())
}
