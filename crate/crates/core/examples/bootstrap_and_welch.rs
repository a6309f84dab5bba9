//! Welch's test, a seeded percentile bootstrap and a marginal effect
//! estimate on small samples.

use srct::stats::{bootstrap_ci, marginal_effect, welch_test, LevelScores};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let low = [3.1, 4.7, 2.2, 5.9, 4.0];
    let high = [6.3, 7.8, 5.1, 8.4, 6.9];

    let w = welch_test(&low, &high)?;
    println!("Welch: delta {:.3}, t {:.4}, df {:.3}, p {:.5}", w.delta, w.t, w.df, w.p);

    let (lo, hi) = bootstrap_ci(&high, 4000, 7, 0.95)?;
    println!("95% bootstrap interval for mean(high): [{lo:.3}, {hi:.3}]");

    let e = marginal_effect(
        LevelScores {
            factor: "cost",
            from: "low",
            to: "high",
            from_scores: &low,
            to_scores: &high,
        },
        4000,
        7,
        0.95,
    )?;
    println!(
        "effect {} -> {}: {:.3} [{:.3}, {:.3}] p {:.4} {}",
        e.from,
        e.to,
        e.delta_mean,
        e.ci_low,
        e.ci_high,
        e.p_value,
        e.stars()
    );
    Ok(())
}
