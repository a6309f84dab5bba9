//! Two one-sided tests against a human reference and band membership.

use srct::stats::{tost_equivalence, Band, BandMembership, Bands};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lay = Band { mean: 4.6, sd: 1.5 };
    let professional = Band { mean: 3.4, sd: 1.6 };
    let bands = Bands {
        lay: Some(lay),
        professional: Some(professional),
    };
    let model_scores = [5.0, 4.0, 5.0, 6.0, 4.0, 5.0, 4.0, 5.0, 5.0, 4.0, 6.0, 4.0];
    let margin = 0.5 * lay.sd;
    let r = tost_equivalence(&model_scores, lay, margin, 0.05, bands)?;
    println!(
        "mean {:.3} vs lay {:.2} +/- {:.2}: p_lower {:.4}, p_upper {:.4} -> {:?}, {}",
        r.model_mean, lay.mean, margin, r.tost_p_lower, r.tost_p_upper, r.verdict, r.band_membership
    );
    for x in [2.0, 3.0, 4.0, 6.1, 6.5] {
        println!("  {x:.1}: {}", BandMembership::classify(x, Some(&lay), Some(&professional)));
    }
    Ok(())
}
