//! Profiles a model pair offline and turns budgets into thresholds.

use std::path::Path;

use tandem::bench::{Knob, Prepared};
use tandem::profiler::{budget_to_ith, calibrate_alpha, expected_emitted};

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/single_session.toml");
    let prepared = Prepared::load(&path).unwrap();
    let profile = prepared.run_profile(48).unwrap();
    println!(
        "{} chunks, {} fully accepted; c_th {:.4}; {:.3} tokens per verification -> alpha {:.4}",
        profile.chunks, profile.fully_accepted, profile.c_th, profile.mean_emitted, profile.alpha
    );
    assert!((expected_emitted(profile.alpha, profile.gamma) - profile.mean_emitted).abs() < 1e-9);
    println!(
        "alpha 0.7 at gamma 4 emits {:.4}, which inverts to {:.6}",
        expected_emitted(0.7, 4),
        calibrate_alpha(expected_emitted(0.7, 4), 4).unwrap()
    );

    println!("\n budget    i_th   offloaded chunks");
    for b in [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let ith = budget_to_ith(&profile, b).unwrap();
        let run = prepared.with_knob(Knob::Budget, b).unwrap().run().unwrap();
        println!("{b:>7.1} {ith:>7.3} {:>18.3}", run.report.decision_rate);
    }
    println!(
        "\n{}",
        serde_json::to_string_pretty(&profile.policy(0.2, &prepared.scenario.policy).unwrap()).unwrap()
    );
}
