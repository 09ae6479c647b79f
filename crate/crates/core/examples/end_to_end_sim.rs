//! Runs one scenario under each ablation and compares latency, traffic
//! and cost.

use std::path::Path;

use tandem::bench::{Prepared, Variant};
use tandem::device::OffloadMode;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/single_session.toml");
    let base = Prepared::load(&path).unwrap();
    let full = Variant::default();
    let variants = [
        ("full", full),
        ("no PI", Variant { pi_on: false, ..full }),
        (
            "no early exit",
            Variant {
                early_exit_on: false,
                ..full
            },
        ),
        (
            "no compression",
            Variant {
                compression_on: false,
                ..full
            },
        ),
        (
            "confidence only",
            Variant {
                conf_only: true,
                ..full
            },
        ),
        ("importance only", Variant { imp_only: true, ..full }),
    ];
    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>10} {:>8}",
        "variant", "tbt", "offload", "layers", "bytes up", "cost"
    );
    let mut rows: Vec<(&str, Prepared)> = variants
        .iter()
        .map(|(name, v)| {
            let mut p = base.clone();
            p.scenario.variant = *v;
            (*name, p)
        })
        .collect();
    for (name, offload) in [
        ("local only", OffloadMode::Never),
        ("always offload", OffloadMode::Always),
    ] {
        let mut p = base.clone();
        p.scenario.device.offload = offload;
        rows.push((name, p));
    }
    for (name, p) in rows {
        let r = p.run().unwrap().report;
        println!(
            "{name:<16} {:>8.4} {:>8.3} {:>8.2} {:>10} {:>8.5}",
            r.mean_tbt, r.offload_fraction, r.layers_per_token, r.bytes_up, r.cost
        );
    }
}
