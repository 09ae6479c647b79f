//! Sweeps session arrival rate at three budgets and reports where the
//! per-request latency leaves its flat region.

use std::path::Path;

use tandem::bench::{sweep, Knob, Prepared};

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/load.toml");
    let base = Prepared::load(&path).unwrap();
    let loads: Vec<f64> = (0..18).map(|k| 0.1 * 1.3f64.powi(k)).collect();
    for budget in [0.3, 0.6, 0.9] {
        let rows = sweep(
            &base.with_knob(Knob::Budget, budget).unwrap(),
            Knob::ArrivalRate,
            &loads,
        )
        .unwrap();
        let baseline = rows[0].report.mean_latency;
        let flat = rows
            .iter()
            .take_while(|r| r.report.mean_latency < 1.2 * baseline)
            .count();
        println!("budget {budget}: knee at {:.3} sessions/s", loads[flat.max(1) - 1]);
        for r in &rows {
            println!(
                "  {:>7.3}/s  latency {:>6.3}s  p99 {:>6.3}s  {:>6.2} req/s  batch {:>5.2}",
                r.value, r.report.mean_latency, r.report.latency_p99, r.report.throughput, r.report.mean_batch_size
            );
        }
    }
}
