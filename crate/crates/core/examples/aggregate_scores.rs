//! Aggregates the bundled 26-game score tables with stratified bootstrap
//! intervals. The bundled tables hold one run per game, so every interval
//! collapses onto its point; tables with several runs per game give real
//! widths.
//!
//! ```text
//! cargo run --release --example aggregate_scores -- [replicates]
//! ```

use std::path::Path;

use sprlab::metrics::{aggregate_report, BaselineTable, ScoreTable, Statistic};

const COLUMNS: [&str; 7] = ["naked", "non", "prio", "vicreg_low", "vicreg_high", "barlow", "spr"];

fn main() -> sprlab::Result<()> {
    let replicates: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/atari26");
    let baselines = BaselineTable::from_csv(&dir.join("baselines.csv"))?;

    println!("{:<12} {:>22} {:>22} {:>22} {:>22} {:>5}", "column", "mean", "median", "iqm", "gap", "#>1");
    for column in COLUMNS {
        let table = ScoreTable::from_csv(&dir.join(format!("{column}.csv")))?;
        let report = aggregate_report(&table, &baselines, &Statistic::ALL, replicates, 0.95, 0)?;
        let cell = |s: Statistic| {
            let ci = &report.statistics[&s];
            format!("{:.3} [{:.3}, {:.3}]", ci.point, ci.lower, ci.upper)
        };
        println!(
            "{column:<12} {:>22} {:>22} {:>22} {:>22} {:>5}",
            cell(Statistic::Mean),
            cell(Statistic::Median),
            cell(Statistic::Iqm),
            cell(Statistic::OptimalityGap),
            report.superhuman_count
        );
    }
    Ok(())
}
