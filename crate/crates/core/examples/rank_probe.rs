//! Trains a short run and prints the effective rank and dormant fraction of
//! the probed layers over training.
//!
//! ```text
//! cargo run --release --example rank_probe -- [preset] [steps]
//! ```

use sprlab::agent::{run_training, VariantConfig};

fn main() -> sprlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset = args.first().map_or("spr", String::as_str);
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3_000);
    let cfg = VariantConfig {
        total_steps: steps,
        ..VariantConfig::preset(preset)?
    };
    let out = run_training(&cfg, 0)?;
    println!("{:>6}  {:<17} {:>6} {:>9}", "step", "layer", "srank", "dormant");
    for (r, d) in out.ranks.iter().zip(&out.dormancy) {
        let srank = r.srank.map_or("-".to_string(), |s| s.to_string());
        println!("{:>6}  {:<17} {:>6} {:>9.3}", r.step, format!("{:?}", r.layer), srank, d.fraction);
    }
    Ok(())
}
