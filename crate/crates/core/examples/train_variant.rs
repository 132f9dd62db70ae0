//! Trains one preset and prints its evaluation curve.
//!
//! ```text
//! cargo run --release --example train_variant -- spr 30000 1
//! ```

use std::time::Instant;

use sprlab::agent::{run_training, VariantConfig};
use sprlab::envs::value_iteration_oracle;

fn main() -> sprlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset = args.first().map_or("spr", String::as_str);
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let cfg = VariantConfig {
        total_steps: steps,
        ..VariantConfig::preset(preset)?
    };
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    let spec = cfg.env.resolve()?;
    let oracle = value_iteration_oracle(&spec, 1.0)?;

    let t0 = Instant::now();
    let out = run_training(&cfg, seed)?;
    println!("preset {preset}, seed {seed}, {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
    for p in &out.curve {
        println!("  step {:>6}  eval return {:+.3}", p.step, p.eval_return);
    }
    if let Some(last) = out.logs.last() {
        println!(
            "last log: td {:.4}, ssl {:?}, grad norm {:.3}",
            last.td_loss, last.ssl_total, last.grad_norm
        );
    }
    println!("status {:?}; oracle optimum {:.3}", out.status, oracle.start_return);
    Ok(())
}
