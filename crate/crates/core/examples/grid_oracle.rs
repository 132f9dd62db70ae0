//! Solves the bundled grids by value iteration and walks the greedy path.

use sprlab::envs::{value_iteration_oracle, Action, GridEnv, GridSpec, N_ACTIONS};

fn main() -> sprlab::Result<()> {
    for name in ["pitfall-5x5", "loop-5x5"] {
        let spec = GridSpec::preset(name)?;
        for discount in [1.0, 0.9] {
            let sol = value_iteration_oracle(&spec, discount)?;
            println!(
                "{name} discount {discount}: start return {:.4} after {} sweeps (residual {:.1e})",
                sol.start_return, sol.iterations, sol.residual
            );
        }

        let sol = value_iteration_oracle(&spec, 0.99)?;
        let side = (sol.values.len() as f64).sqrt() as usize;
        for row in sol.values.chunks(side) {
            println!("    {}", row.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" "));
        }

        // Greedy one-step lookahead on the oracle values.
        let mut env = GridEnv::new(spec.clone())?;
        env.reset(0);
        let mut total = 0.0;
        let mut path = vec![env.agent()];
        while env.steps() < 20 {
            let here = env.agent();
            let best = (0..N_ACTIONS)
                .max_by(|&a, &b| {
                    let score = |i: usize| {
                        let next = spec.move_from(here, Action::from_index(i).unwrap());
                        spec.arrival_reward(next) + 0.99 * sol.values[spec.index(next)]
                    };
                    score(a).total_cmp(&score(b))
                })
                .unwrap();
            let out = env.step(best)?;
            total += out.reward;
            path.push(env.agent());
            if out.done {
                break;
            }
        }
        println!("    greedy path {path:?}, return {total}");
    }
    Ok(())
}
