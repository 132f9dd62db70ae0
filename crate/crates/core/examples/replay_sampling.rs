//! Fills a prioritized buffer from random play, reprioritizes a few slots and
//! shows the resulting sequence batch, importance weights and terminal mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprlab::envs::{GridEnv, GridSpec, N_ACTIONS};
use sprlab::modifiers::NormalizationMode;
use sprlab::replay::{build_terminal_mask, ReplayBuffer, ReplayConfig, Transition};

fn main() -> sprlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut env = GridEnv::new(GridSpec::preset("pitfall-5x5")?)?;
    let mut buf = ReplayBuffer::new(ReplayConfig {
        capacity: 512,
        ..ReplayConfig::default()
    })?;

    let mut obs = env.reset(0);
    for _ in 0..400 {
        let action = rng.gen_range(0..N_ACTIONS);
        let out = env.step(action)?;
        buf.push(Transition {
            obs,
            action,
            reward: out.reward,
            done: out.done,
        });
        obs = if out.done { env.reset(rng.gen()) } else { out.obs };
    }
    println!("{} transitions, tree total {:.3}, max priority {:.3}", buf.len(), buf.tree().total(), buf.max_priority());

    // Large TD errors on a handful of slots make them likelier starts.
    buf.update_priorities(&[10, 11, 12], &[5.0, 4.0, 3.0])?;
    println!("after update: tree total {:.3}, max priority {:.3}", buf.tree().total(), buf.max_priority());

    let (batch, weights) = buf.sample_sequences(8, 5, NormalizationMode::MaxNormalized, &mut rng)?;
    let mask = build_terminal_mask(&batch, 5)?;
    println!("start    P(i)      w      mask");
    for i in 0..batch.batch_size() {
        let row: String = mask.tensor().row(i).iter().map(|&m| if m > 0.0 { '1' } else { '0' }).collect();
        println!(
            "{:>5}  {:.5}  {:.3}  {row}",
            batch.sample_indices[i],
            batch.probabilities[i],
            weights.weights()[i]
        );
    }
    Ok(())
}
