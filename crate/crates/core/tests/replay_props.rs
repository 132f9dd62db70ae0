use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sprlab::modifiers::NormalizationMode;
use sprlab::replay::{build_terminal_mask, ReplayBuffer, ReplayConfig, ReplayMode, SumTree, Transition};

fn transition(i: usize, done: bool) -> Transition {
    Transition {
        obs: vec![i as f64, 1.0],
        action: i % 4,
        reward: 1.0 + i as f64,
        done,
    }
}

fn filled(capacity: usize, dones: &[bool], mode: ReplayMode) -> ReplayBuffer {
    let mut buf = ReplayBuffer::new(ReplayConfig {
        capacity,
        mode,
        ..ReplayConfig::default()
    })
    .unwrap();
    for (i, &d) in dones.iter().enumerate() {
        buf.push(transition(i, d));
    }
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tree_stays_exact_under_any_write_sequence(
        ops in prop::collection::vec((0usize..16, 0.0f64..10.0), 1..400),
    ) {
        let mut tree = SumTree::new(16);
        let mut shadow = [0.0; 16];
        for &(leaf, p) in &ops {
            tree.set(leaf, p).unwrap();
            shadow[leaf] = p;
        }
        prop_assert!(tree.is_consistent());
        prop_assert_eq!(tree.leaves(), &shadow[..]);
        let naive: f64 = shadow.iter().sum();
        prop_assert!((tree.total() - naive).abs() <= 1e-12 * (1.0 + naive));
    }

    #[test]
    fn find_lands_in_the_prefix_interval(
        leaves in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..5.0], 16),
        u in 0.0f64..1.0,
    ) {
        let mut tree = SumTree::new(16);
        for (i, &p) in leaves.iter().enumerate() {
            tree.set(i, p).unwrap();
        }
        prop_assume!(tree.total() > 0.0);
        let mass = u * tree.total();
        let leaf = tree.find(mass);
        prop_assert!(leaves[leaf] > 0.0);
        let before: f64 = leaves[..leaf].iter().sum();
        prop_assert!(before <= mass + 1e-9 && mass < before + leaves[leaf] + 1e-9, "{before} {mass} {}", leaves[leaf]);
    }

    #[test]
    fn sampled_sequences_respect_episode_ends(
        dones in prop::collection::vec(prop::bool::weighted(0.2), 40..120),
        horizon in 0usize..5,
        seed in any::<u64>(),
        prioritized in any::<bool>(),
    ) {
        let mode = if prioritized { ReplayMode::Prioritized } else { ReplayMode::Uniform };
        let buf = filled(64, &dones, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, weights) = buf.sample_sequences(8, horizon, NormalizationMode::SumToOne, &mut rng).unwrap();
        prop_assert!((weights.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for k in 0..=horizon {
            let mask = build_terminal_mask(&batch, k).unwrap();
            for i in 0..8 {
                prop_assert_eq!(mask.tensor().at(&[i, 0]), 1.0);
                for s in 1..=k {
                    let expected = if batch.done_flags[i][s - 1] { 0.0 } else { 1.0 };
                    prop_assert_eq!(mask.tensor().at(&[i, s]), expected);
                }
            }
        }
        for i in 0..8 {
            let flags = &batch.done_flags[i];
            prop_assert!(flags.windows(2).all(|w| !w[0] || w[1]));
            for s in 0..horizon {
                if s > 0 && flags[s - 1] {
                    prop_assert_eq!(batch.rewards[i][s], 0.0);
                } else {
                    prop_assert!(batch.rewards[i][s] > 0.0);
                }
            }
            // Consecutive states of one sequence are consecutive insertions.
            let first = batch.obs.at(&[i, 0, 0]);
            for s in 0..=horizon {
                prop_assert_eq!(batch.obs.at(&[i, s, 0]), first + s as f64);
            }
        }
    }

    #[test]
    fn new_transitions_get_the_running_max(
        tds in prop::collection::vec(-5.0f64..5.0, 10),
    ) {
        let mut buf = filled(32, &[false; 20], ReplayMode::Prioritized);
        let slots: Vec<usize> = (0..10).collect();
        buf.update_priorities(&slots, &tds).unwrap();
        let cfg = buf.config().clone();
        let best = tds
            .iter()
            .map(|td| (td.abs() + cfg.priority_eps).powf(cfg.alpha))
            .fold(1.0, f64::max);
        prop_assert_eq!(buf.max_priority(), best);
        buf.push(transition(99, false));
        prop_assert_eq!(buf.tree().get(20), best);
        prop_assert!(buf.tree().is_consistent());
    }
}

#[test]
fn importance_weights_follow_the_sampling_probability() {
    let mut buf = filled(16, &[false; 16], ReplayMode::Prioritized);
    let slots: Vec<usize> = (0..16).collect();
    let tds: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
    buf.update_priorities(&slots, &tds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (batch, _) = buf.sample_sequences(4, 1, NormalizationMode::Raw, &mut rng).unwrap();
    let beta = buf.config().beta;
    for (j, &slot) in batch.sample_indices.iter().enumerate() {
        let p = buf.tree().get(slot) / buf.tree().total();
        assert_eq!(batch.probabilities[j], p);
        assert!((batch.importance[j] - (16.0 * p).powf(-beta)).abs() <= 1e-12);
    }
}

#[test]
fn too_small_buffers_underflow() {
    let buf = filled(16, &[false; 5], ReplayMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(buf.sample_sequences(4, 1, NormalizationMode::Raw, &mut rng).is_err());
}
