use proptest::prelude::*;
use sprlab::diagnostics::{dormant_fraction, singular_values, srank, DEFAULT_DELTA, DEFAULT_TAU};
use sprlab::Tensor;

/// Exact rank of a small integer matrix by fraction-free elimination.
fn exact_rank(rows: usize, cols: usize, data: &[i64]) -> usize {
    let mut m: Vec<Vec<i128>> = (0..rows).map(|r| data[r * cols..(r + 1) * cols].iter().map(|&v| v as i128).collect()).collect();
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows).find(|&r| m[r][c] != 0) else { continue };
        m.swap(rank, p);
        for r in rank + 1..rows {
            let (a, b) = (m[rank][c], m[r][c]);
            for k in 0..cols {
                m[r][k] = m[r][k] * a - m[rank][k] * b;
            }
            let g = m[r].iter().fold(0i128, |g, &v| gcd(g, v.abs()));
            if g > 1 {
                m[r].iter_mut().for_each(|v| *v /= g);
            }
        }
        rank += 1;
    }
    rank
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn int_matrix() -> impl Strategy<Value = (usize, usize, Vec<i64>)> {
    (1usize..8, 1usize..8).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-3i64..=3, r * c)))
}

/// A `rows×cols` matrix of rank at most `k`, built as a product of integer factors.
fn low_rank() -> impl Strategy<Value = (usize, usize, usize, Vec<i64>)> {
    (2usize..10, 2usize..10, 1usize..4).prop_flat_map(|(r, c, k)| {
        (
            prop::collection::vec(-3i64..=3, r * k),
            prop::collection::vec(-3i64..=3, k * c),
        )
            .prop_map(move |(u, v)| {
                let data = (0..r)
                    .flat_map(|i| {
                        let (u, v) = (u.clone(), v.clone());
                        (0..c).map(move |j| (0..k).map(|l| u[i * k + l] * v[l * c + j]).sum())
                    })
                    .collect();
                (r, c, k, data)
            })
    })
}

fn tensor(rows: usize, cols: usize, data: &[i64]) -> Tensor {
    Tensor::new(vec![rows, cols], data.iter().map(|&v| v as f64).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spectrum_is_sorted_and_holds_the_frobenius_mass((r, c, data) in int_matrix()) {
        let t = tensor(r, c, &data);
        let sv = singular_values(&t).unwrap();
        prop_assert_eq!(sv.len(), r.min(c));
        prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]) && sv.iter().all(|&s| s >= 0.0));
        let fro: f64 = t.data().iter().map(|v| v * v).sum();
        let mass: f64 = sv.iter().map(|s| s * s).sum();
        prop_assert!((fro - mass).abs() <= 1e-9 * (1.0 + fro));
    }

    #[test]
    fn srank_never_exceeds_the_exact_rank((r, c, data) in int_matrix()) {
        let sv = singular_values(&tensor(r, c, &data)).unwrap();
        let exact = exact_rank(r, c, &data);
        match srank(&sv, DEFAULT_DELTA) {
            Ok(k) => prop_assert!(k <= exact && k >= 1, "srank {k} vs rank {exact}"),
            Err(_) => prop_assert_eq!(exact, 0),
        }
    }

    #[test]
    fn low_rank_products_have_small_srank((r, c, k, data) in low_rank()) {
        let sv = singular_values(&tensor(r, c, &data)).unwrap();
        if let Ok(s) = srank(&sv, DEFAULT_DELTA) {
            prop_assert!(s <= k);
        }
    }

    #[test]
    fn rescaling_keeps_srank_and_dormancy((r, c, data) in int_matrix(), e in -6i32..6) {
        let t = tensor(r, c, &data);
        let s = 2f64.powi(e);
        let scaled = t.map(|v| v * s);
        let (a, b) = (singular_values(&t).unwrap(), singular_values(&scaled).unwrap());
        prop_assert_eq!(srank(&a, DEFAULT_DELTA).ok(), srank(&b, DEFAULT_DELTA).ok());
        let (f1, s1) = dormant_fraction(&t, DEFAULT_TAU).unwrap();
        let (f2, s2) = dormant_fraction(&scaled, DEFAULT_TAU).unwrap();
        prop_assert_eq!(f1, f2);
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn dormancy_scores_average_to_one(acts in prop::collection::vec(0.0f64..3.0, 6 * 5)) {
        let t = Tensor::new(vec![6, 5], acts).unwrap();
        let (frac, scores) = dormant_fraction(&t, DEFAULT_TAU).unwrap();
        prop_assert!((0.0..=1.0).contains(&frac));
        if scores.iter().any(|&s| s > 0.0) {
            prop_assert!((scores.iter().sum::<f64>() / 5.0 - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn exact_rank_reference_examples() {
    assert_eq!(exact_rank(2, 2, &[1, 2, 2, 4]), 1);
    assert_eq!(exact_rank(3, 3, &[1, 0, 0, 0, 1, 0, 0, 0, 1]), 3);
    assert_eq!(exact_rank(2, 3, &[0, 0, 0, 0, 0, 0]), 0);
}
