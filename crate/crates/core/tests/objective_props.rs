use proptest::prelude::*;
use sprlab::objectives::{
    barlow_step_loss, cosine_loss_matrix, cross_correlation, vicreg_loss, CosineForm, ObjectiveConfig,
    PredictionBundle, VicregWeights,
};
use sprlab::{Tape, Tensor};

const B: usize = 8;
const D: usize = 6;

fn matrix() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, B * D)
}

fn permutation() -> impl Strategy<Value = Vec<usize>> {
    Just((0..B).collect::<Vec<_>>()).prop_shuffle()
}

fn permute_rows(x: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&i| x[i * D..(i + 1) * D].to_vec()).collect()
}

fn bd(x: &[f64]) -> Tensor {
    Tensor::new(vec![B, D], x.to_vec()).unwrap()
}

fn barlow(za: &[f64], zb: &[f64], center: bool) -> f64 {
    let t = Tape::new();
    let l = barlow_step_loss(&t, t.constant(bd(za)), t.constant(bd(zb)), 0.005, center).unwrap();
    t.value(l).unwrap().item().unwrap()
}

fn correlation(za: &[f64], zb: &[f64], center: bool) -> Tensor {
    let t = Tape::new();
    let c = cross_correlation(&t, t.constant(bd(za)), t.constant(bd(zb)), center).unwrap();
    t.value(c).unwrap()
}

fn vicreg(z: &[f64], zp: &[f64], weights: VicregWeights) -> [f64; 4] {
    let t = Tape::new();
    let cfg = ObjectiveConfig {
        vicreg_weights: weights,
        ..ObjectiveConfig::default()
    };
    let v = vicreg_loss(&t, t.constant(bd(z)), t.constant(bd(zp)), &cfg).unwrap();
    let get = |x| t.value(x).unwrap().item().unwrap();
    [get(v.total), get(v.variance), get(v.covariance), get(v.invariance)]
}

fn cosine(online: &[f64], target: &[f64]) -> Tensor {
    let t = Tape::new();
    let shape = vec![B, 1, D];
    let bundle = PredictionBundle::new(
        &t,
        t.constant(Tensor::new(shape.clone(), online.to_vec()).unwrap()),
        t.constant(Tensor::new(shape, target.to_vec()).unwrap()),
    )
    .unwrap();
    t.value(cosine_loss_matrix(&t, &bundle, CosineForm::NegativeCosine).unwrap()).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Keeps draws whose columns are not nearly constant, so correlations exist.
fn well_spread(x: &[f64]) -> bool {
    (0..D).all(|j| {
        let col: Vec<f64> = (0..B).map(|i| x[i * D + j]).collect();
        let mean = col.iter().sum::<f64>() / B as f64;
        col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 1e-3
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_permutation_leaves_losses_unchanged(za in matrix(), zb in matrix(), perm in permutation()) {
        prop_assume!(well_spread(&za) && well_spread(&zb));
        let (pa, pb) = (permute_rows(&za, &perm), permute_rows(&zb, &perm));
        for center in [true, false] {
            let (x, y) = (barlow(&za, &zb, center), barlow(&pa, &pb, center));
            prop_assert!(close(x, y), "barlow center={center}: {x} vs {y}");
        }
        for w in [VicregWeights::LOW, VicregWeights::HIGH] {
            let (x, y) = (vicreg(&za, &zb, w), vicreg(&pa, &pb, w));
            for k in 0..4 {
                prop_assert!(close(x[k], y[k]), "vicreg term {k}: {} vs {}", x[k], y[k]);
            }
        }
        let (c, cp) = (cosine(&za, &zb), cosine(&pa, &pb));
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(cp.at(&[row, 0]), c.at(&[src, 0]));
        }
    }

    #[test]
    fn cosine_and_correlation_stay_in_range(za in matrix(), zb in matrix()) {
        prop_assume!(well_spread(&za) && well_spread(&zb));
        prop_assert!(cosine(&za, &zb).data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        for center in [true, false] {
            prop_assert!(correlation(&za, &zb, center).data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn positive_rescaling_leaves_scale_free_losses_unchanged(
        za in matrix(), zb in matrix(), a in 0.1f64..10.0, b in 0.1f64..10.0,
    ) {
        prop_assume!(well_spread(&za) && well_spread(&zb));
        let sa: Vec<f64> = za.iter().map(|v| v * a).collect();
        let sb: Vec<f64> = zb.iter().map(|v| v * b).collect();
        let (c, cs) = (cosine(&za, &zb), cosine(&sa, &sb));
        prop_assert!(c.max_abs_diff(&cs) <= 1e-12);
        for center in [true, false] {
            let (x, y) = (barlow(&za, &zb, center), barlow(&sa, &sb, center));
            prop_assert!(close(x, y), "barlow center={center}: {x} vs {y}");
        }
    }

    #[test]
    fn vicreg_regularizers_are_symmetric(z in matrix(), zp in matrix()) {
        let (x, y) = (vicreg(&z, &zp, VicregWeights::HIGH), vicreg(&zp, &z, VicregWeights::HIGH));
        for k in 0..4 {
            prop_assert!(close(x[k], y[k]), "term {k}: {} vs {}", x[k], y[k]);
        }
    }

    #[test]
    fn terms_are_nonnegative(za in matrix(), zb in matrix()) {
        prop_assume!(well_spread(&za) && well_spread(&zb));
        prop_assert!(barlow(&za, &zb, true) >= 0.0);
        prop_assert!(vicreg(&za, &zb, VicregWeights::LOW).iter().all(|&v| v >= 0.0));
    }
}

/// Hadamard columns are centered and orthogonal, so their correlation with
/// themselves is the identity.
#[test]
fn decorrelated_standardized_features_give_zero_barlow() {
    let h = |i: usize, j: usize| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
    let z: Vec<f64> = (0..B).flat_map(|i| (1..=D).map(move |j| h(i, j))).collect();
    assert!(barlow(&z, &z, true).abs() <= 1e-12);
    assert!(barlow(&z, &z, false).abs() <= 1e-12);
}

#[test]
fn identical_unit_spread_batches_zero_the_vicreg_invariance() {
    let z: Vec<f64> = (0..B * D).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let v = vicreg(&z, &z, VicregWeights::LOW);
    assert_eq!(v[3], 0.0);
}
