use proptest::prelude::*;
use sprlab::autodiff::grad_check;
use sprlab::{Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Values in [-2,2] at least 0.05 away from zero, so relu has no kink nearby.
fn off_zero(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.05f64..2.0, any::<bool>()), n)
        .prop_map(|v| v.into_iter().map(|(x, neg)| if neg { -x } else { x }).collect())
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn weighted(t: &Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y)?;
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    t.sum(t.mul(y, w)?, None)
}

fn split2(t: &Tape, x: Var, n: usize) -> Result<(Var, Var)> {
    Ok((t.slice(x, 0, 0, n)?, t.slice(x, 0, n, n)?))
}

/// Max relative error, or `None` when some gradient coordinate is nonzero
/// but tiny: there the ~1e-10 rounding noise of the central difference
/// dominates and the relative error measures nothing.
fn check<F: Fn(&Tape, Var) -> Result<Var>>(f: F, x: Vec<f64>) -> Option<f64> {
    let n = x.len();
    let report = grad_check(f, &Tensor::new(vec![n], x).unwrap(), H).unwrap();
    let ill = report.analytic.data().iter().any(|&g| g != 0.0 && g.abs() < 1e-3);
    (!ill).then_some(report.max_relative_error)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_binary(a in off_zero(5), b in off_zero(5)) {
        let x: Vec<f64> = a.iter().chain(&b).copied().collect();
        for op in 0..4 {
            let err = check(|t, v| {
                let (a, b) = split2(t, v, 5)?;
                let y = match op {
                    0 => t.add(a, b)?,
                    1 => t.sub(a, b)?,
                    2 => t.mul(a, b)?,
                    _ => t.div(a, b)?,
                };
                weighted(t, y)
            }, x.clone());
            prop_assert!(err.map_or(true, |e| e < TOL), "op {op}: {err:?}");
        }
    }

    #[test]
    fn elementwise_unary(x in off_zero(6), pos in values(6, 0.1, 2.0)) {
        for op in 0..5 {
            let err = check(|t, v| {
                let y = match op {
                    0 => t.relu(v)?,
                    1 => t.square(v)?,
                    2 => t.neg(v)?,
                    3 => t.scale(v, -1.7)?,
                    _ => t.add_scalar(v, 0.4)?,
                };
                weighted(t, y)
            }, x.clone());
            prop_assert!(err.map_or(true, |e| e < TOL), "op {op}: {err:?}");
        }
        let err = check(|t, v| weighted(t, t.sqrt(v)?), pos.clone());
        prop_assert!(err.map_or(true, |e| e < TOL), "sqrt: {err:?}");
        let err = check(|t, v| weighted(t, t.sqrt_eps(t.sub(v, t.constant(Tensor::full(&[6], 0.05)))?, 1e-4)?), pos);
        prop_assert!(err.map_or(true, |e| e < TOL), "sqrt_eps: {err:?}");
    }

    #[test]
    fn matmul_and_transpose(x in values(12 + 8, -2.0, 2.0)) {
        let err = check(|t, v| {
            let a = t.reshape(t.slice(v, 0, 0, 12)?, &[3, 4])?;
            let b = t.reshape(t.slice(v, 0, 12, 8)?, &[4, 2])?;
            weighted(t, t.transpose(t.matmul(a, b)?)?)
        }, x);
        prop_assert!(err.map_or(true, |e| e < TOL), "{err:?}");
    }

    #[test]
    fn reductions(x in values(12, -2.0, 2.0)) {
        for axis in [None, Some(0), Some(1)] {
            let err = check(|t, v| {
                let m = t.reshape(v, &[3, 4])?;
                weighted(t, t.sum(m, axis)?)
            }, x.clone());
            prop_assert!(err.map_or(true, |e| e < TOL), "sum {axis:?}: {err:?}");
            let err = check(|t, v| {
                let m = t.reshape(v, &[3, 4])?;
                weighted(t, t.mean(m, axis)?)
            }, x.clone());
            prop_assert!(err.map_or(true, |e| e < TOL), "mean {axis:?}: {err:?}");
        }
    }

    #[test]
    fn broadcasting(x in values(12 + 4, -2.0, 2.0)) {
        let err = check(|t, v| {
            let m = t.reshape(t.slice(v, 0, 0, 12)?, &[3, 4])?;
            let row = t.reshape(t.slice(v, 0, 12, 4)?, &[1, 4])?;
            weighted(t, t.mul(t.add(m, row)?, row)?)
        }, x);
        prop_assert!(err.map_or(true, |e| e < TOL), "{err:?}");
    }

    #[test]
    fn indexing(x in values(24, -2.0, 2.0), picks in prop::collection::vec(0usize..4, 3)) {
        let cube = |t: &Tape, v: Var| t.reshape(v, &[2, 3, 4]);
        let cases: Vec<Box<dyn Fn(&Tape, Var) -> Result<Var>>> = vec![
            Box::new(|t, v| weighted(t, t.slice(cube(t, v)?, 2, 1, 2)?)),
            Box::new(|t, v| weighted(t, t.select(cube(t, v)?, 1, 2)?)),
            Box::new(|t, v| {
                let c = cube(t, v)?;
                weighted(t, t.concat(&[t.select(c, 0, 1)?, t.select(c, 0, 0)?], 1)?)
            }),
            Box::new(|t, v| {
                let c = cube(t, v)?;
                weighted(t, t.stack(&[t.select(c, 1, 0)?, t.select(c, 1, 2)?], 1)?)
            }),
            Box::new(|t, v| weighted(t, t.index_select(cube(t, v)?, &[1, 0, 1])?)),
            Box::new({
                let picks = picks.clone();
                move |t, v| {
                    let m = t.select(cube(t, v)?, 0, 1)?;
                    weighted(t, t.pick(m, &picks)?)
                }
            }),
        ];
        for (i, f) in cases.iter().enumerate() {
            let err = check(f, x.clone());
            prop_assert!(err.map_or(true, |e| e < TOL), "case {i}: {err:?}");
        }
    }

    #[test]
    fn backward_is_deterministic(x in values(8, -2.0, 2.0)) {
        let run = || {
            let t = Tape::new();
            let v = t.leaf(Tensor::new(vec![2, 4], x.clone()).unwrap());
            let y = t.matmul(v, t.transpose(v).unwrap()).unwrap();
            let l = t.sum(t.relu(y).unwrap(), None).unwrap();
            t.backward(l).unwrap();
            t.grad(v).unwrap()
        };
        let (g1, g2) = (run(), run());
        prop_assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn detached_paths_carry_no_gradient(x in values(6, -2.0, 2.0)) {
        let t = Tape::new();
        let v = t.leaf(Tensor::new(vec![6], x).unwrap());
        let d = t.detach(t.square(v).unwrap()).unwrap();
        let l = t.sum(t.mul(d, d).unwrap(), None).unwrap();
        t.backward(l).unwrap();
        prop_assert!(t.grad(v).unwrap().data().iter().all(|&g| g == 0.0));

        let t = Tape::new();
        let a = t.leaf(Tensor::vector(&[1.0, 2.0]));
        let b = t.leaf(Tensor::vector(&[3.0, -1.0]));
        let l = t.sum(t.mul(a, t.detach(b).unwrap()).unwrap(), None).unwrap();
        t.backward(l).unwrap();
        prop_assert!(t.grad(b).unwrap().data().iter().all(|&g| g == 0.0));
        let ga = t.grad(a).unwrap();
        prop_assert_eq!(ga.data(), &[3.0, -1.0]);
    }
}
