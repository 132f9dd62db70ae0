//! Finite-difference check of the tape gradient for a small composite
//! function: a normalized two-layer map followed by a squared error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprlab::autodiff::grad_check;
use sprlab::Tensor;

fn main() -> sprlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let target = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let x = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let report = grad_check(
        |t, x| {
            let h = t.relu(t.matmul(x, t.constant(w.clone()))?)?;
            let norm = t.sqrt_eps(t.sum(t.square(h)?, None)?, 1e-12)?;
            let diff = t.sub(h, t.constant(target.clone()))?;
            t.div(t.sum(t.square(diff)?, None)?, norm)
        },
        &x,
        1e-5,
    )?;
    println!("max relative error {:.2e}", report.max_relative_error);
    for (a, n) in report.analytic.data().iter().zip(report.numeric.data()).take(6) {
        println!("  analytic {a:+.8}  numeric {n:+.8}");
    }
    Ok(())
}
