//! Evaluates the three self-predictive objectives on random, aligned and
//! collapsed embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprlab::objectives::{
    barlow_step_loss, cosine_loss_matrix, vicreg_loss, CosineForm, ObjectiveConfig, PredictionBundle, VicregWeights,
};
use sprlab::{Tape, Tensor};

const B: usize = 32;
const D: usize = 8;

fn report(label: &str, za: &Tensor, zb: &Tensor) -> sprlab::Result<()> {
    let t = Tape::new();
    let (a, b) = (t.constant(za.clone()), t.constant(zb.clone()));

    let bundle = PredictionBundle::new(&t, t.reshape(a, &[B, 1, D])?, t.reshape(b, &[B, 1, D])?)?;
    let cos = t.value(t.mean(cosine_loss_matrix(&t, &bundle, CosineForm::NegativeCosine)?, None)?)?.item()?;
    // Barlow standardizes each feature, so a constant column is rejected.
    let barlow = match barlow_step_loss(&t, a, b, 0.005, true) {
        Ok(v) => format!("{:8.4}", t.value(v)?.item()?),
        Err(e) => format!("{e}"),
    };
    let mut line = format!("{label:<10} cosine {cos:+.4}  barlow {barlow}");
    for (name, w) in [("low", VicregWeights::LOW), ("high", VicregWeights::HIGH)] {
        let cfg = ObjectiveConfig {
            vicreg_weights: w,
            ..ObjectiveConfig::default()
        };
        let v = vicreg_loss(&t, a, b, &cfg)?;
        let val = |x| t.value(x).and_then(|t| t.item());
        line += &format!(
            "  vicreg-{name} {:8.4} (var {:.3}, cov {:.3}, inv {:.3})",
            val(v.total)?,
            val(v.variance)?,
            val(v.covariance)?,
            val(v.invariance)?
        );
    }
    println!("{line}");
    Ok(())
}

fn main() -> sprlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut draw = || Tensor::new(vec![B, D], (0..B * D).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (x, y) = (draw()?, draw()?);
    let noisy = Tensor::new(vec![B, D], x.data().iter().zip(y.data()).map(|(a, b)| a + 0.05 * b).collect())?;

    report("random", &x, &y)?;
    report("aligned", &x, &noisy)?;
    report("identical", &x, &x)?;
    report("collapsed", &Tensor::full(&[B, D], 0.5), &Tensor::full(&[B, D], 0.5))?;
    Ok(())
}
