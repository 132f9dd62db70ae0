//! Walks a hand-written per-step loss matrix through the terminal mask, the
//! step split and the priority-weighted combination.

use sprlab::modifiers::{apply_terminal_mask, combine_spr_loss, split_components, NormalizationMode, PriorityWeights, TerminalMask};
use sprlab::{Tape, Tensor};

fn main() -> sprlab::Result<()> {
    // Rows are samples, columns are prediction steps 0..=3.
    let loss = Tensor::from_rows(&[
        vec![-0.9, -0.8, -0.7, -0.6],
        vec![-0.5, -0.4, -0.3, -0.2],
        vec![-0.95, -0.9, -0.85, -0.8],
    ])?;
    // The second sample's episode ended after step 1.
    let mask = TerminalMask::new(Tensor::from_rows(&[
        vec![1.0, 1.0, 1.0, 1.0],
        vec![1.0, 1.0, 0.0, 0.0],
        vec![1.0, 1.0, 1.0, 1.0],
    ])?)?;
    let importance = [0.4, 1.0, 0.7];

    for (label, masked, mode) in [
        ("plain", false, NormalizationMode::Raw),
        ("masked", true, NormalizationMode::Raw),
        ("prioritized", false, NormalizationMode::SumToOne),
        ("both", true, NormalizationMode::SumToOne),
    ] {
        let t = Tape::new();
        let leaf = t.leaf(loss.clone());
        let l = if masked { apply_terminal_mask(&t, leaf, &mask)? } else { leaf };
        let (spr, model) = split_components(&t, l)?;
        let w = PriorityWeights::from_importance(&importance, mode)?;
        let total = combine_spr_loss(&t, spr, model, &w, 1.0, 0.5)?;
        t.backward(total)?;
        println!(
            "{label:<12} spr {:?}  model {:?}  total {:+.4}",
            t.value(spr)?.data(),
            t.value(model)?.data().iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            t.value(total)?.item()?
        );
        println!("{:<12} d total / d loss, row 1: {:?}", "", t.grad(leaf)?.row(1));
    }
    Ok(())
}
