//! RL-specific transformations of the per-sample SSL loss matrix.
//!
//! The cosine objective yields `L ∈ R^{B×(K+1)}`. The pipeline is
//!
//! 1. terminal masking: `L ∘ M` zeroes entries for states after an episode
//!    ended,
//! 2. split: column 0 is the current-state term, columns `1..=K` are averaged
//!    into the model term,
//! 3. combine: `(1/B) Σ_i ω_i (λ·spr_i + γ·model_i)`.
//!
//! Disabling priority weighting means `ω_i = 1`; with an all-ones mask the
//! pipeline reduces to the plain batch mean of `λ·spr + γ·model`.
//!
//! Feature-dimension objectives cannot be weighted per sample, so the only
//! modification available to them is dropping whole sequences that touch a
//! terminal ([`mask_batch_samples`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `B×(K+1)` 0/1 matrix. Column 0 is always 1 and a row stays 0 once it
/// drops to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalMask {
    mask: Tensor,
}

impl TerminalMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        if mask.rank() != 2 || mask.shape()[1] == 0 {
            return shape_err(format!("terminal mask must be B×(K+1), got {:?}", mask.shape()));
        }
        let cols = mask.shape()[1];
        for i in 0..mask.shape()[0] {
            let row = mask.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract(format!("mask row {i} has non-binary entries")));
            }
            if row[0] != 1.0 {
                return Err(Error::Contract(format!("mask row {i} masks the current state")));
            }
            if (1..cols).any(|k| row[k] > row[k - 1]) {
                return Err(Error::Contract(format!("mask row {i} is not absorbing")));
            }
        }
        Ok(Self { mask })
    }

    pub fn ones(batch: usize, steps: usize) -> Self {
        Self {
            mask: Tensor::full(&[batch, steps], 1.0),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn batch(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn row_is_clean(&self, i: usize) -> bool {
        self.mask.row(i).iter().all(|&v| v == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// `Σω = 1`, the default for the SSL loss.
    #[default]
    SumToOne,
    /// `max ω = 1`, the usual prioritized-replay convention.
    MaxNormalized,
    /// `ω = 1` everywhere (no priority weighting).
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorityWeights {
    weights: Vec<f64>,
    mode: NormalizationMode,
}

impl PriorityWeights {
    pub fn raw(batch: usize) -> Self {
        Self {
            weights: vec![1.0; batch],
            mode: NormalizationMode::Raw,
        }
    }

    /// Normalizes positive importance weights per `mode`. `Raw` ignores the
    /// input values.
    pub fn from_importance(importance: &[f64], mode: NormalizationMode) -> Result<Self> {
        if importance.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Domain("importance weights must be positive and finite".into()));
        }
        let weights = match mode {
            NormalizationMode::Raw => vec![1.0; importance.len()],
            NormalizationMode::SumToOne => {
                let s: f64 = importance.iter().sum();
                importance.iter().map(|w| w / s).collect()
            }
            NormalizationMode::MaxNormalized => {
                let m = importance.iter().cloned().fold(0.0, f64::max);
                importance.iter().map(|w| w / m).collect()
            }
        };
        Ok(Self { weights, mode })
    }

    /// Wraps already-normalized weights, checking the mode's invariant.
    pub fn new(weights: Vec<f64>, mode: NormalizationMode) -> Result<Self> {
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Domain("priority weights must be positive and finite".into()));
        }
        let ok = match mode {
            NormalizationMode::SumToOne => (weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            NormalizationMode::MaxNormalized => weights.iter().cloned().fold(0.0, f64::max) == 1.0,
            NormalizationMode::Raw => weights.iter().all(|&w| w == 1.0),
        };
        if !ok {
            return Err(Error::Domain(format!("weights violate the {mode:?} invariant")));
        }
        Ok(Self { weights, mode })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode(&self) -> NormalizationMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `L ∘ M`. Masked entries are exactly zero and receive zero gradient.
pub fn apply_terminal_mask(tape: &Tape, loss: Var, mask: &TerminalMask) -> Result<Var> {
    let shape = tape.shape(loss)?;
    if shape != mask.tensor().shape() {
        return shape_err(format!("loss {shape:?} vs mask {:?}", mask.tensor().shape()));
    }
    tape.mul(loss, tape.constant(mask.tensor().clone()))
}

/// `(spr_i, model_spr_i)`: column 0, and the mean of columns `1..=K` (zeros
/// when `K = 0`).
pub fn split_components(tape: &Tape, loss: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(loss)?;
    if shape.len() != 2 || shape[1] == 0 {
        return shape_err(format!("loss matrix must be B×(K+1), got {shape:?}"));
    }
    let (b, k) = (shape[0], shape[1] - 1);
    let spr = tape.select(loss, 1, 0)?;
    let model = if k == 0 {
        tape.constant(Tensor::zeros(&[b]))
    } else {
        tape.mean(tape.slice(loss, 1, 1, k)?, Some(1))?
    };
    Ok((spr, model))
}

/// `(1/B) Σ_i ω_i (λ·spr_i + γ·model_i)`.
pub fn combine_spr_loss(
    tape: &Tape,
    spr: Var,
    model: Var,
    weights: &PriorityWeights,
    lambda: f64,
    gamma: f64,
) -> Result<Var> {
    let (ss, sm) = (tape.shape(spr)?, tape.shape(model)?);
    if ss.len() != 1 || ss != sm || ss[0] != weights.len() {
        return shape_err(format!(
            "spr {ss:?}, model {sm:?} and {} weights must share length B",
            weights.len()
        ));
    }
    let per_sample = tape.add(tape.scale(spr, lambda)?, tape.scale(model, gamma)?)?;
    let weighted = tape.mul(per_sample, tape.constant(Tensor::vector(weights.weights())))?;
    tape.mean(weighted, None)
}

/// Rows whose sequence reaches no terminal state within the `K+1` states the
/// loss covers. Fewer than two survivors is a degenerate batch for the
/// feature-dimension objectives.
pub fn mask_batch_samples(mask: &TerminalMask) -> Result<Vec<usize>> {
    let kept: Vec<usize> = (0..mask.batch()).filter(|&i| mask.row_is_clean(i)).collect();
    if kept.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "{} of {} sequences survive terminal sample masking",
            kept.len(),
            mask.batch()
        )));
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[Vec<f64>]) -> TerminalMask {
        TerminalMask::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn mask_invariants_are_enforced() {
        let bad = |rows: &[Vec<f64>]| TerminalMask::new(Tensor::from_rows(rows).unwrap()).is_err();
        assert!(bad(&[vec![0., 0.]]));
        assert!(bad(&[vec![1., 0., 1.]]));
        assert!(bad(&[vec![1., 0.5]]));
        assert!(!bad(&[vec![1., 1., 0.]]));
    }

    #[test]
    fn hadamard_examples() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.7], vec![1.0, 2.0, 3.0]]).unwrap());
        let out = apply_terminal_mask(&tape, l, &TerminalMask::ones(2, 3)).unwrap();
        assert_eq!(tape.value(out).unwrap(), tape.value(l).unwrap());

        let ones = tape.constant(Tensor::full(&[2, 3], 1.0));
        let m = mask(&[vec![1., 1., 1.], vec![1., 0., 0.]]);
        let out = tape.value(apply_terminal_mask(&tape, ones, &m).unwrap()).unwrap();
        assert_eq!(out.row(0).iter().sum::<f64>(), 3.0);
        assert_eq!(out.row(1).iter().sum::<f64>(), 1.0);

        // an all-zero mask is not a legal sampled mask, so zero it directly
        let zeroed = tape.mul(l, tape.constant(Tensor::zeros(&[2, 3]))).unwrap();
        assert!(tape.value(zeroed).unwrap().data().iter().all(|&v| v == 0.0));

        assert!(apply_terminal_mask(&tape, l, &TerminalMask::ones(2, 2)).is_err());
    }

    #[test]
    fn split_examples() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![-0.5], vec![-0.25]]).unwrap());
        let (spr, model) = split_components(&tape, l).unwrap();
        assert_eq!(tape.value(spr).unwrap().data(), &[-0.5, -0.25]);
        assert_eq!(tape.value(model).unwrap().data(), &[0.0, 0.0]);

        let l = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 5.0]]).unwrap());
        let (spr, model) = split_components(&tape, l).unwrap();
        assert_eq!(tape.value(spr).unwrap().data(), &[1.0]);
        assert_eq!(tape.value(model).unwrap().data(), &[3.5]);

        let masked = tape.constant(Tensor::from_rows(&[vec![0.4, 0.0, 0.0]]).unwrap());
        let (_, model) = split_components(&tape, masked).unwrap();
        assert_eq!(tape.value(model).unwrap().data(), &[0.0]);
    }

    #[test]
    fn combine_examples() {
        let tape = Tape::new();
        let spr = tape.constant(Tensor::vector(&[-1.0, -1.0]));
        let model = tape.constant(Tensor::vector(&[-1.0, -1.0]));
        let w = PriorityWeights::new(vec![0.5, 0.5], NormalizationMode::SumToOne).unwrap();
        let v = tape.value(combine_spr_loss(&tape, spr, model, &w, 1.0, 0.5).unwrap()).unwrap();
        assert_eq!(v.item().unwrap(), -0.75);

        let spr = tape.constant(Tensor::vector(&[0.2, -0.6, 1.0]));
        let model = tape.constant(Tensor::vector(&[9.0, 9.0, 9.0]));
        let raw = combine_spr_loss(&tape, spr, model, &PriorityWeights::raw(3), 1.0, 0.0).unwrap();
        assert!((tape.value(raw).unwrap().item().unwrap() - 0.2).abs() < 1e-15);

        let short = PriorityWeights::raw(2);
        assert!(matches!(combine_spr_loss(&tape, spr, model, &short, 1.0, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_sum_to_one_scales_raw_by_inverse_batch() {
        let tape = Tape::new();
        let spr = tape.constant(Tensor::vector(&[0.3, -0.1, 0.8, 0.25]));
        let model = tape.constant(Tensor::vector(&[-0.4, 0.9, 0.1, 0.0]));
        let uniform = PriorityWeights::from_importance(&[2.0; 4], NormalizationMode::SumToOne).unwrap();
        let a = tape.value(combine_spr_loss(&tape, spr, model, &uniform, 1.0, 0.5).unwrap()).unwrap().item().unwrap();
        let b = tape
            .value(combine_spr_loss(&tape, spr, model, &PriorityWeights::raw(4), 1.0, 0.5).unwrap())
            .unwrap()
            .item()
            .unwrap();
        assert!((a - b / 4.0).abs() < 1e-15);
    }

    #[test]
    fn weight_normalization_modes() {
        let imp = [1.0, 3.0, 4.0];
        let s = PriorityWeights::from_importance(&imp, NormalizationMode::SumToOne).unwrap();
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = PriorityWeights::from_importance(&imp, NormalizationMode::MaxNormalized).unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75, 1.0]);
        let r = PriorityWeights::from_importance(&imp, NormalizationMode::Raw).unwrap();
        assert_eq!(r.weights(), &[1.0; 3]);
        assert!(PriorityWeights::from_importance(&[1.0, 0.0], NormalizationMode::Raw).is_err());
        assert!(PriorityWeights::new(vec![0.2, 0.2], NormalizationMode::SumToOne).is_err());
    }

    #[test]
    fn sample_masking_examples() {
        let clean = TerminalMask::ones(3, 4);
        assert_eq!(mask_batch_samples(&clean).unwrap(), vec![0, 1, 2]);

        // done at step 2 of the middle row masks states 3..
        let m = mask(&[vec![1., 1., 1., 1.], vec![1., 1., 1., 0.], vec![1., 1., 1., 1.]]);
        assert_eq!(mask_batch_samples(&m).unwrap(), vec![0, 2]);

        let all = mask(&[vec![1., 0.], vec![1., 0.]]);
        assert!(matches!(mask_batch_samples(&all), Err(Error::DegenerateBatch(_))));
    }
}
