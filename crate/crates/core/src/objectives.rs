//! SSL objectives over current and predicted embeddings: per-sample
//! negative-cosine self-distillation, Barlow Twins and VICReg.
//!
//! The cosine objective produces a `B×(K+1)` loss matrix that the
//! [`modifiers`](crate::modifiers) module can mask and weight per sample.
//! Barlow Twins and VICReg reduce over the feature dimension and return one
//! value per step; [`feature_total`] combines them as the step-0 term plus the
//! mean of the future-step terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::networks::AgentNetworks;
use crate::networks::Bound;
use crate::tensor::Tensor;

/// Norm below which an embedding or feature column counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Cosine,
    Barlow,
    Vicreg,
}

/// How the per-sample similarity is turned into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CosineForm {
    /// `−cos(u, v)`.
    #[default]
    NegativeCosine,
    /// `‖û − v̂‖² = 2 − 2·cos(u, v)`.
    NormalizedMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicregWeights {
    /// Variance term weight.
    pub alpha: f64,
    /// Covariance term weight.
    pub beta: f64,
    /// Invariance term weight.
    pub gamma_w: f64,
}

impl VicregWeights {
    pub const LOW: Self = Self {
        alpha: 25.0,
        beta: 1.0,
        gamma_w: 25.0,
    };
    pub const HIGH: Self = Self {
        alpha: 25.0,
        beta: 25.0,
        gamma_w: 25.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub cosine_form: CosineForm,
    pub barlow_lambda: f64,
    /// Mean-center columns before the Barlow cross-correlation.
    pub barlow_center: bool,
    pub vicreg_weights: VicregWeights,
    pub vicreg_gamma_std: f64,
    pub vicreg_eps: f64,
    pub stop_gradient: bool,
    pub predictor_enabled: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Cosine,
            cosine_form: CosineForm::NegativeCosine,
            barlow_lambda: 0.005,
            barlow_center: true,
            vicreg_weights: VicregWeights::LOW,
            vicreg_gamma_std: 1.0,
            vicreg_eps: 1e-4,
            stop_gradient: true,
            predictor_enabled: true,
        }
    }
}

impl ObjectiveConfig {
    /// Rejects invalid values; returns warnings for legal but collapse-prone
    /// settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let w = self.vicreg_weights;
        let weights = [self.barlow_lambda, w.alpha, w.beta, w.gamma_w, self.vicreg_gamma_std];
        if weights.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!("objective weights must be finite and >= 0: {weights:?}")));
        }
        if !(self.vicreg_eps > 0.0) {
            return Err(Error::Config(format!("vicreg_eps must be > 0, got {}", self.vicreg_eps)));
        }
        let mut warnings = Vec::new();
        if self.kind == ObjectiveKind::Cosine && !self.stop_gradient && !self.predictor_enabled {
            warnings.push("cosine objective without stop-gradient or predictor can collapse trivially".to_string());
        }
        Ok(warnings)
    }
}

/// Online and target embeddings, both `B×(K+1)×d_emb`. Step 0 is the current
/// state; steps `1..=K` are transition-model rollouts on the online side.
#[derive(Debug, Clone, Copy)]
pub struct PredictionBundle {
    pub online: Var,
    pub target: Var,
}

impl PredictionBundle {
    pub fn new(tape: &Tape, online: Var, target: Var) -> Result<Self> {
        let (so, st) = (tape.shape(online)?, tape.shape(target)?);
        if so.len() != 3 || so != st {
            return shape_err(format!("bundle needs matching B×(K+1)×d tensors, got {so:?} and {st:?}"));
        }
        if so[1] == 0 {
            return shape_err("bundle needs at least the current step");
        }
        Ok(Self { online, target })
    }

    /// `(B, K, d)`.
    pub fn dims(&self, tape: &Tape) -> Result<(usize, usize, usize)> {
        let s = tape.shape(self.online)?;
        Ok((s[0], s[1] - 1, s[2]))
    }

    /// Step `k` of both sides as `B×d` matrices.
    pub fn step(&self, tape: &Tape, k: usize) -> Result<(Var, Var)> {
        Ok((tape.select(self.online, 1, k)?, tape.select(self.target, 1, k)?))
    }
}

/// Builds the online/target embeddings for a batch of `B×(K+1)×d_obs`
/// observation views. `online_obs` is the online view of step 0, `target_obs`
/// the target views of every step, `actions` the `K` actions per row.
///
/// With `stop_gradient` the target side runs the target networks and is
/// detached; without it the target side runs the online encoder and projector
/// and stays on the tape.
pub fn build_bundle(
    tape: &Tape,
    nets: &AgentNetworks,
    bound: &Bound,
    online_obs: Var,
    target_obs: Var,
    actions: &[Vec<usize>],
    cfg: &ObjectiveConfig,
) -> Result<PredictionBundle> {
    let ts = tape.shape(target_obs)?;
    if ts.len() != 3 {
        return shape_err(format!("target views must be B×(K+1)×d_obs, got {ts:?}"));
    }
    let (b, steps, d_obs) = (ts[0], ts[1], ts[2]);
    let z0 = nets.encode(tape, bound, online_obs, false)?;
    let mut latents = vec![z0];
    if steps > 1 {
        let rolled = nets.rollout_latents(tape, bound, z0, actions)?;
        for k in 0..steps - 1 {
            latents.push(tape.select(rolled, 1, k)?);
        }
    }
    let online_steps = latents
        .iter()
        .map(|&z| nets.project(tape, bound, z, false))
        .collect::<Result<Vec<_>>>()?;
    let online = tape.stack(&online_steps, 1)?;

    let flat = tape.reshape(target_obs, &[b * steps, d_obs])?;
    let target_branch = cfg.stop_gradient;
    let zt = nets.encode(tape, bound, flat, target_branch)?;
    let et = nets.project(tape, bound, zt, target_branch)?;
    let d_emb = tape.shape(et)?[1];
    let target = tape.reshape(et, &[b, steps, d_emb])?;
    let bundle = PredictionBundle::new(tape, online, target)?;
    apply_predictor_and_stopgrad(tape, nets, bound, bundle, cfg)
}

/// Runs the predictor over every online step when enabled and detaches the
/// target side when `stop_gradient` is on.
pub fn apply_predictor_and_stopgrad(
    tape: &Tape,
    nets: &AgentNetworks,
    bound: &Bound,
    bundle: PredictionBundle,
    cfg: &ObjectiveConfig,
) -> Result<PredictionBundle> {
    let online = if cfg.predictor_enabled {
        let predictor = nets
            .predictor
            .as_ref()
            .ok_or_else(|| Error::Config("predictor enabled but the networks have none".into()))?;
        let (b, steps, d) = {
            let s = tape.shape(bundle.online)?;
            (s[0], s[1], s[2])
        };
        let flat = tape.reshape(bundle.online, &[b * steps, d])?;
        let out = predictor.forward(tape, bound, flat)?;
        tape.reshape(out, &[b, steps, d])?
    } else {
        bundle.online
    };
    let target = if cfg.stop_gradient {
        tape.detach(bundle.target)?
    } else {
        bundle.target
    };
    PredictionBundle::new(tape, online, target)
}

/// Row-wise L2 norms over the last axis, failing on degenerate rows.
fn checked_norms(tape: &Tape, x: Var) -> Result<Var> {
    let rank = tape.shape(x)?.len();
    let norms = tape.sqrt(tape.sum(tape.square(x)?, Some(rank - 1))?)?;
    if let Some((row, &norm)) = tape
        .value(norms)?
        .data()
        .iter()
        .enumerate()
        .find(|(_, &n)| !(n >= DEGENERATE_NORM))
    {
        return Err(Error::DegenerateEmbedding { row, norm });
    }
    Ok(norms)
}

/// `B×(K+1)` matrix of `−cos(online[i,k], target[i,k])` (or the normalized
/// MSE form).
pub fn cosine_loss_matrix(tape: &Tape, bundle: &PredictionBundle, form: CosineForm) -> Result<Var> {
    let dot = tape.sum(tape.mul(bundle.online, bundle.target)?, Some(2))?;
    let no = checked_norms(tape, bundle.online)?;
    let nt = checked_norms(tape, bundle.target)?;
    let cos = tape.div(dot, tape.mul(no, nt)?)?;
    match form {
        CosineForm::NegativeCosine => tape.neg(cos),
        CosineForm::NormalizedMse => tape.add_scalar(tape.scale(cos, -2.0)?, 2.0),
    }
}

/// `d×d` cross-correlation between the columns of two `B×d` batches.
pub fn cross_correlation(tape: &Tape, za: Var, zb: Var, center: bool) -> Result<Var> {
    let (sa, sb) = (tape.shape(za)?, tape.shape(zb)?);
    if sa.len() != 2 || sa != sb {
        return shape_err(format!("cross-correlation needs equal B×d inputs, got {sa:?} and {sb:?}"));
    }
    let (b, d) = (sa[0], sa[1]);
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("cross-correlation needs B >= 2, got {b}")));
    }
    let prep = |z: Var| -> Result<Var> {
        let z = if center {
            let mean = tape.reshape(tape.mean(z, Some(0))?, &[1, d])?;
            tape.sub(z, mean)?
        } else {
            z
        };
        Ok(z)
    };
    let (ca, cb) = (prep(za)?, prep(zb)?);
    let col_norms = |z: Var| -> Result<Var> {
        let n = tape.sqrt(tape.sum(tape.square(z)?, Some(0))?)?;
        if let Some(column) = tape.value(n)?.data().iter().position(|&v| !(v >= DEGENERATE_NORM)) {
            return Err(Error::DegenerateFeature { column });
        }
        Ok(n)
    };
    let (na, nb) = (col_norms(ca)?, col_norms(cb)?);
    let num = tape.matmul(tape.transpose(ca)?, cb)?;
    let denom = tape.mul(tape.reshape(na, &[d, 1])?, tape.reshape(nb, &[1, d])?)?;
    tape.div(num, denom)
}

fn identity_masks(tape: &Tape, d: usize) -> (Var, Var) {
    let eye = Tensor::identity(d);
    let off = eye.map(|v| 1.0 - v);
    (tape.constant(eye), tape.constant(off))
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²` for a square correlation matrix.
pub fn barlow_from_correlation(tape: &Tape, c: Var, lambda: f64) -> Result<Var> {
    let s = tape.shape(c)?;
    if s.len() != 2 || s[0] != s[1] {
        return shape_err(format!("correlation matrix must be square, got {s:?}"));
    }
    let (eye, off) = identity_masks(tape, s[0]);
    let on_diag = tape.sum(tape.mul(tape.square(tape.sub(eye, c)?)?, eye)?, None)?;
    let off_diag = tape.sum(tape.mul(tape.square(c)?, off)?, None)?;
    tape.add(on_diag, tape.scale(off_diag, lambda)?)
}

pub fn barlow_step_loss(tape: &Tape, za: Var, zb: Var, lambda: f64, center: bool) -> Result<Var> {
    let c = cross_correlation(tape, za, zb, center)?;
    barlow_from_correlation(tape, c, lambda)
}

/// The four VICReg quantities; `variance` and `covariance` are summed over
/// both branches.
#[derive(Debug, Clone, Copy)]
pub struct VicregTerms {
    pub total: Var,
    pub variance: Var,
    pub covariance: Var,
    pub invariance: Var,
}

fn vicreg_branch(tape: &Tape, z: Var, gamma_std: f64, eps: f64) -> Result<(Var, Var)> {
    let s = tape.shape(z)?;
    let (b, d) = (s[0], s[1]);
    let mean = tape.reshape(tape.mean(z, Some(0))?, &[1, d])?;
    let centered = tape.sub(z, mean)?;
    let unbiased = 1.0 / (b as f64 - 1.0);
    let var = tape.scale(tape.sum(tape.square(centered)?, Some(0))?, unbiased)?;
    let std = tape.sqrt_eps(var, eps)?;
    let hinge = tape.relu(tape.add_scalar(tape.neg(std)?, gamma_std)?)?;
    let v = tape.mean(hinge, None)?;
    let cov = tape.scale(tape.matmul(tape.transpose(centered)?, centered)?, unbiased)?;
    let (_, off) = identity_masks(tape, d);
    let c = tape.scale(tape.sum(tape.mul(tape.square(cov)?, off)?, None)?, 1.0 / d as f64)?;
    Ok((v, c))
}

/// VICReg between two `B×d` batches with the unbiased (`n−1`) variance and
/// covariance estimators.
pub fn vicreg_loss(tape: &Tape, z: Var, z_prime: Var, cfg: &ObjectiveConfig) -> Result<VicregTerms> {
    let (s1, s2) = (tape.shape(z)?, tape.shape(z_prime)?);
    if s1.len() != 2 || s1 != s2 {
        return shape_err(format!("VICReg needs equal B×d inputs, got {s1:?} and {s2:?}"));
    }
    let b = s1[0];
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("VICReg needs B >= 2, got {b}")));
    }
    let (v1, c1) = vicreg_branch(tape, z, cfg.vicreg_gamma_std, cfg.vicreg_eps)?;
    let (v2, c2) = vicreg_branch(tape, z_prime, cfg.vicreg_gamma_std, cfg.vicreg_eps)?;
    let variance = tape.add(v1, v2)?;
    let covariance = tape.add(c1, c2)?;
    let invariance = tape.scale(tape.sum(tape.square(tape.sub(z, z_prime)?)?, None)?, 1.0 / b as f64)?;
    let w = cfg.vicreg_weights;
    let total = tape.add(
        tape.add(tape.scale(variance, w.alpha)?, tape.scale(covariance, w.beta)?)?,
        tape.scale(invariance, w.gamma_w)?,
    )?;
    Ok(VicregTerms {
        total,
        variance,
        covariance,
        invariance,
    })
}

/// Per-step feature-dimension losses and their combination.
#[derive(Debug, Clone)]
pub struct StepLosses {
    /// Step-0 term plus the mean of the future-step terms.
    pub total: Var,
    /// One scalar per step `0..=K`.
    pub steps: Vec<Var>,
}

/// `steps[0] + mean(steps[1..])`; the second term vanishes when `K = 0`.
pub fn feature_total(tape: &Tape, steps: Vec<Var>) -> Result<StepLosses> {
    let (&current, future) = steps
        .split_first()
        .ok_or_else(|| Error::Contract("no step losses to combine".into()))?;
    let total = if future.is_empty() {
        current
    } else {
        let stacked = tape.stack(future, 0)?;
        tape.add(current, tape.mean(stacked, None)?)?
    };
    Ok(StepLosses { total, steps })
}

/// Barlow Twins per step, combined as step 0 plus the future-step mean.
pub fn spr_barlow_total(tape: &Tape, bundle: &PredictionBundle, lambda: f64, center: bool) -> Result<StepLosses> {
    let (_, k, _) = bundle.dims(tape)?;
    let steps = (0..=k)
        .map(|step| {
            let (o, t) = bundle.step(tape, step)?;
            barlow_step_loss(tape, o, t, lambda, center)
        })
        .collect::<Result<Vec<_>>>()?;
    feature_total(tape, steps)
}

/// VICReg per step, combined the same way as [`spr_barlow_total`].
pub fn spr_vicreg_total(tape: &Tape, bundle: &PredictionBundle, cfg: &ObjectiveConfig) -> Result<StepLosses> {
    let (_, k, _) = bundle.dims(tape)?;
    let steps = (0..=k)
        .map(|step| {
            let (o, t) = bundle.step(tape, step)?;
            Ok(vicreg_loss(tape, o, t, cfg)?.total)
        })
        .collect::<Result<Vec<_>>>()?;
    feature_total(tape, steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).unwrap().item().unwrap()
    }

    fn bundle_of(tape: &Tape, online: &[f64], target: &[f64], shape: [usize; 3]) -> PredictionBundle {
        let o = tape.leaf(Tensor::new(shape.to_vec(), online.to_vec()).unwrap());
        let t = tape.constant(Tensor::new(shape.to_vec(), target.to_vec()).unwrap());
        PredictionBundle::new(tape, o, t).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let tape = Tape::new();
        let b = bundle_of(
            &tape,
            &[1., 0., 1., 0., 1., 0.],
            &[1., 0., 0., 1., 0.6, 0.8],
            [1, 3, 2],
        );
        let l = tape.value(cosine_loss_matrix(&tape, &b, CosineForm::NegativeCosine).unwrap()).unwrap();
        assert_eq!(l.shape(), &[1, 3]);
        assert_eq!(l.data()[0], -1.0);
        assert_eq!(l.data()[1], 0.0);
        assert!((l.data()[2] + 0.6).abs() < 1e-15);

        let mse = tape.value(cosine_loss_matrix(&tape, &b, CosineForm::NormalizedMse).unwrap()).unwrap();
        for (m, c) in mse.data().iter().zip(l.data()) {
            assert!((m - (2.0 + 2.0 * c)).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let tape = Tape::new();
        let b = bundle_of(&tape, &[0., 0.], &[1., 0.], [1, 1, 2]);
        assert!(matches!(
            cosine_loss_matrix(&tape, &b, CosineForm::NegativeCosine),
            Err(Error::DegenerateEmbedding { row: 0, .. })
        ));
    }

    fn orthogonal_batch() -> Tensor {
        // columns [1,-1,1,-1] and [1,1,-1,-1]
        Tensor::from_rows(&[vec![1., 1.], vec![-1., 1.], vec![1., -1.], vec![-1., -1.]]).unwrap()
    }

    #[test]
    fn cross_correlation_examples() {
        let tape = Tape::new();
        let z = tape.constant(orthogonal_batch());
        let c = tape.value(cross_correlation(&tape, z, z, true).unwrap()).unwrap();
        assert_eq!(c, Tensor::identity(2));

        let neg = tape.neg(z).unwrap();
        let c = tape.value(cross_correlation(&tape, z, neg, true).unwrap()).unwrap();
        assert_eq!(c, Tensor::identity(2).map(|v| -v));

        let dup = tape.constant(Tensor::from_rows(&[vec![1., 1.], vec![2., 2.], vec![4., 4.]]).unwrap());
        let c = tape.value(cross_correlation(&tape, dup, dup, true).unwrap()).unwrap();
        assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn cross_correlation_errors() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(cross_correlation(&tape, one, one, true), Err(Error::DegenerateBatch(_))));
        let flat = tape.constant(Tensor::from_rows(&[vec![1., 3.], vec![2., 3.]]).unwrap());
        assert!(matches!(
            cross_correlation(&tape, flat, flat, true),
            Err(Error::DegenerateFeature { column: 1 })
        ));
    }

    #[test]
    fn barlow_examples() {
        let tape = Tape::new();
        let z = tape.constant(orthogonal_batch());
        assert_eq!(value(&tape, barlow_step_loss(&tape, z, z, 0.005, true).unwrap()), 0.0);

        let ones = tape.constant(Tensor::full(&[2, 2], 1.0));
        let v = value(&tape, barlow_from_correlation(&tape, ones, 0.005).unwrap());
        assert!((v - 0.01).abs() < 1e-15);

        let neg = tape.neg(z).unwrap();
        assert_eq!(value(&tape, barlow_step_loss(&tape, z, neg, 0.005, true).unwrap()), 8.0);
    }

    #[test]
    fn vicreg_collapsed_batch() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::full(&[4, 1], 0.3));
        let cfg = ObjectiveConfig::default();
        let terms = vicreg_loss(&tape, z, z, &cfg).unwrap();
        assert!((value(&tape, terms.variance) - 1.98).abs() < 1e-12);
        assert_eq!(value(&tape, terms.covariance), 0.0);
        assert_eq!(value(&tape, terms.invariance), 0.0);
        assert!((value(&tape, terms.total) - 49.5).abs() < 1e-9);
    }

    #[test]
    fn vicreg_zero_at_well_spread_decorrelated_batch() {
        let tape = Tape::new();
        // unbiased std of each column is sqrt(4/3) > 1, columns uncorrelated
        let z = tape.constant(orthogonal_batch());
        let terms = vicreg_loss(&tape, z, z, &ObjectiveConfig::default()).unwrap();
        assert_eq!(value(&tape, terms.total), 0.0);
    }

    #[test]
    fn vicreg_unit_offset_invariance() {
        let tape = Tape::new();
        let base = orthogonal_batch();
        let mut shifted = base.clone();
        for i in 0..4 {
            shifted.set(&[i, 0], base.at(&[i, 0]) + 1.0);
        }
        let (z, zp) = (tape.constant(base), tape.constant(shifted));
        let terms = vicreg_loss(&tape, z, zp, &ObjectiveConfig::default()).unwrap();
        assert_eq!(value(&tape, terms.invariance), 1.0);
        let one = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(vicreg_loss(&tape, one, one, &ObjectiveConfig::default()), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn feature_total_composition() {
        let tape = Tape::new();
        let (a, b, c) = (tape.constant(Tensor::scalar(1.0)), tape.constant(Tensor::scalar(2.0)), tape.constant(Tensor::scalar(5.0)));
        assert_eq!(value(&tape, feature_total(&tape, vec![a]).unwrap().total), 1.0);
        assert_eq!(value(&tape, feature_total(&tape, vec![a, b, c]).unwrap().total), 1.0 + 3.5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ObjectiveConfig::default();
        assert!(cfg.validate().unwrap().is_empty());
        cfg.stop_gradient = false;
        cfg.predictor_enabled = false;
        assert_eq!(cfg.validate().unwrap().len(), 1);
        cfg.vicreg_eps = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ObjectiveConfig::default();
        cfg.barlow_lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_uses_defaults_for_missing_keys() {
        let cfg: ObjectiveConfig = serde_json::from_str(r#"{"kind": "barlow", "barlow_lambda": 0.01}"#).unwrap();
        assert_eq!(cfg.kind, ObjectiveKind::Barlow);
        assert_eq!(cfg.barlow_lambda, 0.01);
        assert_eq!(cfg.vicreg_eps, 1e-4);
    }
}
