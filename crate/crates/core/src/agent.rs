//! Double-DQN agent with dueling heads, the SSL auxiliary loss, and the
//! variant switchboard.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diagnostics::{self, DormancyReport, RankReport};
use crate::envs::{GridEnv, GridSpec, N_ACTIONS};
use crate::error::{Error, Result};
use crate::modifiers::{
    apply_terminal_mask, combine_spr_loss, mask_batch_samples, split_components, NormalizationMode,
    PriorityWeights, TerminalMask,
};
use crate::networks::{Activation, Adam, AgentNetworks, Bound, Mlp, NetworkSizes, ParamStore};
use crate::objectives::{
    build_bundle, cosine_loss_matrix, spr_barlow_total, spr_vicreg_total, ObjectiveConfig, ObjectiveKind,
    VicregWeights,
};
use crate::replay::{build_terminal_mask, ReplayBuffer, ReplayConfig, ReplayMode, SequenceBatch, Transition};
use crate::tensor::Tensor;

/// The seven ablation variants.
pub const COMPARED_VARIANTS: [&str; 7] = ["naked", "naked-non", "naked-prio", "vicreg-low", "vicreg-high", "barlow", "spr"];

/// Every named preset.
pub const PRESETS: [&str; 9] = [
    "spr",
    "naked",
    "naked-non",
    "naked-prio",
    "barlow",
    "vicreg-high",
    "vicreg-low",
    "zerojump",
    "continuing",
];

/// Either a named env preset or a full grid spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    Preset(String),
    Spec(GridSpec),
}

impl EnvSource {
    pub fn resolve(&self) -> Result<GridSpec> {
        let spec = match self {
            EnvSource::Preset(name) => GridSpec::preset(name)?,
            EnvSource::Spec(spec) => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Name used as the game id in score tables.
    pub fn label(&self) -> String {
        match self {
            EnvSource::Preset(name) => name.clone(),
            EnvSource::Spec(s) => format!("grid-{}x{}", s.height, s.width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModifierConfig {
    pub terminal_mask: bool,
    pub priority_weighting: bool,
    pub normalization: NormalizationMode,
    /// Weight of the step-0 term.
    pub lambda: f64,
    /// Weight of the model (future-step) term.
    pub gamma: f64,
    /// Drop sequences that reach a terminal before the feature objectives.
    pub sample_mask: bool,
}

impl Default for ModifierConfig {
    fn default() -> Self {
        Self {
            terminal_mask: false,
            priority_weighting: false,
            normalization: NormalizationMode::SumToOne,
            lambda: 1.0,
            gamma: 0.5,
            sample_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            latent_dim: 64,
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub eps_start: f64,
    pub eps_end: f64,
    pub decay_steps: usize,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            eps_start: 1.0,
            eps_end: 0.05,
            decay_steps: 10_000,
        }
    }
}

impl ExplorationConfig {
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.decay_steps == 0 {
            return self.eps_end;
        }
        if step >= self.decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.eps_start + frac * (self.eps_end - self.eps_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub env: EnvSource,
    pub objective: ObjectiveConfig,
    pub modifiers: ModifierConfig,
    pub replay: ReplayConfig,
    pub network: NetworkConfig,
    /// SSL prediction horizon `K`.
    pub horizon: usize,
    pub n_step: usize,
    pub discount: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub target_momentum: f64,
    /// Gradient steps between target syncs.
    pub target_period: usize,
    pub augment_radius: usize,
    pub total_steps: usize,
    pub learning_starts: usize,
    /// Env steps per gradient step.
    pub train_every: usize,
    pub ssl_weight: f64,
    pub exploration: ExplorationConfig,
    pub eval_episodes: usize,
    pub eval_every: usize,
    pub diagnostics_every: usize,
    pub probe_size: usize,
    /// Gradient steps between log records.
    pub log_every: usize,
    pub srank_delta: f64,
    pub dormant_tau: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            name: "spr".into(),
            env: EnvSource::Preset("pitfall-5x5".into()),
            objective: ObjectiveConfig::default(),
            modifiers: ModifierConfig {
                terminal_mask: true,
                priority_weighting: true,
                ..ModifierConfig::default()
            },
            replay: ReplayConfig::default(),
            network: NetworkConfig::default(),
            horizon: 3,
            n_step: 3,
            discount: 0.99,
            learning_rate: 5e-4,
            batch_size: 32,
            target_momentum: 0.0,
            target_period: 1,
            augment_radius: 1,
            total_steps: 30_000,
            learning_starts: 1_000,
            train_every: 1,
            ssl_weight: 1.0,
            exploration: ExplorationConfig::default(),
            eval_episodes: 10,
            eval_every: 2_000,
            diagnostics_every: 1_000,
            probe_size: 256,
            log_every: 100,
            srank_delta: diagnostics::DEFAULT_DELTA,
            dormant_tau: diagnostics::DEFAULT_TAU,
        }
    }
}

impl VariantConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let naked = ModifierConfig::default();
        let feature = |kind: ObjectiveKind, weights: VicregWeights| Self {
            name: name.to_string(),
            objective: ObjectiveConfig {
                kind,
                vicreg_weights: weights,
                ..ObjectiveConfig::default()
            },
            modifiers: naked.clone(),
            batch_size: 64,
            ..Self::default()
        };
        let cfg = match name {
            "spr" => base,
            "naked" => Self {
                modifiers: naked,
                ..base
            },
            "naked-non" => Self {
                modifiers: ModifierConfig {
                    terminal_mask: true,
                    ..naked
                },
                ..base
            },
            "naked-prio" => Self {
                modifiers: ModifierConfig {
                    priority_weighting: true,
                    ..naked
                },
                ..base
            },
            "barlow" => feature(ObjectiveKind::Barlow, VicregWeights::LOW),
            "vicreg-high" => feature(ObjectiveKind::Vicreg, VicregWeights::HIGH),
            "vicreg-low" => feature(ObjectiveKind::Vicreg, VicregWeights::LOW),
            "zerojump" => Self { horizon: 0, ..base },
            "continuing" => Self {
                env: EnvSource::Preset("loop-5x5".into()),
                modifiers: naked,
                replay: ReplayConfig {
                    mode: ReplayMode::Uniform,
                    ..ReplayConfig::default()
                },
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            ..cfg
        })
    }

    /// Builds a config from JSON. A top-level `"preset"` key selects the
    /// base whose fields the remaining keys override (objects merge
    /// recursively); without it the SPR defaults are the base.
    pub fn from_json_value(mut value: serde_json::Value) -> Result<Self> {
        let preset = match value.as_object_mut().and_then(|o| o.remove("preset")) {
            Some(serde_json::Value::String(p)) => p,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => "spr".into(),
        };
        let mut base = serde_json::to_value(Self::preset(&preset)?)?;
        merge_json(&mut base, value);
        let cfg: Self = serde_json::from_value(base)?;
        Ok(cfg)
    }

    /// Hard errors for invalid settings, warnings for settings that are legal
    /// but have no effect or invite collapse.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = self.objective.validate()?;
        self.env.resolve()?;
        let feature = matches!(self.objective.kind, ObjectiveKind::Barlow | ObjectiveKind::Vicreg);
        if feature && self.batch_size < 2 {
            return Err(Error::Config("barlow and vicreg need batch_size >= 2".into()));
        }
        if self.batch_size < 1 || self.n_step < 1 {
            return Err(Error::Config("batch_size and n_step must be >= 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount must be in (0,1], got {}", self.discount)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.target_momentum) {
            return Err(Error::Config("target_momentum must be in [0,1]".into()));
        }
        if self.target_period < 1 || self.train_every < 1 || self.eval_episodes < 1 || self.log_every < 1 {
            return Err(Error::Config(
                "target_period, train_every, eval_episodes and log_every must be >= 1".into(),
            ));
        }
        if !(self.ssl_weight >= 0.0) || !self.ssl_weight.is_finite() {
            return Err(Error::Config("ssl_weight must be finite and >= 0".into()));
        }
        let m = &self.modifiers;
        if ![m.lambda, m.gamma].iter().all(|x| x.is_finite() && *x >= 0.0) {
            return Err(Error::Config("modifier lambda and gamma must be finite and >= 0".into()));
        }
        let e = &self.exploration;
        if !(0.0..=1.0).contains(&e.eps_start) || !(0.0..=1.0).contains(&e.eps_end) {
            return Err(Error::Config("exploration epsilons must be in [0,1]".into()));
        }
        if self.probe_size < 1 {
            return Err(Error::Config("probe_size must be >= 1".into()));
        }
        if feature && (m.terminal_mask || m.priority_weighting) {
            warnings.push(
                "terminal_mask and priority_weighting act on the per-sample loss matrix and are ignored by \
                 feature-dimension objectives; use sample_mask instead"
                    .into(),
            );
        }
        if !feature && m.sample_mask {
            warnings.push("sample_mask only applies to barlow and vicreg".into());
        }
        if m.priority_weighting && self.replay.mode == ReplayMode::Uniform {
            warnings.push("priority_weighting with uniform replay gives unit weights".into());
        }
        Ok(warnings)
    }

    /// Sequence length drawn from replay: enough for both losses.
    pub fn sequence_horizon(&self) -> usize {
        self.horizon.max(self.n_step)
    }

    pub fn network_sizes(&self, spec: &GridSpec) -> NetworkSizes {
        NetworkSizes {
            obs_dim: spec.obs_dim(),
            n_actions: N_ACTIONS,
            hidden: self.network.hidden,
            latent_dim: self.network.latent_dim,
            embed_dim: self.network.embed_dim,
            predictor: self.objective.predictor_enabled,
        }
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Cyclically shifts every plane of an observation by `(dr, dc)` cells.
pub fn shift_planes(spec: &GridSpec, obs: &[f64], dr: isize, dc: isize) -> Vec<f64> {
    let (h, w) = (spec.height as isize, spec.width as isize);
    let plane = spec.n_cells();
    let mut out = vec![0.0; obs.len()];
    for p in 0..obs.len() / plane {
        for r in 0..h {
            for c in 0..w {
                let nr = (r + dr).rem_euclid(h);
                let nc = (c + dc).rem_euclid(w);
                out[p * plane + (nr * w + nc) as usize] = obs[p * plane + (r * w + c) as usize];
            }
        }
    }
    out
}

/// Random cyclic shift with row and column offsets in `[−radius, radius]`.
/// Radius 0 returns the observation unchanged and draws nothing.
pub fn augment(spec: &GridSpec, obs: &[f64], radius: usize, rng: &mut impl Rng) -> Vec<f64> {
    if radius == 0 {
        return obs.to_vec();
    }
    let r = radius as isize;
    let dr = rng.gen_range(-r..=r);
    let dc = rng.gen_range(-r..=r);
    shift_planes(spec, obs, dr, dc)
}

/// States at step `k` of every sequence, `B×d_obs`.
pub fn step_obs(batch: &SequenceBatch, k: usize) -> Result<Tensor> {
    let s = batch.obs.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    if k >= t {
        return Err(Error::Shape(format!("step {k} outside sequences of {t} states")));
    }
    let mut data = Vec::with_capacity(b * d);
    for i in 0..b {
        let start = (i * t + k) * d;
        data.extend_from_slice(&batch.obs.data()[start..start + d]);
    }
    Tensor::new(vec![b, d], data)
}

/// Double-Q n-step targets
/// `Σ_{j<n} γ^j r_j + γ^n (1−done) Q_target(s_n, argmax_a Q_online(s_n, a))`.
pub fn td_targets(
    tape: &Tape,
    nets: &AgentNetworks,
    bound: &Bound,
    batch: &SequenceBatch,
    n_step: usize,
    discount: f64,
) -> Result<Vec<f64>> {
    if n_step == 0 || batch.horizon < n_step || batch.rewards.iter().any(|r| r.len() < n_step) {
        return Err(Error::Shape(format!(
            "batch horizon {} does not cover n_step {n_step}",
            batch.horizon
        )));
    }
    let next = tape.constant(step_obs(batch, n_step)?);
    let online = tape.value(nets.q_values(tape, bound, nets.encode(tape, bound, next, false)?)?)?;
    let target = tape.value(nets.q_forward(tape, bound, nets.encode(tape, bound, next, true)?, true)?.q)?;
    let a = online.shape()[1];
    let mut out = Vec::with_capacity(batch.batch_size());
    for i in 0..batch.batch_size() {
        let mut g = 0.0;
        let mut scale = 1.0;
        for j in 0..n_step {
            g += scale * batch.rewards[i][j];
            scale *= discount;
        }
        if !batch.done_flags[i][n_step - 1] {
            let best = argmax(&online.data()[i * a..(i + 1) * a]);
            g += scale * target.data()[i * a + best];
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TdOutput {
    pub loss: Var,
    /// Signed `Q(s_0,a_0) − target` per sample.
    pub td_errors: Vec<f64>,
}

/// `mean_i ω_i (Q[i, a_i] − target_i)²`.
pub fn td_loss_from_q(tape: &Tape, q: Var, actions: &[usize], targets: &[f64], weights: &[f64]) -> Result<TdOutput> {
    let b = actions.len();
    if targets.len() != b || weights.len() != b {
        return Err(Error::Shape(format!(
            "{b} actions, {} targets, {} weights",
            targets.len(),
            weights.len()
        )));
    }
    let picked = tape.pick(q, actions)?;
    let diff = tape.sub(picked, tape.constant(Tensor::vector(targets)))?;
    let td_errors = tape.value(diff)?.into_data();
    let weighted = tape.mul(tape.square(diff)?, tape.constant(Tensor::vector(weights)))?;
    Ok(TdOutput {
        loss: tape.mean(weighted, None)?,
        td_errors,
    })
}

/// Double-DQN loss on the unaugmented first state of every sequence.
pub fn td_loss(
    tape: &Tape,
    nets: &AgentNetworks,
    bound: &Bound,
    batch: &SequenceBatch,
    n_step: usize,
    discount: f64,
    weights: &[f64],
) -> Result<TdOutput> {
    let targets = td_targets(tape, nets, bound, batch, n_step, discount)?;
    let s0 = tape.constant(step_obs(batch, 0)?);
    let q = nets.q_values(tape, bound, nets.encode(tape, bound, s0, false)?)?;
    let actions: Vec<usize> = batch.actions.iter().map(|row| row[0]).collect();
    td_loss_from_q(tape, q, &actions, &targets, weights)
}

/// Augmented views feeding the SSL objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SslViews {
    /// `B×d_obs` view of the current state.
    pub online: Tensor,
    /// `B×(K+1)×d_obs` views of the current and next `K` states.
    pub target: Tensor,
    /// `B×K` actions.
    pub actions: Vec<Vec<usize>>,
}

impl SslViews {
    pub fn rows(&self, keep: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let b = t.shape()[0];
            let inner = if b == 0 { 0 } else { t.len() / b };
            let mut data = Vec::with_capacity(keep.len() * inner);
            for &i in keep {
                data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = keep.len();
            Tensor::new(shape, data)
        };
        Ok(Self {
            online: pick(&self.online)?,
            target: pick(&self.target)?,
            actions: keep.iter().map(|&i| self.actions[i].clone()).collect(),
        })
    }
}

/// Independently augmented online and target views over the first `K+1`
/// states of each sequence.
pub fn ssl_views(
    spec: &GridSpec,
    batch: &SequenceBatch,
    k: usize,
    radius: usize,
    rng: &mut impl Rng,
) -> Result<SslViews> {
    if k > batch.horizon {
        return Err(Error::Shape(format!("K={k} exceeds batch horizon {}", batch.horizon)));
    }
    let (b, d) = (batch.batch_size(), batch.obs_dim());
    let t = batch.horizon + 1;
    let raw = batch.obs.data();
    let mut online = Vec::with_capacity(b * d);
    let mut target = Vec::with_capacity(b * (k + 1) * d);
    for i in 0..b {
        online.extend(augment(spec, &raw[i * t * d..(i * t + 1) * d], radius, rng));
        for step in 0..=k {
            let start = (i * t + step) * d;
            target.extend(augment(spec, &raw[start..start + d], radius, rng));
        }
    }
    Ok(SslViews {
        online: Tensor::new(vec![b, d], online)?,
        target: Tensor::new(vec![b, k + 1, d], target)?,
        actions: batch.actions_prefix(k),
    })
}

#[derive(Debug, Clone)]
pub struct SslOutput {
    pub total: Var,
    /// Batch means of the step-0 and model terms (cosine objective).
    pub spr: Option<f64>,
    pub model: Option<f64>,
    /// Per-step losses (feature objectives).
    pub steps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum SslOutcome {
    Loss(SslOutput),
    Skipped(String),
}

/// The configured SSL loss over `views`. `mask` covers the `K+1` states and
/// `weights` are the replay weights for the batch.
pub fn ssl_loss(
    tape: &Tape,
    nets: &AgentNetworks,
    bound: &Bound,
    views: &SslViews,
    mask: &TerminalMask,
    weights: &PriorityWeights,
    cfg: &VariantConfig,
) -> Result<SslOutcome> {
    let m = &cfg.modifiers;
    let obj = &cfg.objective;
    let skip_degenerate = |r: Result<SslOutcome>| match r {
        Err(
            e @ (Error::DegenerateBatch(_) | Error::DegenerateFeature { .. } | Error::DegenerateEmbedding { .. }),
        ) => Ok(SslOutcome::Skipped(e.to_string())),
        other => other,
    };
    match obj.kind {
        ObjectiveKind::Cosine => skip_degenerate((|| {
            let bundle = build_bundle(
                tape,
                nets,
                bound,
                tape.constant(views.online.clone()),
                tape.constant(views.target.clone()),
                &views.actions,
                obj,
            )?;
            let mut loss = cosine_loss_matrix(tape, &bundle, obj.cosine_form)?;
            if m.terminal_mask {
                loss = apply_terminal_mask(tape, loss, mask)?;
            }
            let (spr, model) = split_components(tape, loss)?;
            let raw;
            let w = if m.priority_weighting {
                weights
            } else {
                raw = PriorityWeights::raw(weights.len());
                &raw
            };
            let total = combine_spr_loss(tape, spr, model, w, m.lambda, m.gamma)?;
            let mean = |v: Var| -> Result<f64> {
                let t = tape.value(v)?;
                Ok(t.data().iter().sum::<f64>() / t.len().max(1) as f64)
            };
            Ok(SslOutcome::Loss(SslOutput {
                total,
                spr: Some(mean(spr)?),
                model: Some(mean(model)?),
                steps: Vec::new(),
            }))
        })()),
        ObjectiveKind::Barlow | ObjectiveKind::Vicreg => skip_degenerate((|| {
            let kept;
            let views = if m.sample_mask {
                kept = views.rows(&mask_batch_samples(mask)?)?;
                &kept
            } else {
                views
            };
            let bundle = build_bundle(
                tape,
                nets,
                bound,
                tape.constant(views.online.clone()),
                tape.constant(views.target.clone()),
                &views.actions,
                obj,
            )?;
            let losses = if obj.kind == ObjectiveKind::Barlow {
                spr_barlow_total(tape, &bundle, obj.barlow_lambda, obj.barlow_center)?
            } else {
                spr_vicreg_total(tape, &bundle, obj)?
            };
            let steps = losses
                .steps
                .iter()
                .map(|&v| tape.value(v).and_then(|t| t.item()))
                .collect::<Result<Vec<_>>>()?;
            Ok(SslOutcome::Loss(SslOutput {
                total: losses.total,
                spr: None,
                model: None,
                steps,
            }))
        })()),
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn mlp_apply(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (l, act) in mlp.spec.activations.iter().enumerate() {
        let (wi, bi) = mlp.layer(l);
        let (w, b) = (store.get(wi), store.get(bi));
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        let mut out = b.data().to_vec();
        for (i, &hi) in h.iter().enumerate().take(n_in) {
            if hi == 0.0 {
                continue;
            }
            let row = &w.data()[i * n_out..(i + 1) * n_out];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += hi * wij;
            }
        }
        if *act == Activation::Relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    h
}

/// Online dueling Q-values of one observation, without a tape.
pub fn q_values_single(nets: &AgentNetworks, obs: &[f64]) -> Vec<f64> {
    let z = mlp_apply(&nets.store, &nets.encoder, obs);
    let v = mlp_apply(&nets.store, &nets.value_head, &z)[0];
    let a = mlp_apply(&nets.store, &nets.advantage_head, &z);
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    a.iter().map(|x| v + x - mean).collect()
}

pub fn greedy_action(nets: &AgentNetworks, obs: &[f64]) -> usize {
    argmax(&q_values_single(nets, obs))
}

/// Mean return of the greedy policy. Continuing specs are scored over a
/// window of `max_episode_length` steps.
pub fn evaluate(nets: &AgentNetworks, spec: &GridSpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut env = GridEnv::new(spec.clone())?;
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut obs = env.reset(seed.wrapping_add(ep as u64));
        for _ in 0..spec.max_episode_length {
            let out = env.step(greedy_action(nets, &obs))?;
            total += out.reward;
            if out.done {
                break;
            }
            obs = out.obs;
        }
    }
    Ok(total / episodes as f64)
}

/// Mean return of the uniformly random policy.
pub fn random_policy_return(spec: &GridSpec, episodes: usize, rng: &mut impl Rng) -> Result<f64> {
    let mut env = GridEnv::new(spec.clone())?;
    let mut total = 0.0;
    for ep in 0..episodes {
        env.reset(ep as u64);
        for _ in 0..spec.max_episode_length {
            let out = env.step(rng.gen_range(0..N_ACTIONS))?;
            total += out.reward;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// Observations visited by a random rollout, `n×d_obs`.
pub fn probe_batch(spec: &GridSpec, n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9b0b);
    let mut env = GridEnv::new(spec.clone())?;
    let mut obs = env.reset(seed);
    let mut data = Vec::with_capacity(n * spec.obs_dim());
    let mut episode = 0;
    for _ in 0..n {
        data.extend_from_slice(&obs);
        let out = env.step(rng.gen_range(0..N_ACTIONS))?;
        obs = if out.done {
            episode += 1;
            env.reset(seed.wrapping_add(episode))
        } else {
            out.obs
        };
    }
    Tensor::new(vec![n, spec.obs_dim()], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub update: usize,
    /// Mean return of episodes finished since the previous record.
    pub episode_return: Option<f64>,
    pub td_loss: f64,
    pub ssl_total: Option<f64>,
    pub ssl_spr: Option<f64>,
    pub ssl_model: Option<f64>,
    pub ssl_steps: Vec<f64>,
    pub ssl_skipped: Option<String>,
    pub grad_norm: f64,
    pub epsilon: f64,
    /// Step of the latest diagnostics snapshot.
    pub diagnostics_step: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub eval_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub status: RunStatus,
    /// Step 0 holds the random-policy baseline.
    pub curve: Vec<CurvePoint>,
    pub logs: Vec<LogRecord>,
    pub ranks: Vec<RankReport>,
    pub dormancy: Vec<DormancyReport>,
    pub episode_returns: Vec<f64>,
    pub networks: AgentNetworks,
}

impl TrainingOutcome {
    pub fn final_return(&self) -> f64 {
        self.curve.last().map_or(0.0, |p| p.eval_return)
    }

    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

struct StepStats {
    td_loss: f64,
    ssl: Option<SslStats>,
    ssl_skipped: Option<String>,
    grad_norm: f64,
}

struct SslStats {
    total: f64,
    spr: Option<f64>,
    model: Option<f64>,
    steps: Vec<f64>,
}

struct Learner<'a> {
    cfg: &'a VariantConfig,
    spec: &'a GridSpec,
    adam: Adam,
}

impl Learner<'_> {
    fn update(&mut self, nets: &mut AgentNetworks, replay: &mut ReplayBuffer, rng: &mut ChaCha8Rng) -> Result<StepStats> {
        let cfg = self.cfg;
        let (batch, weights) =
            replay.sample_sequences(cfg.batch_size, cfg.sequence_horizon(), cfg.modifiers.normalization, rng)?;
        let td_weights = match replay.config().mode {
            ReplayMode::Prioritized => {
                PriorityWeights::from_importance(&batch.importance, NormalizationMode::MaxNormalized)?
                    .weights()
                    .to_vec()
            }
            ReplayMode::Uniform => vec![1.0; cfg.batch_size],
        };
        let tape = Tape::new();
        let bound = nets.bind(&tape);
        let td = td_loss(&tape, nets, &bound, &batch, cfg.n_step, cfg.discount, &td_weights)?;
        let mut total = td.loss;
        let mut ssl = None;
        let mut ssl_skipped = None;
        if cfg.ssl_weight > 0.0 {
            let views = ssl_views(self.spec, &batch, cfg.horizon, cfg.augment_radius, rng)?;
            let mask = build_terminal_mask(&batch, cfg.horizon)?;
            match ssl_loss(&tape, nets, &bound, &views, &mask, &weights, cfg)? {
                SslOutcome::Loss(out) => {
                    total = tape.add(total, tape.scale(out.total, cfg.ssl_weight)?)?;
                    ssl = Some(SslStats {
                        total: tape.value(out.total)?.item()?,
                        spr: out.spr,
                        model: out.model,
                        steps: out.steps,
                    });
                }
                SslOutcome::Skipped(reason) => ssl_skipped = Some(reason),
            }
        }
        let td_value = tape.value(td.loss)?.item()?;
        let total_value = tape.value(total)?.item()?;
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss: total {total_value}, td {td_value}, ssl {:?}",
                ssl.as_ref().map(|s| s.total)
            )));
        }
        tape.backward(total)?;
        let grads = self
            .adam
            .params()
            .iter()
            .map(|&i| tape.grad(bound.var(i)))
            .collect::<Result<Vec<_>>>()?;
        let grad_norm = self.adam.step(&mut nets.store, &grads)?;
        if !grad_norm.is_finite() || !nets.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after update (grad norm {grad_norm})")));
        }
        if replay.config().mode == ReplayMode::Prioritized {
            replay.update_priorities(&batch.sample_indices, &td.td_errors)?;
        }
        Ok(StepStats {
            td_loss: td_value,
            ssl,
            ssl_skipped,
            grad_norm,
        })
    }
}

/// Trains one variant. Fully determined by `(cfg, seed)`. A non-finite loss
/// ends the run with [`RunStatus::Aborted`] and keeps what was logged.
pub fn run_training(cfg: &VariantConfig, seed: u64) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let spec = cfg.env.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = AgentNetworks::new(cfg.network_sizes(&spec), &mut rng)?;
    let adam = Adam::new(&nets.store, nets.online_params(), cfg.learning_rate);
    let mut learner = Learner {
        cfg,
        spec: &spec,
        adam,
    };
    let mut replay = ReplayBuffer::new(cfg.replay.clone())?;
    let probe = probe_batch(&spec, cfg.probe_size, seed)?;
    let eval_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);

    let mut outcome = TrainingOutcome {
        status: RunStatus::Completed,
        curve: vec![CurvePoint {
            step: 0,
            eval_return: random_policy_return(&spec, cfg.eval_episodes, &mut ChaCha8Rng::seed_from_u64(eval_seed))?,
        }],
        logs: Vec::new(),
        ranks: Vec::new(),
        dormancy: Vec::new(),
        episode_returns: Vec::new(),
        networks: nets.clone(),
    };
    let diagnose = |nets: &AgentNetworks, step: usize, outcome: &mut TrainingOutcome| -> Result<()> {
        let (r, d) = diagnostics::probe_reports(nets, &probe, step, cfg.srank_delta, cfg.dormant_tau)?;
        outcome.ranks.extend(r);
        outcome.dormancy.extend(d);
        Ok(())
    };
    if cfg.diagnostics_every > 0 {
        diagnose(&nets, 0, &mut outcome)?;
    }

    let mut env = GridEnv::new(spec.clone())?;
    let mut episode = 0u64;
    let mut obs = env.reset(seed);
    let mut episode_return = 0.0;
    let mut pending_returns: Vec<f64> = Vec::new();
    let mut updates = 0usize;
    let mut last_diag = (cfg.diagnostics_every > 0).then_some(0);
    let min_fill = cfg.batch_size + cfg.sequence_horizon() + 1;

    for step in 1..=cfg.total_steps {
        let epsilon = cfg.exploration.epsilon(step);
        let action = if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..N_ACTIONS)
        } else {
            greedy_action(&nets, &obs)
        };
        let out = env.step(action)?;
        replay.push(Transition {
            obs: std::mem::take(&mut obs),
            action,
            reward: out.reward,
            done: out.done,
        });
        episode_return += out.reward;
        if out.done {
            outcome.episode_returns.push(episode_return);
            pending_returns.push(episode_return);
            episode_return = 0.0;
            episode += 1;
            obs = env.reset(seed.wrapping_add(episode));
        } else {
            obs = out.obs;
        }

        if step >= cfg.learning_starts && step % cfg.train_every == 0 && replay.len() >= min_fill {
            let stats = match learner.update(&mut nets, &mut replay, &mut rng) {
                Ok(s) => s,
                Err(Error::Numeric(reason)) => {
                    outcome.status = RunStatus::Aborted { step, reason };
                    break;
                }
                Err(e) => return Err(e),
            };
            updates += 1;
            if updates % cfg.target_period == 0 {
                nets.sync_target(cfg.target_momentum)?;
            }
            if updates % cfg.log_every == 0 {
                let episode_mean = (!pending_returns.is_empty())
                    .then(|| pending_returns.iter().sum::<f64>() / pending_returns.len() as f64);
                pending_returns.clear();
                outcome.logs.push(LogRecord {
                    step,
                    update: updates,
                    episode_return: episode_mean,
                    td_loss: stats.td_loss,
                    ssl_total: stats.ssl.as_ref().map(|s| s.total),
                    ssl_spr: stats.ssl.as_ref().and_then(|s| s.spr),
                    ssl_model: stats.ssl.as_ref().and_then(|s| s.model),
                    ssl_steps: stats.ssl.map(|s| s.steps).unwrap_or_default(),
                    ssl_skipped: stats.ssl_skipped,
                    grad_norm: stats.grad_norm,
                    epsilon,
                    diagnostics_step: last_diag,
                });
            }
        }

        if cfg.diagnostics_every > 0 && step % cfg.diagnostics_every == 0 {
            diagnose(&nets, step, &mut outcome)?;
            last_diag = Some(step);
        }
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.total_steps {
            outcome.curve.push(CurvePoint {
                step,
                eval_return: evaluate(&nets, &spec, cfg.eval_episodes, eval_seed)?,
            });
        }
    }
    outcome.networks = nets;
    Ok(outcome)
}

/// Rebuilds networks for `cfg` and loads checkpointed parameters.
pub fn networks_from_checkpoint(cfg: &VariantConfig, entries: &[(String, Tensor)]) -> Result<AgentNetworks> {
    let spec = cfg.env.resolve()?;
    let mut nets = AgentNetworks::new(cfg.network_sizes(&spec), &mut ChaCha8Rng::seed_from_u64(0))?;
    nets.store.load_named(entries)?;
    Ok(nets)
}
