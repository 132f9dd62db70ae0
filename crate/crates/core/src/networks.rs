//! Agent networks: encoder, projection and prediction heads, the
//! action-conditioned transition model and dueling Q-heads, plus the target
//! copies used for bootstrapped targets.
//!
//! All parameters live in one [`ParamStore`]. A forward pass first binds the
//! store onto a tape ([`AgentNetworks::bind`]); online parameters become
//! differentiable leaves and target parameters become constants, so nothing
//! computed on the target branch can reach an online gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Layer widths (input first) and one activation per weight layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("MLP widths must be positive: {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                widths.len() - 1,
                widths.len() - 1,
                activations.len()
            )));
        }
        Ok(Self { widths, activations })
    }

    /// `in → hidden → out` with ReLU after the hidden layer and `last` after
    /// the output layer.
    pub fn one_hidden(input: usize, hidden: usize, output: usize, last: Activation) -> Result<Self> {
        Self::new(vec![input, hidden, output], vec![Activation::Relu, last])
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Named tensors shared by every network of an agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrites every tensor from `(name, tensor)` pairs; names and shapes
    /// must match exactly.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, networks need {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in entries {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::Contract(format!("unexpected tensor {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return shape_err(format!(
                    "{name}: checkpoint shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                ));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// An MLP whose weights live in a [`ParamStore`]. Weights are `in×out`,
/// biases `1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Registers the layers under `prefix`, initialized uniformly in
    /// `±sqrt(1/fan_in)`.
    pub fn init(store: &mut ParamStore, prefix: &str, spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.activations.len());
        for (l, pair) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
            let w = Tensor::new(vec![fan_in, fan_out], sample(fan_in * fan_out)).expect("sized");
            let b = Tensor::new(vec![1, fan_out], sample(fan_out)).expect("sized");
            let wi = store.insert(format!("{prefix}.{l}.weight"), w);
            let bi = store.insert(format!("{prefix}.{l}.bias"), b);
            layers.push((wi, bi));
        }
        Self { spec, layers }
    }

    /// Same layout as `source`, registered under a new prefix with copied
    /// values.
    pub fn clone_into(&self, store: &mut ParamStore, prefix: &str) -> Self {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, &(w, b))| {
                let wt = store.get(w).clone();
                let bt = store.get(b).clone();
                (
                    store.insert(format!("{prefix}.{l}.weight"), wt),
                    store.insert(format!("{prefix}.{l}.bias"), bt),
                )
            })
            .collect();
        Self {
            spec: self.spec.clone(),
            layers,
        }
    }

    pub fn param_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn layer(&self, l: usize) -> (usize, usize) {
        self.layers[l]
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(*self.forward_with_hidden(tape, bound, x)?.last().expect("at least one layer"))
    }

    /// Post-activation output of every layer, last one included.
    pub fn forward_with_hidden(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(x)?;
        if shape.len() != 2 || shape[1] != self.spec.input_dim() {
            return shape_err(format!(
                "MLP expects B×{}, got {shape:?}",
                self.spec.input_dim()
            ));
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (&(w, b), act) in self.layers.iter().zip(&self.spec.activations) {
            h = tape.add(tape.matmul(h, bound.var(w))?, bound.var(b))?;
            if *act == Activation::Relu {
                h = tape.relu(h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Parameters of a store placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes parameter `i` with another variable (used by gradient
    /// checks that perturb a single tensor).
    pub fn replace(&mut self, i: usize, v: Var) {
        self.vars[i] = v;
    }
}

/// Widths for [`AgentNetworks::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSizes {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub predictor: bool,
}

impl NetworkSizes {
    pub fn new(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            obs_dim,
            n_actions,
            hidden: 128,
            latent_dim: 64,
            embed_dim: 32,
            predictor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentNetworks {
    pub sizes: NetworkSizes,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
    pub transition: Mlp,
    pub value_head: Mlp,
    pub advantage_head: Mlp,
    pub target_encoder: Mlp,
    pub target_projector: Mlp,
    pub target_value_head: Mlp,
    pub target_advantage_head: Mlp,
}

/// Q-values together with the hidden activations the diagnostics inspect.
#[derive(Debug, Clone, Copy)]
pub struct QForward {
    pub q: Var,
    pub value_hidden: Var,
    pub advantage_hidden: Var,
}

impl AgentNetworks {
    pub fn new(sizes: NetworkSizes, rng: &mut impl Rng) -> Result<Self> {
        let NetworkSizes {
            obs_dim,
            n_actions,
            hidden,
            latent_dim,
            embed_dim,
            predictor,
        } = sizes;
        use Activation::*;
        let mut store = ParamStore::new();
        let encoder = Mlp::init(&mut store, "encoder", MlpSpec::one_hidden(obs_dim, hidden, latent_dim, Relu)?, rng);
        let projector = Mlp::init(&mut store, "projector", MlpSpec::one_hidden(latent_dim, hidden, embed_dim, Identity)?, rng);
        let predictor = if predictor {
            Some(Mlp::init(&mut store, "predictor", MlpSpec::new(vec![embed_dim, embed_dim], vec![Identity])?, rng))
        } else {
            None
        };
        let transition = Mlp::init(
            &mut store,
            "transition",
            MlpSpec::one_hidden(latent_dim + n_actions, hidden, latent_dim, Relu)?,
            rng,
        );
        let value_head = Mlp::init(&mut store, "value", MlpSpec::one_hidden(latent_dim, hidden, 1, Identity)?, rng);
        let advantage_head = Mlp::init(&mut store, "advantage", MlpSpec::one_hidden(latent_dim, hidden, n_actions, Identity)?, rng);
        let target_encoder = encoder.clone_into(&mut store, "target_encoder");
        let target_projector = projector.clone_into(&mut store, "target_projector");
        let target_value_head = value_head.clone_into(&mut store, "target_value");
        let target_advantage_head = advantage_head.clone_into(&mut store, "target_advantage");
        Ok(Self {
            sizes,
            store,
            encoder,
            projector,
            predictor,
            transition,
            value_head,
            advantage_head,
            target_encoder,
            target_projector,
            target_value_head,
            target_advantage_head,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.sizes.n_actions
    }

    fn online_mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.encoder, &self.projector, &self.transition, &self.value_head, &self.advantage_head];
        v.extend(self.predictor.as_ref());
        v
    }

    /// (online, target) pairs updated by [`AgentNetworks::sync_target`].
    fn target_pairs(&self) -> [(&Mlp, &Mlp); 4] {
        [
            (&self.encoder, &self.target_encoder),
            (&self.projector, &self.target_projector),
            (&self.value_head, &self.target_value_head),
            (&self.advantage_head, &self.target_advantage_head),
        ]
    }

    /// Indices of trainable (online) parameters.
    pub fn online_params(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.online_mlps().into_iter().flat_map(|m| m.param_indices()).collect();
        idx.sort_unstable();
        idx
    }

    /// Indices of parameters only the SSL objective trains.
    pub fn ssl_params(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.projector.param_indices().chain(self.transition.param_indices()).collect();
        if let Some(p) = &self.predictor {
            idx.extend(p.param_indices());
        }
        idx.sort_unstable();
        idx
    }

    /// Online parameters become leaves, target parameters constants.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let online = self.online_params();
        let vars = (0..self.store.len())
            .map(|i| {
                let t = self.store.get(i).clone();
                if online.binary_search(&i).is_ok() {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Encodes `B×d_obs` observations. The target branch runs the target
    /// encoder and its output is detached.
    pub fn encode(&self, tape: &Tape, bound: &Bound, obs: Var, target_branch: bool) -> Result<Var> {
        if target_branch {
            let z = self.target_encoder.forward(tape, bound, obs)?;
            tape.detach(z)
        } else {
            self.encoder.forward(tape, bound, obs)
        }
    }

    /// Projects latents to embeddings; the target branch is detached.
    pub fn project(&self, tape: &Tape, bound: &Bound, z: Var, target_branch: bool) -> Result<Var> {
        if target_branch {
            let e = self.target_projector.forward(tape, bound, z)?;
            tape.detach(e)
        } else {
            self.projector.forward(tape, bound, z)
        }
    }

    /// Autoregressive latent rollout: `z_{k+1} = transition(z_k ⊕ onehot(a_k))`.
    /// `actions[i]` holds the `K` action ids of row `i`; the result is
    /// `B×K×d_lat` (`K = 0` gives an empty step axis).
    pub fn rollout_latents(&self, tape: &Tape, bound: &Bound, z0: Var, actions: &[Vec<usize>]) -> Result<Var> {
        let shape = tape.shape(z0)?;
        if shape.len() != 2 {
            return shape_err(format!("z0 must be B×d_lat, got {shape:?}"));
        }
        let (b, d) = (shape[0], shape[1]);
        if actions.len() != b {
            return shape_err(format!("{} action rows for batch {b}", actions.len()));
        }
        let k = actions.first().map_or(0, Vec::len);
        if actions.iter().any(|row| row.len() != k) {
            return shape_err("ragged action rows");
        }
        let n_actions = self.n_actions();
        if let Some(&bad) = actions.iter().flatten().find(|&&a| a >= n_actions) {
            return Err(Error::Domain(format!("action id {bad} >= {n_actions}")));
        }
        if k == 0 {
            return Ok(tape.constant(Tensor::new(vec![b, 0, d], Vec::new())?));
        }
        let mut z = z0;
        let mut steps = Vec::with_capacity(k);
        for step in 0..k {
            let mut onehot = Tensor::zeros(&[b, n_actions]);
            for (i, row) in actions.iter().enumerate() {
                onehot.set(&[i, row[step]], 1.0);
            }
            let input = tape.concat(&[z, tape.constant(onehot)], 1)?;
            z = self.transition.forward(tape, bound, input)?;
            steps.push(z);
        }
        tape.stack(&steps, 1)
    }

    /// Dueling Q-values `V + A − mean_a(A)` from online heads.
    pub fn q_values(&self, tape: &Tape, bound: &Bound, z: Var) -> Result<Var> {
        Ok(self.q_forward(tape, bound, z, false)?.q)
    }

    /// Dueling Q-values from either head set; the target set is detached.
    pub fn q_forward(&self, tape: &Tape, bound: &Bound, z: Var, target_branch: bool) -> Result<QForward> {
        let (vh, ah) = if target_branch {
            (&self.target_value_head, &self.target_advantage_head)
        } else {
            (&self.value_head, &self.advantage_head)
        };
        let v_layers = vh.forward_with_hidden(tape, bound, z)?;
        let a_layers = ah.forward_with_hidden(tape, bound, z)?;
        let value = *v_layers.last().expect("layers");
        let adv = *a_layers.last().expect("layers");
        let b = tape.shape(adv)?[0];
        let adv_mean = tape.reshape(tape.mean(adv, Some(1))?, &[b, 1])?;
        let q = tape.add(value, tape.sub(adv, adv_mean)?)?;
        let q = if target_branch { tape.detach(q)? } else { q };
        Ok(QForward {
            q,
            value_hidden: v_layers[0],
            advantage_hidden: a_layers[0],
        })
    }

    /// `target ← m·target + (1−m)·online` for every online/target pair.
    pub fn sync_target(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Domain(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        let pairs: Vec<(usize, usize)> = self
            .target_pairs()
            .iter()
            .flat_map(|(online, target)| online.param_indices().zip(target.param_indices()).collect::<Vec<_>>())
            .collect();
        for (o, t) in pairs {
            if momentum == 0.0 {
                let src = self.store.get(o).clone();
                *self.store.get_mut(t) = src;
            } else if momentum < 1.0 {
                let src = self.store.get(o).data().to_vec();
                for (tv, ov) in self.store.get_mut(t).data_mut().iter_mut().zip(src) {
                    *tv = momentum * *tv + (1.0 - momentum) * ov;
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        (0..self.store.len()).all(|i| self.store.get(i).all_finite())
    }
}

/// Adam over a subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    params: Vec<usize>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<usize>, lr: f64) -> Self {
        let first = params.iter().map(|&i| vec![0.0; store.get(i).len()]).collect();
        let second = params.iter().map(|&i| vec![0.0; store.get(i).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.5e-4,
            max_grad_norm: Some(10.0),
            step: 0,
            first,
            second,
            params,
        }
    }

    pub fn params(&self) -> &[usize] {
        &self.params
    }

    /// Applies one update; `grads[j]` belongs to `self.params()[j]`. Returns
    /// the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != self.params.len() {
            return shape_err(format!("{} gradients for {} parameters", grads.len(), self.params.len()));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (j, &pi) in self.params.iter().enumerate() {
            let p = store.get_mut(pi);
            if p.len() != grads[j].len() {
                return shape_err(format!("gradient {j} has wrong size"));
            }
            let (m, v) = (&mut self.first[j], &mut self.second[j]);
            for (k, (w, &g)) in p.data_mut().iter_mut().zip(grads[j].data()).enumerate() {
                let g = g * clip;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
