//! Deterministic grid worlds: an episodic, pit-heavy preset and a continuing
//! preset that never emits `done`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(row, col)`, row 0 at the top.
pub type Cell = (usize, usize);

pub const N_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Domain(format!("action {i} not in 0..{N_ACTIONS}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    #[serde(default)]
    pub pits: Vec<Cell>,
    #[serde(default)]
    pub step_reward: f64,
    pub max_episode_length: usize,
    /// Probability that the chosen action is replaced by a uniformly random one.
    #[serde(default)]
    pub slip: f64,
    /// Goal and pits teleport to start instead of ending the episode.
    #[serde(default)]
    pub continuing: bool,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("grid must be at least 1×1".into()));
        }
        let inside = |c: Cell| c.0 < self.height && c.1 < self.width;
        if !inside(self.start) || !inside(self.goal) || !self.pits.iter().all(|&p| inside(p)) {
            return Err(Error::Config("start, goal and pits must lie inside the grid".into()));
        }
        if self.start == self.goal || self.pits.contains(&self.start) {
            return Err(Error::Config("start may not be the goal or a pit".into()));
        }
        if self.pits.contains(&self.goal) {
            return Err(Error::Config("goal may not be a pit".into()));
        }
        if self.max_episode_length < 1 {
            return Err(Error::Config("max_episode_length must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.slip) || !self.step_reward.is_finite() {
            return Err(Error::Config("slip must be in [0,1] and step_reward finite".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn obs_dim(&self) -> usize {
        3 * self.n_cells()
    }

    pub fn index(&self, c: Cell) -> usize {
        c.0 * self.width + c.1
    }

    pub fn cell(&self, index: usize) -> Cell {
        (index / self.width, index % self.width)
    }

    pub fn is_pit(&self, c: Cell) -> bool {
        self.pits.contains(&c)
    }

    pub fn is_terminal(&self, c: Cell) -> bool {
        c == self.goal || self.is_pit(c)
    }

    /// Deterministic move; walls clamp.
    pub fn move_from(&self, c: Cell, a: Action) -> Cell {
        match a {
            Action::Up => (c.0.saturating_sub(1), c.1),
            Action::Down => ((c.0 + 1).min(self.height - 1), c.1),
            Action::Left => (c.0, c.1.saturating_sub(1)),
            Action::Right => (c.0, (c.1 + 1).min(self.width - 1)),
        }
    }

    /// Reward for arriving at `c`.
    pub fn arrival_reward(&self, c: Cell) -> f64 {
        if c == self.goal {
            1.0
        } else if self.is_pit(c) {
            -1.0
        } else {
            self.step_reward
        }
    }

    /// Observation with the agent at `agent`.
    pub fn observe(&self, agent: Cell) -> Vec<f64> {
        let n = self.n_cells();
        let mut obs = vec![0.0; 3 * n];
        obs[self.index(agent)] = 1.0;
        obs[n + self.index(self.goal)] = 1.0;
        for &p in &self.pits {
            obs[2 * n + self.index(p)] = 1.0;
        }
        obs
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pitfall-5x5" => Ok(pitfall_5x5()),
            "loop-5x5" => Ok(loop_5x5()),
            other => Err(Error::Config(format!(
                "unknown env preset {other:?} (expected pitfall-5x5 or loop-5x5)"
            ))),
        }
    }
}

/// ```text
/// . . . . G
/// . P . P .
/// . . . . .
/// . P . P .
/// S . . . .
/// ```
pub fn pitfall_5x5() -> GridSpec {
    GridSpec {
        width: 5,
        height: 5,
        start: (4, 0),
        goal: (0, 4),
        pits: vec![(1, 1), (1, 3), (3, 1), (3, 3)],
        step_reward: 0.0,
        max_episode_length: 50,
        slip: 0.0,
        continuing: false,
    }
}

/// Same layout with two pits; reaching goal or pit teleports to start.
/// `max_episode_length` is the evaluation window.
pub fn loop_5x5() -> GridSpec {
    GridSpec {
        pits: vec![(1, 3), (3, 1)],
        max_episode_length: 100,
        continuing: true,
        ..pitfall_5x5()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Episode ended by the step cap rather than a terminal cell.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct GridEnv {
    spec: GridSpec,
    agent: Cell,
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl GridEnv {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let agent = spec.start;
        Ok(Self {
            spec,
            agent,
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn agent(&self) -> Cell {
        self.agent
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.agent = self.spec.start;
        self.steps = 0;
        self.done = false;
        self.spec.observe(self.agent)
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("step called after the episode ended; call reset".into()));
        }
        let mut a = Action::from_index(action)?;
        if self.spec.slip > 0.0 && self.rng.gen::<f64>() < self.spec.slip {
            a = Action::ALL[self.rng.gen_range(0..N_ACTIONS)];
        }
        let next = self.spec.move_from(self.agent, a);
        let reward = self.spec.arrival_reward(next);
        self.steps += 1;
        let hit = self.spec.is_terminal(next);
        if self.spec.continuing {
            self.agent = if hit { self.spec.start } else { next };
            return Ok(StepOutcome {
                obs: self.spec.observe(self.agent),
                reward,
                done: false,
                truncated: false,
            });
        }
        self.agent = next;
        let truncated = !hit && self.steps >= self.spec.max_episode_length;
        self.done = hit || truncated;
        Ok(StepOutcome {
            obs: self.spec.observe(self.agent),
            reward,
            done: self.done,
            truncated,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// Optimal value per cell (row-major); terminal cells hold 0.
    pub values: Vec<f64>,
    pub start_return: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Tabular Bellman optimality fixpoint. A reward received on arriving at
/// step `t` (counting from 1) is discounted by `discount^t`, so a goal one
/// move away is worth `discount`. Goal and pits are treated as
/// absorbing terminals and the step cap is ignored, so the result is the
/// stationary optimum (also used as the reference for continuing specs,
/// where it is the optimal return of the first visit).
pub fn value_iteration_oracle(spec: &GridSpec, discount: f64) -> Result<OracleSolution> {
    spec.validate()?;
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(Error::Domain(format!("discount must be in (0,1], got {discount}")));
    }
    let n = spec.n_cells();
    let mut v = vec![0.0; n];
    let q = |v: &[f64], c: Cell, a: Action| -> f64 {
        let next = spec.move_from(c, a);
        let cont = if spec.is_terminal(next) { 0.0 } else { v[spec.index(next)] };
        discount * (spec.arrival_reward(next) + cont)
    };
    for it in 1..=1_000_000 {
        let mut residual: f64 = 0.0;
        let mut next_v = vec![0.0; n];
        for (i, slot) in next_v.iter_mut().enumerate() {
            let c = spec.cell(i);
            if spec.is_terminal(c) {
                continue;
            }
            let qs: Vec<f64> = Action::ALL.iter().map(|&a| q(&v, c, a)).collect();
            let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let avg = qs.iter().sum::<f64>() / N_ACTIONS as f64;
            *slot = (1.0 - spec.slip) * best + spec.slip * avg;
            residual = residual.max((*slot - v[i]).abs());
        }
        v = next_v;
        if !v.iter().all(|x| x.is_finite()) {
            break;
        }
        if residual < 1e-12 {
            return Ok(OracleSolution {
                start_return: v[spec.index(spec.start)],
                values: v,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::Numeric("value iteration did not converge".into()))
}
