//! Deep Q-learning for the short-term memory system: the bootstrapped
//! target, the squared-error loss, epsilon-greedy control and episodic
//! evaluation. The training loop lives in [`trainer`].

pub mod replay;
pub mod trainer;

pub use replay::{ReplayBuffer, Transition};
pub use trainer::{train_stm, AuxLoss, CheckpointSelector, StmConfig, StmOutcome};

use rand::Rng as _;

use crate::engine::{forward_tensor, BoundParams, Graph, Mode, NetworkParams, NetworkSpec, Tensor, Var};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Linear exploration decay with a separate evaluation epsilon.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub final_value: f64,
    /// Raw frames until the decay bottoms out.
    pub final_frame: u64,
    pub eval: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { initial: 1.0, final_value: 0.1, final_frame: 50_000, eval: 0.05 }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, frames_seen: u64) -> f64 {
        if frames_seen >= self.final_frame {
            self.final_value
        } else {
            let t = frames_seen as f64 / self.final_frame as f64;
            self.initial + (self.final_value - self.initial) * t
        }
    }
}

/// Bootstrapped target for one transition: the reward alone on terminal
/// steps, otherwise reward plus the discounted best next-state value under
/// the target network.
pub fn dqn_target(t: &Transition, spec: &NetworkSpec, target_params: &NetworkParams, gamma: f64) -> Result<f64> {
    if t.terminal {
        return Ok(t.reward);
    }
    let mut shape = vec![1];
    shape.extend(t.next_state.shape());
    let q = forward_tensor(spec, target_params, &t.next_state.reshaped(shape), Mode::Infer)?;
    Ok(t.reward + gamma * q.max_row(0))
}

/// Targets for a whole batch with a single forward pass.
pub fn dqn_targets(
    batch: &[Transition],
    spec: &NetworkSpec,
    target_params: &NetworkParams,
    gamma: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::contract("dqn_targets on an empty batch"));
    }
    let stacked = stack_states(batch.iter().map(|t| &t.next_state))?;
    let q = forward_tensor(spec, target_params, &stacked, Mode::Infer)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| if t.terminal { t.reward } else { t.reward + gamma * q.max_row(i) })
        .collect())
}

/// Concatenate per-item observations into one `[N, ...]` tensor.
pub fn stack_states<'a>(states: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0usize;
    for s in states {
        match &shape {
            None => shape = Some(s.shape().to_vec()),
            Some(sh) => {
                if sh != s.shape() {
                    return Err(Error::contract("stacked states must share a shape"));
                }
            }
        }
        data.extend_from_slice(s.data());
        n += 1;
    }
    let mut sh = vec![n];
    sh.extend(shape.ok_or_else(|| Error::contract("cannot stack zero states"))?);
    Ok(Tensor::new(sh, data))
}

/// Graph node of the DQN loss: mean squared error between the constant
/// targets and Q(s, a) under the bound parameters. Gradient flows only
/// through the chosen-action outputs.
pub fn dqn_loss_graph(
    graph: &Graph,
    spec: &NetworkSpec,
    bound: &BoundParams,
    batch: &[Transition],
    targets: &[f64],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("dqn_loss on an empty batch"));
    }
    let states = stack_states(batch.iter().map(|t| &t.state))?;
    let (q, _) = crate::engine::forward_graph(spec, bound, &graph.constant(states), Mode::Infer)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let chosen = q.select_cols(&actions);
    let y = graph.constant(Tensor::from_vec(targets.to_vec()));
    Ok(y.sub(&chosen).square().mean_all())
}

/// Loss value alone (test and diagnostic convenience).
pub fn dqn_loss(
    spec: &NetworkSpec,
    params: &NetworkParams,
    target_params: &NetworkParams,
    batch: &[Transition],
    gamma: f64,
) -> Result<f64> {
    let targets = dqn_targets(batch, spec, target_params, gamma)?;
    let g = Graph::new();
    let bound = BoundParams::bind_frozen(&g, params);
    Ok(dqn_loss_graph(&g, spec, &bound, batch, &targets)?.value().item())
}

/// Epsilon-greedy selection over a `[A]` or `[1, A]` Q-vector. Greedy ties
/// break to the lowest action index (bit-reproducible runs need this).
pub fn select_action(q_values: &Tensor, epsilon: f64, rng: &mut Rng) -> usize {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    let actions = *q_values.shape().last().unwrap();
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..actions)
    } else {
        q_values.argmax_row(0)
    }
}

/// Play `episodes` episodes with an epsilon-greedy policy and return the
/// per-episode returns.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &NetworkParams,
    env: &mut dyn Environment,
    episodes: usize,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset()?;
        let mut total = 0.0;
        loop {
            let mut shape = vec![1];
            shape.extend(obs.tensor.shape());
            let q = forward_tensor(spec, params, &obs.tensor.reshaped(shape), Mode::Infer)?;
            let action = select_action(&q, epsilon, rng);
            let out = env.step(action)?;
            total += out.reward;
            obs = out.obs;
            if out.terminal {
                break;
            }
        }
        scores.push(total);
    }
    Ok(scores)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}
