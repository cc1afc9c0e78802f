//! Exact finite-horizon value iteration on a task instance's tabular form.
//!
//! The decision-level MDP (one state per (agent, object, bounce direction,
//! item mask), one transition per held action over `action_repeat` ticks)
//! is deterministic, so value iteration yields the exact optimal return
//! and a time-dependent optimal policy whose rollout return equals the
//! computed value. This is the ground-truth oracle used throughout the
//! tests and acceptance suite.

use crate::envs::grid::{GridInstance, GridState, ACTION_COUNT};

/// Exact solution of one task instance over a fixed decision horizon.
pub struct TabularOracle {
    instance: GridInstance,
    repeat: usize,
    horizon: usize,
    n_states: usize,
    /// Per (state, action): packed next-state index, reward, terminal.
    next: Vec<u32>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    /// `values[h]` = optimal return with `h` decisions remaining.
    values: Vec<Vec<f64>>,
}

impl TabularOracle {
    /// Solve `instance` for episodes of `frame_limit` raw frames.
    pub fn solve(instance: GridInstance, repeat: usize, frame_limit: usize) -> Self {
        let g = instance.grid;
        let n_items = instance.items.len();
        let n_states = g * g * g * g * 4 * (1 << n_items);
        let horizon = frame_limit / repeat;

        let mut next = vec![0u32; n_states * ACTION_COUNT];
        let mut reward = vec![0.0; n_states * ACTION_COUNT];
        let mut terminal = vec![false; n_states * ACTION_COUNT];
        for idx in 0..n_states {
            let s = Self::unpack(idx, g, n_items);
            for a in 0..ACTION_COUNT {
                let (ns, r, t) = instance.decision(&s, a, repeat);
                next[idx * ACTION_COUNT + a] = Self::pack(&ns, g, n_items) as u32;
                reward[idx * ACTION_COUNT + a] = r;
                terminal[idx * ACTION_COUNT + a] = t;
            }
        }

        let mut values: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
        values.push(vec![0.0; n_states]);
        for h in 1..=horizon {
            let prev = &values[h - 1];
            let mut cur = vec![0.0; n_states];
            for idx in 0..n_states {
                let mut best = f64::NEG_INFINITY;
                for a in 0..ACTION_COUNT {
                    let k = idx * ACTION_COUNT + a;
                    let v = reward[k] + if terminal[k] { 0.0 } else { prev[next[k] as usize] };
                    if v > best {
                        best = v;
                    }
                }
                cur[idx] = best;
            }
            values.push(cur);
        }

        TabularOracle { instance, repeat, horizon, n_states, next, reward, terminal, values }
    }

    fn pack(s: &GridState, g: usize, n_items: usize) -> usize {
        let agent = s.agent.0 * g + s.agent.1;
        let object = s.object.0 * g + s.object.1;
        (((agent * g * g + object) * 4 + s.dir as usize) << n_items) | s.items_left as usize
    }

    fn unpack(mut idx: usize, g: usize, n_items: usize) -> GridState {
        let items_left = (idx & ((1 << n_items) - 1)) as u8;
        idx >>= n_items;
        let dir = (idx % 4) as u8;
        idx /= 4;
        let object = (idx % (g * g), 0);
        let object = (object.0 / g, object.0 % g);
        idx /= g * g;
        let agent = (idx / g, idx % g);
        GridState { agent, object, dir, items_left }
    }

    pub fn instance(&self) -> &GridInstance {
        &self.instance
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Optimal return achievable from `s0` over the full horizon.
    pub fn optimal_return(&self, s0: &GridState) -> f64 {
        let g = self.instance.grid;
        self.values[self.horizon][Self::pack(s0, g, self.instance.items.len())]
    }

    /// Greedy action with `remaining` decisions left; ties break to the
    /// lowest action index.
    pub fn greedy_action(&self, s: &GridState, remaining: usize) -> usize {
        let g = self.instance.grid;
        let idx = Self::pack(s, g, self.instance.items.len());
        let prev = &self.values[remaining.saturating_sub(1)];
        let mut best_a = 0;
        let mut best_v = f64::NEG_INFINITY;
        for a in 0..ACTION_COUNT {
            let k = idx * ACTION_COUNT + a;
            let v = self.reward[k] + if self.terminal[k] || remaining == 0 { 0.0 } else { prev[self.next[k] as usize] };
            if v > best_v {
                best_v = v;
                best_a = a;
            }
        }
        best_a
    }

    /// Roll the optimal policy of `self` inside `world` (same geometry,
    /// possibly different dynamics and rewards); returns the realised
    /// return. With `world == self` this equals [`Self::optimal_return`].
    pub fn rollout_policy_in(&self, world: &GridInstance, s0: &GridState) -> f64 {
        let mut s = *s0;
        let mut total = 0.0;
        for step in 0..self.horizon {
            let a = self.greedy_action(&s, self.horizon - step);
            let (ns, r, t) = world.decision(&s, a, self.repeat);
            total += r;
            s = ns;
            if t {
                break;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::grid::{GridInstance, GridTaskKind};
    use crate::envs::EnvConfig;
    use crate::rng::SeedStream;

    fn probe_instances(kind: GridTaskKind, n: usize) -> Vec<(GridInstance, Vec<GridState>)> {
        let cfg = EnvConfig::default();
        (0..n as u64)
            .map(|seed| {
                let mut rng = SeedStream::new(seed).named("probe").rng();
                let inst = GridInstance::draw_items(kind, cfg.grid_size, cfg.item_count, &mut rng);
                let starts: Vec<GridState> = (0..3).map(|_| inst.draw_initial(&mut rng)).collect();
                (inst, starts)
            })
            .collect()
    }

    #[test]
    fn optimal_policy_rollout_equals_value_iteration_optimum() {
        let cfg = EnvConfig::default();
        for kind in [GridTaskKind::Chase, GridTaskKind::Avoid, GridTaskKind::Collect] {
            for (inst, starts) in probe_instances(kind, 2) {
                let oracle = TabularOracle::solve(inst.clone(), cfg.action_repeat, cfg.episode_frame_limit);
                for s0 in starts {
                    let expected = oracle.optimal_return(&s0);
                    let rolled = oracle.rollout_policy_in(&inst, &s0);
                    assert!(
                        (expected - rolled).abs() < 1e-9,
                        "{kind:?}: VI value {expected} vs rollout {rolled}"
                    );
                }
            }
        }
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let g = 8;
        for idx in [0usize, 1, 4095, 131071] {
            let s = TabularOracle::unpack(idx, g, 3);
            assert_eq!(TabularOracle::pack(&s, g, 3), idx);
        }
    }
}
