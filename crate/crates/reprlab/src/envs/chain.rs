//! A tiny deterministic chain MDP with a one-hot byte observation.
//!
//! Used as a registered extension task: small enough that tabular
//! Q-iteration gives the exact Q*, which pins down the Q-learning loop
//! end to end. States 0..n-1 form a line; `right` from the last state
//! pays +1 and terminates, everything else pays 0.

use rand::Rng as _;

use crate::envs::{Environment, FrameStack, Observation, StepOutcome};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

pub const CHAIN_ACTIONS: usize = 2; // 0 = left, 1 = right

pub struct ChainEnv {
    n: usize,
    pos: usize,
    steps: usize,
    step_limit: usize,
    terminal: bool,
    started: bool,
    stack: FrameStack,
    rng: Rng,
}

impl ChainEnv {
    pub fn new(n: usize, seed: SeedStream) -> Self {
        ChainEnv {
            n,
            pos: 0,
            steps: 0,
            step_limit: 4 * n,
            terminal: true,
            started: false,
            stack: FrameStack::new(1, vec![1, 1, n]),
            rng: seed.named("chain").rng(),
        }
    }

    fn frame(&self) -> Vec<u8> {
        let mut f = vec![0u8; self.n];
        f[self.pos] = 255;
        f
    }

    /// Exact Q* over the full state-action table via Q-iteration.
    pub fn exact_q(n: usize, gamma: f64) -> Vec<[f64; CHAIN_ACTIONS]> {
        let mut q = vec![[0.0; CHAIN_ACTIONS]; n];
        for _ in 0..10_000 {
            let mut next = q.clone();
            for s in 0..n {
                for a in 0..CHAIN_ACTIONS {
                    let (s2, r, t) = Self::transition(n, s, a);
                    let bootstrap = if t { 0.0 } else { gamma * q[s2].iter().cloned().fold(f64::MIN, f64::max) };
                    next[s][a] = r + bootstrap;
                }
            }
            let delta: f64 = q
                .iter()
                .zip(&next)
                .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
                .fold(0.0, f64::max);
            q = next;
            if delta < 1e-14 {
                break;
            }
        }
        q
    }

    fn transition(n: usize, s: usize, a: usize) -> (usize, f64, bool) {
        if s == n - 1 {
            return (s, 0.0, true); // absorbing terminal
        }
        match a {
            1 if s + 1 == n - 1 => (n - 1, 1.0, true),
            1 => (s + 1, 0.0, false),
            _ => (s.saturating_sub(1), 0.0, false),
        }
    }
}

impl Environment for ChainEnv {
    fn frame_shape(&self) -> Vec<usize> {
        vec![1, 1, self.n]
    }

    fn obs_shape(&self) -> Vec<usize> {
        vec![1, 1, self.n]
    }

    fn num_actions(&self) -> usize {
        CHAIN_ACTIONS
    }

    fn history_length(&self) -> usize {
        1
    }

    fn action_repeat(&self) -> usize {
        1
    }

    fn reset(&mut self) -> Result<Observation> {
        self.pos = self.rng.random_range(0..self.n - 1);
        self.steps = 0;
        self.terminal = false;
        self.started = true;
        self.stack.fill(self.frame());
        Ok(self.stack.observation())
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if !self.started || self.terminal {
            return Err(Error::contract("step called on a terminal episode"));
        }
        let (s2, r, t) = Self::transition(self.n, self.pos, action);
        self.pos = s2;
        self.steps += 1;
        self.terminal = t || self.steps >= self.step_limit;
        self.stack.push(self.frame());
        Ok(StepOutcome { obs: self.stack.observation(), reward: r, terminal: self.terminal, task_terminal: t })
    }
}
