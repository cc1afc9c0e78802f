//! Deterministic desk-scale task suite and the observation pipeline
//! (frame stacking, action repeat, preprocessing).
//!
//! Three built-in gridworld tasks share one observation space — planes for
//! the agent, a moving object and item cells — but disagree about what is
//! worth doing: `chase` rewards contact with the fleeing object, `avoid`
//! penalises contact with a bouncing object, `collect` rewards visiting
//! item cells. The conflict is what makes forgetting measurable; the
//! shared input family keeps a single generative model meaningful.
//!
//! Every task is small enough to solve exactly by finite-horizon value
//! iteration on its tabular form (see [`tabular`]), which is the
//! ground-truth oracle used by the tests and the acceptance suite.

pub mod chain;
pub mod grid;
pub mod tabular;

use std::collections::BTreeMap;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub use grid::{GridEnv, GridTaskKind};

/// Rescale one raw byte value into [-1, 1].
#[inline]
pub fn rescale(x: f64) -> f64 {
    2.0 * (x / 255.0 - 0.5)
}

/// Inverse of [`rescale`].
#[inline]
pub fn derescale(v: f64) -> f64 {
    255.0 * (v + 1.0) / 2.0
}

/// Elementwise `2(x/255 - 0.5)` with domain validation.
pub fn preprocess(raw: &Tensor) -> Result<Tensor> {
    if raw.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
        return Err(Error::contract("preprocess input outside [0, 255]"));
    }
    Ok(raw.map(rescale))
}

/// Preprocess a raw byte frame directly.
pub fn preprocess_bytes(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&b| rescale(b as f64)).collect()
}

/// One agent-facing observation: the stacked, preprocessed frame history
/// plus the newest raw frame (what a replay buffer stores).
#[derive(Debug, Clone)]
pub struct Observation {
    /// `[history * C, H, W]`, values in [-1, 1].
    pub tensor: Tensor,
    /// Newest raw frame, `C * H * W` bytes.
    pub frame: Vec<u8>,
}

/// Result of one decision step (one action, `action_repeat` ticks).
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Observation,
    /// Reward summed over the repeated ticks.
    pub reward: f64,
    /// Episode over (task completion or frame limit).
    pub terminal: bool,
    /// Task-defined termination. False when only the frame limit ended the
    /// episode; bootstrapped targets treat truncation as a continuing
    /// state.
    pub task_terminal: bool,
}

/// A playable task. One decision step applies the chosen action for
/// `action_repeat` internal ticks.
pub trait Environment {
    /// `[C, H, W]` of a single raw frame.
    fn frame_shape(&self) -> Vec<usize>;
    /// `[history * C, H, W]` of a stacked observation.
    fn obs_shape(&self) -> Vec<usize>;
    fn num_actions(&self) -> usize;
    fn history_length(&self) -> usize;
    fn action_repeat(&self) -> usize;
    /// Start a new episode (applies no-op randomisation where the task
    /// defines it) and return the first observation.
    fn reset(&mut self) -> Result<Observation>;
    /// Apply one action for `action_repeat` ticks. Contract error if the
    /// episode already terminated.
    fn step(&mut self, action: usize) -> Result<StepOutcome>;
    /// Number of no-op actions applied by the most recent reset.
    fn last_noop_count(&self) -> usize {
        0
    }
}

/// Rolling window of the last `history` raw frames; produces the stacked,
/// preprocessed observation tensor.
#[derive(Debug, Clone)]
pub struct FrameStack {
    frames: Vec<Vec<u8>>,
    history: usize,
    frame_shape: Vec<usize>,
}

impl FrameStack {
    pub fn new(history: usize, frame_shape: Vec<usize>) -> Self {
        FrameStack { frames: Vec::new(), history, frame_shape }
    }

    /// Reset the window to `history` copies of the episode's first frame.
    pub fn fill(&mut self, frame: Vec<u8>) {
        self.frames.clear();
        for _ in 0..self.history {
            self.frames.push(frame.clone());
        }
    }

    pub fn push(&mut self, frame: Vec<u8>) {
        self.frames.push(frame);
        if self.frames.len() > self.history {
            self.frames.remove(0);
        }
    }

    pub fn observation(&self) -> Observation {
        assert_eq!(self.frames.len(), self.history, "frame stack not filled");
        let c = self.frame_shape[0];
        let (h, w) = (self.frame_shape[1], self.frame_shape[2]);
        let mut data = Vec::with_capacity(self.history * c * h * w);
        for f in &self.frames {
            data.extend(preprocess_bytes(f));
        }
        Observation {
            tensor: Tensor::new(vec![self.history * c, h, w], data),
            frame: self.frames.last().unwrap().clone(),
        }
    }

    /// Stack an arbitrary window of raw frames (oldest first) into an
    /// observation tensor; used when reconstructing states from a replay.
    pub fn stack_frames(frames: &[&[u8]], frame_shape: &[usize]) -> Tensor {
        let c = frame_shape[0];
        let (h, w) = (frame_shape[1], frame_shape[2]);
        let mut data = Vec::with_capacity(frames.len() * c * h * w);
        for f in frames {
            data.extend(preprocess_bytes(f));
        }
        Tensor::new(vec![frames.len() * c, h, w], data)
    }
}

/// Environment construction parameters shared by the built-in tasks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub item_count: usize,
    pub history_length: usize,
    pub action_repeat: usize,
    /// Episode length in raw frames (ticks).
    pub episode_frame_limit: usize,
    pub no_op_max: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_size: 8,
            item_count: 3,
            history_length: 4,
            action_repeat: 4,
            episode_frame_limit: 200,
            no_op_max: 30,
        }
    }
}

type TaskFactory = Box<dyn Fn(&EnvConfig, SeedStream) -> Box<dyn Environment>>;

/// String-keyed task registry. The built-ins are `chase`, `avoid` and
/// `collect`; extensions can be registered under new ids.
pub struct TaskRegistry {
    factories: BTreeMap<String, TaskFactory>,
}

impl TaskRegistry {
    /// Registry with the built-in gridworld tasks.
    pub fn builtin() -> Self {
        let mut reg = TaskRegistry { factories: BTreeMap::new() };
        for kind in [GridTaskKind::Chase, GridTaskKind::Avoid, GridTaskKind::Collect] {
            reg.register(kind.id(), move |cfg, seed| {
                Box::new(GridEnv::new(kind, cfg.clone(), seed)) as Box<dyn Environment>
            });
        }
        reg
    }

    pub fn register(
        &mut self,
        id: &str,
        factory: impl Fn(&EnvConfig, SeedStream) -> Box<dyn Environment> + 'static,
    ) {
        self.factories.insert(id.to_string(), Box::new(factory));
    }

    pub fn contains(&self, id: &str) -> bool {
        self.factories.contains_key(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    /// Build a task environment at its initial state (no-op randomisation
    /// applied). Unknown ids are a configuration error.
    pub fn make_task(&self, id: &str, cfg: &EnvConfig, seed: SeedStream) -> Result<Box<dyn Environment>> {
        let factory = self
            .factories
            .get(id)
            .ok_or_else(|| Error::config(format!("unknown task id '{id}'")))?;
        let mut env = factory(cfg, seed);
        env.reset()?;
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_endpoints_and_midpoint() {
        let t = Tensor::from_vec(vec![0.0, 255.0, 127.5]);
        let p = preprocess(&t).unwrap();
        assert_eq!(p.data()[0], -1.0);
        assert_eq!(p.data()[1], 1.0);
        assert!(p.data()[2].abs() < 1e-15);
    }

    #[test]
    fn preprocess_rejects_out_of_range() {
        let t = Tensor::from_vec(vec![-1.0]);
        assert!(matches!(preprocess(&t), Err(Error::Contract(_))));
        let t = Tensor::from_vec(vec![256.0]);
        assert!(preprocess(&t).is_err());
    }

    #[test]
    fn preprocess_roundtrip_recovers_input() {
        use rand::Rng as _;
        let mut rng = SeedStream::new(1).rng();
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..=255.0)).collect();
        let t = Tensor::from_vec(vals.clone());
        let back = preprocess(&t).unwrap().map(derescale);
        for (a, b) in back.data().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_task_is_a_config_error() {
        let reg = TaskRegistry::builtin();
        match reg.make_task("pong", &EnvConfig::default(), SeedStream::new(0)) {
            Err(Error::Config(_)) => {}
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("unknown task should not build"),
        }
    }

    #[test]
    fn frame_stack_shapes() {
        let mut fs = FrameStack::new(2, vec![1, 2, 2]);
        fs.fill(vec![0, 255, 0, 255]);
        fs.push(vec![255, 0, 255, 0]);
        let obs = fs.observation();
        assert_eq!(obs.tensor.shape(), &[2, 2, 2]);
        assert_eq!(obs.frame, vec![255, 0, 255, 0]);
        assert_eq!(obs.tensor.data()[0], -1.0);
        assert_eq!(obs.tensor.data()[4], 1.0);
    }
}
