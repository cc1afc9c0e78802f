//! Ring-buffer experience replay over raw byte frames.
//!
//! One slot per decision: the frame observed after the action, plus the
//! action, the summed reward and the terminal flag of the decision that
//! produced it. Observations are reconstructed at sampling time by
//! stacking the trailing `history` frames, repeating the episode's first
//! frame across a boundary exactly the way the live pipeline does.
//!
//! The buffer only ever holds data from the current task: the trainer
//! builds a fresh one per task.

use rand::Rng as _;
use std::io::{Read, Write};

use crate::engine::Tensor;
use crate::envs::FrameStack;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
struct Slot {
    frame: Vec<u8>,
    action: u8,
    reward: f64,
    terminal: bool,
    /// True for the first frame of an episode (no action produced it).
    episode_start: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    frame_shape: Vec<usize>,
    history: usize,
    /// Raw-frame capacity as configured (entries = frames / action_repeat).
    capacity_frames: usize,
    action_repeat: usize,
    slots: Vec<Slot>,
    cursor: usize,
    len: usize,
    /// Monotone count of pushes, to age-gate sampling windows.
    pushed: u64,
}

/// One sampled transition with reconstructed stacked observations.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Tensor,
    pub action: usize,
    pub reward: f64,
    pub terminal: bool,
    pub next_state: Tensor,
}

impl ReplayBuffer {
    pub fn new(capacity_frames: usize, action_repeat: usize, history: usize, frame_shape: Vec<usize>) -> Self {
        let entries = (capacity_frames / action_repeat).max(history + 1);
        ReplayBuffer {
            frame_shape,
            history,
            capacity_frames,
            action_repeat,
            slots: Vec::with_capacity(entries),
            cursor: 0,
            len: 0,
            pushed: 0,
        }
    }

    pub fn capacity_entries(&self) -> usize {
        (self.capacity_frames / self.action_repeat).max(self.history + 1)
    }

    pub fn capacity_frames(&self) -> usize {
        self.capacity_frames
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    pub fn history(&self) -> usize {
        self.history
    }

    fn push_slot(&mut self, slot: Slot) {
        let cap = self.capacity_entries();
        if self.slots.len() < cap {
            self.slots.push(slot);
        } else {
            self.slots[self.cursor] = slot;
        }
        self.cursor = (self.cursor + 1) % cap;
        self.len = self.slots.len();
        self.pushed += 1;
    }

    /// Record the first observation of a new episode.
    pub fn push_reset(&mut self, frame: Vec<u8>) {
        self.push_slot(Slot { frame, action: 0, reward: 0.0, terminal: false, episode_start: true });
    }

    /// Record one decision: the action taken, the reward it earned, the
    /// terminal flag, and the frame observed afterwards.
    pub fn push(&mut self, frame: Vec<u8>, action: usize, reward: f64, terminal: bool) {
        self.push_slot(Slot { frame, action: action as u8, reward, terminal, episode_start: false });
    }

    /// Physical index of the slot written `age` pushes ago (age 0 = newest).
    fn index_back(&self, age: usize) -> usize {
        let cap = self.capacity_entries();
        (self.cursor + cap - 1 - age) % cap
    }

    /// Stacked observation ending at the slot `age` pushes back.
    fn stack_ending_at(&self, age: usize) -> Tensor {
        let mut window: Vec<&[u8]> = Vec::with_capacity(self.history);
        let mut frames_back: Vec<usize> = Vec::with_capacity(self.history);
        let mut a = age;
        for _ in 0..self.history {
            frames_back.push(a);
            if self.slots[self.index_back(a)].episode_start || a + 1 >= self.len {
                break; // pad with the episode's first frame
            }
            a += 1;
        }
        while frames_back.len() < self.history {
            frames_back.push(*frames_back.last().unwrap());
        }
        for &b in frames_back.iter().rev() {
            window.push(&self.slots[self.index_back(b)].frame);
        }
        FrameStack::stack_frames(&window, &self.frame_shape)
    }

    /// Ages eligible as transition anchors: the slot must carry an action
    /// and both observation windows must stay inside the stored region.
    fn valid_transition_ages(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if self.len < self.history + 1 {
            return out;
        }
        for age in 0..self.len - self.history {
            let slot = &self.slots[self.index_back(age)];
            if !slot.episode_start {
                out.push(age);
            }
        }
        out
    }

    /// Uniform sample of `batch` transitions. Contract error when empty.
    pub fn sample_transitions(&self, batch: usize, rng: &mut Rng) -> Result<Vec<Transition>> {
        let valid = self.valid_transition_ages();
        if valid.is_empty() {
            return Err(Error::contract("replay buffer has no sampleable transitions"));
        }
        Ok((0..batch)
            .map(|_| {
                let age = valid[rng.random_range(0..valid.len())];
                self.transition_at_age(age)
            })
            .collect())
    }

    fn transition_at_age(&self, age: usize) -> Transition {
        let slot = &self.slots[self.index_back(age)];
        Transition {
            state: self.stack_ending_at(age + 1),
            action: slot.action as usize,
            reward: slot.reward,
            terminal: slot.terminal,
            next_state: self.stack_ending_at(age),
        }
    }

    /// Uniform sample of stacked observations (for distillation and the
    /// generative model, where no action pairing is needed).
    pub fn sample_states(&self, batch: usize, rng: &mut Rng) -> Result<Vec<Tensor>> {
        if self.len < self.history {
            return Err(Error::contract("replay buffer has too few frames for a state"));
        }
        let max_age = self.len - self.history;
        Ok((0..batch).map(|_| self.stack_ending_at(rng.random_range(0..=max_age))).collect())
    }

    /// Deterministic full pass over sampleable states (oldest to newest).
    pub fn iter_states(&self) -> impl Iterator<Item = Tensor> + '_ {
        let max_age = self.len.saturating_sub(self.history);
        (0..=max_age).rev().map(move |age| self.stack_ending_at(age))
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"RPRB")?;
        w.write_all(&1u16.to_le_bytes())?;
        for v in [
            self.frame_shape[0] as u64,
            self.frame_shape[1] as u64,
            self.frame_shape[2] as u64,
            self.history as u64,
            self.capacity_frames as u64,
            self.action_repeat as u64,
            self.cursor as u64,
            self.len as u64,
            self.pushed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for slot in &self.slots {
            w.write_all(&[slot.action, slot.terminal as u8, slot.episode_start as u8])?;
            w.write_all(&slot.reward.to_le_bytes())?;
            w.write_all(&slot.frame)?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"RPRB" {
            return Err(Error::format("not a replay buffer file"));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        if u16::from_le_bytes(b2) != 1 {
            return Err(Error::format("unsupported replay version"));
        }
        let mut vals = [0u64; 9];
        for v in &mut vals {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            *v = u64::from_le_bytes(b8);
        }
        let frame_shape = vec![vals[0] as usize, vals[1] as usize, vals[2] as usize];
        let frame_len: usize = frame_shape.iter().product();
        let mut buf = ReplayBuffer {
            frame_shape,
            history: vals[3] as usize,
            capacity_frames: vals[4] as usize,
            action_repeat: vals[5] as usize,
            slots: Vec::new(),
            cursor: vals[6] as usize,
            len: vals[7] as usize,
            pushed: vals[8],
        };
        for _ in 0..buf.len {
            let mut hdr = [0u8; 3];
            r.read_exact(&mut hdr)?;
            let mut rew = [0u8; 8];
            r.read_exact(&mut rew)?;
            let mut frame = vec![0u8; frame_len];
            r.read_exact(&mut frame)?;
            buf.slots.push(Slot {
                frame,
                action: hdr[0],
                reward: f64::from_le_bytes(rew),
                terminal: hdr[1] != 0,
                episode_start: hdr[2] != 0,
            });
        }
        Ok(buf)
    }

    /// Approximate persisted size in bytes (used for memory accounting).
    pub fn byte_size(&self) -> usize {
        let frame_len: usize = self.frame_shape.iter().product();
        4 + 2 + 9 * 8 + self.len * (3 + 8 + frame_len)
    }
}
