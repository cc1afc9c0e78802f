//! Sequential-protocol execution: per task, short-term training, long-term
//! consolidation under the selected condition, then generative-model
//! training where the condition needs one. Runs are resumable from the
//! last completed phase, and every phase draws its randomness from seeds
//! derived solely from (master seed, task index, phase name), which is
//! what makes a resumed run bit-identical to an uninterrupted one.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{overlap_report, OverlapReport};
use crate::baselines::{
    ewc_penalty_graph, fisher_from_replay, online_ewc_update, reh_limit_budget_items, ConditionId,
    EwcAnchor, FisherDiagonal,
};
use crate::consolidation::{
    make_pseudo_items, train_ltm, ConsolidationConfig, ConsolidationMode, PseudoItem, Retention,
};
use crate::dqn::{evaluate, mean_std, train_stm, AuxLoss, ReplayBuffer};
use crate::engine::checkpoint::{load_params, save_params, Precision};
use crate::engine::{NetworkParams, Tensor};
use crate::envs::{EnvConfig, Environment, TaskRegistry};
use crate::error::{Error, Result};
use crate::genreplay::{generate_pseudo_buffer, train_gan, GanPair, PseudoBuffer};
use crate::harness::metrics::{retain_completed_phases, MetricRow, MetricsLog};
use crate::harness::plan::{alpha_for_task, serialize_plan, ExperimentPlan};
use crate::rng::SeedStream;

/// Thread cap for the few parallelisable internals, from REPRLAB_THREADS.
pub fn configured_threads() -> usize {
    if let Ok(v) = std::env::var("REPRLAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get().min(4)).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Stm,
    Ltm,
    Gan,
}

impl PhaseKind {
    fn as_str(&self) -> &'static str {
        match self {
            PhaseKind::Stm => "stm",
            PhaseKind::Ltm => "ltm",
            PhaseKind::Gan => "gan",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PhaseDef {
    pub kind: PhaseKind,
    pub task_idx: usize,
}

/// Phase schedule for a plan. The single-network condition has no
/// separate consolidation phase: retention rides inside its Q-learning.
pub fn phases_for(plan: &ExperimentPlan) -> Vec<PhaseDef> {
    let mut out = Vec::new();
    for i in 0..plan.tasks.len() {
        out.push(PhaseDef { kind: PhaseKind::Stm, task_idx: i });
        if plan.condition != ConditionId::Pr {
            out.push(PhaseDef { kind: PhaseKind::Ltm, task_idx: i });
        }
        if plan.condition.needs_gan() {
            out.push(PhaseDef { kind: PhaseKind::Gan, task_idx: i });
        }
    }
    out
}

/// Raw-frame budget a phase contributes to the global counter.
pub fn phase_budget(plan: &ExperimentPlan, phase: &PhaseDef) -> u64 {
    match phase.kind {
        PhaseKind::Stm => plan.stm.frames,
        // The first consolidation is a weight copy.
        PhaseKind::Ltm => {
            if phase.task_idx == 0 {
                0
            } else {
                plan.consolidation.frames
            }
        }
        PhaseKind::Gan => 0,
    }
}

fn phase_id(plan: &ExperimentPlan, phase: &PhaseDef) -> String {
    format!("{}-{}", phase.kind.as_str(), plan.tasks[phase.task_idx])
}

/// Global frame count at the start of each phase, plus the final total.
pub fn frame_offsets(plan: &ExperimentPlan) -> (Vec<u64>, u64) {
    let mut offsets = Vec::new();
    let mut acc = 0u64;
    for phase in phases_for(plan) {
        offsets.push(acc);
        acc += phase_budget(plan, &phase);
    }
    (offsets, acc)
}

/// Frame counts at which one task hands over to the next (plot markers).
pub fn task_boundaries(plan: &ExperimentPlan) -> Vec<u64> {
    let phases = phases_for(plan);
    let (offsets, total) = frame_offsets(plan);
    let mut out = Vec::new();
    for i in 0..phases.len() {
        let last_of_task = i + 1 == phases.len() || phases[i + 1].task_idx != phases[i].task_idx;
        if last_of_task {
            let end = offsets.get(i + 1).copied().unwrap_or(total);
            out.push(end);
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    fingerprint: String,
    completed: Vec<String>,
}

pub struct SeedPaths {
    pub seed_dir: PathBuf,
    pub state_dir: PathBuf,
    pub metrics: PathBuf,
    pub progress: PathBuf,
}

impl SeedPaths {
    pub fn new(out_dir: &Path, seed: u64) -> Self {
        let seed_dir = out_dir.join(format!("seed-{seed}"));
        SeedPaths {
            state_dir: seed_dir.join("state"),
            metrics: seed_dir.join("metrics.csv"),
            progress: seed_dir.join("progress.toml"),
            seed_dir,
        }
    }

    fn state(&self, name: &str) -> PathBuf {
        self.state_dir.join(name)
    }
}

fn plan_fingerprint(plan: &ExperimentPlan, seed: u64) -> String {
    let text = serialize_plan(plan).unwrap_or_default();
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Total bytes of persisted model/state artifacts for one seed.
pub fn state_bytes(paths: &SeedPaths) -> u64 {
    fn walk(dir: &Path, acc: &mut u64) {
        if let Ok(entries) = std::fs::read_dir(dir) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    walk(&p, acc);
                } else if let Ok(md) = e.metadata() {
                    *acc += md.len();
                }
            }
        }
    }
    let mut acc = 0;
    walk(&paths.state_dir, &mut acc);
    acc
}

/// Bytes of one stored rehearsal state at u8 stored precision.
pub fn stored_state_bytes(env: &EnvConfig) -> usize {
    env.history_length * 3 * env.grid_size * env.grid_size
}

// ---------------------------------------------------------------------
// Stored-state files for the memory-limited rehearsal condition.
// ---------------------------------------------------------------------

fn save_states_u8(path: &Path, items: &[Vec<u8>]) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"RPST");
    bytes.extend_from_slice(&(items.len() as u64).to_le_bytes());
    let item_len = items.first().map(|i| i.len()).unwrap_or(0);
    bytes.extend_from_slice(&(item_len as u64).to_le_bytes());
    for item in items {
        bytes.extend_from_slice(item);
    }
    atomic_write(path, &bytes)
}

fn load_states_u8(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[0..4] != b"RPST" {
        return Err(Error::format("not a stored-state file"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let item_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = 20 + i * item_len;
        out.push(bytes[start..start + item_len].to_vec());
    }
    Ok(out)
}

fn bytes_to_state(bytes: &[u8], env: &EnvConfig) -> Tensor {
    let c = env.history_length * 3;
    let data: Vec<f64> = bytes.iter().map(|&b| crate::envs::rescale(b as f64)).collect();
    Tensor::new(vec![c, env.grid_size, env.grid_size], data)
}

fn state_to_bytes(state: &Tensor) -> Vec<u8> {
    state.data().iter().map(|&v| crate::envs::derescale(v).round().clamp(0.0, 255.0) as u8).collect()
}

// ---------------------------------------------------------------------
// Seed-scoped run
// ---------------------------------------------------------------------

struct SeedRun<'a> {
    plan: &'a ExperimentPlan,
    seed: u64,
    paths: SeedPaths,
    registry: TaskRegistry,
    metrics: MetricsLog,
    log: std::fs::File,
}

impl<'a> SeedRun<'a> {
    fn root(&self) -> SeedStream {
        SeedStream::new(self.seed)
    }

    fn task_seed(&self, task_idx: usize) -> SeedStream {
        self.root().indexed(task_idx as u64)
    }

    fn note(&mut self, msg: &str) {
        let t = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(self.log, "t={t} {msg}");
    }

    fn row(&mut self, frames: u64, phase: &PhaseDef, metric: String, value: f64) {
        self.metrics.push(MetricRow {
            frames,
            phase: phase.kind.as_str().to_string(),
            task: self.plan.tasks[phase.task_idx].clone(),
            condition: self.plan.condition.as_str().to_string(),
            seed: self.seed,
            metric,
            value,
        });
    }

    fn make_env(&self, task_idx: usize, seed: SeedStream) -> Result<Box<dyn Environment>> {
        self.registry.make_task(&self.plan.tasks[task_idx], &self.plan.env, seed)
    }

    /// Evaluate `params` on every task up to `upto` (inclusive); emits
    /// eval rows at the given global frame count.
    fn eval_tasks(
        &mut self,
        params: &NetworkParams,
        upto: usize,
        frames: u64,
        phase: &PhaseDef,
        prefix: &str,
    ) -> Result<Vec<f64>> {
        let mut means = Vec::new();
        for t in 0..=upto {
            let eval_seed = self.task_seed(t).named("eval").indexed(frames);
            let mut env = self.make_env(t, eval_seed)?;
            let mut rng = eval_seed.named("policy").rng();
            let scores = evaluate(
                &self.plan.nets.dqn,
                params,
                env.as_mut(),
                self.plan.eval.episodes,
                self.plan.stm.epsilon.eval,
                &mut rng,
            )?;
            let (mean, std) = mean_std(&scores);
            let task_name = self.plan.tasks[t].clone();
            self.row(frames, phase, format!("{prefix}_mean/{task_name}"), mean);
            self.row(frames, phase, format!("{prefix}_std/{task_name}"), std);
            means.push(mean);
        }
        Ok(means)
    }

    // -- retention construction -----------------------------------------

    fn load_gan(&self) -> Result<GanPair> {
        Ok(GanPair {
            gen_spec: self.plan.nets.gan_generator.clone(),
            disc_spec: self.plan.nets.gan_discriminator.clone(),
            gen_params: load_params(&self.paths.state("gan-gen.ckpt"))?,
            disc_params: load_params(&self.paths.state("gan-disc.ckpt"))?,
            latent_dim: self.plan.gan.latent_dim,
        })
    }

    /// The per-task pseudo buffer: identical (same substream) whether
    /// requested by the consolidation phase or the generative phase.
    fn pseudo_buffer_for_task(&self, task_idx: usize) -> Result<PseudoBuffer> {
        let gan = self.load_gan()?;
        generate_pseudo_buffer(
            &gan,
            self.plan.pseudo_buffer_size,
            self.task_seed(task_idx).named("pseudo"),
            configured_threads(),
        )
    }

    fn rehearsal_items(&self, task_idx: usize, prev: &NetworkParams) -> Result<Vec<PseudoItem>> {
        let mut states: Vec<Tensor> = Vec::with_capacity(self.plan.pseudo_buffer_size);
        let mut rng = self.task_seed(task_idx).named("reh").rng();
        let mut replays = Vec::new();
        for k in 0..task_idx {
            let path = self.paths.state(&format!("rehearsal/task-{}.bin", self.plan.tasks[k]));
            let mut f = std::fs::File::open(&path)?;
            replays.push(ReplayBuffer::load(&mut f)?);
        }
        for j in 0..self.plan.pseudo_buffer_size {
            let k = j % task_idx.max(1);
            states.push(replays[k].sample_states(1, &mut rng)?.remove(0));
        }
        let buffer = PseudoBuffer { states, source_tag: "stored-replays".to_string() };
        make_pseudo_items(&self.plan.nets.dqn, prev, &buffer, 64)
    }

    fn reh_limit_items(&self, task_idx: usize, prev: &NetworkParams) -> Result<Vec<PseudoItem>> {
        let mut states = Vec::new();
        for k in 0..task_idx {
            let path = self.paths.state(&format!("rehearsal/task-{}.states", self.plan.tasks[k]));
            for bytes in load_states_u8(&path)? {
                states.push(bytes_to_state(&bytes, &self.plan.env));
            }
        }
        let buffer = PseudoBuffer { states, source_tag: "stored-limited".to_string() };
        make_pseudo_items(&self.plan.nets.dqn, prev, &buffer, 64)
    }

    fn reh_limit_budget(&self) -> usize {
        let gan_values = {
            let g = crate::engine::init_params(
                &self.plan.nets.gan_generator,
                0.0,
                &mut SeedStream::new(0).rng(),
            )
            .map(|p| p.num_values())
            .unwrap_or(0);
            let d = crate::engine::init_params(
                &self.plan.nets.gan_discriminator,
                0.0,
                &mut SeedStream::new(0).rng(),
            )
            .map(|p| p.num_values())
            .unwrap_or(0);
            g + d
        };
        reh_limit_budget_items(gan_values, Precision::F64.bytes_per_value(), stored_state_bytes(&self.plan.env))
    }

    fn load_anchors(&self, upto: usize) -> Result<Vec<EwcAnchor>> {
        let mut anchors = Vec::new();
        for k in 0..upto {
            let params = load_params(&self.paths.state(&format!("anchors/anchor-{k}.ckpt")))?;
            let diag = load_params(&self.paths.state(&format!("anchors/fisher-{k}.ckpt")))?;
            anchors.push(EwcAnchor {
                params,
                fisher: FisherDiagonal { diag, beta: self.plan.ewc.beta },
                task_index: k,
            });
        }
        Ok(anchors)
    }

    // -- phases ----------------------------------------------------------

    fn run_stm_phase(&mut self, phase: &PhaseDef, base_frames: u64) -> Result<()> {
        let i = phase.task_idx;
        let is_pr = self.plan.condition == ConditionId::Pr;
        let mut env = self.make_env(i, self.task_seed(i).named("env"))?;
        let eval_every = ((self.plan.stm.frames as f64 * self.plan.eval.fraction) as u64).max(1);

        // The single-network condition continues from its own weights and
        // rehearses recorded targets while it learns by Q-learning.
        let initial = if is_pr && i > 0 { Some(load_params(&self.paths.state("ltm.ckpt"))?) } else { None };
        let pseudo_items: Vec<PseudoItem> = if is_pr && i > 0 {
            let prev = initial.as_ref().unwrap();
            let buffer = self.pseudo_buffer_for_task(i)?;
            make_pseudo_items(&self.plan.nets.dqn, prev, &buffer, 64)?
        } else {
            Vec::new()
        };
        let alpha = alpha_for_task(self.plan, i);
        let mut aux_rng = self.task_seed(i).named("pr-aux").rng();
        let batch = self.plan.stm.batch_size;
        let dqn_spec = self.plan.nets.dqn.clone();
        let items_ref = &pseudo_items;
        let mut build = move |g: &crate::engine::Graph, bound: &crate::engine::BoundParams| {
            use rand::Rng as _;
            let batch_items: Vec<PseudoItem> =
                (0..batch).map(|_| items_ref[aux_rng.random_range(0..items_ref.len())].clone()).collect();
            crate::consolidation::pr_loss_graph(g, &dqn_spec, bound, &batch_items)
        };
        let aux = if is_pr && i > 0 {
            Some(AuxLoss { main_weight: alpha, aux_weight: 1.0 - alpha, build: &mut build })
        } else {
            None
        };

        // Progress hook: evaluate on the current task (and, for the
        // single-network condition, on everything seen so far).
        let mut rows: Vec<(u64, NetworkParams)> = Vec::new();
        let mut hook = |frames: u64, params: &NetworkParams| -> Result<()> {
            rows.push((frames, params.clone()));
            Ok(())
        };
        let outcome = train_stm(
            env.as_mut(),
            &self.plan.nets.dqn,
            &self.plan.stm,
            self.task_seed(i).named("stm"),
            initial,
            aux,
            Some(eval_every),
            Some(&mut hook),
        )?;
        for (frames, params) in rows {
            let global = base_frames + frames;
            if is_pr {
                self.eval_tasks(&params, i, global, phase, "eval")?;
            } else {
                self.eval_tasks(&params, i, global, phase, "stm_eval")?;
            }
        }
        for (w, score) in outcome.window_scores.iter().enumerate() {
            let frames = base_frames + (w as u64 + 1) * self.plan.stm.score_window_frames;
            self.row(frames.min(base_frames + self.plan.stm.frames), phase, "stm_window_score".to_string(), *score);
        }

        // Persist phase outputs.
        let mut replay_bytes = Vec::new();
        outcome.replay.save(&mut replay_bytes)?;
        atomic_write(&self.paths.state("replay.bin"), &replay_bytes)?;
        if is_pr {
            save_params(&self.paths.state("ltm.ckpt"), &outcome.best_params, Precision::F64)?;
            let end = base_frames + self.plan.stm.frames;
            let means = self.eval_tasks(&outcome.best_params, i, end, phase, "eval")?;
            self.row(end, phase, format!("ref_mean/{}", self.plan.tasks[i]), means[i]);
        } else {
            save_params(&self.paths.state("stm.ckpt"), &outcome.best_params, Precision::F64)?;
        }
        Ok(())
    }

    fn run_ltm_phase(&mut self, phase: &PhaseDef, base_frames: u64) -> Result<()> {
        let i = phase.task_idx;
        let stm_params = load_params(&self.paths.state("stm.ckpt"))?;
        let mut replay_file = std::fs::File::open(self.paths.state("replay.bin"))?;
        let replay = ReplayBuffer::load(&mut replay_file)?;
        let prev = if i > 0 { Some(load_params(&self.paths.state("ltm.ckpt"))?) } else { None };

        let mut cfg = ConsolidationConfig {
            alpha: alpha_for_task(self.plan, i),
            action_repeat: self.plan.env.action_repeat,
            ..self.plan.consolidation.clone()
        };
        if self.plan.condition == ConditionId::ReprPolicy {
            cfg.mode = ConsolidationMode::Policy;
        }

        let budget = phase_budget(self.plan, phase);
        let eval_every = ((budget as f64 * self.plan.eval.fraction) as u64).max(1);

        let items: Vec<PseudoItem>;
        let retention = match (self.plan.condition, prev.as_ref()) {
            (_, None) => Retention::None, // first-task copy rule
            (ConditionId::NoReh, _) => Retention::None,
            (ConditionId::Repr | ConditionId::ReprPolicy, Some(prev)) => {
                let buffer = self.pseudo_buffer_for_task(i)?;
                items = make_pseudo_items(&self.plan.nets.dqn, prev, &buffer, 64)?;
                Retention::Items(&items)
            }
            (ConditionId::Reh, Some(prev)) => {
                items = self.rehearsal_items(i, prev)?;
                Retention::Items(&items)
            }
            (ConditionId::RehLimit, Some(prev)) => {
                items = self.reh_limit_items(i, prev)?;
                Retention::Items(&items)
            }
            (ConditionId::Ewc, Some(_)) => {
                let anchors = self.load_anchors(i)?;
                return self.run_ltm_anchor_phase(phase, base_frames, stm_params, replay, prev.unwrap(), anchors, cfg, eval_every);
            }
            (ConditionId::OnlineEwc, Some(_)) => {
                let anchor = load_params(&self.paths.state("rolling-anchor.ckpt"))?;
                let diag = load_params(&self.paths.state("rolling-fisher.ckpt"))?;
                let fisher = FisherDiagonal { diag, beta: self.plan.ewc.beta };
                let anchors = vec![EwcAnchor { params: anchor, fisher, task_index: i - 1 }];
                return self.run_ltm_anchor_phase(phase, base_frames, stm_params, replay, prev.unwrap(), anchors, cfg, eval_every);
            }
            (ConditionId::Pr, _) => unreachable!("pr has no separate consolidation phase"),
        };

        self.finish_ltm(phase, base_frames, stm_params, replay, prev, retention, cfg, eval_every)
    }

    /// EWC-family consolidation: common tail with a penalty closure over
    /// the loaded anchors.
    #[allow(clippy::too_many_arguments)]
    fn run_ltm_anchor_phase(
        &mut self,
        phase: &PhaseDef,
        base_frames: u64,
        stm_params: NetworkParams,
        replay: ReplayBuffer,
        prev: NetworkParams,
        anchors: Vec<EwcAnchor>,
        cfg: ConsolidationConfig,
        eval_every: u64,
    ) -> Result<()> {
        let lambda = match self.plan.condition {
            ConditionId::Ewc => self.plan.ewc.lambda,
            ConditionId::OnlineEwc => self.plan.online_ewc.lambda,
            _ => unreachable!(),
        };
        let build = move |g: &crate::engine::Graph, bound: &crate::engine::BoundParams| {
            ewc_penalty_graph(g, bound, &anchors)
        };
        let retention = Retention::Penalty { build: &build, weight: lambda / 2.0 };
        self.finish_ltm(phase, base_frames, stm_params, replay, Some(prev), retention, cfg, eval_every)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_ltm(
        &mut self,
        phase: &PhaseDef,
        base_frames: u64,
        stm_params: NetworkParams,
        replay: ReplayBuffer,
        prev: Option<NetworkParams>,
        retention: Retention<'_>,
        cfg: ConsolidationConfig,
        eval_every: u64,
    ) -> Result<()> {
        let i = phase.task_idx;
        let mut eval_rows: Vec<(u64, NetworkParams)> = Vec::new();
        let mut step_rows: Vec<crate::consolidation::LtmStepStats> = Vec::new();
        let mut next_eval = eval_every;
        let mut hook = |frames_done: u64, params: &NetworkParams, stats: &crate::consolidation::LtmStepStats| {
            step_rows.push(*stats);
            if frames_done >= next_eval {
                eval_rows.push((frames_done, params.clone()));
                next_eval += eval_every;
            }
            Ok(())
        };
        let outcome = train_ltm(
            &self.plan.nets.dqn,
            &stm_params,
            &replay,
            prev.as_ref(),
            retention,
            &cfg,
            self.task_seed(i).named("ltm"),
            Some(&mut hook),
        )?;
        for (frames_done, params) in eval_rows {
            self.eval_tasks(&params, i, base_frames + frames_done, phase, "eval")?;
        }

        // Per-step consolidation log, one file per task.
        if !outcome.history.is_empty() {
            let mut text = String::from("step,distill,retention,combined,alpha,mode\n");
            let mode = match cfg.mode {
                ConsolidationMode::QValues => "q-values",
                ConsolidationMode::Policy => "policy",
            };
            for s in &outcome.history {
                writeln!(text, "{},{},{},{},{},{}", s.step, s.distill, s.retention, s.combined, cfg.alpha, mode)
                    .expect("string write");
            }
            atomic_write(
                &self.paths.seed_dir.join(format!("consolidation-{}.csv", self.plan.tasks[i])),
                text.as_bytes(),
            )?;
        }

        save_params(&self.paths.state("ltm.ckpt"), &outcome.params, Precision::F64)?;
        let end = base_frames + phase_budget(self.plan, phase);
        let means = self.eval_tasks(&outcome.params, i, end, phase, "eval")?;
        self.row(end, phase, format!("ref_mean/{}", self.plan.tasks[i]), means[i]);

        // Condition-specific bookkeeping at consolidation completion.
        match self.plan.condition {
            ConditionId::Ewc => {
                std::fs::create_dir_all(self.paths.state("anchors"))?;
                let fisher = fisher_from_replay(
                    &self.plan.nets.dqn,
                    &outcome.params,
                    &replay,
                    self.plan.ewc.fisher_batches,
                    self.plan.ewc.fisher_batch_size,
                    self.plan.ewc.beta,
                    self.task_seed(i).named("fisher"),
                )?;
                save_params(&self.paths.state(&format!("anchors/anchor-{i}.ckpt")), &outcome.params, Precision::F64)?;
                save_params(&self.paths.state(&format!("anchors/fisher-{i}.ckpt")), &fisher.diag, Precision::F64)?;
            }
            ConditionId::OnlineEwc => {
                let fisher = fisher_from_replay(
                    &self.plan.nets.dqn,
                    &outcome.params,
                    &replay,
                    self.plan.ewc.fisher_batches,
                    self.plan.ewc.fisher_batch_size,
                    self.plan.ewc.beta,
                    self.task_seed(i).named("fisher"),
                )?;
                let rolling_prev = if i > 0 {
                    Some(FisherDiagonal {
                        diag: load_params(&self.paths.state("rolling-fisher.ckpt"))?,
                        beta: self.plan.ewc.beta,
                    })
                } else {
                    None
                };
                let updated = online_ewc_update(rolling_prev.as_ref(), &fisher, self.plan.online_ewc.gamma)?;
                if updated.degenerate {
                    self.note(&format!("warning: constant fisher diagonal at task {i} normalised to zeros"));
                }
                save_params(&self.paths.state("rolling-fisher.ckpt"), &updated.fisher.diag, Precision::F64)?;
                save_params(&self.paths.state("rolling-anchor.ckpt"), &outcome.params, Precision::F64)?;
            }
            ConditionId::Reh => {
                std::fs::create_dir_all(self.paths.state("rehearsal"))?;
                let mut bytes = Vec::new();
                replay.save(&mut bytes)?;
                atomic_write(
                    &self.paths.state(&format!("rehearsal/task-{}.bin", self.plan.tasks[i])),
                    &bytes,
                )?;
            }
            ConditionId::RehLimit => {
                std::fs::create_dir_all(self.paths.state("rehearsal"))?;
                let budget = self.reh_limit_budget();
                self.row(end, phase, "reh_limit_budget_items".to_string(), budget as f64);
                let share = budget / (i + 1);
                // Shrink earlier tasks' shares, then store this task's.
                let mut rng = self.task_seed(i).named("reh-limit").rng();
                for k in 0..i {
                    let path = self.paths.state(&format!("rehearsal/task-{}.states", self.plan.tasks[k]));
                    let mut items = load_states_u8(&path)?;
                    if items.len() > share {
                        items = crate::baselines::subsample_items(&items, share, self.task_seed(i).named("shrink").indexed(k as u64));
                    }
                    save_states_u8(&path, &items)?;
                }
                let mut mine: Vec<Vec<u8>> = Vec::with_capacity(share);
                for _ in 0..share {
                    let s = replay.sample_states(1, &mut rng)?.remove(0);
                    mine.push(state_to_bytes(&s));
                }
                save_states_u8(
                    &self.paths.state(&format!("rehearsal/task-{}.states", self.plan.tasks[i])),
                    &mine,
                )?;
            }
            _ => {}
        }
        Ok(())
    }

    fn run_gan_phase(&mut self, phase: &PhaseDef, base_frames: u64) -> Result<()> {
        let i = phase.task_idx;
        let mut replay_file = std::fs::File::open(self.paths.state("replay.bin"))?;
        let replay = ReplayBuffer::load(&mut replay_file)?;
        let pseudo = if i > 0 { Some(self.pseudo_buffer_for_task(i)?) } else { None };
        let every = (self.plan.gan.steps / 20).max(1);
        let mut thin: Vec<(u64, f64, f64, f64)> = Vec::new();
        let mut hook = |step: u64, stats: &crate::genreplay::GanStepStats| {
            if step % every == 0 || step + 1 == self.plan.gan.steps {
                thin.push((step, stats.disc_loss, stats.gen_loss, (stats.d_real_mean - stats.d_fake_mean).abs()));
            }
            Ok(())
        };
        let outcome = train_gan(
            &self.plan.nets.gan_generator,
            &self.plan.nets.gan_discriminator,
            &replay,
            pseudo.as_ref(),
            i + 1,
            &self.plan.gan,
            self.task_seed(i).named("gan"),
            Some(&mut hook),
        )?;
        for (step, d, g, gap) in thin {
            self.row(base_frames, phase, format!("gan_disc_loss/{step}"), d);
            self.row(base_frames, phase, format!("gan_gen_loss/{step}"), g);
            self.row(base_frames, phase, format!("gan_gap/{step}"), gap);
        }
        save_params(&self.paths.state("gan-gen.ckpt"), &outcome.gan.gen_params, Precision::F64)?;
        save_params(&self.paths.state("gan-disc.ckpt"), &outcome.gan.disc_params, Precision::F64)?;
        Ok(())
    }

    /// Fisher overlap analysis on the final long-term network: per-task
    /// state samples collected by playing each task with the final policy.
    fn run_fisher_analysis(&mut self) -> Result<Vec<OverlapReport>> {
        let params = load_params(&self.paths.state("ltm.ckpt"))?;
        std::fs::create_dir_all(self.paths.state("fisher"))?;
        let sample = self.plan.ewc.fisher_batches * self.plan.ewc.fisher_batch_size;
        let mut fishers = Vec::new();
        for (k, task) in self.plan.tasks.clone().iter().enumerate() {
            let seed = self.root().named("analysis").indexed(k as u64);
            let mut env = self.make_env(k, seed)?;
            let mut rng = seed.named("policy").rng();
            let mut states = Vec::with_capacity(sample);
            let mut obs = env.reset()?;
            while states.len() < sample {
                states.push(obs.tensor.clone());
                let mut shape = vec![1];
                shape.extend(obs.tensor.shape());
                let q = crate::engine::forward_tensor(
                    &self.plan.nets.dqn,
                    &params,
                    &obs.tensor.reshaped(shape),
                    crate::engine::Mode::Infer,
                )?;
                let action = crate::dqn::select_action(&q, self.plan.stm.epsilon.eval, &mut rng);
                let out = env.step(action)?;
                if out.terminal {
                    obs = env.reset()?;
                } else {
                    obs = out.obs;
                }
            }
            let fisher = crate::baselines::fisher_diag(&self.plan.nets.dqn, &params, &states, self.plan.ewc.beta)?;
            save_params(&self.paths.state(&format!("fisher/task-{task}.ckpt")), &fisher.diag, Precision::F64)?;
            fishers.push((task.clone(), fisher));
        }

        let order = self.plan.tasks.join(">");
        let mut reports = Vec::new();
        let mut text = String::from("task_a,task_b,order,overlap\n");
        for a in 0..fishers.len() {
            for b in a + 1..fishers.len() {
                let report = overlap_report(&fishers[a].0, &fishers[a].1, &fishers[b].0, &fishers[b].1)?;
                writeln!(text, "{},{},{},{}", report.task_a, report.task_b, order, report.overlap)
                    .expect("string write");
                reports.push(report);
            }
        }
        atomic_write(&self.paths.seed_dir.join("overlap.csv"), text.as_bytes())?;
        Ok(reports)
    }
}

/// Outcome summary of one seed's run.
pub struct SeedSummary {
    pub seed: u64,
    pub seed_dir: PathBuf,
    pub overlaps: Vec<OverlapReport>,
}

/// Execute (or resume) one seed of a plan.
pub fn run_seed(plan: &ExperimentPlan, seed: u64, out_dir: &Path, resume: bool) -> Result<SeedSummary> {
    let paths = SeedPaths::new(out_dir, seed);
    std::fs::create_dir_all(&paths.state_dir)?;
    let fingerprint = plan_fingerprint(plan, seed);

    let mut completed: Vec<String> = Vec::new();
    if paths.progress.exists() {
        let text = std::fs::read_to_string(&paths.progress)?;
        let progress: Progress =
            toml::from_str(&text).map_err(|e| Error::format(format!("bad progress file: {e}")))?;
        if progress.fingerprint != fingerprint {
            return Err(Error::config(
                "run directory belongs to a different plan or seed; refusing to continue",
            ));
        }
        if !resume {
            return Err(Error::config(
                "run directory already contains a run; use `resume` to continue it",
            ));
        }
        completed = progress.completed;
        retain_completed_phases(&paths.metrics, &completed)?;
    } else {
        atomic_write(&paths.seed_dir.join("plan.resolved.toml"), serialize_plan(plan)?.as_bytes())?;
    }

    let log = std::fs::OpenOptions::new().create(true).append(true).open(paths.seed_dir.join("run.log"))?;
    let metrics = MetricsLog::open(paths.metrics.clone())?;
    let mut run = SeedRun { plan, seed, paths, registry: TaskRegistry::builtin(), metrics, log };

    let phases = phases_for(plan);
    let (offsets, _) = frame_offsets(plan);
    for (idx, phase) in phases.iter().enumerate() {
        let id = phase_id(plan, phase);
        if completed.contains(&id) {
            continue;
        }
        run.note(&format!("phase {id} start"));
        let started = std::time::Instant::now();
        let result = match phase.kind {
            PhaseKind::Stm => run.run_stm_phase(phase, offsets[idx]),
            PhaseKind::Ltm => run.run_ltm_phase(phase, offsets[idx]),
            PhaseKind::Gan => run.run_gan_phase(phase, offsets[idx]),
        };
        if let Err(e) = result {
            run.metrics.discard_pending();
            run.note(&format!("phase {id} failed: {e}"));
            // Machine-readable failure record; partial artifacts retained.
            let failure = format!("phase = \"{id}\"\nerror = \"{e}\"\n");
            let _ = atomic_write(&run.paths.seed_dir.join("failure.toml"), failure.as_bytes());
            return Err(e);
        }

        // Inventory at the end of each task's final phase.
        let last_of_task = idx + 1 == phases.len() || phases[idx + 1].task_idx != phase.task_idx;
        if last_of_task {
            let end = offsets.get(idx + 1).copied().unwrap_or_else(|| {
                let (_, total) = frame_offsets(plan);
                total
            });
            let bytes = state_bytes(&run.paths);
            run.row(end, phase, "artifact_bytes".to_string(), bytes as f64);
        }

        run.metrics.flush()?;
        completed.push(id.clone());
        let progress = Progress { fingerprint: fingerprint.clone(), completed: completed.clone() };
        let text = toml::to_string(&progress).map_err(|e| Error::format(format!("progress serialise: {e}")))?;
        atomic_write(&run.paths.progress, text.as_bytes())?;
        run.note(&format!("phase {id} done in {:.1}s", started.elapsed().as_secs_f64()));
    }

    let overlaps = if plan.fisher_analysis && !completed.contains(&"analysis-done".to_string()) {
        let reports = run.run_fisher_analysis()?;
        run.metrics.flush()?;
        completed.push("analysis-done".to_string());
        let progress = Progress { fingerprint, completed };
        let text = toml::to_string(&progress).map_err(|e| Error::format(format!("progress serialise: {e}")))?;
        atomic_write(&run.paths.progress, text.as_bytes())?;
        reports
    } else {
        Vec::new()
    };

    Ok(SeedSummary { seed, seed_dir: run.paths.seed_dir, overlaps })
}

/// Execute every seed of a plan sequentially.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path, resume: bool) -> Result<Vec<SeedSummary>> {
    crate::harness::plan::validate_plan(plan)?;
    std::fs::create_dir_all(out_dir)?;
    plan.seeds.iter().map(|&seed| run_seed(plan, seed, out_dir, resume)).collect()
}

/// Evaluate the persisted long-term network of a finished (or partial) run
/// on one task.
pub fn evaluate_run(out_dir: &Path, seed: u64, plan: &ExperimentPlan, task: &str, episodes: usize) -> Result<(f64, f64)> {
    let paths = SeedPaths::new(out_dir, seed);
    let params = load_params(&paths.state("ltm.ckpt"))?;
    let registry = TaskRegistry::builtin();
    let task_idx = plan
        .tasks
        .iter()
        .position(|t| t == task)
        .ok_or_else(|| Error::config(format!("task '{task}' not in plan")))?;
    let seed_stream = SeedStream::new(seed).indexed(task_idx as u64).named("cli-eval");
    let mut env = registry.make_task(task, &plan.env, seed_stream)?;
    let mut rng = seed_stream.named("policy").rng();
    let scores = evaluate(&plan.nets.dqn, &params, env.as_mut(), episodes, plan.stm.epsilon.eval, &mut rng)?;
    Ok(mean_std(&scores))
}
