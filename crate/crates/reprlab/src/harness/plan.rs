//! Experiment plans: the declarative description of a task sequence,
//! condition and every hyperparameter, parsed from TOML with unknown keys
//! rejected and all defaults resolved by profile.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::ConditionId;
use crate::consolidation::ConsolidationConfig;
use crate::dqn::{EpsilonSchedule, StmConfig};
use crate::engine::{LayerSpec, NetworkSpec};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::genreplay::GanConfig;

/// Hyperparameter family: desk-scale defaults for the built-in tasks, or
/// the full-scale table values kept as a documentation profile. The
/// full-scale profile parses and validates but has no runnable
/// environment behind it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Atari,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwcSettings {
    pub lambda: f64,
    pub fisher_batches: usize,
    pub fisher_batch_size: usize,
    pub beta: f64,
}

impl Default for EwcSettings {
    fn default() -> Self {
        EwcSettings {
            lambda: crate::baselines::EWC_LAMBDA_DEFAULT,
            fisher_batches: 100,
            fisher_batch_size: 32,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineEwcSettings {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for OnlineEwcSettings {
    fn default() -> Self {
        OnlineEwcSettings {
            lambda: crate::baselines::ONLINE_EWC_LAMBDA_DEFAULT,
            gamma: crate::baselines::ONLINE_EWC_GAMMA_DEFAULT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Evaluation cadence as a fraction of each phase's frame budget.
    pub fraction: f64,
    pub episodes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { fraction: 0.05, episodes: 30 }
    }
}

/// Alpha override taking effect from a task index onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaStep {
    pub from_task: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetProfiles {
    pub dqn: NetworkSpec,
    pub gan_generator: NetworkSpec,
    pub gan_discriminator: NetworkSpec,
}

/// Fully resolved plan: every hyperparameter concrete, serialisable for
/// provenance. `serialize(parse(x))` parses back to an equal plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub tasks: Vec<String>,
    pub condition: ConditionId,
    pub profile: Profile,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub env: EnvConfig,
    pub stm: StmConfig,
    pub gan: GanConfig,
    pub consolidation: ConsolidationConfig,
    pub ewc: EwcSettings,
    pub online_ewc: OnlineEwcSettings,
    pub eval: EvalSettings,
    pub pseudo_buffer_size: usize,
    pub alpha_schedule: Vec<AlphaStep>,
    pub fisher_analysis: bool,
    pub nets: NetProfiles,
}

/// On-disk plan shape: everything optional except the task list, with
/// profile defaults filled in by [`parse_plan`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    tasks: Vec<String>,
    condition: Option<String>,
    profile: Option<Profile>,
    seeds: Option<Vec<u64>>,
    out_dir: Option<String>,
    env: Option<EnvConfig>,
    stm: Option<StmConfig>,
    gan: Option<GanConfig>,
    consolidation: Option<ConsolidationConfig>,
    ewc: Option<EwcSettings>,
    online_ewc: Option<OnlineEwcSettings>,
    eval: Option<EvalSettings>,
    pseudo_buffer_size: Option<usize>,
    alpha_schedule: Option<Vec<AlphaStep>>,
    fisher_analysis: Option<bool>,
    nets: Option<NetProfiles>,
}

/// Desk-scale Q-network for the built-in observation space.
pub fn desk_dqn_net(env: &EnvConfig, actions: usize) -> NetworkSpec {
    let c = env.history_length * 3;
    let g = env.grid_size;
    NetworkSpec::new(
        vec![c, g, g],
        vec![
            LayerSpec::Conv2d { filters: 8, kernel: [3, 3], stride: [1, 1], padding: [1, 1] },
            LayerSpec::Relu,
            LayerSpec::Conv2d { filters: 16, kernel: [3, 3], stride: [2, 2], padding: [1, 1] },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 96, out_shape: None },
            LayerSpec::Relu,
            LayerSpec::Dense { units: actions, out_shape: None },
        ],
    )
}

/// Desk-scale generator: latent 100 to the stacked observation tensor,
/// deconvolution stack with batch-norm, tanh output.
pub fn desk_generator_net(env: &EnvConfig, latent: usize) -> NetworkSpec {
    let c = env.history_length * 3;
    NetworkSpec::new(
        vec![latent],
        vec![
            LayerSpec::Dense { units: 64 * 2 * 2, out_shape: Some(vec![64, 2, 2]) },
            LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 },
            LayerSpec::Relu,
            LayerSpec::Deconv2d { filters: 32, kernel: [4, 4], stride: [2, 2], padding: [1, 1], output_padding: [0, 0] },
            LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 },
            LayerSpec::Relu,
            LayerSpec::Deconv2d { filters: c, kernel: [4, 4], stride: [2, 2], padding: [1, 1], output_padding: [0, 0] },
            LayerSpec::Tanh,
        ],
    )
}

/// Desk-scale critic: convolutions with leaky-relu, linear output.
pub fn desk_discriminator_net(env: &EnvConfig) -> NetworkSpec {
    let c = env.history_length * 3;
    let g = env.grid_size;
    NetworkSpec::new(
        vec![c, g, g],
        vec![
            LayerSpec::Conv2d { filters: 16, kernel: [4, 4], stride: [2, 2], padding: [1, 1] },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Conv2d { filters: 32, kernel: [4, 4], stride: [2, 2], padding: [1, 1] },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Dense { units: 1, out_shape: None },
        ],
    )
}

/// The full-scale Q-network (18 actions, 4x84x84 input).
pub fn atari_dqn_net() -> NetworkSpec {
    NetworkSpec::new(
        vec![4, 84, 84],
        vec![
            LayerSpec::Conv2d { filters: 32, kernel: [8, 8], stride: [4, 4], padding: [0, 0] },
            LayerSpec::Relu,
            LayerSpec::Conv2d { filters: 64, kernel: [4, 4], stride: [2, 2], padding: [0, 0] },
            LayerSpec::Relu,
            LayerSpec::Conv2d { filters: 64, kernel: [3, 3], stride: [1, 1], padding: [0, 0] },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 512, out_shape: None },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 18, out_shape: None },
        ],
    )
}

/// The full-scale generator (latent 100 to 4x84x84).
pub fn atari_generator_net() -> NetworkSpec {
    NetworkSpec::new(
        vec![100],
        vec![
            LayerSpec::Dense { units: 256 * 7 * 7, out_shape: Some(vec![256, 7, 7]) },
            LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 },
            LayerSpec::Relu,
            LayerSpec::Deconv2d { filters: 256, kernel: [5, 5], stride: [3, 3], padding: [2, 2], output_padding: [2, 2] },
            LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 },
            LayerSpec::Relu,
            LayerSpec::Deconv2d { filters: 128, kernel: [5, 5], stride: [2, 2], padding: [2, 2], output_padding: [1, 1] },
            LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 },
            LayerSpec::Relu,
            LayerSpec::Deconv2d { filters: 64, kernel: [5, 5], stride: [2, 2], padding: [2, 2], output_padding: [1, 1] },
            LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 },
            LayerSpec::Relu,
            LayerSpec::Deconv2d { filters: 4, kernel: [5, 5], stride: [1, 1], padding: [2, 2], output_padding: [0, 0] },
            LayerSpec::Tanh,
        ],
    )
}

/// The full-scale critic.
pub fn atari_discriminator_net() -> NetworkSpec {
    NetworkSpec::new(
        vec![4, 84, 84],
        vec![
            LayerSpec::Conv2d { filters: 64, kernel: [5, 5], stride: [3, 3], padding: [2, 2] },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Conv2d { filters: 128, kernel: [5, 5], stride: [2, 2], padding: [2, 2] },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Conv2d { filters: 256, kernel: [5, 5], stride: [2, 2], padding: [2, 2] },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Dense { units: 1, out_shape: None },
        ],
    )
}

fn profile_defaults(profile: Profile, env: &EnvConfig) -> (StmConfig, GanConfig, ConsolidationConfig, usize, NetProfiles) {
    match profile {
        Profile::Desk => (
            StmConfig::default(),
            GanConfig::default(),
            ConsolidationConfig { action_repeat: env.action_repeat, ..Default::default() },
            20_000,
            NetProfiles {
                dqn: desk_dqn_net(env, crate::envs::grid::ACTION_COUNT),
                gan_generator: desk_generator_net(env, GanConfig::default().latent_dim),
                gan_discriminator: desk_discriminator_net(env),
            },
        ),
        Profile::Atari => (
            StmConfig {
                frames: 20_000_000,
                replay_capacity_frames: 200_000,
                replay_start_frames: 50_000,
                target_update_frames: 5_000,
                update_frequency: 4,
                batch_size: 32,
                gamma: 0.99,
                epsilon: EpsilonSchedule { initial: 1.0, final_value: 0.1, final_frame: 1_000_000, eval: 0.05 },
                optimizer: Default::default(),
                max_grad_norm: 10.0,
                score_window_frames: 250_000,
                init_std: 0.01,
            },
            GanConfig { steps: 200_000, batch_size: 100, ..Default::default() },
            ConsolidationConfig {
                frames: 20_000_000,
                loss_window_frames: 250_000,
                action_repeat: 4,
                ..Default::default()
            },
            250_000,
            NetProfiles {
                dqn: atari_dqn_net(),
                gan_generator: atari_generator_net(),
                gan_discriminator: atari_discriminator_net(),
            },
        ),
    }
}

/// Parse and fully resolve a plan from TOML text. Unknown keys, bad
/// ranges and inconsistent network shapes are configuration errors.
pub fn parse_plan(text: &str) -> Result<ExperimentPlan> {
    let file: PlanFile = toml::from_str(text).map_err(|e| Error::config(format!("plan parse error: {e}")))?;
    resolve_plan(file)
}

pub fn load_plan(path: &Path) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path)?;
    parse_plan(&text)
}

/// Serialise a resolved plan (full provenance echo).
pub fn serialize_plan(plan: &ExperimentPlan) -> Result<String> {
    toml::to_string_pretty(plan).map_err(|e| Error::format(format!("plan serialise error: {e}")))
}

fn resolve_plan(file: PlanFile) -> Result<ExperimentPlan> {
    if file.tasks.is_empty() {
        return Err(Error::config("plan needs a non-empty task list"));
    }
    let profile = file.profile.unwrap_or(Profile::Desk);
    let env = file.env.unwrap_or_default();
    let (stm_d, gan_d, cons_d, pseudo_d, nets_d) = profile_defaults(profile, &env);
    let condition = match &file.condition {
        Some(c) => ConditionId::parse(c)?,
        None => ConditionId::Repr,
    };
    let plan = ExperimentPlan {
        out_dir: file.out_dir.unwrap_or_else(|| format!("runs/{}", condition.as_str())),
        tasks: file.tasks,
        condition,
        profile,
        seeds: file.seeds.unwrap_or_else(|| vec![1]),
        env,
        stm: file.stm.unwrap_or(stm_d),
        gan: file.gan.unwrap_or(gan_d),
        consolidation: file.consolidation.unwrap_or(cons_d),
        ewc: file.ewc.unwrap_or_default(),
        online_ewc: file.online_ewc.unwrap_or_default(),
        eval: file.eval.unwrap_or_default(),
        pseudo_buffer_size: file.pseudo_buffer_size.unwrap_or(pseudo_d),
        alpha_schedule: file.alpha_schedule.unwrap_or_default(),
        fisher_analysis: file.fisher_analysis.unwrap_or(false),
        nets: file.nets.unwrap_or(nets_d),
    };
    validate_plan(&plan)?;
    Ok(plan)
}

pub fn validate_plan(plan: &ExperimentPlan) -> Result<()> {
    if plan.tasks.is_empty() {
        return Err(Error::config("plan needs a non-empty task list"));
    }
    if plan.seeds.is_empty() {
        return Err(Error::config("plan needs at least one seed"));
    }
    if plan.stm.frames == 0 || plan.consolidation.frames == 0 {
        return Err(Error::config("frame budgets must be positive"));
    }
    let alpha = plan.consolidation.alpha;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("consolidation alpha must lie in (0, 1), got {alpha}")));
    }
    for step in &plan.alpha_schedule {
        if !(step.alpha > 0.0 && step.alpha < 1.0) {
            return Err(Error::config(format!("alpha schedule entry {} out of (0, 1)", step.alpha)));
        }
    }
    if !(plan.eval.fraction > 0.0 && plan.eval.fraction <= 1.0) {
        return Err(Error::config("eval fraction must lie in (0, 1]"));
    }
    if plan.eval.episodes == 0 {
        return Err(Error::config("eval episodes must be positive"));
    }
    if plan.online_ewc.gamma >= 1.0 {
        return Err(Error::config("online-EWC gamma must be < 1"));
    }
    if plan.pseudo_buffer_size == 0 && plan.condition.needs_gan() && plan.tasks.len() > 1 {
        return Err(Error::config("pseudo buffer size must be positive for generative conditions"));
    }

    // Network geometry must be self-consistent.
    plan.nets.dqn.shapes().map_err(|e| Error::config(format!("dqn net: {e}")))?;
    let gen_out = plan.nets.gan_generator.output_shape().map_err(|e| Error::config(format!("generator: {e}")))?;
    plan.nets.gan_discriminator.shapes().map_err(|e| Error::config(format!("discriminator: {e}")))?;
    if gen_out != plan.nets.gan_discriminator.input {
        return Err(Error::config(format!(
            "generator output {:?} does not match discriminator input {:?}",
            gen_out, plan.nets.gan_discriminator.input
        )));
    }
    if plan.nets.gan_generator.input != vec![plan.gan.latent_dim] {
        return Err(Error::config(format!(
            "generator input {:?} does not match latent dim {}",
            plan.nets.gan_generator.input, plan.gan.latent_dim
        )));
    }
    // Desk profile must additionally match the built-in observation space.
    if plan.profile == Profile::Desk {
        let obs = vec![plan.env.history_length * 3, plan.env.grid_size, plan.env.grid_size];
        if plan.nets.dqn.input != obs {
            return Err(Error::config(format!(
                "dqn input {:?} does not match the task observation shape {:?}",
                plan.nets.dqn.input, obs
            )));
        }
        if gen_out != obs {
            return Err(Error::config(format!(
                "generator output {:?} does not match the task observation shape {:?}",
                gen_out, obs
            )));
        }
    }
    Ok(())
}

/// Alpha in effect while consolidating `task_idx` (0-based), honouring the
/// schedule overrides.
pub fn alpha_for_task(plan: &ExperimentPlan, task_idx: usize) -> f64 {
    let mut alpha = plan.consolidation.alpha;
    for step in &plan.alpha_schedule {
        if task_idx >= step.from_task {
            alpha = step.alpha;
        }
    }
    alpha
}
