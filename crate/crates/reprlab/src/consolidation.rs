//! Long-term consolidation: the student network is taught the new task by
//! distillation from the short-term teacher on real replay states, while
//! pseudo-rehearsal pins its outputs on generated states to the frozen
//! previous long-term network.
//!
//! Learning here is purely supervised: nothing in this module computes a
//! bootstrapped Q-target, and the teachers are never mutated.

use rand::Rng as _;

use crate::dqn::{stack_states, CheckpointSelector, ReplayBuffer};
use crate::engine::{
    clip_global_norm, forward_graph, forward_tensor, grads_as_params, log_softmax_rows, softmax_rows,
    BoundParams, Graph, Mode, NetworkParams, NetworkSpec, Optimizer, RmsPropConfig, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::genreplay::PseudoBuffer;
use crate::rng::SeedStream;

/// A generated state with the frozen previous network's recorded output.
#[derive(Debug, Clone)]
pub struct PseudoItem {
    pub state: Tensor,
    /// Q-vector of the previous long-term network on `state`.
    pub target_q: Vec<f64>,
}

/// How the retention targets combine with new-task teaching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsolidationMode {
    /// Match raw Q-vectors with squared error.
    QValues,
    /// Match softmax policies with cross-entropy (temperature 1).
    Policy,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    /// Trade-off between new-task distillation and retention, in (0, 1).
    pub alpha: f64,
    pub mode: ConsolidationMode,
    pub standardize_q: bool,
    /// Raw-frame budget; optimizer steps = frames / (repeat * update_freq).
    pub frames: u64,
    pub update_frequency: u64,
    pub action_repeat: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    pub max_grad_norm: f64,
    /// Window, in raw frames, for lowest-error checkpoint selection.
    pub loss_window_frames: u64,
    /// Minimum state sample for Q standardization.
    pub standardize_min_states: usize,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            alpha: 0.55,
            mode: ConsolidationMode::QValues,
            standardize_q: false,
            frames: 60_000,
            update_frequency: 4,
            action_repeat: 4,
            batch_size: 32,
            optimizer: RmsPropConfig::default(),
            max_grad_norm: 10.0,
            loss_window_frames: 6_000,
            standardize_min_states: 1_000,
        }
    }
}

/// Affine map applied to teacher Q-values before distillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QStandardization {
    pub shift: f64,
    pub scale: f64,
    pub clamped: bool,
}

impl QStandardization {
    pub fn identity() -> Self {
        QStandardization { shift: 0.0, scale: 1.0, clamped: false }
    }

    pub fn apply(&self, q: f64) -> f64 {
        (q - self.shift) / self.scale
    }
}

/// Mean/stdev standardization over a flat sample of Q-values. Zero
/// variance clamps the scale to 1 (flagged in the result).
pub fn standardize_q_values(qs: &[f64]) -> QStandardization {
    let n = qs.len().max(1) as f64;
    let shift = qs.iter().sum::<f64>() / n;
    let var = qs.iter().map(|q| (q - shift) * (q - shift)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        QStandardization { shift, scale: sd, clamped: false }
    } else {
        QStandardization { shift, scale: 1.0, clamped: true }
    }
}

/// Sample `>= min_states` states from the replay, evaluate the teacher,
/// and standardize over all its Q-values.
pub fn standardize_q(
    spec: &NetworkSpec,
    teacher: &NetworkParams,
    replay: &ReplayBuffer,
    min_states: usize,
    seed: SeedStream,
) -> Result<QStandardization> {
    let mut rng = seed.named("standardize").rng();
    let states = replay.sample_states(min_states, &mut rng)?;
    if states.len() < min_states {
        return Err(Error::contract(format!(
            "standardization needs at least {min_states} states"
        )));
    }
    let stacked = stack_states(states.iter())?;
    let q = forward_tensor(spec, teacher, &stacked, Mode::Infer)?;
    Ok(standardize_q_values(q.data()))
}

/// Distillation loss: per item the squared error summed over all actions
/// between the student and the (constant) teacher targets, batch-meaned.
pub fn distill_loss_graph(
    graph: &Graph,
    spec: &NetworkSpec,
    student: &BoundParams,
    states: &Tensor,
    teacher_q: &Tensor,
) -> Result<Var> {
    let (q, _) = forward_graph(spec, student, &graph.constant(states.clone()), Mode::Infer)?;
    let target = graph.constant(teacher_q.clone());
    Ok(q.sub(&target).square().row_sum().mean_all())
}

/// Pseudo-rehearsal loss: identical arithmetic against recorded targets.
pub fn pr_loss_graph(
    graph: &Graph,
    spec: &NetworkSpec,
    student: &BoundParams,
    items: &[PseudoItem],
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::contract("pr_loss on an empty batch"));
    }
    let states = stack_states(items.iter().map(|i| &i.state))?;
    let actions = items[0].target_q.len();
    let mut target = Vec::with_capacity(items.len() * actions);
    for item in items {
        if item.target_q.len() != actions {
            return Err(Error::contract("pseudo targets must share the action count"));
        }
        target.extend_from_slice(&item.target_q);
    }
    let (q, _) = forward_graph(spec, student, &graph.constant(states), Mode::Infer)?;
    let t = graph.constant(Tensor::new(vec![items.len(), actions], target));
    Ok(q.sub(&t).square().row_sum().mean_all())
}

/// Combined consolidation loss: `alpha * L_D + (1 - alpha) * L_PR` with
/// equal-size batches. Boundary alphas are rejected; the pure-distillation
/// ablation bypasses this operation entirely.
#[allow(clippy::too_many_arguments)]
pub fn ltm_loss_graph(
    graph: &Graph,
    spec: &NetworkSpec,
    student: &BoundParams,
    real_states: &Tensor,
    teacher_q: &Tensor,
    pseudo_batch: &[PseudoItem],
    alpha: f64,
) -> Result<Var> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie strictly inside (0, 1), got {alpha}")));
    }
    if real_states.shape()[0] != pseudo_batch.len() {
        return Err(Error::contract("real and pseudo batches must have equal size"));
    }
    let ld = distill_loss_graph(graph, spec, student, real_states, teacher_q)?;
    let lpr = pr_loss_graph(graph, spec, student, pseudo_batch)?;
    Ok(ld.scale(alpha).add(&lpr.scale(1.0 - alpha)))
}

/// Cross-entropy between the softmaxed teacher targets (constants) and the
/// student's softmax, batch-meaned. Used both for teaching (teacher = the
/// short-term network) and retention (teacher = the previous long-term
/// network).
pub fn policy_distill_loss_graph(
    graph: &Graph,
    spec: &NetworkSpec,
    student: &BoundParams,
    states: &Tensor,
    teacher_q: &Tensor,
) -> Result<Var> {
    let (q, _) = forward_graph(spec, student, &graph.constant(states.clone()), Mode::Infer)?;
    let log_p_student = log_softmax_rows(&q);
    let teacher = graph.constant(teacher_q.clone());
    let p_teacher = softmax_rows(&teacher).detach();
    Ok(p_teacher.mul(&log_p_student).row_sum().mean_all().neg())
}

/// Evaluate a frozen teacher on a batch of states.
pub fn teacher_targets(
    spec: &NetworkSpec,
    teacher: &NetworkParams,
    states: &Tensor,
    standardization: &QStandardization,
) -> Result<Tensor> {
    let q = forward_tensor(spec, teacher, states, Mode::Infer)?;
    Ok(q.map(|v| standardization.apply(v)))
}

/// Record the frozen previous network's outputs on every buffer state.
/// Computed once per consolidation phase; the teacher cannot change, so
/// re-evaluation per epoch would only repeat the same numbers.
pub fn make_pseudo_items(
    spec: &NetworkSpec,
    prev_ltm: &NetworkParams,
    buffer: &PseudoBuffer,
    batch: usize,
) -> Result<Vec<PseudoItem>> {
    let mut items = Vec::with_capacity(buffer.len());
    for chunk in buffer.states.chunks(batch.max(1)) {
        let stacked = stack_states(chunk.iter())?;
        let q = forward_tensor(spec, prev_ltm, &stacked, Mode::Infer)?;
        let actions = q.shape()[1];
        for (i, state) in chunk.iter().enumerate() {
            items.push(PseudoItem {
                state: state.clone(),
                target_q: q.data()[i * actions..(i + 1) * actions].to_vec(),
            });
        }
    }
    Ok(items)
}

/// Retention mechanism paired with the distillation term.
pub enum Retention<'a> {
    /// Pure distillation (the forgetting baseline).
    None,
    /// Rehearse recorded targets on stored or generated states.
    Items(&'a [PseudoItem]),
    /// Add `weight * penalty(student) / N` to the batch-mean distillation
    /// loss (the weight-anchoring baselines). The builder constructs the
    /// penalty from the student's bound parameter variables.
    Penalty { build: &'a dyn Fn(&Graph, &BoundParams) -> Result<Var>, weight: f64 },
}

/// Per-step consolidation diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LtmStepStats {
    pub step: u64,
    pub distill: f64,
    pub retention: f64,
    pub combined: f64,
}

pub struct LtmOutcome {
    pub params: NetworkParams,
    pub history: Vec<LtmStepStats>,
}

/// Consolidate one task into the long-term network.
///
/// For the first task (`prev_ltm` = None) the short-term weights are
/// copied over bit for bit, with no training. For later tasks the student
/// starts from the previous long-term weights and trains under the
/// combined loss, returning the checkpoint with the lowest windowed
/// training error.
#[allow(clippy::too_many_arguments)]
pub fn train_ltm(
    spec: &NetworkSpec,
    stm_params: &NetworkParams,
    replay: &ReplayBuffer,
    prev_ltm: Option<&NetworkParams>,
    retention: Retention<'_>,
    cfg: &ConsolidationConfig,
    seed: SeedStream,
    mut progress: Option<&mut dyn FnMut(u64, &NetworkParams, &LtmStepStats) -> Result<()>>,
) -> Result<LtmOutcome> {
    let prev = match prev_ltm {
        None => return Ok(LtmOutcome { params: stm_params.clone(), history: Vec::new() }),
        Some(p) => p,
    };
    stm_params.check_layout(prev)?;
    if let Retention::Items(items) = &retention {
        if items.is_empty() {
            return Err(Error::config("consolidation beyond task 1 requires retention items"));
        }
    }

    let standardization = if cfg.standardize_q {
        standardize_q(spec, stm_params, replay, cfg.standardize_min_states, seed)?
    } else {
        QStandardization::identity()
    };

    let mut params = prev.clone();
    let mut opt = Optimizer::rmsprop(cfg.optimizer, &params);
    let mut sample_rng = seed.named("ltm-sample").rng();

    let steps = cfg.frames / (cfg.action_repeat as u64 * cfg.update_frequency);
    let window_steps = (cfg.loss_window_frames / (cfg.action_repeat as u64 * cfg.update_frequency)).max(1);
    let mut selector = CheckpointSelector::minimize();
    let mut window_losses: Vec<f64> = Vec::new();
    let mut history = Vec::with_capacity(steps as usize);

    for step in 0..steps {
        let real_states = stack_states(replay.sample_states(cfg.batch_size, &mut sample_rng)?.iter())?;
        let teacher_q = teacher_targets(spec, stm_params, &real_states, &standardization)?;

        let g = Graph::new();
        let student = BoundParams::bind(&g, &params);
        let (loss, ld_v, lpr_v) = match &retention {
            Retention::None => {
                let ld = match cfg.mode {
                    ConsolidationMode::QValues => distill_loss_graph(&g, spec, &student, &real_states, &teacher_q)?,
                    ConsolidationMode::Policy => {
                        policy_distill_loss_graph(&g, spec, &student, &real_states, &teacher_q)?
                    }
                };
                let v = ld.value().item();
                (ld, v, 0.0)
            }
            Retention::Items(items) => {
                let batch: Vec<PseudoItem> = (0..cfg.batch_size)
                    .map(|_| items[sample_rng.random_range(0..items.len())].clone())
                    .collect();
                match cfg.mode {
                    ConsolidationMode::QValues => {
                        let ld = distill_loss_graph(&g, spec, &student, &real_states, &teacher_q)?;
                        let lpr = pr_loss_graph(&g, spec, &student, &batch)?;
                        if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
                            return Err(Error::config(format!(
                                "alpha must lie strictly inside (0, 1), got {}",
                                cfg.alpha
                            )));
                        }
                        let combined = ld.scale(cfg.alpha).add(&lpr.scale(1.0 - cfg.alpha));
                        let (a, b) = (ld.value().item(), lpr.value().item());
                        (combined, a, b)
                    }
                    ConsolidationMode::Policy => {
                        let states = stack_states(batch.iter().map(|i| &i.state))?;
                        let actions = batch[0].target_q.len();
                        let mut t = Vec::with_capacity(batch.len() * actions);
                        for item in &batch {
                            t.extend_from_slice(&item.target_q);
                        }
                        let targets = Tensor::new(vec![batch.len(), actions], t);
                        let ld = policy_distill_loss_graph(&g, spec, &student, &real_states, &teacher_q)?;
                        let lpr = policy_distill_loss_graph(&g, spec, &student, &states, &targets)?;
                        let combined = ld.scale(cfg.alpha).add(&lpr.scale(1.0 - cfg.alpha));
                        let (a, b) = (ld.value().item(), lpr.value().item());
                        (combined, a, b)
                    }
                }
            }
            Retention::Penalty { build, weight } => {
                let ld = match cfg.mode {
                    ConsolidationMode::QValues => distill_loss_graph(&g, spec, &student, &real_states, &teacher_q)?,
                    ConsolidationMode::Policy => {
                        policy_distill_loss_graph(&g, spec, &student, &real_states, &teacher_q)?
                    }
                };
                let penalty = build(&g, &student)?;
                // Combined loss is (1/N)(sum_j L_D_j + weight * penalty),
                // i.e. the penalty shares the batch normaliser.
                let combined = ld.add(&penalty.scale(weight / cfg.batch_size as f64));
                let (a, b) = (ld.value().item(), penalty.value().item());
                (combined, a, b)
            }
        };

        let combined_v = loss.value().item();
        if !combined_v.is_finite() {
            return Err(Error::numeric(format!("ltm step {step}"), format!("loss became {combined_v}")));
        }
        let mut grads = grads_as_params(&params, &student, &loss)?;
        clip_global_norm(&mut grads, cfg.max_grad_norm)?;
        opt.step(&mut params, &grads)?;

        window_losses.push(combined_v);
        if window_losses.len() as u64 >= window_steps {
            let avg = window_losses.iter().sum::<f64>() / window_losses.len() as f64;
            selector.offer(avg, || params.clone());
            window_losses.clear();
        }

        let stats = LtmStepStats { step, distill: ld_v, retention: lpr_v, combined: combined_v };
        if let Some(hook) = progress.as_deref_mut() {
            let frames_done = (step + 1) * cfg.action_repeat as u64 * cfg.update_frequency;
            hook(frames_done, &params, &stats)?;
        }
        history.push(stats);
    }

    if !window_losses.is_empty() {
        let avg = window_losses.iter().sum::<f64>() / window_losses.len() as f64;
        selector.offer(avg, || params.clone());
    }

    let best = selector.into_best().unwrap_or(params);
    Ok(LtmOutcome { params: best, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init_params, LayerSpec};

    fn small_net(inputs: usize, actions: usize, seed: u64) -> (NetworkSpec, NetworkParams) {
        let spec = NetworkSpec::new(
            vec![1, 1, inputs],
            vec![
                LayerSpec::Dense { units: 6, out_shape: None },
                LayerSpec::Tanh,
                LayerSpec::Dense { units: actions, out_shape: None },
            ],
        );
        let params = init_params(&spec, 0.4, &mut SeedStream::new(seed).rng()).unwrap();
        (spec, params)
    }

    fn random_states(n: usize, inputs: usize, seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed).rng();
        Tensor::new(vec![n, 1, 1, inputs], (0..n * inputs).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn distill_loss_zero_for_identical_nets() {
        let (spec, params) = small_net(3, 2, 1);
        let states = random_states(4, 3, 2);
        let teacher_q = teacher_targets(&spec, &params, &states, &QStandardization::identity()).unwrap();
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, &params);
        let loss = distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap();
        assert!(loss.value().item() < 1e-20);
    }

    #[test]
    fn distill_loss_direct_substitution() {
        // Student outputs (0,0), targets (1,2): sum of squares = 5.
        let spec = NetworkSpec::new(vec![1, 1, 2], vec![LayerSpec::Dense { units: 2, out_shape: None }]);
        let mut params = init_params(&spec, 0.1, &mut SeedStream::new(3).rng()).unwrap();
        params.segments_mut()[0].tensor = Tensor::zeros(&[2, 2]);
        params.segments_mut()[1].tensor = Tensor::zeros(&[2]);
        let states = Tensor::new(vec![1, 1, 1, 2], vec![0.3, -0.7]);
        let targets = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, &params);
        let loss = distill_loss_graph(&g, &spec, &b, &states, &targets).unwrap();
        assert!((loss.value().item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pr_loss_zero_when_student_is_previous_net() {
        let (spec, params) = small_net(3, 2, 4);
        let states = random_states(5, 3, 5);
        let q = forward_tensor(&spec, &params, &states, Mode::Infer).unwrap();
        let items: Vec<PseudoItem> = (0..5)
            .map(|i| PseudoItem {
                state: Tensor::new(vec![1, 1, 3], states.data()[i * 3..(i + 1) * 3].to_vec()),
                target_q: q.data()[i * 2..(i + 1) * 2].to_vec(),
            })
            .collect();
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, &params);
        let loss = pr_loss_graph(&g, &spec, &b, &items).unwrap();
        assert!(loss.value().item() < 1e-20);
    }

    #[test]
    fn distill_and_pr_gradients_match_fd() {
        use crate::engine::fdcheck::check_param_gradient;
        let (spec, params) = small_net(3, 2, 6);
        let (_, teacher) = small_net(3, 2, 7);
        let states = random_states(3, 3, 8);
        let teacher_q = teacher_targets(&spec, &teacher, &states, &QStandardization::identity()).unwrap();

        let g = Graph::new();
        let b = BoundParams::bind(&g, &params);
        let loss = distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap();
        let analytic = grads_as_params(&params, &b, &loss).unwrap();
        let err = check_param_gradient(
            &params,
            &analytic,
            |p| {
                let g = Graph::new();
                let b = BoundParams::bind_frozen(&g, p);
                distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap().value().item()
            },
            1e-5,
        );
        assert!(err <= 1e-4, "distill rel err {err:.3e}");
    }

    #[test]
    fn minimizing_pr_alone_reaches_targets() {
        let (spec, teacher) = small_net(2, 2, 9);
        let (_, mut student) = small_net(2, 2, 10);
        let mut rng = SeedStream::new(11).rng();
        let items: Vec<PseudoItem> = (0..16)
            .map(|_| {
                let state = Tensor::new(vec![1, 1, 2], vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                let mut shape = vec![1];
                shape.extend(state.shape());
                let q = forward_tensor(&spec, &teacher, &state.reshaped(shape), Mode::Infer).unwrap();
                PseudoItem { state, target_q: q.data().to_vec() }
            })
            .collect();
        let mut opt = Optimizer::rmsprop(RmsPropConfig { learning_rate: 0.01, ..Default::default() }, &student);
        for _ in 0..3000 {
            let g = Graph::new();
            let b = BoundParams::bind(&g, &student);
            let loss = pr_loss_graph(&g, &spec, &b, &items).unwrap();
            let grads = grads_as_params(&student, &b, &loss).unwrap();
            opt.step(&mut student, &grads).unwrap();
        }
        let mut worst: f64 = 0.0;
        for item in &items {
            let mut shape = vec![1];
            shape.extend(item.state.shape());
            let q = forward_tensor(&spec, &student, &item.state.reshaped(shape), Mode::Infer).unwrap();
            for (a, b) in q.data().iter().zip(&item.target_q) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 0.05, "sup-norm {worst}");
    }

    #[test]
    fn ltm_loss_alpha_midpoint_substitution() {
        // Build nets so L_D = 2 and L_PR = 4 per item, alpha = 0.5 -> 3.
        let spec = NetworkSpec::new(vec![1, 1, 1], vec![LayerSpec::Dense { units: 2, out_shape: None }]);
        let mut student = init_params(&spec, 0.1, &mut SeedStream::new(12).rng()).unwrap();
        student.segments_mut()[0].tensor = Tensor::zeros(&[1, 2]);
        student.segments_mut()[1].tensor = Tensor::zeros(&[2]);
        let states = Tensor::new(vec![2, 1, 1, 1], vec![0.1, 0.2]);
        // Distill targets (1,1): L_D = 2 per item.
        let teacher_q = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        // Pseudo targets give sum of squares 4: e.g. (sqrt2, sqrt2).
        let s = 2f64.sqrt();
        let items: Vec<PseudoItem> = (0..2)
            .map(|_| PseudoItem { state: Tensor::new(vec![1, 1, 1], vec![0.5]), target_q: vec![s, s] })
            .collect();
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, &student);
        let loss = ltm_loss_graph(&g, &spec, &b, &states, &teacher_q, &items, 0.5).unwrap();
        assert!((loss.value().item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ltm_loss_rejects_boundary_alpha() {
        let (spec, params) = small_net(2, 2, 13);
        let states = random_states(1, 2, 14);
        let teacher_q = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let items = vec![PseudoItem { state: Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]), target_q: vec![0.0, 0.0] }];
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, &params);
        for bad in [0.0, 1.0, 1.2, -0.1] {
            let r = ltm_loss_graph(&g, &spec, &b, &states, &teacher_q, &items, bad);
            assert!(matches!(r, Err(Error::Config(_))), "alpha {bad} accepted");
        }
    }

    #[test]
    fn alpha_near_one_approaches_pure_distillation() {
        let (spec, params) = small_net(2, 2, 15);
        let (_, teacher) = small_net(2, 2, 16);
        let states = random_states(3, 2, 17);
        let teacher_q = teacher_targets(&spec, &teacher, &states, &QStandardization::identity()).unwrap();
        let items: Vec<PseudoItem> = (0..3)
            .map(|i| PseudoItem {
                state: Tensor::new(vec![1, 1, 2], states.data()[i * 2..(i + 1) * 2].to_vec()),
                target_q: vec![5.0, -3.0],
            })
            .collect();
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, &params);
        let pure = distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap().value().item();
        let near = ltm_loss_graph(&g, &spec, &b, &states, &teacher_q, &items, 1.0 - 1e-9).unwrap().value().item();
        assert!((near - pure).abs() < 1e-6, "limit {near} vs pure {pure}");
    }

    #[test]
    fn ltm_gradient_is_linear_combination() {
        let (spec, params) = small_net(2, 2, 18);
        let (_, teacher) = small_net(2, 2, 19);
        let states = random_states(3, 2, 20);
        let teacher_q = teacher_targets(&spec, &teacher, &states, &QStandardization::identity()).unwrap();
        let mut rng = SeedStream::new(21).rng();
        let items: Vec<PseudoItem> = (0..3)
            .map(|_| PseudoItem {
                state: Tensor::new(vec![1, 1, 2], vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                target_q: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            })
            .collect();
        let alpha = 0.55;

        let g = Graph::new();
        let b = BoundParams::bind(&g, &params);
        let combined = ltm_loss_graph(&g, &spec, &b, &states, &teacher_q, &items, alpha).unwrap();
        let g_combined = grads_as_params(&params, &b, &combined).unwrap().flatten_trainable();

        let g2 = Graph::new();
        let b2 = BoundParams::bind(&g2, &params);
        let ld = distill_loss_graph(&g2, &spec, &b2, &states, &teacher_q).unwrap();
        let g_ld = grads_as_params(&params, &b2, &ld).unwrap().flatten_trainable();
        let g3 = Graph::new();
        let b3 = BoundParams::bind(&g3, &params);
        let lpr = pr_loss_graph(&g3, &spec, &b3, &items).unwrap();
        let g_pr = grads_as_params(&params, &b3, &lpr).unwrap().flatten_trainable();

        for ((c, d), p) in g_combined.iter().zip(&g_ld).zip(&g_pr) {
            assert!((c - (alpha * d + (1.0 - alpha) * p)).abs() < 1e-10);
        }
    }

    #[test]
    fn standardization_examples() {
        let s = standardize_q_values(&[5.0, 5.0, 5.0]);
        assert_eq!(s.shift, 5.0);
        assert_eq!(s.scale, 1.0);
        assert!(s.clamped);

        let mut rng = SeedStream::new(22).rng();
        let qs: Vec<f64> = (0..5000).map(|_| rng.random_range(-3.0..7.0)).collect();
        let st = standardize_q_values(&qs);
        let mapped: Vec<f64> = qs.iter().map(|&q| st.apply(q)).collect();
        let (m, sd) = crate::dqn::mean_std(&mapped);
        assert!(m.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn standardization_matches_scales_across_reward_magnitudes() {
        // Q-values at 1x and 100x reward scale standardize to matching
        // variance.
        let mut rng = SeedStream::new(23).rng();
        let base: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let big: Vec<f64> = base.iter().map(|v| v * 100.0).collect();
        let s1 = standardize_q_values(&base);
        let s2 = standardize_q_values(&big);
        let v1 = crate::dqn::mean_std(&base.iter().map(|&q| s1.apply(q)).collect::<Vec<_>>()).1;
        let v2 = crate::dqn::mean_std(&big.iter().map(|&q| s2.apply(q)).collect::<Vec<_>>()).1;
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn policy_loss_identities() {
        // student == teacher: loss = teacher entropy, gradient 0.
        let (spec, params) = small_net(2, 5, 24);
        let states = random_states(4, 2, 25);
        let teacher_q = forward_tensor(&spec, &params, &states, Mode::Infer).unwrap();
        let g = Graph::new();
        let b = BoundParams::bind(&g, &params);
        let loss = policy_distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap();
        // Entropy of the teacher distribution, averaged over the batch.
        let p = {
            let gg = Graph::new();
            softmax_rows(&gg.constant(teacher_q.clone())).value()
        };
        let mut entropy = 0.0;
        for r in 0..4 {
            for a in 0..5 {
                let pa = p.data()[r * 5 + a];
                entropy -= pa * pa.ln();
            }
        }
        entropy /= 4.0;
        assert!((loss.value().item() - entropy).abs() < 1e-10);
        let grads = grads_as_params(&params, &b, &loss).unwrap();
        assert!(grads.flatten_trainable().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_teacher_gives_ln_k() {
        let spec = NetworkSpec::new(vec![1, 1, 2], vec![LayerSpec::Dense { units: 5, out_shape: None }]);
        let mut student = init_params(&spec, 0.1, &mut SeedStream::new(26).rng()).unwrap();
        // Constant student outputs -> uniform softmax.
        student.segments_mut()[0].tensor = Tensor::zeros(&[2, 5]);
        student.segments_mut()[1].tensor = Tensor::full(&[5], 0.7);
        let states = Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.4]);
        let teacher_q = Tensor::new(vec![1, 5], vec![2.0; 5]); // uniform teacher
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, &student);
        let loss = policy_distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap();
        assert!((loss.value().item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn policy_loss_gradient_matches_fd() {
        use crate::engine::fdcheck::check_param_gradient;
        let (spec, params) = small_net(3, 4, 27);
        let (_, teacher) = small_net(3, 4, 28);
        let states = random_states(3, 3, 29);
        let teacher_q = forward_tensor(&spec, &teacher, &states, Mode::Infer).unwrap();
        let g = Graph::new();
        let b = BoundParams::bind(&g, &params);
        let loss = policy_distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap();
        let analytic = grads_as_params(&params, &b, &loss).unwrap();
        let err = check_param_gradient(
            &params,
            &analytic,
            |p| {
                let g = Graph::new();
                let b = BoundParams::bind_frozen(&g, p);
                policy_distill_loss_graph(&g, &spec, &b, &states, &teacher_q).unwrap().value().item()
            },
            1e-5,
        );
        assert!(err <= 1e-4, "rel err {err:.3e}");
    }

    #[test]
    fn first_task_copies_stm_weights_bitwise() {
        let (spec, stm) = small_net(2, 2, 30);
        let replay = {
            let mut buf = ReplayBuffer::new(64, 1, 1, vec![1, 1, 2]);
            buf.push_reset(vec![0, 0]);
            for _ in 0..10 {
                buf.push(vec![1, 2], 0, 0.0, false);
            }
            buf
        };
        let out = train_ltm(
            &spec,
            &stm,
            &replay,
            None,
            Retention::None,
            &ConsolidationConfig::default(),
            SeedStream::new(31),
            None,
        )
        .unwrap();
        assert_eq!(out.params, stm);
    }

    #[test]
    fn teachers_are_never_mutated() {
        let (spec, stm) = small_net(2, 2, 32);
        let (_, prev) = small_net(2, 2, 33);
        let stm_before = stm.clone();
        let prev_before = prev.clone();
        let mut buf = ReplayBuffer::new(4000, 1, 1, vec![1, 1, 2]);
        let mut rng = SeedStream::new(34).rng();
        buf.push_reset(vec![0, 0]);
        for _ in 0..500 {
            buf.push(vec![rng.random_range(0..=255), rng.random_range(0..=255)], 0, 0.0, false);
        }
        let items: Vec<PseudoItem> = (0..50)
            .map(|_| PseudoItem {
                state: Tensor::new(vec![1, 1, 2], vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                target_q: vec![0.1, 0.2],
            })
            .collect();
        let cfg = ConsolidationConfig {
            frames: 400,
            update_frequency: 1,
            action_repeat: 1,
            batch_size: 8,
            ..Default::default()
        };
        train_ltm(&spec, &stm, &buf, Some(&prev), Retention::Items(&items), &cfg, SeedStream::new(35), None).unwrap();
        assert_eq!(stm, stm_before);
        assert_eq!(prev, prev_before);
    }
}
