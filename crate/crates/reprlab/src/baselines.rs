//! Comparison conditions: weight anchoring (EWC, online-EWC), rehearsal
//! variants and the single-network pseudo-rehearsal ablation, plus the
//! Fisher-diagonal machinery they share with the overlap analysis.

use rand::Rng as _;

use crate::dqn::ReplayBuffer;
use crate::engine::{backward, forward_graph, BoundParams, Graph, Mode, NetworkParams, NetworkSpec, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Per-parameter importance estimates aligned with a parameter layout.
/// Non-trainable segments (batch-norm running statistics) carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub diag: NetworkParams,
    pub beta: f64,
}

impl FisherDiagonal {
    pub fn layout_id(&self) -> u64 {
        self.diag.layout_id()
    }

    /// Flat copy of the trainable entries.
    pub fn flatten(&self) -> Vec<f64> {
        self.diag.flatten_trainable()
    }

    pub fn all_non_negative(&self) -> bool {
        self.flatten().iter().all(|&v| v >= 0.0)
    }
}

/// One stored anchor: the weights after a task plus their importance.
#[derive(Debug, Clone)]
pub struct EwcAnchor {
    pub params: NetworkParams,
    pub fisher: FisherDiagonal,
    pub task_index: usize,
}

/// Empirical Fisher diagonal: `beta^2 * mean over states of
/// sum_a (dQ(s,a)/dtheta_i)^2`, evaluated with one backward pass per
/// (state, action) pair.
pub fn fisher_diag(
    spec: &NetworkSpec,
    params: &NetworkParams,
    states: &[crate::engine::Tensor],
    beta: f64,
) -> Result<FisherDiagonal> {
    if states.is_empty() {
        return Err(Error::contract("fisher_diag needs at least one state"));
    }
    let mut acc: Vec<Vec<f64>> = params
        .segments()
        .iter()
        .map(|s| vec![0.0; s.tensor.numel()])
        .collect();

    for state in states {
        let g = Graph::new();
        let bound = BoundParams::bind(&g, params);
        let mut shape = vec![1];
        shape.extend(state.shape());
        let input = g.constant(state.reshaped(shape));
        let (q, _) = forward_graph(spec, &bound, &input, Mode::Infer)?;
        let actions = q.shape()[1];
        for a in 0..actions {
            let qa = q.select_cols(&[a]);
            let trainable: Vec<&Var> = bound.trainable_vars();
            let grads = backward(&qa, &trainable)?;
            let mut gi = 0usize;
            for (k, seg) in params.segments().iter().enumerate() {
                if !seg.trainable {
                    continue;
                }
                for (slot, gv) in acc[k].iter_mut().zip(grads[gi].value().data()) {
                    *slot += gv * gv;
                }
                gi += 1;
            }
        }
    }

    let n = states.len() as f64;
    let scale = beta * beta / n;
    let mut diag = params.clone();
    for (k, seg) in diag.segments_mut().iter_mut().enumerate() {
        let data: Vec<f64> = if seg.trainable {
            acc[k].iter().map(|v| v * scale).collect()
        } else {
            vec![0.0; seg.tensor.numel()]
        };
        seg.tensor = crate::engine::Tensor::new(seg.tensor.shape().to_vec(), data);
    }
    Ok(FisherDiagonal { diag, beta })
}

/// Fisher diagonal from uniform replay draws: `batches` batches of
/// `batch_size` states.
pub fn fisher_from_replay(
    spec: &NetworkSpec,
    params: &NetworkParams,
    replay: &ReplayBuffer,
    batches: usize,
    batch_size: usize,
    beta: f64,
    seed: SeedStream,
) -> Result<FisherDiagonal> {
    let mut rng = seed.named("fisher").rng();
    let mut states = Vec::with_capacity(batches * batch_size);
    for _ in 0..batches {
        states.extend(replay.sample_states(batch_size, &mut rng)?);
    }
    fisher_diag(spec, params, &states, beta)
}

/// Quadratic anchoring penalty: `sum over anchors of
/// sum_i F_i (theta_i - theta*_i)^2`, built from the student's bound
/// parameter variables so it can join any consolidation loss.
pub fn ewc_penalty_graph(graph: &Graph, student: &BoundParams, anchors: &[EwcAnchor]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for anchor in anchors {
        let mut gi = 0usize;
        for (k, seg) in anchor.params.segments().iter().enumerate() {
            if !seg.trainable {
                continue;
            }
            let theta = student
                .trainable_vars()
                .get(gi)
                .cloned()
                .ok_or_else(|| Error::contract("anchor layout does not match student parameters"))?
                .clone();
            if theta.value().shape() != seg.tensor.shape() {
                return Err(Error::contract("anchor layout does not match student parameters"));
            }
            let star = graph.constant(seg.tensor.clone());
            let fisher = graph.constant(anchor.fisher.diag.segments()[k].tensor.clone());
            let term = theta.sub(&star).square().mul(&fisher).sum_all();
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term),
            });
            gi += 1;
        }
    }
    total.ok_or_else(|| Error::contract("ewc penalty needs at least one anchor"))
}

/// Penalty value for fixed parameters (tests, diagnostics).
pub fn ewc_penalty(params: &NetworkParams, anchors: &[EwcAnchor]) -> Result<f64> {
    for anchor in anchors {
        params.check_layout(&anchor.params)?;
    }
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params);
    Ok(ewc_penalty_graph(&g, &bound, anchors)?.value().item())
}

/// Result of min-max normalising a Fisher diagonal into [0, 1].
pub struct NormalizedFisher {
    pub fisher: FisherDiagonal,
    /// True when the input was constant and the result is all zeros.
    pub degenerate: bool,
}

/// Min-max normalise the trainable entries to [0, 1]. A constant diagonal
/// (max == min) normalises to all zeros, flagged for the caller to warn.
pub fn min_max_normalize(f: &FisherDiagonal) -> NormalizedFisher {
    let flat = f.flatten();
    let min = flat.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(max > min);
    let mut diag = f.diag.clone();
    for seg in diag.segments_mut().iter_mut().filter(|s| s.trainable) {
        seg.tensor = seg.tensor.map(|v| if degenerate { 0.0 } else { (v - min) / (max - min) });
    }
    NormalizedFisher { fisher: FisherDiagonal { diag, beta: f.beta }, degenerate }
}

/// Online-EWC rolling update: `F* = gamma * F*_prev + normalize(F_t)`.
/// With no prior, `F*` is just the normalised new diagonal.
pub fn online_ewc_update(
    rolling: Option<&FisherDiagonal>,
    new: &FisherDiagonal,
    gamma: f64,
) -> Result<NormalizedFisher> {
    if gamma >= 1.0 {
        return Err(Error::config(format!("online-EWC discount must be < 1, got {gamma}")));
    }
    let normalized = min_max_normalize(new);
    let mut out = normalized.fisher.clone();
    if let Some(prev) = rolling {
        prev.diag.check_layout(&out.diag)?;
        for (seg, pseg) in out.diag.segments_mut().iter_mut().zip(prev.diag.segments()) {
            if seg.trainable {
                seg.tensor = seg.tensor.zip(&pseg.tensor, |n, p| gamma * p + n);
            }
        }
    }
    Ok(NormalizedFisher { fisher: out, degenerate: normalized.degenerate })
}

/// The comparison conditions accepted by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionId {
    /// Pure distillation; previous tasks are abandoned.
    NoReh,
    /// Retention items drawn from stored previous-task replays.
    Reh,
    /// As `reh`, but storage capped at the generative network's byte size.
    RehLimit,
    /// Single network: Q-learning plus pseudo-rehearsal, no dual memory.
    Pr,
    /// Distillation with per-task quadratic anchors.
    Ewc,
    /// Distillation with one rolling anchor and discounted Fisher.
    OnlineEwc,
    /// The dual-memory pseudo-rehearsal model.
    Repr,
    /// As `repr`, retaining the policy (softmax/cross-entropy) only.
    ReprPolicy,
}

impl ConditionId {
    pub const ALL: [ConditionId; 8] = [
        ConditionId::NoReh,
        ConditionId::Reh,
        ConditionId::RehLimit,
        ConditionId::Pr,
        ConditionId::Ewc,
        ConditionId::OnlineEwc,
        ConditionId::Repr,
        ConditionId::ReprPolicy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionId::NoReh => "no-reh",
            ConditionId::Reh => "reh",
            ConditionId::RehLimit => "reh-limit",
            ConditionId::Pr => "pr",
            ConditionId::Ewc => "ewc",
            ConditionId::OnlineEwc => "online-ewc",
            ConditionId::Repr => "repr",
            ConditionId::ReprPolicy => "repr-policy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|c| c.as_str() == s)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown condition '{s}'")))
    }

    /// Conditions that train and carry the generative model.
    pub fn needs_gan(&self) -> bool {
        matches!(self, ConditionId::Pr | ConditionId::Repr | ConditionId::ReprPolicy)
    }

    /// Conditions that store previous tasks' real replay data.
    pub fn stores_old_replays(&self) -> bool {
        matches!(self, ConditionId::Reh | ConditionId::RehLimit)
    }

    pub fn uses_anchors(&self) -> bool {
        matches!(self, ConditionId::Ewc | ConditionId::OnlineEwc)
    }
}

impl std::fmt::Display for ConditionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Appendix-grid values, with the winning settings as defaults.
pub const EWC_LAMBDA_GRID: [f64; 8] = [50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0];
pub const EWC_LAMBDA_DEFAULT: f64 = 300.0;
pub const ONLINE_EWC_LAMBDA_GRID: [f64; 4] = [25.0, 75.0, 125.0, 175.0];
pub const ONLINE_EWC_LAMBDA_DEFAULT: f64 = 75.0;
pub const ONLINE_EWC_GAMMA_GRID: [f64; 2] = [0.95, 0.99];
pub const ONLINE_EWC_GAMMA_DEFAULT: f64 = 0.99;

/// Memory-limited rehearsal budget: how many stored states fit in the
/// byte footprint of the generative network's parameters.
pub fn reh_limit_budget_items(gan_params: usize, bytes_per_param: usize, bytes_per_state: usize) -> usize {
    (gan_params * bytes_per_param) / bytes_per_state.max(1)
}

/// Uniformly subsample stored items down to a budget.
pub fn subsample_items<T: Clone>(items: &[T], budget: usize, seed: SeedStream) -> Vec<T> {
    if items.len() <= budget {
        return items.to_vec();
    }
    let mut rng = seed.named("reh-limit").rng();
    let mut idx: Vec<usize> = (0..items.len()).collect();
    for i in 0..budget {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..budget].iter().map(|&i| items[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init_params, LayerSpec, Tensor};

    fn one_param_linear() -> (NetworkSpec, NetworkParams) {
        // Q(s) = theta * s with a bias fixed at zero.
        let spec = NetworkSpec::new(vec![1, 1, 1], vec![LayerSpec::Dense { units: 1, out_shape: None }]);
        let mut params = init_params(&spec, 0.1, &mut SeedStream::new(0).rng()).unwrap();
        params.segments_mut()[0].tensor = Tensor::new(vec![1, 1], vec![0.7]);
        params.segments_mut()[1].tensor = Tensor::zeros(&[1]);
        (spec, params)
    }

    #[test]
    fn fisher_of_linear_q_is_mean_square_state() {
        let (spec, params) = one_param_linear();
        let states = vec![Tensor::new(vec![1, 1, 1], vec![1.0]), Tensor::new(vec![1, 1, 1], vec![2.0])];
        let f = fisher_diag(&spec, &params, &states, 1.0).unwrap();
        // dQ/dw = s -> mean(1, 4) = 2.5; dQ/db = 1 -> mean 1.
        assert!((f.diag.segments()[0].tensor.data()[0] - 2.5).abs() < 1e-12);
        assert!((f.diag.segments()[1].tensor.data()[0] - 1.0).abs() < 1e-12);
        assert!(f.all_non_negative());
    }

    #[test]
    fn unreachable_parameter_has_zero_fisher() {
        // Two outputs, but the second output's weights see gradient only
        // from its own action; zero the input path to make a dead weight.
        let spec = NetworkSpec::new(
            vec![1, 1, 2],
            vec![
                LayerSpec::Dense { units: 2, out_shape: None },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 1, out_shape: None },
            ],
        );
        let mut params = init_params(&spec, 0.3, &mut SeedStream::new(1).rng()).unwrap();
        // Make hidden unit 1 dead: zero its input weights and bias, so relu
        // output is 0 for positive-free input; its outgoing weight then has
        // zero gradient for every state.
        {
            let w0 = &mut params.segments_mut()[0].tensor;
            let mut d = w0.data().to_vec();
            d[1] = 0.0; // in0 -> h1
            d[3] = 0.0; // in1 -> h1
            *w0 = Tensor::new(vec![2, 2], d);
        }
        params.segments_mut()[1].tensor = Tensor::new(vec![2], vec![0.01, -1.0]); // h1 bias negative
        let states = vec![
            Tensor::new(vec![1, 1, 2], vec![0.5, 0.3]),
            Tensor::new(vec![1, 1, 2], vec![-0.2, 0.8]),
        ];
        let f = fisher_diag(&spec, &params, &states, 1.0).unwrap();
        // Outgoing weight of dead hidden unit: segment l2.w row 1.
        let w2 = &f.diag.segments()[2].tensor;
        assert_eq!(w2.data()[1], 0.0, "dead path must carry zero Fisher");
    }

    #[test]
    fn fisher_matches_finite_difference_jacobian() {
        let spec = NetworkSpec::new(
            vec![1, 1, 2],
            vec![
                LayerSpec::Dense { units: 3, out_shape: None },
                LayerSpec::Tanh,
                LayerSpec::Dense { units: 2, out_shape: None },
            ],
        );
        let params = init_params(&spec, 0.4, &mut SeedStream::new(2).rng()).unwrap();
        let mut rng = SeedStream::new(3).rng();
        let states: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new(vec![1, 1, 2], vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let f = fisher_diag(&spec, &params, &states, 1.0).unwrap();

        // Oracle: numeric Jacobian via central differences on each output.
        let flat0 = params.flatten_trainable();
        let mut acc = vec![0.0; flat0.len()];
        let h = 1e-6;
        for state in &states {
            for a in 0..2 {
                let q_of = |flat: &[f64]| {
                    let p = crate::engine::fdcheck::unflatten_trainable(&params, flat);
                    let mut shape = vec![1];
                    shape.extend(state.shape());
                    crate::engine::forward_tensor(&spec, &p, &state.reshaped(shape), Mode::Infer)
                        .unwrap()
                        .data()[a]
                };
                let grad = crate::engine::fdcheck::central_diff(q_of, &flat0, h);
                for (s, g) in acc.iter_mut().zip(&grad) {
                    *s += g * g;
                }
            }
        }
        let oracle: Vec<f64> = acc.iter().map(|v| v / states.len() as f64).collect();
        let mine = f.flatten();
        for (a, b) in mine.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-8), "{a} vs {b}");
        }
    }

    fn anchor_from(params: &NetworkParams, fisher_value: f64, task: usize) -> EwcAnchor {
        let mut diag = params.clone();
        for seg in diag.segments_mut() {
            let v = if seg.trainable { fisher_value } else { 0.0 };
            seg.tensor = Tensor::full(seg.tensor.shape(), v);
        }
        EwcAnchor { params: params.clone(), fisher: FisherDiagonal { diag, beta: 1.0 }, task_index: task }
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let (_, params) = one_param_linear();
        let anchors = vec![anchor_from(&params, 2.0, 0), anchor_from(&params, 3.0, 1)];
        assert_eq!(ewc_penalty(&params, &anchors).unwrap(), 0.0);
    }

    #[test]
    fn penalty_direct_substitution() {
        let (_, params) = one_param_linear();
        let anchor = anchor_from(&params, 2.0, 0);
        let mut moved = params.clone();
        moved.segments_mut()[0].tensor = Tensor::new(vec![1, 1], vec![0.7 + 3.0]);
        // F = 2 on both weight and bias; only the weight moved by 3.
        assert!((ewc_penalty(&moved, &[anchor]).unwrap() - 18.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_fd_and_closed_form() {
        use crate::engine::fdcheck::check_param_gradient;
        let spec = NetworkSpec::new(vec![1, 1, 3], vec![LayerSpec::Dense { units: 2, out_shape: None }]);
        let params = init_params(&spec, 0.5, &mut SeedStream::new(4).rng()).unwrap();
        let anchor_params = init_params(&spec, 0.5, &mut SeedStream::new(5).rng()).unwrap();
        let mut diag = anchor_params.clone();
        let mut rng = SeedStream::new(6).rng();
        for seg in diag.segments_mut() {
            let data: Vec<f64> = (0..seg.tensor.numel()).map(|_| rng.random_range(0.0..2.0)).collect();
            seg.tensor = Tensor::new(seg.tensor.shape().to_vec(), data);
        }
        let anchor = EwcAnchor { params: anchor_params.clone(), fisher: FisherDiagonal { diag: diag.clone(), beta: 1.0 }, task_index: 0 };

        let g = Graph::new();
        let bound = BoundParams::bind(&g, &params);
        let penalty = ewc_penalty_graph(&g, &bound, std::slice::from_ref(&anchor)).unwrap();
        let analytic = crate::engine::grads_as_params(&params, &bound, &penalty).unwrap();

        let anchors = [anchor];
        let err = check_param_gradient(&params, &analytic, |p| ewc_penalty(p, &anchors).unwrap(), 1e-5);
        assert!(err <= 1e-6, "rel err {err:.3e}");

        // Closed form: 2 F (theta - theta*).
        let flat_p = params.flatten_trainable();
        let flat_a = anchor_params.flatten_trainable();
        let flat_f = diag.flatten_trainable();
        let flat_g = analytic.flatten_trainable();
        for i in 0..flat_p.len() {
            let expect = 2.0 * flat_f[i] * (flat_p[i] - flat_a[i]);
            assert!((flat_g[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn penalty_is_convex_in_theta() {
        // Positive Fisher entries give a strictly convex quadratic: the
        // midpoint value lies strictly below the endpoint average.
        let (_, params) = one_param_linear();
        let anchor = anchor_from(&params, 2.0, 0);
        let at = |w: f64| {
            let mut p = params.clone();
            p.segments_mut()[0].tensor = Tensor::new(vec![1, 1], vec![w]);
            ewc_penalty(&p, std::slice::from_ref(&anchor)).unwrap()
        };
        let (a, b) = (at(-1.0), at(3.0));
        let mid = at(1.0);
        assert!(mid < 0.5 * (a + b));
    }

    fn fisher_of(values: &[f64]) -> FisherDiagonal {
        let segs = vec![crate::engine::Segment {
            name: "w".into(),
            tensor: Tensor::from_vec(values.to_vec()),
            trainable: true,
        }];
        FisherDiagonal { diag: NetworkParams::from_segments(segs), beta: 1.0 }
    }

    #[test]
    fn online_first_task_is_normalised_new() {
        let f1 = fisher_of(&[0.0, 5.0, 10.0]);
        let out = online_ewc_update(None, &f1, 0.99).unwrap();
        assert_eq!(out.fisher.flatten(), vec![0.0, 0.5, 1.0]);
        assert!(!out.degenerate);
    }

    #[test]
    fn online_gamma_zero_forgets_prior() {
        let prior = fisher_of(&[1.0, 1.0, 1.0]);
        let f2 = fisher_of(&[2.0, 4.0, 6.0]);
        let out = online_ewc_update(Some(&prior), &f2, 0.0).unwrap();
        assert_eq!(out.fisher.flatten(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn online_two_task_accumulation_matches_hand_oracle() {
        let f1 = fisher_of(&[0.0, 2.0, 4.0]);
        let f2 = fisher_of(&[1.0, 3.0, 2.0]);
        let gamma = 0.99;
        let step1 = online_ewc_update(None, &f1, gamma).unwrap().fisher;
        let step2 = online_ewc_update(Some(&step1), &f2, gamma).unwrap().fisher;
        // Hand computation: norm(f1) = [0, .5, 1]; norm(f2) = [0, 1, .5];
        // F* = 0.99 * norm(f1) + norm(f2).
        let expect = [0.99 * 0.0 + 0.0, 0.99 * 0.5 + 1.0, 0.99 * 1.0 + 0.5];
        for (a, b) in step2.flatten().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_fisher_normalises_to_zeros_with_flag() {
        let f = fisher_of(&[3.0, 3.0, 3.0]);
        let out = min_max_normalize(&f);
        assert!(out.degenerate);
        assert_eq!(out.fisher.flatten(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn reh_limit_budget_formula() {
        // 1000 parameters at 8 bytes, 768-byte states -> 10 items.
        assert_eq!(reh_limit_budget_items(1000, 8, 768), 10);
        assert_eq!(reh_limit_budget_items(0, 8, 768), 0);
    }

    #[test]
    fn condition_ids_round_trip() {
        for c in ConditionId::ALL {
            assert_eq!(ConditionId::parse(c.as_str()).unwrap(), c);
        }
        assert!(ConditionId::parse("dgdmn").is_err());
    }
}
