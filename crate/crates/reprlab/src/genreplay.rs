//! The long-term generative model: a Wasserstein GAN with gradient
//! penalty and drift terms, trained on a per-item mixture of current-task
//! replay states and states generated by the previous model, so that one
//! generator of fixed size can keep producing every task seen so far.

use rand::Rng as _;

use crate::dqn::{stack_states, ReplayBuffer};
use crate::engine::{
    backward, forward_graph, grads_as_params, init_params, AdamConfig, BoundParams, Graph, Mode,
    NetworkParams, NetworkSpec, Optimizer, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

/// Generator + discriminator parameter pair.
#[derive(Debug, Clone)]
pub struct GanPair {
    pub gen_spec: NetworkSpec,
    pub disc_spec: NetworkSpec,
    pub gen_params: NetworkParams,
    pub disc_params: NetworkParams,
    pub latent_dim: usize,
}

/// A fixed array of generated states, tagged with the model version that
/// produced it. Regenerated from the frozen previous model before each
/// consolidation phase; never carried across tasks.
#[derive(Debug, Clone)]
pub struct PseudoBuffer {
    pub states: Vec<Tensor>,
    pub source_tag: String,
}

impl PseudoBuffer {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> &Tensor {
        &self.states[rng.random_range(0..self.states.len())]
    }
}

/// Training parameters for one generative phase.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub gp_lambda: f64,
    pub drift_epsilon: f64,
    /// Width of the raw-scale uniform input noise; 0 disables it.
    pub input_noise: f64,
    pub optimizer: AdamConfig,
    pub init_std: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            steps: 20_000,
            batch_size: 100,
            latent_dim: 100,
            gp_lambda: 10.0,
            drift_epsilon: 1e-6,
            input_noise: 10.0,
            optimizer: AdamConfig::default(),
            init_std: 0.01,
        }
    }
}

/// Draw one training state by the task-count mixing rule: a replay state
/// with probability 1/T, otherwise a state from the pseudo buffer.
pub fn mix_source(
    task_count: usize,
    replay: &ReplayBuffer,
    pseudo: Option<&PseudoBuffer>,
    rng: &mut Rng,
) -> Result<Tensor> {
    if task_count == 0 {
        return Err(Error::contract("mix_source needs at least one task"));
    }
    if task_count > 1 && pseudo.map_or(true, |p| p.is_empty()) {
        return Err(Error::contract("mix_source with T > 1 requires a non-empty pseudo buffer"));
    }
    let r: f64 = rng.random::<f64>();
    if r < 1.0 / task_count as f64 {
        Ok(replay.sample_states(1, rng)?.remove(0))
    } else {
        Ok(pseudo.unwrap().sample(rng).clone())
    }
}

/// Raw-scale uniform noise: map back to bytes, jitter by U(-width, width),
/// rescale. Equivalent to adding `(2/255) * u` in rescaled space.
pub fn add_input_noise(x: &Tensor, width: f64, rng: &mut Rng) -> Tensor {
    if width == 0.0 {
        return x.clone();
    }
    x.map(|v| {
        let raw = crate::envs::derescale(v);
        let jittered = raw + rng.random_range(-width..width);
        2.0 * (jittered / 255.0 - 0.5)
    })
}

/// Discriminator loss graph:
/// `D(fake) - D(real) + lambda * (||grad_xhat D(xhat)|| - 1)^2
///  + eps_drift * D(real)^2 + eps_drift * D(fake)^2`, batch-meaned, with
/// `xhat` interpolated per item by the supplied epsilons. Also returns the
/// mean critic outputs on the real and fake batches (training diagnostics).
pub fn disc_loss_graph(
    graph: &Graph,
    disc_spec: &NetworkSpec,
    disc_bound: &BoundParams,
    x_real: &Var,
    x_fake: &Var,
    gp_lambda: f64,
    drift_epsilon: f64,
    interp_eps: &[f64],
) -> Result<(Var, f64, f64)> {
    let shape = x_real.shape();
    if shape != x_fake.shape() {
        return Err(Error::contract("real and fake batches must share a shape"));
    }
    let n = shape[0];
    if interp_eps.len() != n {
        return Err(Error::contract("one interpolation epsilon per batch item"));
    }

    let d_real = forward_graph(disc_spec, disc_bound, x_real, Mode::Infer)?.0;
    let d_fake = forward_graph(disc_spec, disc_bound, x_fake, Mode::Infer)?.0;

    let eps = graph.constant(Tensor::from_vec(interp_eps.to_vec()));
    let one_minus = eps.neg().add_scalar(1.0);
    let x_hat = eps
        .row_broadcast(&shape)
        .mul(x_real)
        .add(&one_minus.row_broadcast(&shape).mul(x_fake));
    let d_hat = forward_graph(disc_spec, disc_bound, &x_hat, Mode::Infer)?.0;
    let grad_hat = backward(&d_hat.sum_all(), &[&x_hat])?.remove(0);
    let penalty = grad_hat.row_l2_norm().add_scalar(-1.0).square().mean_all();

    let d_real_mean = d_real.mean_all();
    let d_fake_mean = d_fake.mean_all();
    let wasserstein = d_fake_mean.sub(&d_real_mean);
    let drift = d_real.square().mean_all().add(&d_fake.square().mean_all()).scale(drift_epsilon);
    let loss = wasserstein.add(&penalty.scale(gp_lambda)).add(&drift);
    Ok((loss, d_real_mean.value().item(), d_fake_mean.value().item()))
}

/// Loss value convenience wrapper over [`disc_loss_graph`].
pub fn disc_loss(
    disc_spec: &NetworkSpec,
    disc_params: &NetworkParams,
    x_real: &Tensor,
    x_fake: &Tensor,
    gp_lambda: f64,
    drift_epsilon: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let g = Graph::new();
    let bound = BoundParams::bind_frozen(&g, disc_params);
    let n = x_real.shape()[0];
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let xr = g.constant(x_real.clone());
    let xf = g.constant(x_fake.clone());
    Ok(disc_loss_graph(&g, disc_spec, &bound, &xr, &xf, gp_lambda, drift_epsilon, &eps)?.0.value().item())
}

/// Generator loss graph: `-mean(D(G(z)))`. `x_fake` must be the generator
/// output so that gradients reach the generator parameters.
pub fn gen_loss_graph(
    disc_spec: &NetworkSpec,
    disc_bound: &BoundParams,
    x_fake: &Var,
) -> Result<Var> {
    let d_fake = forward_graph(disc_spec, disc_bound, x_fake, Mode::Infer)?.0;
    Ok(d_fake.mean_all().neg())
}

/// Latent batch: `z ~ U(-1, 1)^latent_dim` per item.
pub fn draw_latents(batch: usize, latent_dim: usize, rng: &mut Rng) -> Tensor {
    let data: Vec<f64> = (0..batch * latent_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![batch, latent_dim], data)
}

/// Per-step discriminator diagnostics logged during training.
#[derive(Debug, Clone, Copy)]
pub struct GanStepStats {
    pub step: u64,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

pub struct GanOutcome {
    pub gan: GanPair,
    pub history: Vec<GanStepStats>,
}

/// Train a freshly initialised GAN on the Eq-mixing of replay states and
/// pseudo states. `pseudo` is required exactly when `task_count > 1`.
#[allow(clippy::too_many_arguments)]
pub fn train_gan(
    gen_spec: &NetworkSpec,
    disc_spec: &NetworkSpec,
    replay: &ReplayBuffer,
    pseudo: Option<&PseudoBuffer>,
    task_count: usize,
    cfg: &GanConfig,
    seed: SeedStream,
    mut progress: Option<&mut dyn FnMut(u64, &GanStepStats) -> Result<()>>,
) -> Result<GanOutcome> {
    if task_count > 1 && pseudo.map_or(true, |p| p.is_empty()) {
        return Err(Error::config("training the generative model beyond task 1 requires a pseudo buffer"));
    }
    let mut init_rng = seed.named("gan-init").rng();
    let mut gen_params = init_params(gen_spec, cfg.init_std, &mut init_rng)?;
    let mut disc_params = init_params(disc_spec, cfg.init_std, &mut init_rng)?;
    let mut opt_gen = Optimizer::adam(cfg.optimizer, &gen_params);
    let mut opt_disc = Optimizer::adam(cfg.optimizer, &disc_params);

    let mut mix_rng = seed.named("gan-mix").rng();
    let mut z_rng = seed.named("gan-z").rng();
    let mut noise_rng = seed.named("gan-noise").rng();
    let mut eps_rng = seed.named("gan-eps").rng();

    let mut history = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        // ---- discriminator step ----
        let real_states: Vec<Tensor> = (0..cfg.batch_size)
            .map(|_| mix_source(task_count, replay, pseudo, &mut mix_rng))
            .collect::<Result<_>>()?;
        let x_real_raw = stack_states(real_states.iter())?;

        let g = Graph::new();
        let gen_bound = BoundParams::bind_frozen(&g, &gen_params);
        let z = g.constant(draw_latents(cfg.batch_size, cfg.latent_dim, &mut z_rng));
        let (fake, bn_stats) = forward_graph(gen_spec, &gen_bound, &z, Mode::Train)?;
        bn_stats.apply(&mut gen_params);
        let x_fake_raw = fake.value();

        let x_real = add_input_noise(&x_real_raw, cfg.input_noise, &mut noise_rng);
        let x_fake = add_input_noise(&x_fake_raw, cfg.input_noise, &mut noise_rng);

        let disc_bound = BoundParams::bind(&g, &disc_params);
        let eps: Vec<f64> = (0..cfg.batch_size).map(|_| eps_rng.random::<f64>()).collect();
        let xr = g.constant(x_real);
        let xf = g.constant(x_fake);
        let (d_loss, d_real_mean, d_fake_mean) =
            disc_loss_graph(&g, disc_spec, &disc_bound, &xr, &xf, cfg.gp_lambda, cfg.drift_epsilon, &eps)?;
        let d_loss_v = d_loss.value().item();
        if !d_loss_v.is_finite() {
            return Err(Error::numeric(format!("gan disc step {step}"), format!("loss became {d_loss_v}")));
        }
        let grads = grads_as_params(&disc_params, &disc_bound, &d_loss)?;
        opt_disc.step(&mut disc_params, &grads)?;

        // ---- generator step ----
        let g2 = Graph::new();
        let gen_bound = BoundParams::bind(&g2, &gen_params);
        let z2 = g2.constant(draw_latents(cfg.batch_size, cfg.latent_dim, &mut z_rng));
        let (fake2, bn_stats2) = forward_graph(gen_spec, &gen_bound, &z2, Mode::Train)?;
        // Noise is applied to every discriminator input during training;
        // the affine jitter is differentiable, so generator gradients pass
        // through it.
        let fake2_noised = if cfg.input_noise > 0.0 {
            let jitter: Vec<f64> = (0..fake2.value().numel())
                .map(|_| noise_rng.random_range(-cfg.input_noise..cfg.input_noise) * 2.0 / 255.0)
                .collect();
            fake2.add(&g2.constant(Tensor::new(fake2.shape(), jitter)))
        } else {
            fake2.clone()
        };
        let disc_bound2 = BoundParams::bind_frozen(&g2, &disc_params);
        let g_loss = gen_loss_graph(disc_spec, &disc_bound2, &fake2_noised)?;
        let g_loss_v = g_loss.value().item();
        if !g_loss_v.is_finite() {
            return Err(Error::numeric(format!("gan gen step {step}"), format!("loss became {g_loss_v}")));
        }
        let grads = grads_as_params(&gen_params, &gen_bound, &g_loss)?;
        opt_gen.step(&mut gen_params, &grads)?;
        bn_stats2.apply(&mut gen_params);

        let stats = GanStepStats { step, disc_loss: d_loss_v, gen_loss: g_loss_v, d_real_mean, d_fake_mean };
        if let Some(hook) = progress.as_deref_mut() {
            hook(step, &stats)?;
        }
        history.push(stats);
    }

    Ok(GanOutcome {
        gan: GanPair {
            gen_spec: gen_spec.clone(),
            disc_spec: disc_spec.clone(),
            gen_params,
            disc_params,
            latent_dim: cfg.latent_dim,
        },
        history,
    })
}

/// Generate `count` i.i.d. states from the frozen model. Items are seeded
/// individually, so the result is identical for any thread count.
pub fn generate_pseudo_buffer(gan: &GanPair, count: usize, seed: SeedStream, threads: usize) -> Result<PseudoBuffer> {
    let threads = threads.max(1);
    let chunk = count.div_ceil(threads);
    let mut states: Vec<Option<Tensor>> = vec![None; count];
    let chunks: Vec<(usize, &mut [Option<Tensor>])> = {
        let mut rest = states.as_mut_slice();
        let mut out = Vec::new();
        let mut start = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            out.push((start, head));
            start += take;
            rest = tail;
        }
        out
    };
    let errors: std::sync::Mutex<Vec<Error>> = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for (start, slots) in chunks {
            let errors = &errors;
            scope.spawn(move || {
                for (offset, slot) in slots.iter_mut().enumerate() {
                    let idx = start + offset;
                    let mut rng = seed.indexed(idx as u64).rng();
                    let z = draw_latents(1, gan.latent_dim, &mut rng);
                    match crate::engine::forward_tensor(&gan.gen_spec, &gan.gen_params, &z, Mode::Infer) {
                        Ok(out) => {
                            let shape = out.shape()[1..].to_vec();
                            *slot = Some(out.reshaped(shape));
                        }
                        Err(e) => {
                            errors.lock().unwrap().push(e);
                            return;
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().unwrap().pop() {
        return Err(e);
    }
    Ok(PseudoBuffer {
        states: states.into_iter().map(|s| s.expect("all items generated")).collect(),
        source_tag: format!("gan-{:016x}", gan.gen_params.layout_id() ^ seed.raw()),
    })
}
