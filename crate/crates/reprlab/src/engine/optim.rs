//! Optimisers and gradient clipping.
//!
//! Two update rules are provided: non-centered RMSProp with the
//! TensorFlow accumulator convention (epsilon inside the square root) and
//! Adam with bias correction. Both walk the trainable segments of a
//! parameter set in order, so identical inputs give bit-identical updates.

use serde::{Deserialize, Serialize};

use crate::engine::nn::NetworkParams;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Rescale all trainable gradients so their global Euclidean norm does not
/// exceed `max_norm`. Returns the pre-clip norm. Idempotent.
pub fn clip_global_norm(grads: &mut NetworkParams, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::contract(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    // The 1e-12 slack keeps clipping idempotent: a clipped set whose norm
    // re-rounds a hair above max_norm is not rescaled again.
    if norm > max_norm * (1.0 + 1e-12) {
        let scale = max_norm / norm;
        for seg in grads.segments_mut().iter_mut().filter(|s| s.trainable) {
            seg.tensor = seg.tensor.map(|v| v * scale);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { learning_rate: 0.00025, decay: 0.99, momentum: 0.0, epsilon: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    /// The settings used for adversarial training here (not the common
    /// beta1 = 0.9 defaults).
    fn default() -> Self {
        AdamConfig { learning_rate: 0.001, beta1: 0.0, beta2: 0.99, epsilon: 1e-8 }
    }
}

enum Accumulators {
    RmsProp { cfg: RmsPropConfig, mean_square: Vec<Tensor>, momentum: Vec<Tensor> },
    Adam { cfg: AdamConfig, m: Vec<Tensor>, v: Vec<Tensor> },
}

/// Per-parameter optimiser state. Accumulator shapes mirror the parameter
/// layout it was created for.
pub struct Optimizer {
    acc: Accumulators,
    step: u64,
    layout_id: u64,
}

impl Optimizer {
    pub fn rmsprop(cfg: RmsPropConfig, params: &NetworkParams) -> Self {
        let zeros: Vec<Tensor> = params.segments().iter().map(|s| Tensor::zeros(s.tensor.shape())).collect();
        Optimizer {
            acc: Accumulators::RmsProp { cfg, mean_square: zeros.clone(), momentum: zeros },
            step: 0,
            layout_id: params.layout_id(),
        }
    }

    pub fn adam(cfg: AdamConfig, params: &NetworkParams) -> Self {
        let zeros: Vec<Tensor> = params.segments().iter().map(|s| Tensor::zeros(s.tensor.shape())).collect();
        Optimizer {
            acc: Accumulators::Adam { cfg, m: zeros.clone(), v: zeros },
            step: 0,
            layout_id: params.layout_id(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. `grads` must share the parameter layout.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams) -> Result<()> {
        if params.layout_id() != self.layout_id || grads.layout_id() != self.layout_id {
            return Err(Error::contract("optimizer/parameter/gradient layouts differ"));
        }
        self.step += 1;
        match &mut self.acc {
            Accumulators::RmsProp { cfg, mean_square, momentum } => {
                for (i, seg) in params.segments_mut().iter_mut().enumerate() {
                    if !seg.trainable {
                        continue;
                    }
                    let g = &grads.segments()[i].tensor;
                    let ms = &mut mean_square[i];
                    *ms = ms.zip(g, |a, gv| cfg.decay * a + (1.0 - cfg.decay) * gv * gv);
                    let mom = &mut momentum[i];
                    let step_t = mom.zip(&ms.zip(g, |a, gv| cfg.learning_rate * gv / (a + cfg.epsilon).sqrt()), |m, s| {
                        cfg.momentum * m + s
                    });
                    *mom = step_t;
                    seg.tensor = seg.tensor.zip(mom, |p, m| p - m);
                }
            }
            Accumulators::Adam { cfg, m, v } => {
                let t = self.step as f64;
                let bc1 = 1.0 - cfg.beta1.powf(t);
                let bc2 = 1.0 - cfg.beta2.powf(t);
                for (i, seg) in params.segments_mut().iter_mut().enumerate() {
                    if !seg.trainable {
                        continue;
                    }
                    let g = &grads.segments()[i].tensor;
                    m[i] = m[i].zip(g, |a, gv| cfg.beta1 * a + (1.0 - cfg.beta1) * gv);
                    v[i] = v[i].zip(g, |a, gv| cfg.beta2 * a + (1.0 - cfg.beta2) * gv * gv);
                    let mi = &m[i];
                    let vi = &v[i];
                    seg.tensor = seg
                        .tensor
                        .zip(&mi.zip(vi, |mv, vv| (mv / bc1) / ((vv / bc2).sqrt() + cfg.epsilon)), |p, d| {
                            p - cfg.learning_rate * d
                        });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::nn::Segment;

    fn single(v: Vec<f64>) -> NetworkParams {
        NetworkParams::from_segments(vec![Segment {
            name: "p".into(),
            tensor: Tensor::from_vec(v),
            trainable: true,
        }])
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut g = single(vec![3.0, 4.0]); // norm 5
        let norm = clip_global_norm(&mut g, 10.0).unwrap();
        assert_eq!(norm, 5.0);
        assert_eq!(g.segments()[0].tensor.data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_rescales_three_four_five() {
        let mut g = single(vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0).unwrap();
        let d = g.segments()[0].tensor.data().to_vec();
        assert!((d[0] - 0.6).abs() < 1e-12);
        assert!((d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_is_idempotent_and_norm_is_min() {
        use rand::Rng as _;
        let mut rng = crate::rng::SeedStream::new(2).rng();
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut g = single(v.clone());
            let pre = g.global_norm();
            clip_global_norm(&mut g, 2.0).unwrap();
            let post = g.global_norm();
            assert!((post - pre.min(2.0)).abs() < 1e-9 * pre.min(2.0).max(1.0));
            let once = g.clone();
            clip_global_norm(&mut g, 2.0).unwrap();
            for (a, b) in g.segments()[0].tensor.data().iter().zip(once.segments()[0].tensor.data()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn zero_gradients_pass_through_clip() {
        let mut g = single(vec![0.0, 0.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 0.0);
        assert_eq!(g.segments()[0].tensor.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rmsprop_zero_gradient_keeps_params() {
        let mut p = single(vec![1.5]);
        let g = single(vec![0.0]);
        let mut opt = Optimizer::rmsprop(RmsPropConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.segments()[0].tensor.data(), &[1.5]);
    }

    #[test]
    fn rmsprop_first_step_matches_substitution() {
        let mut p = single(vec![0.0]);
        let g = single(vec![1.0]);
        let mut opt = Optimizer::rmsprop(RmsPropConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        let expected = -0.00025 / (0.01f64 + 1e-6).sqrt();
        assert!((p.segments()[0].tensor.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = single(vec![2.0]);
        let g = single(vec![0.0]);
        let mut opt = Optimizer::adam(AdamConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.segments()[0].tensor.data(), &[2.0]);
    }

    #[test]
    fn adam_first_step_matches_substitution() {
        let mut p = single(vec![0.0]);
        let g = single(vec![1.0]);
        let mut opt = Optimizer::adam(AdamConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        // beta1 = 0: m-hat = 1, v-hat = 1, delta = -alpha / (1 + eps)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.segments()[0].tensor.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_descends_quadratic_bowl() {
        // loss = 0.5 * (p - 3)^2, gradient = p - 3
        let mut p = single(vec![0.0]);
        let mut opt = Optimizer::rmsprop(
            RmsPropConfig { learning_rate: 0.05, ..Default::default() },
            &p,
        );
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let x = p.segments()[0].tensor.data()[0];
            let loss = 0.5 * (x - 3.0) * (x - 3.0);
            assert!(loss < last, "loss must strictly decrease");
            last = loss;
            let g = single(vec![x - 3.0]);
            opt.step(&mut p, &g).unwrap();
        }
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut p = single(vec![0.0]);
        let mut opt = Optimizer::adam(AdamConfig { learning_rate: 0.05, ..Default::default() }, &p);
        for _ in 0..500 {
            let x = p.segments()[0].tensor.data()[0];
            let g = single(vec![x - 3.0]);
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p.segments()[0].tensor.data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn layout_mismatch_is_contract_error() {
        let mut p = single(vec![1.0]);
        let g = single(vec![1.0, 2.0]);
        let mut opt = Optimizer::rmsprop(RmsPropConfig::default(), &p);
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Contract(_))));
    }
}
