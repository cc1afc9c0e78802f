//! Short-term training against the value-iteration oracle.

use reprlab::dqn::{select_action, train_stm, StmConfig};
use reprlab::engine::{forward_tensor, Mode};
use reprlab::envs::grid::{GridEnv, GridTaskKind};
use reprlab::envs::tabular::TabularOracle;
use reprlab::envs::{EnvConfig, Environment};
use reprlab::harness::plan::desk_dqn_net;
use reprlab::rng::SeedStream;

fn desk_stm_config(frames: u64) -> StmConfig {
    StmConfig {
        frames,
        replay_capacity_frames: 50_000,
        replay_start_frames: 2_000,
        target_update_frames: 1_000,
        epsilon: reprlab::dqn::EpsilonSchedule {
            final_frame: frames / 2,
            ..Default::default()
        },
        score_window_frames: frames / 10,
        ..Default::default()
    }
}

/// Greedy returns over fresh episodes versus the exact optima of the same
/// starts. Returns (mean score, mean optimum).
fn greedy_vs_oracle(
    spec: &reprlab::engine::NetworkSpec,
    params: &reprlab::engine::NetworkParams,
    kind: GridTaskKind,
    episodes: usize,
    seed: u64,
) -> (f64, f64) {
    let cfg = EnvConfig::default();
    let mut env = GridEnv::new(kind, cfg.clone(), SeedStream::new(seed));
    let mut rng = SeedStream::new(seed).named("greedy").rng();
    let mut total_score = 0.0;
    let mut total_opt = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset().unwrap();
        let oracle = TabularOracle::solve(env.instance().clone(), cfg.action_repeat, cfg.episode_frame_limit);
        total_opt += oracle.optimal_return(env.state());
        let mut score = 0.0;
        loop {
            let mut shape = vec![1];
            shape.extend(obs.tensor.shape());
            let q = forward_tensor(spec, params, &obs.tensor.reshaped(shape), Mode::Infer).unwrap();
            let action = select_action(&q, 0.0, &mut rng);
            let out = env.step(action).unwrap();
            score += out.reward;
            obs = out.obs;
            if out.terminal {
                break;
            }
        }
        total_score += score;
    }
    (total_score / episodes as f64, total_opt / episodes as f64)
}

#[test]
fn collect_reaches_ninety_percent_of_oracle() {
    let cfg = EnvConfig::default();
    let spec = desk_dqn_net(&cfg, 5);
    let mut env = GridEnv::new(GridTaskKind::Collect, cfg, SeedStream::new(40).named("env"));
    let out = train_stm(&mut env, &spec, &desk_stm_config(60_000), SeedStream::new(40), None, None, None, None)
        .unwrap();
    let (score, opt) = greedy_vs_oracle(&spec, &out.best_params, GridTaskKind::Collect, 12, 1234);
    println!("collect: greedy {score:.2} vs oracle {opt:.2} ({:.1}%)", 100.0 * score / opt);
    assert!(score >= 0.9 * opt, "greedy {score} below 90% of oracle {opt}");
}

#[test]
fn random_policy_scores_below_oracle_on_avoid() {
    // Untrained weights act as an arbitrary policy; the tabular optimum
    // must dominate it.
    let cfg = EnvConfig::default();
    let spec = desk_dqn_net(&cfg, 5);
    let params = reprlab::engine::init_params(&spec, 0.01, &mut SeedStream::new(7).rng()).unwrap();
    let (score, opt) = greedy_vs_oracle(&spec, &params, GridTaskKind::Avoid, 8, 99);
    println!("avoid: random-ish {score:.2} vs oracle {opt:.2}");
    assert!(score < opt, "untrained policy should not match the oracle");
}
