use reprlab::dqn::{train_stm, StmConfig};
use reprlab::envs::grid::{GridEnv, GridTaskKind};
use reprlab::envs::EnvConfig;
use reprlab::harness::plan::desk_dqn_net;
use reprlab::rng::SeedStream;

fn run(name: &str, kind: GridTaskKind, frames: u64, lr: f64) {
    let cfg = EnvConfig::default();
    let spec = desk_dqn_net(&cfg, 5);
    let stm = StmConfig {
        frames,
        replay_start_frames: 2_000,
        target_update_frames: 1_000,
        epsilon: reprlab::dqn::EpsilonSchedule { final_frame: frames / 3, final_value: 0.05, ..Default::default() },
        optimizer: reprlab::engine::RmsPropConfig { learning_rate: lr, ..Default::default() },
        score_window_frames: frames / 10,
        ..Default::default()
    };
    let mut env = GridEnv::new(kind, cfg.clone(), SeedStream::new(40).named("env"));
    let out = train_stm(&mut env, &spec, &stm, SeedStream::new(40), None, None, None, None).unwrap();
    let mut e2 = GridEnv::new(kind, cfg.clone(), SeedStream::new(777));
    let mut rng = SeedStream::new(7).rng();
    let scores = reprlab::dqn::evaluate(&spec, &out.best_params, &mut e2, 10, 0.0, &mut rng).unwrap();
    let (mb, _) = reprlab::dqn::mean_std(&scores);
    println!("{name}: best-greedy {mb:.2} windows {:?}",
        out.window_scores.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>());
}

#[test]
fn diag_variants() {
    run("chase 24k", GridTaskKind::Chase, 24_000, 2.5e-4);
    run("avoid 24k", GridTaskKind::Avoid, 24_000, 2.5e-4);
    run("collect 24k", GridTaskKind::Collect, 24_000, 2.5e-4);
}
