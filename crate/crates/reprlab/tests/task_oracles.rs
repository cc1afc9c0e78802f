//! Oracle-derived properties of the task suite: optimal-return magnitudes,
//! policy distinctness and cross-task conflict.

use reprlab::envs::grid::{GridInstance, GridTaskKind};
use reprlab::envs::tabular::TabularOracle;
use reprlab::envs::EnvConfig;
use reprlab::rng::SeedStream;

const KINDS: [GridTaskKind; 3] = [GridTaskKind::Chase, GridTaskKind::Avoid, GridTaskKind::Collect];

/// Solve both tasks on shared geometry and roll policies across.
fn cross_matrix(probes: u64) -> [[f64; 3]; 3] {
    let cfg = EnvConfig::default();
    let mut totals = [[0.0f64; 3]; 3];
    for seed in 0..probes {
        let mut rng = SeedStream::new(seed).named("probe").rng();
        let base = GridInstance::draw_items(GridTaskKind::Collect, cfg.grid_size, cfg.item_count, &mut rng);
        let starts: Vec<_> = (0..2).map(|_| base.draw_initial(&mut rng)).collect();
        let oracles: Vec<TabularOracle> = KINDS
            .iter()
            .map(|&kind| {
                let inst = GridInstance { kind, grid: base.grid, items: base.items.clone() };
                TabularOracle::solve(inst, cfg.action_repeat, cfg.episode_frame_limit)
            })
            .collect();
        for (pi, policy_oracle) in oracles.iter().enumerate() {
            for (wi, world_oracle) in oracles.iter().enumerate() {
                for s0 in &starts {
                    totals[pi][wi] += policy_oracle.rollout_policy_in(world_oracle.instance(), s0);
                }
            }
        }
    }
    let n = (probes * 2) as f64;
    let mut out = [[0.0; 3]; 3];
    for p in 0..3 {
        for w in 0..3 {
            out[p][w] = totals[p][w] / n;
        }
    }
    out
}

/// Policies optimal for one task must score below half of optimal on the
/// others, and the three optimal policies must be pairwise distinct.
#[test]
fn cross_task_scores_stay_below_half_of_optimal() {
    let m = cross_matrix(12);
    println!("cross matrix (policy x world): {m:?}");
    for p in 0..3 {
        for w in 0..3 {
            if p == w {
                continue;
            }
            assert!(
                m[p][w] < 0.5 * m[w][w],
                "policy {p} in world {w}: {} vs optimal {}",
                m[p][w],
                m[w][w]
            );
        }
    }
    // Own-task optima are meaningfully positive.
    for w in 0..3 {
        assert!(m[w][w] > 1.0, "task {w} optimum {} too small", m[w][w]);
    }
}

#[test]
fn optimal_policies_are_pairwise_distinct_on_probe_states() {
    let cfg = EnvConfig::default();
    let mut rng = SeedStream::new(99).named("probe").rng();
    let base = GridInstance::draw_items(GridTaskKind::Collect, cfg.grid_size, cfg.item_count, &mut rng);
    let oracles: Vec<TabularOracle> = KINDS
        .iter()
        .map(|&kind| {
            let inst = GridInstance { kind, grid: base.grid, items: base.items.clone() };
            TabularOracle::solve(inst, cfg.action_repeat, cfg.episode_frame_limit)
        })
        .collect();
    let probes: Vec<_> = (0..60).map(|_| base.draw_initial(&mut rng)).collect();
    let horizon = oracles[0].horizon();
    for a in 0..3 {
        for b in a + 1..3 {
            let disagreements = probes
                .iter()
                .filter(|s| oracles[a].greedy_action(s, horizon) != oracles[b].greedy_action(s, horizon))
                .count();
            assert!(
                disagreements * 20 >= probes.len(),
                "tasks {a} and {b} agree too often: {disagreements}/{} disagreements",
                probes.len()
            );
        }
    }
}
