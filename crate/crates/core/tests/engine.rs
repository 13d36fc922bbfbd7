mod common;

use common::*;
use sortblock::diffusion::{sample, SamplerRun};
use sortblock::dit::{
    init_network, BlockHook, BlockIO, DitConfig, Network, PassThrough, StepContext,
};
use sortblock::engine::{
    recompute_budget, run_sortblock, run_sortblock_with, PredictMode, RunOptions, SortblockConfig,
    SortblockEngine, Window,
};
use sortblock::numerics::FeatureTensor;
use sortblock::trace::{oracle_similarities, ranking_fidelity, record_baseline, Phase};
use sortblock::{Error, Result};

fn small_net(seed: u64) -> Network {
    init_network(&DitConfig {
        num_blocks: 6,
        num_tokens: 16,
        channels: 16,
        mlp_ratio: 2,
        seed,
        ..DitConfig::default()
    })
    .unwrap()
}

fn baseline(net: &Network, run: &SamplerRun) -> FeatureTensor {
    sample(net, run, &schedule(), &mut PassThrough).unwrap()
}

#[test]
fn full_ratio_and_empty_window_reproduce_baseline() {
    let net = small_net(1);
    let sched = schedule();
    for seed in 0..3 {
        let run = run_for(&net, seed);
        let base = baseline(&net, &run);
        let all = SortblockConfig::fixed(5, 1.0, inner_window(0.8));
        let (latent, _) = run_sortblock(&net, &run, &sched, &all).unwrap();
        assert_eq!(latent.to_le_bytes(), base.to_le_bytes());
        let none = SortblockConfig::fixed(5, 0.3, Window::empty_for(TOTAL_T));
        let (latent, trace) = run_sortblock(&net, &run, &sched, &none).unwrap();
        assert_eq!(latent.to_le_bytes(), base.to_le_bytes());
        assert_eq!(trace.phase_counts().outside, STEPS);
    }
}

#[test]
fn single_step_window_never_leaves_full_compute() {
    let net = small_net(2);
    let run = run_for(&net, 4);
    let cfg = SortblockConfig::fixed(5, 0.0, Window::new(505, 495).unwrap());
    let (latent, trace) = run_sortblock(&net, &run, &schedule(), &cfg).unwrap();
    assert_eq!(latent.to_le_bytes(), baseline(&net, &run).to_le_bytes());
    let counts = trace.phase_counts();
    assert_eq!((counts.full, counts.ranked, counts.follow), (1, 0, 0));
}

#[test]
fn eval_count_matches_lifecycle_formula() {
    let net = small_net(3);
    let n = net.num_blocks();
    let sched = schedule();
    let run = run_for(&net, 0);
    for (k, rho, frac) in [
        (5, 0.3, 0.8),
        (3, 0.5, 0.8),
        (9, 0.25, 0.9),
        (2, 0.0, 0.6),
        (4, 1.0, 1.0),
    ] {
        let window = inner_window(frac);
        net.reset_block_evals();
        let (_, trace) =
            run_sortblock(&net, &run, &sched, &SortblockConfig::fixed(k, rho, window)).unwrap();
        let expect = lifecycle_evals(&steps(), window, k, n, recompute_budget(rho, n));
        assert_eq!(
            trace.total_block_evals, expect,
            "K={k} rho={rho} frac={frac}"
        );
        assert_eq!(net.block_evals(), expect);
        let per_step: u64 = trace.steps.iter().map(|s| s.block_evals as u64).sum();
        assert_eq!(per_step, expect);
    }
}

#[test]
fn larger_refresh_interval_never_costs_more() {
    let net = small_net(4);
    let sched = schedule();
    let run = run_for(&net, 1);
    let evals: Vec<u64> = [3, 5, 9]
        .iter()
        .map(|&k| {
            run_sortblock(
                &net,
                &run,
                &sched,
                &SortblockConfig::fixed(k, 0.3, inner_window(0.8)),
            )
            .unwrap()
            .1
            .total_block_evals
        })
        .collect();
    assert!(evals.windows(2).all(|w| w[1] <= w[0]), "{evals:?}");
}

#[test]
fn policy_cardinality_holds_at_every_ranked_step() {
    let net = small_net(5);
    let n = net.num_blocks();
    for rho in [0.0, 0.1, 0.34, 0.5, 0.99] {
        let cfg = SortblockConfig::fixed(4, rho, inner_window(0.8));
        let (_, trace) = run_sortblock(&net, &run_for(&net, 2), &schedule(), &cfg).unwrap();
        let policies = trace.policies();
        assert!(!policies.is_empty());
        for p in policies {
            assert_eq!(p.recompute_count(), recompute_budget(rho, n).min(n));
            assert!(p.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        }
    }
}

/// Delegates to the engine and checks cache coherence after every step.
struct CoherenceCheck {
    engine: SortblockEngine,
    last_computed: Vec<Option<usize>>,
    checked_steps: usize,
}

impl BlockHook for CoherenceCheck {
    fn begin_step(&mut self, ctx: &StepContext) -> Result<()> {
        self.engine.begin_step(ctx)
    }

    fn on_block(
        &mut self,
        block: usize,
        input: &FeatureTensor,
        eval: &mut dyn FnMut(&FeatureTensor) -> Result<BlockIO>,
    ) -> Result<FeatureTensor> {
        self.engine.on_block(block, input, eval)
    }

    fn end_step(&mut self, model_output: &FeatureTensor) -> Result<()> {
        self.engine.end_step(model_output)?;
        let rec = self.engine.step_records().last().expect("step recorded");
        for (b, br) in rec.blocks.iter().enumerate() {
            if br.computed {
                self.last_computed[b] = Some(rec.step);
            }
            let entry = self.engine.cache_entry(b).expect("cache filled");
            if Some(entry.last_compute_step) != self.last_computed[b] {
                return Err(Error::Internal(format!(
                    "block {b} incoherent at step {}",
                    rec.step
                )));
            }
        }
        self.checked_steps += 1;
        Ok(())
    }
}

#[test]
fn cache_tracks_the_last_real_computation() {
    let net = small_net(6);
    let cfg = SortblockConfig::fixed(5, 0.3, inner_window(0.8));
    let mut hook = CoherenceCheck {
        engine: SortblockEngine::new(cfg, net.num_blocks()).unwrap(),
        last_computed: vec![None; net.num_blocks()],
        checked_steps: 0,
    };
    sample(&net, &run_for(&net, 3), &schedule(), &mut hook).unwrap();
    assert_eq!(hook.checked_steps, STEPS);
}

#[test]
fn affine_trajectories_are_reproduced_exactly() {
    let net = affine_network(8, 8, 4, 21);
    let sched = schedule();
    let run = run_for(&net, 7);
    let base = baseline(&net, &run);
    for k in [3, 5, 9] {
        for rho in [0.25, 0.5, 1.0] {
            let cfg = SortblockConfig::fixed(k, rho, inner_window(0.8));
            let (latent, trace) = run_sortblock(&net, &run, &sched, &cfg).unwrap();
            assert_eq!(latent.to_le_bytes(), base.to_le_bytes(), "K={k} rho={rho}");
            assert!(trace
                .steps
                .iter()
                .all(|s| s.blocks.iter().all(|b| !b.copy_fallback)));
        }
    }
}

#[test]
fn affine_rankings_match_the_oracle() {
    let net = affine_network(10, 8, 4, 5);
    let sched = schedule();
    let run = run_for(&net, 2);
    let (_, oracle) = record_baseline(&net, &run, &sched, true).unwrap();
    let (_, trace) = run_sortblock(
        &net,
        &run,
        &sched,
        &SortblockConfig::fixed(5, 0.3, inner_window(0.8)),
    )
    .unwrap();
    let mut ranked = 0;
    for step in trace.steps.iter().filter(|s| s.phase == Phase::Ranked) {
        let policy = step.policy.as_ref().unwrap();
        let tau = ranking_fidelity(
            policy,
            &oracle_similarities(&oracle, step.step - 1).unwrap(),
        )
        .unwrap();
        assert_eq!(tau, 1.0, "step {}", step.step);
        ranked += 1;
    }
    assert_eq!(ranked, 8);
}

#[test]
fn cold_cache_at_window_entry_falls_back_to_copy() {
    let net = affine_network(4, 4, 4, 1);
    let cfg = SortblockConfig::fixed(5, 0.0, Window::new(TOTAL_T, 0).unwrap());
    let (_, trace) = run_sortblock(&net, &run_for(&net, 0), &schedule(), &cfg).unwrap();
    assert_eq!(trace.steps[0].phase, Phase::Full);
    assert!(trace.steps[1].blocks.iter().all(|b| b.copy_fallback));
    assert!(trace.steps[6].blocks.iter().all(|b| !b.copy_fallback));
}

#[test]
fn copy_mode_ignores_the_trend() {
    let net = affine_network(4, 4, 4, 3);
    let run = run_for(&net, 0);
    let cfg = SortblockConfig::fixed(5, 0.0, inner_window(0.8)).with_predict(PredictMode::Copy);
    let (latent, _) = run_sortblock(&net, &run, &schedule(), &cfg).unwrap();
    assert_ne!(latent.to_le_bytes(), baseline(&net, &run).to_le_bytes());
}

#[test]
fn forced_policies_are_validated_and_applied() {
    let net = small_net(7);
    let n = net.num_blocks();
    let sched = schedule();
    let run = run_for(&net, 5);
    let cfg = SortblockConfig::fixed(5, 0.3, inner_window(0.8));
    let bad = RunOptions {
        forced_policies: Some(vec![vec![true; n + 1]]),
        record_outputs: false,
    };
    assert!(matches!(
        run_sortblock_with(&net, &run, &sched, &cfg, bad),
        Err(Error::Config(_))
    ));

    let (_, free) = run_sortblock(&net, &run, &sched, &cfg).unwrap();
    let flags: Vec<Vec<bool>> = free.policies().iter().map(|p| p.flags.clone()).collect();
    let forced = RunOptions {
        forced_policies: Some(flags.clone()),
        record_outputs: false,
    };
    let copy = cfg.clone().with_predict(PredictMode::Copy);
    let (_, replayed) = run_sortblock_with(&net, &run, &sched, &copy, forced).unwrap();
    let replayed_flags: Vec<Vec<bool>> = replayed
        .policies()
        .iter()
        .map(|p| p.flags.clone())
        .collect();
    assert_eq!(replayed_flags, flags);
    assert_eq!(replayed.total_block_evals, free.total_block_evals);

    let short = RunOptions {
        forced_policies: Some(flags[..1].to_vec()),
        record_outputs: false,
    };
    assert!(run_sortblock_with(&net, &run, &sched, &cfg, short).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let net = small_net(8);
    let run = run_for(&net, 0);
    let sched = schedule();
    let mut cfg = SortblockConfig::fixed(1, 0.3, inner_window(0.8));
    assert!(run_sortblock(&net, &run, &sched, &cfg).is_err());
    cfg.refresh_interval = 5;
    cfg.rho = 1.5;
    assert!(run_sortblock(&net, &run, &sched, &cfg).is_err());
    assert!(Window::new(100, 100).is_err());
}
