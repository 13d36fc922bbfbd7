//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{affine_network, inner_window, lifecycle_evals, run_for, schedule, steps, TOTAL_T};
use sortblock::diffusion::{ddim_step, forward_noise, sample, NoiseSchedule, SamplerRun};
use sortblock::dit::{init_network, DitConfig, Network, PassThrough};
use sortblock::engine::{
    recompute_budget, run_sortblock, run_sortblock_with, PredictMode, RunOptions, SortblockConfig,
    Window,
};
use sortblock::metrics::{
    compare_latents, psnr, psnr_from_mse, relative_l2, ssim, ImageView, PSNR_CAP_DB,
};
use sortblock::numerics::{polyfit, standard_normal, FeatureTensor, Polynomial, Rng};
use sortblock::ratio::{fit_ratio_policy, measure_l1_curve, RatioPolicy};
use sortblock::trace::{oracle_similarities, ranking_fidelity, record_baseline, RunTrace};
use sortblock::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Default toy network and the engine config the CLI uses by default.
fn default_net() -> Network {
    init_network(&DitConfig::default()).unwrap()
}

fn default_engine() -> SortblockConfig {
    SortblockConfig::fixed(5, 0.25, inner_window(0.9))
}

fn baseline(net: &Network, run: &SamplerRun) -> Result<FeatureTensor> {
    sample(net, run, &schedule(), &mut PassThrough)
}

fn timed(budget: Option<Duration>, elapsed: Duration, o: Outcome) -> Outcome {
    let Some(budget) = budget else {
        return outcome(
            o.pass,
            format!("{}; {:.1}s", o.detail, elapsed.as_secs_f64()),
        );
    };
    let within = elapsed <= budget;
    outcome(
        o.pass && within,
        format!(
            "{}; {:.1}s of {:.0}s budget{}",
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs_f64(),
            if within { "" } else { " EXCEEDED" }
        ),
    )
}

fn exactness() -> Result<Outcome> {
    let net = default_net();
    let sched = schedule();
    let full = SortblockConfig::fixed(5, 1.0, inner_window(0.9));
    let empty = SortblockConfig::fixed(5, 0.25, Window::empty_for(TOTAL_T));
    let mut identical = 0;
    for seed in 0..10 {
        let run = run_for(&net, seed);
        let base = baseline(&net, &run)?.to_le_bytes();
        let a = run_sortblock(&net, &run, &sched, &full)?.0.to_le_bytes();
        let b = run_sortblock(&net, &run, &sched, &empty)?.0.to_le_bytes();
        identical += usize::from(a == base && b == base);
    }
    Ok(outcome(
        identical == 10,
        format!("{identical}/10 seeds byte-identical for rho=1 and for an empty window"),
    ))
}

fn accounting() -> Result<Outcome> {
    let net = default_net();
    let n = net.num_blocks();
    let run = run_for(&net, 0);
    let mut pass = true;
    let mut parts = Vec::new();
    for (rho, frac, floor) in [(0.3, 0.8, 1.7), (0.25, 0.9, 2.0)] {
        let window = inner_window(frac);
        let cfg = SortblockConfig::fixed(5, rho, window);
        let (_, trace) = run_sortblock(&net, &run, &schedule(), &cfg)?;
        let expect = lifecycle_evals(&steps(), window, 5, n, recompute_budget(rho, n));
        let baseline = (steps().len() * n) as u64;
        let speedup = baseline as f64 / trace.total_block_evals as f64;
        pass &= trace.total_block_evals == expect && speedup >= floor;
        parts.push(format!(
            "rho={rho} inner{:.0}%: {} evals (formula {expect}), {baseline}/{} = {speedup:.3}x (need >= {floor})",
            frac * 100.0,
            trace.total_block_evals,
            trace.total_block_evals
        ));
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn linear_beats_copy() -> Result<Outcome> {
    let net = default_net();
    let sched = schedule();
    let linear = default_engine();
    let copy = linear.clone().with_predict(PredictMode::Copy);
    let (mut wins, mut lin_sum, mut copy_sum) = (0, 0.0, 0.0);
    let seeds = 20;
    for seed in 0..seeds {
        let run = run_for(&net, seed);
        let base = baseline(&net, &run)?;
        let (lin_latent, lin_trace) = run_sortblock(&net, &run, &sched, &linear)?;
        let flags = lin_trace
            .policies()
            .iter()
            .map(|p| p.flags.clone())
            .collect();
        let forced = RunOptions {
            forced_policies: Some(flags),
            record_outputs: false,
        };
        let (copy_latent, _) = run_sortblock_with(&net, &run, &sched, &copy, forced)?;
        let lin = relative_l2(&lin_latent, &base)?;
        let cp = relative_l2(&copy_latent, &base)?;
        wins += usize::from(lin <= cp);
        lin_sum += lin;
        copy_sum += cp;
    }
    let (lin_mean, copy_mean) = (lin_sum / seeds as f64, copy_sum / seeds as f64);
    Ok(outcome(
        wins * 10 >= seeds as usize * 8 && lin_mean < copy_mean,
        format!(
            "linear <= copy in {wins}/{seeds} pairs; mean rel-L2 {lin_mean:.5} vs {copy_mean:.5}"
        ),
    ))
}

fn affine_exactness() -> Result<Outcome> {
    let net = affine_network(12, 16, 8, 11);
    let sched = schedule();
    let run = SamplerRun::from_seed(net.latent_shape(), steps(), 3);
    let base = baseline(&net, &run)?.to_le_bytes();
    let mut exact = 0;
    for k in [3, 5, 9] {
        for rho in [0.25, 0.5, 1.0] {
            let cfg = SortblockConfig::fixed(k, rho, inner_window(0.8));
            exact += usize::from(run_sortblock(&net, &run, &sched, &cfg)?.0.to_le_bytes() == base);
        }
    }
    Ok(outcome(
        exact == 9,
        format!("{exact}/9 (K, rho) pairs bit-exact"),
    ))
}

/// Kendall tau of every ranked step in `trace` against the oracle built from
/// the baseline trace. A ranking made at step s predicts the delta change
/// from s-1 to s.
fn taus(trace: &RunTrace, oracle: &RunTrace) -> Result<Vec<f64>> {
    trace
        .steps
        .iter()
        .filter_map(|s| s.policy.as_ref().map(|p| (s.step, p)))
        .map(|(step, p)| ranking_fidelity(p, &oracle_similarities(oracle, step - 1)?))
        .collect()
}

fn oracle_agreement() -> Result<Outcome> {
    let sched = schedule();
    let affine = affine_network(12, 16, 8, 4);
    let run = SamplerRun::from_seed(affine.latent_shape(), steps(), 1);
    let (_, oracle) = record_baseline(&affine, &run, &sched, true)?;
    let (_, trace) = run_sortblock(
        &affine,
        &run,
        &sched,
        &SortblockConfig::fixed(5, 0.3, inner_window(0.8)),
    )?;
    let affine_taus = taus(&trace, &oracle)?;
    let affine_ok = !affine_taus.is_empty() && affine_taus.iter().all(|&t| t == 1.0);

    let net = default_net();
    let mut all = Vec::new();
    let mut adjacent = Vec::new();
    for seed in 0..10 {
        let run = run_for(&net, seed);
        let (_, oracle) = record_baseline(&net, &run, &sched, true)?;
        let (_, trace) = run_sortblock(&net, &run, &sched, &default_engine())?;
        all.extend(taus(&trace, &oracle)?);
        for s in 0..steps().len() - 1 {
            adjacent.extend(oracle_similarities(&oracle, s)?);
        }
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let smooth = adjacent.iter().sum::<f64>() / adjacent.len() as f64;
    Ok(outcome(
        affine_ok && mean > 0.0,
        format!(
            "affine tau = 1 at {}/{} ranked steps; toy mean tau {mean:.4} over {} ranked steps (adjacent-step delta cosine {smooth:.4})",
            affine_taus.iter().filter(|&&t| t == 1.0).count(),
            affine_taus.len(),
            all.len()
        ),
    ))
}

/// Number of seeds whose PSNR rises somewhere along `runs`, which are
/// ordered by strictly decreasing eval count.
fn psnr_inversions(per_seed: &[Vec<(u64, f64)>]) -> usize {
    per_seed
        .iter()
        .filter(|runs| runs.windows(2).any(|w| w[1].0 < w[0].0 && w[1].1 > w[0].1))
        .count()
}

fn ablation_monotonicity() -> Result<Outcome> {
    let net = default_net();
    let sched = schedule();
    let window = inner_window(0.9);

    let first = run_for(&net, 0);
    let (_, light) = record_baseline(&net, &first, &sched, false)?;
    let (timesteps, l1) = measure_l1_curve(&light)?;
    let ts: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
    let policy: RatioPolicy = fit_ratio_policy(&ts, &l1, 5, 1.0)?;

    let k_cfgs: Vec<SortblockConfig> = [3, 5, 9]
        .iter()
        .map(|&k| SortblockConfig::fixed(k, 0.25, window))
        .collect();
    let beta_cfgs: Vec<SortblockConfig> = [1.0, 0.5, 0.2]
        .iter()
        .map(|&b| SortblockConfig::adaptive(5, policy.clone(), b, window))
        .collect();

    let mut k_runs = Vec::new();
    let mut beta_runs = Vec::new();
    let mut evals_ok = true;
    let mut k_evals = Vec::new();
    let mut beta_evals = Vec::new();
    for seed in 0..10 {
        let run = run_for(&net, seed);
        let base = baseline(&net, &run)?;
        for (cfgs, sink, shown) in [
            (&k_cfgs, &mut k_runs, &mut k_evals),
            (&beta_cfgs, &mut beta_runs, &mut beta_evals),
        ] {
            let mut row = Vec::new();
            for cfg in cfgs {
                let (latent, trace) = run_sortblock(&net, &run, &sched, cfg)?;
                row.push((
                    trace.total_block_evals,
                    compare_latents(&latent, &base)?.psnr_db,
                ));
            }
            // Both lists run from the most to the least expensive setting.
            evals_ok &= row.windows(2).all(|w| w[1].0 <= w[0].0);
            if seed == 0 {
                *shown = row.iter().map(|r| r.0).collect();
            }
            sink.push(row);
        }
    }
    let k_inv = psnr_inversions(&k_runs);
    let beta_inv = psnr_inversions(&beta_runs);
    Ok(outcome(
        evals_ok && k_inv <= 1 && beta_inv <= 1,
        format!(
            "evals K=3,5,9 {k_evals:?}, beta=1.0,0.5,0.2 {beta_evals:?}; PSNR inversions: {k_inv}/10 seeds over K, {beta_inv}/10 over beta"
        ),
    ))
}

fn sampler_identities() -> Result<Outcome> {
    let equal = NoiseSchedule::from_betas(vec![0.5, 0.0])?;
    let z = standard_normal(&mut Rng::new(1), 8, 8);
    let eps = standard_normal(&mut Rng::new(2), 8, 8);
    let fixed = ddim_step(&z, &eps, 1, Some(0), &equal, None)?;
    let fixed_ok = fixed == z;

    let sched = schedule();
    let z0 = standard_normal(&mut Rng::new(3), 16, 16);
    let mut worst_rec: f64 = 0.0;
    for t in steps() {
        let zt = forward_noise(&z0, t, &sched, &eps_like(&z0, t))?;
        let rec = ddim_step(&zt, &eps_like(&z0, t), t, None, &sched, None)?;
        worst_rec = worst_rec.max(rec.sub(&z0)?.l2_norm() / z0.l2_norm());
    }

    let zeros = FeatureTensor::zeros(500, 200);
    let mut worst_var: f64 = 0.0;
    for t in [50usize, 300, 700, 999] {
        let noise = standard_normal(&mut Rng::new(100 + t as u64), 500, 200);
        let zt = forward_noise(&zeros, t, &sched, &noise)?;
        let n = zt.len() as f64;
        let mean = zt.as_slice().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = zt
            .as_slice()
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n;
        let want = 1.0 - sched.alphas_bar()[t];
        worst_var = worst_var.max((var - want).abs() / want);
    }
    Ok(outcome(
        fixed_ok && worst_rec <= 1e-4 && worst_var <= 0.05,
        format!(
            "equal-alpha step exact: {fixed_ok}; worst x0 reconstruction {worst_rec:.2e} (<= 1e-4); worst variance error {:.2}% (<= 5%)",
            worst_var * 100.0
        ),
    ))
}

fn eps_like(z: &FeatureTensor, t: usize) -> FeatureTensor {
    standard_normal(&mut Rng::new(7_000 + t as u64), z.rows(), z.cols())
}

fn metric_identities() -> Result<Outcome> {
    let truth = Polynomial::new(vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.25])?;
    let xs: Vec<f64> = (0..40).map(|i| -1.0 + i as f64 / 19.5).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| truth.eval(x)).collect();
    let fit = polyfit(&xs, &ys, 5)?;
    let poly_err = fit
        .coefficients()
        .iter()
        .zip(truth.coefficients())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut rng = Rng::new(5);
    let plane: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
    let img = ImageView::new(8, 8, vec![plane])?;
    let self_ssim = ssim(&img, &img)?;
    let self_psnr = psnr(&img, &img)?;
    let grey = psnr(
        &ImageView::constant(8, 8, 1, 0.0),
        &ImageView::constant(8, 8, 1, 0.1),
    )?;

    let x = standard_normal(&mut Rng::new(6), 16, 16);
    let same = compare_latents(&x, &x)?;
    let pass = poly_err <= 1e-8
        && self_ssim == 1.0
        && self_psnr == PSNR_CAP_DB
        && (grey - 20.0).abs() < 1e-9
        && psnr_from_mse(0.01) == 20.0
        && same.psnr_db == PSNR_CAP_DB
        && same.ssim == 1.0
        && same.relative_l2 == 0.0;
    Ok(outcome(
        pass,
        format!(
            "polyfit max coefficient error {poly_err:.1e}; ssim(x,x) = {self_ssim}; psnr(x,x) = {self_psnr}; psnr at mse 0.01 = {grey:.6}; compare(x,x) = ({}, {}, {}); unit suites run under cargo test",
            same.psnr_db, same.ssim, same.relative_l2
        ),
    ))
}

type Criterion = (&'static str, Option<u64>, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("exactness degeneracy", Some(30), exactness),
        ("compute accounting", Some(10), accounting),
        ("linear prediction beats copy", Some(120), linear_beats_copy),
        ("affine exactness", None, affine_exactness),
        ("oracle agreement", None, oracle_agreement),
        ("ablation monotonicity", None, ablation_monotonicity),
        ("sampler identities", None, sampler_identities),
        ("metric and unit identities", None, metric_identities),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = match check() {
            Ok(o) => timed(budget.map(Duration::from_secs), start.elapsed(), o),
            Err(e) => outcome(false, format!("error: {e}")),
        };
        failed += usize::from(!o.pass);
        println!(
            "{} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
