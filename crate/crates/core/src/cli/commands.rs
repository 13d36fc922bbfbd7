//! The five CLI commands. Each writes its files under the configured output
//! directory and prints a short human-readable report to `out`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Metric, Resolved, RunMode};
use super::csvio::{
    read_csv, write_csv, BlockProfileRow, L1Row, OracleRow, SeedCompareRow, SweepRow,
};
use crate::blob::LatentBlob;
use crate::diffusion::SamplerRun;
use crate::engine::{run_sortblock, RatioMode, Window};
use crate::error::{Error, Result};
use crate::metrics::{compare_latents, CompareReport};
use crate::numerics::FeatureTensor;
use crate::ratio::{fit_ratio_policy, RatioPolicy};
use crate::trace::{oracle_similarities, ranking_fidelity, record_baseline, RunTrace};

pub const L1_CURVE_FILE: &str = "l1_curve.csv";
pub const BLOCK_PROFILE_FILE: &str = "block_profile.csv";
pub const ORACLE_FILE: &str = "oracle_similarity.csv";
pub const COMPARE_FILE: &str = "compare.json";
pub const COMPARE_SEEDS_FILE: &str = "compare_seeds.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub l1_curve: PathBuf,
    pub block_profile: PathBuf,
    pub oracle_similarity: Option<PathBuf>,
    /// Mean L1 over the first 15%, middle 70% and last 15% of the curve.
    pub head_mean: f64,
    pub middle_mean: f64,
    pub tail_mean: f64,
}

/// Baseline run with per-step and per-block difference profiles.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<AnalyzeReport> {
    let r = cfg.resolve()?;
    ensure_dir(&cfg.out_dir)?;
    let run = SamplerRun::from_seed(r.net.latent_shape(), r.steps.clone(), cfg.first_seed());
    let (_, trace) = record_baseline(&r.net, &run, &r.schedule, cfg.heavy_trace)?;

    let curve = l1_rows(&trace)?;
    let l1_path = cfg.path(L1_CURVE_FILE);
    write_csv(&l1_path, &curve)?;

    let profile: Vec<BlockProfileRow> = trace
        .steps
        .iter()
        .flat_map(|s| {
            s.blocks
                .iter()
                .enumerate()
                .map(move |(block, b)| BlockProfileRow {
                    step: s.step,
                    block,
                    l1_in_out: b.l1_in_out,
                })
        })
        .collect();
    let profile_path = cfg.path(BLOCK_PROFILE_FILE);
    write_csv(&profile_path, &profile)?;

    let oracle_path = if trace.is_heavy() {
        let mut rows = Vec::new();
        for step in 0..trace.steps.len().saturating_sub(1) {
            for (block, similarity) in oracle_similarities(&trace, step)?.into_iter().enumerate() {
                rows.push(OracleRow {
                    step,
                    block,
                    similarity,
                });
            }
        }
        let path = cfg.path(ORACLE_FILE);
        write_csv(&path, &rows)?;
        Some(path)
    } else {
        None
    };

    let values: Vec<f64> = curve.iter().map(|r| r.l1).collect();
    let (head_mean, middle_mean, tail_mean) = curve_shape(&values);
    writeln!(
        out,
        "l1 curve: {} points; head {:.5}, middle-70% {:.5}, tail {:.5} ({})",
        values.len(),
        head_mean,
        middle_mean,
        tail_mean,
        if middle_mean < head_mean.min(tail_mean) {
            "dips in the middle"
        } else {
            "no middle dip"
        }
    )
    .map_err(out_err)?;
    Ok(AnalyzeReport {
        l1_curve: l1_path,
        block_profile: profile_path,
        oracle_similarity: oracle_path,
        head_mean,
        middle_mean,
        tail_mean,
    })
}

fn l1_rows(trace: &RunTrace) -> Result<Vec<L1Row>> {
    let outputs = trace
        .model_outputs
        .as_ref()
        .ok_or_else(|| Error::MissingData("baseline trace has no model outputs".into()))?;
    (1..outputs.len())
        .map(|s| {
            Ok(L1Row {
                step: s,
                l1: outputs[s].sub(&outputs[s - 1])?.mean_abs(),
            })
        })
        .collect()
}

/// Means over the first 15%, the middle 70% and the last 15% of `values`.
pub fn curve_shape(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let edge = ((n as f64 * 0.15).round() as usize).clamp(1, n.div_ceil(2));
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let middle = if n > 2 * edge {
        &values[edge..n - edge]
    } else {
        values
    };
    (
        mean(&values[..edge]),
        mean(middle),
        mean(&values[n - edge..]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub policy_file: PathBuf,
    pub degree: usize,
    pub rms_residual: f64,
    /// Residual of a cubic fit on the same curve, for comparison.
    pub cubic_rms_residual: f64,
}

/// Fits the ratio polynomial to an L1 curve file and writes the policy.
pub fn cmd_fit(
    cfg: &ExperimentConfig,
    curve_file: &Path,
    degree: usize,
    beta: f64,
    out: &mut dyn Write,
) -> Result<FitReport> {
    if !(3..=5).contains(&degree) {
        return Err(Error::Config(format!(
            "--degree must be 3, 4 or 5, got {degree}"
        )));
    }
    cfg.validate()?;
    let r_steps = crate::diffusion::step_list(cfg.schedule.total_timesteps, cfg.steps)?;
    let rows: Vec<L1Row> = read_csv(curve_file)?;
    let mut ts = Vec::with_capacity(rows.len());
    let mut l1 = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let t = *r_steps.get(row.step).ok_or_else(|| Error::Parse {
            path: curve_file.to_path_buf(),
            line: i as u64 + 2,
            message: format!(
                "step {} is outside the {}-step schedule",
                row.step, cfg.steps
            ),
        })?;
        ts.push(t as f64);
        l1.push(row.l1);
    }
    let policy = fit_ratio_policy(&ts, &l1, degree, beta)?;
    let cubic = fit_ratio_policy(&ts, &l1, 3, beta)?;
    let report = FitReport {
        policy_file: cfg.path(&cfg.sortblock.policy_file),
        degree,
        rms_residual: fit_rms(&policy, &ts, &l1),
        cubic_rms_residual: fit_rms(&cubic, &ts, &l1),
    };
    ensure_dir(&cfg.out_dir)?;
    fs::write(&report.policy_file, policy.to_json() + "\n")
        .map_err(|e| Error::io(&report.policy_file, e))?;
    writeln!(
        out,
        "fit degree {degree}: rms residual {:.6e} (degree 3: {:.6e}) -> {}",
        report.rms_residual,
        report.cubic_rms_residual,
        report.policy_file.display()
    )
    .map_err(out_err)?;
    Ok(report)
}

/// Root-mean-square gap between the fitted curve and the samples, in the
/// samples' own units.
pub fn fit_rms(policy: &RatioPolicy, ts: &[f64], l1: &[f64]) -> f64 {
    if ts.is_empty() {
        return 0.0;
    }
    let sq: f64 = ts
        .iter()
        .zip(l1)
        .map(|(&t, &v)| (policy.fitted_l1(t) - v).powi(2))
        .sum();
    (sq / ts.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub seed: u64,
    pub block_evals: u64,
    pub baseline_evals: u64,
    pub speedup: f64,
    /// Steps at which every block was predicted once to rank them. These
    /// predictions cost no block evaluations.
    pub ranking_passes: usize,
    pub wall_time_secs: f64,
    pub latent: PathBuf,
    pub trace_dir: PathBuf,
}

pub fn speedup(baseline_evals: u64, evals: u64) -> f64 {
    if evals == 0 {
        f64::INFINITY
    } else {
        baseline_evals as f64 / evals as f64
    }
}

/// File stem shared by a run's latent and trace directory.
pub fn run_stem(mode: RunMode, seed: u64) -> String {
    format!("{}-seed{seed}", mode.name())
}

fn sample_one(
    cfg: &ExperimentConfig,
    r: &Resolved,
    seed: u64,
) -> Result<(FeatureTensor, RunTrace)> {
    let run = SamplerRun::from_seed(r.net.latent_shape(), r.steps.clone(), seed);
    match cfg.mode {
        RunMode::Baseline => record_baseline(&r.net, &run, &r.schedule, cfg.heavy_trace),
        RunMode::Sortblock => {
            let engine = cfg.engine_config(r.window)?;
            run_sortblock(&r.net, &run, &r.schedule, &engine)
        }
    }
}

/// One sampling run: latent blob, trace directory and a summary line.
pub fn cmd_run(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<RunSummary> {
    let r = cfg.resolve()?;
    ensure_dir(&cfg.out_dir)?;
    let seed = cfg.first_seed();
    let (latent, trace) = sample_one(cfg, &r, seed)?;
    let stem = run_stem(cfg.mode, seed);
    let latent_path = cfg.path(format!("{stem}.latent"));
    LatentBlob::new(latent, seed, cfg.latent_hash()).write(&latent_path)?;
    let trace_dir = cfg.path(format!("{stem}-trace"));
    trace.write_dir(&trace_dir)?;

    let baseline_evals = (r.steps.len() * r.net.num_blocks()) as u64;
    let summary = RunSummary {
        mode: cfg.mode,
        seed,
        block_evals: trace.total_block_evals,
        baseline_evals,
        speedup: speedup(baseline_evals, trace.total_block_evals),
        ranking_passes: trace.phase_counts().ranked,
        wall_time_secs: trace.wall_time_secs,
        latent: latent_path,
        trace_dir,
    };
    write_json(&cfg.path(SUMMARY_FILE), &summary)?;
    writeln!(
        out,
        "evals {} baseline_evals {} speedup {}/{} = {:.6} ranking_passes {} wall_time {:.3}s",
        summary.block_evals,
        summary.baseline_evals,
        summary.baseline_evals,
        summary.block_evals,
        summary.speedup,
        summary.ranking_passes,
        summary.wall_time_secs
    )
    .map_err(out_err)?;
    Ok(summary)
}

fn report_json(report: &CompareReport, metrics: &[Metric]) -> BTreeMap<&'static str, f64> {
    metrics
        .iter()
        .map(|m| match m {
            Metric::Psnr => ("psnr_db", report.psnr_db),
            Metric::Ssim => ("ssim", report.ssim),
            Metric::RelativeL2 => ("relative_l2", report.relative_l2),
        })
        .collect()
}

/// Compares two latent blobs; `candidate` is scored against `reference`.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    candidate: &Path,
    reference: &Path,
    out: &mut dyn Write,
) -> Result<CompareReport> {
    let a = LatentBlob::read(candidate)?;
    let b = LatentBlob::read(reference)?;
    if a.header.shape != b.header.shape {
        return Err(Error::Shape(format!(
            "{} has shape {:?}, {} has {:?}",
            candidate.display(),
            a.header.shape,
            reference.display(),
            b.header.shape
        )));
    }
    let report = if a.to_bytes() == b.to_bytes() {
        CompareReport::IDENTICAL
    } else {
        compare_latents(&a.latent, &b.latent)?
    };
    let json = report_json(&report, &cfg.metrics);
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.path(COMPARE_FILE), &json)?;
    writeln!(
        out,
        "{}",
        serde_json::to_string(&json).expect("report serializes")
    )
    .map_err(out_err)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub per_seed: Vec<SeedCompareRow>,
    pub mean: SeedCompareRow,
}

/// Baseline against the configured engine for every seed in the config.
pub fn cmd_compare_seeds(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<PairedReport> {
    let r = cfg.resolve()?;
    let engine = cfg.engine_config(r.window)?;
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = SamplerRun::from_seed(r.net.latent_shape(), r.steps.clone(), seed);
        let base =
            crate::diffusion::sample(&r.net, &run, &r.schedule, &mut crate::dit::PassThrough)?;
        let (latent, _) = run_sortblock(&r.net, &run, &r.schedule, &engine)?;
        let c = compare_latents(&latent, &base)?;
        rows.push(SeedCompareRow {
            seed,
            psnr_db: c.psnr_db,
            ssim: c.ssim,
            relative_l2: c.relative_l2,
        });
    }
    let n = rows.len() as f64;
    let mean = SeedCompareRow {
        seed: 0,
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        relative_l2: rows.iter().map(|r| r.relative_l2).sum::<f64>() / n,
    };
    ensure_dir(&cfg.out_dir)?;
    write_csv(&cfg.path(COMPARE_SEEDS_FILE), &rows)?;
    let report = PairedReport {
        per_seed: rows,
        mean,
    };
    write_json(&cfg.path(COMPARE_FILE), &report)?;
    for row in &report.per_seed {
        writeln!(
            out,
            "seed {}: psnr {:.3} dB, ssim {:.5}, rel_l2 {:.5}",
            row.seed, row.psnr_db, row.ssim, row.relative_l2
        )
        .map_err(out_err)?;
    }
    writeln!(
        out,
        "mean over {} seeds: psnr {:.3} dB, ssim {:.5}, rel_l2 {:.5}",
        report.per_seed.len(),
        report.mean.psnr_db,
        report.mean.ssim,
        report.mean.relative_l2
    )
    .map_err(out_err)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    RefreshInterval,
    Beta,
    Window,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" | "refresh-interval" => Ok(Self::RefreshInterval),
            "beta" => Ok(Self::Beta),
            "window" => Ok(Self::Window),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected k, beta or window"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RefreshInterval => "k",
            Self::Beta => "beta",
            Self::Window => "window",
        }
    }
}

/// Window sweep values: `early` and `late` cover the first and second half
/// of the step list, `innerNN` the middle NN percent, `H:L` explicit
/// timestep bounds.
pub fn parse_window(value: &str, steps: &[usize]) -> Result<Window> {
    let n = steps.len();
    let bad = || Error::Config(format!("bad window value {value:?}"));
    match value {
        "early" if n >= 4 => Window::new(steps[0], steps[n / 2 - 1]),
        "late" if n >= 4 => Window::new(steps[n / 2], steps[n - 1]),
        v if v.starts_with("inner") => {
            let pct: f64 = v["inner".len()..].parse().map_err(|_| bad())?;
            Window::inner(steps, pct / 100.0)
        }
        v => {
            let (h, l) = v.split_once(':').ok_or_else(bad)?;
            Window::new(h.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?)
        }
    }
}

struct SeedBaseline {
    run: SamplerRun,
    latent: FeatureTensor,
    trace: RunTrace,
}

/// Runs the engine once per sweep value and seed and tabulates cost,
/// fidelity against the baseline and ranking agreement with the oracle.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: &mut dyn Write,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let r = cfg.resolve()?;
    ensure_dir(&cfg.out_dir)?;
    let baselines: Vec<SeedBaseline> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let run = SamplerRun::from_seed(r.net.latent_shape(), r.steps.clone(), seed);
            let (latent, trace) = record_baseline(&r.net, &run, &r.schedule, true)?;
            Ok(SeedBaseline { run, latent, trace })
        })
        .collect::<Result<_>>()?;
    let baseline_evals = (r.steps.len() * r.net.num_blocks()) as u64;

    let mut keyed = Vec::with_capacity(values.len());
    for value in values {
        let mut c = cfg.clone();
        let key = match axis {
            SweepAxis::RefreshInterval => {
                c.sortblock.refresh_interval = value.parse().map_err(|_| {
                    Error::Config(format!("refresh interval {value:?} is not an integer"))
                })?;
                c.sortblock.refresh_interval as f64
            }
            SweepAxis::Beta => {
                c.sortblock.beta = value
                    .parse()
                    .map_err(|_| Error::Config(format!("beta {value:?} is not a number")))?;
                c.sortblock.ratio = RatioMode::Adaptive;
                c.sortblock.beta
            }
            SweepAxis::Window => {
                let w = parse_window(value, &r.steps)?;
                c.sortblock.window_high = Some(w.high);
                c.sortblock.window_low = Some(w.low);
                -(w.high as f64)
            }
        };
        keyed.push((key, value.clone(), c));
    }
    if axis == SweepAxis::Beta && !cfg.path(&cfg.sortblock.policy_file).exists() {
        let first = &baselines[0];
        let ts: Vec<f64> = (1..r.steps.len()).map(|s| r.steps[s] as f64).collect();
        let l1: Vec<f64> = l1_rows(&first.trace)?
            .into_iter()
            .map(|row| row.l1)
            .collect();
        let policy = fit_ratio_policy(&ts, &l1, 5, 1.0)?;
        let path = cfg.path(&cfg.sortblock.policy_file);
        fs::write(&path, policy.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
        writeln!(out, "fitted a degree-5 ratio policy -> {}", path.display()).map_err(out_err)?;
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rows = Vec::with_capacity(keyed.len());
    for (_, value, c) in keyed {
        let window = c.window_for(&r.steps)?;
        let engine = c.engine_config(window)?;
        let (mut evals, mut psnr, mut ssim, mut rel, mut taus) = (0u64, 0.0, 0.0, 0.0, Vec::new());
        for b in &baselines {
            let (latent, trace) = run_sortblock(&r.net, &b.run, &r.schedule, &engine)?;
            evals += trace.total_block_evals;
            let cmp = compare_latents(&latent, &b.latent)?;
            psnr += cmp.psnr_db;
            ssim += cmp.ssim;
            rel += cmp.relative_l2;
            for step in &trace.steps {
                if let Some(policy) = &step.policy {
                    let oracle = oracle_similarities(&b.trace, step.step - 1)?;
                    taus.push(ranking_fidelity(policy, &oracle)?);
                }
            }
        }
        let n = baselines.len() as f64;
        let block_evals = evals / baselines.len() as u64;
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value,
            block_evals,
            baseline_evals,
            speedup: speedup(baseline_evals, block_evals),
            psnr_db: psnr / n,
            ssim: ssim / n,
            relative_l2: rel / n,
            mean_tau: if taus.is_empty() {
                f64::NAN
            } else {
                taus.iter().sum::<f64>() / taus.len() as f64
            },
        });
    }
    write_csv(&cfg.path(format!("sweep_{}.csv", axis.name())), &rows)?;
    for row in &rows {
        writeln!(
            out,
            "{}={}: evals {} speedup {:.4} psnr {:.3} ssim {:.5} tau {:.3}",
            row.axis, row.value, row.block_evals, row.speedup, row.psnr_db, row.ssim, row.mean_tau
        )
        .map_err(out_err)?;
    }
    Ok(rows)
}
