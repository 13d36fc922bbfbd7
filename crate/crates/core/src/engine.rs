//! Block-wise feature cache driven by residual-delta similarity ranking.
//!
//! Inside the application window the sampler steps are grouped into refresh
//! cycles of `K` steps, counted from window entry:
//!
//! * phase 0: every block runs; its residual delta becomes the reference.
//! * phase 1: every block output is first extrapolated from the cache, the
//!   extrapolated deltas are compared to the references, and the
//!   `ceil(rho * N)` least similar blocks are flagged. Flagged blocks then
//!   run for real; the rest serve their extrapolation.
//! * phases 2..K: flagged blocks run, the others are extrapolated.
//!
//! Steps outside the window run every block and keep the cache warm.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, NoiseSchedule, SamplerRun};
use crate::dit::{BlockHook, BlockIO, Network, StepContext};
use crate::error::{shape_err, Error, Result};
use crate::numerics::FeatureTensor;
use crate::ratio::RatioPolicy;
use crate::trace::{BlockRecord, Phase, RunTrace, StepRecord};

/// Norm below which a delta counts as "no change".
const ZERO_NORM: f64 = 1e-12;

/// Cosine similarity of two tensors, flattened.
///
/// A zero-norm operand yields `1.0`: a block that did not change is the best
/// reuse candidate.
pub fn cosine_similarity(a: &FeatureTensor, b: &FeatureTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("cosine of {:?} and {:?}", a.shape(), b.shape()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(1.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cached output of one block.
///
/// `value` is the newest real evaluation. The extrapolation slope comes from
/// the two most recent full-compute steps (`prev_value` and `full_value`,
/// `interval` steps apart). Blocks recomputed at a partial step see inputs
/// that are partly predicted, so their outputs refresh `value` but never the
/// slope.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCacheEntry {
    pub value: FeatureTensor,
    pub last_compute_step: usize,
    pub full_value: FeatureTensor,
    pub full_step: usize,
    pub prev_value: Option<FeatureTensor>,
    /// Steps between `prev_value` and `full_value`.
    pub interval: usize,
}

impl BlockCacheEntry {
    /// Entry seeded by a full-compute evaluation at `step`.
    pub fn new(step: usize, value: FeatureTensor) -> Self {
        Self {
            full_value: value.clone(),
            value,
            last_compute_step: step,
            full_step: step,
            prev_value: None,
            interval: 0,
        }
    }

    /// Stores an evaluation from a step where every block was computed.
    pub fn record_full(&mut self, step: usize, value: FeatureTensor) {
        debug_assert!(step > self.full_step);
        let old = std::mem::replace(&mut self.full_value, value.clone());
        self.prev_value = Some(old);
        self.interval = step.saturating_sub(self.full_step).max(1);
        self.full_step = step;
        self.value = value;
        self.last_compute_step = step;
    }

    /// Stores an evaluation from a step where only some blocks ran.
    pub fn record_partial(&mut self, step: usize, value: FeatureTensor) {
        debug_assert!(step > self.last_compute_step);
        self.value = value;
        self.last_compute_step = step;
    }

    /// Two full computations are on record, so a slope exists.
    pub fn can_extrapolate(&self) -> bool {
        self.prev_value.is_some() && self.interval >= 1
    }
}

/// First-order extrapolation `k` steps past the newest cached value:
/// `value + (full_value - prev_value) / interval * k`.
///
/// With a single full computation on record this degrades to a copy.
pub fn linear_predict(entry: &BlockCacheEntry, k: usize) -> FeatureTensor {
    let Some(prev) = entry
        .prev_value
        .as_ref()
        .filter(|_| entry.can_extrapolate())
    else {
        return entry.value.clone();
    };
    if k == 0 {
        return entry.value.clone();
    }
    let (interval, k) = (entry.interval as f32, k as f32);
    let mut out = entry.value.clone();
    let trend = entry.full_value.as_slice().iter().zip(prev.as_slice());
    for (o, (&f, &p)) in out.as_mut_slice().iter_mut().zip(trend) {
        *o += (f - p) / interval * k;
    }
    out
}

/// Recompute flags for one refresh cycle with the scores that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySequence {
    pub flags: Vec<bool>,
    pub scores: Vec<f64>,
    pub created_at_step: usize,
}

impl PolicySequence {
    pub fn recompute_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Number of blocks to recompute for ratio `rho`: `ceil(rho * n)` in `[0, n]`.
pub fn recompute_budget(rho: f64, n: usize) -> usize {
    let rho = if rho.is_nan() {
        0.0
    } else {
        rho.clamp(0.0, 1.0)
    };
    // the small offset keeps 0.1 * 30 = 3.0000000000000004 from rounding up
    ((rho * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Block indices ordered by ascending score, ties by ascending index.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Flags the `ceil(rho * N)` blocks with the lowest scores.
pub fn select_blocks(scores: &[f64], rho: f64) -> PolicySequence {
    let budget = recompute_budget(rho, scores.len());
    let mut flags = vec![false; scores.len()];
    for &i in ascending_order(scores).iter().take(budget) {
        flags[i] = true;
    }
    PolicySequence {
        flags,
        scores: scores.to_vec(),
        created_at_step: 0,
    }
}

/// How skipped blocks are served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    #[default]
    Linear,
    /// Reuse the last computed value unchanged.
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    #[default]
    Fixed,
    Adaptive,
}

/// Timestep range `[low, high]` in which caching is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub high: usize,
    pub low: usize,
}

impl Window {
    pub fn new(high: usize, low: usize) -> Result<Self> {
        if high <= low {
            return Err(Error::Config(format!(
                "window high ({high}) must exceed window low ({low})"
            )));
        }
        Ok(Self { high, low })
    }

    pub fn contains(&self, t: usize) -> bool {
        self.high >= t && t >= self.low
    }

    /// The window covering the middle `fraction` of `steps`. Excluded steps
    /// are split between the two ends, the extra one going to the start.
    pub fn inner(steps: &[usize], fraction: f64) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::Config(
                "inner window needs at least two steps".into(),
            ));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "window fraction {fraction} not in (0, 1]"
            )));
        }
        let n = steps.len();
        let active = ((n as f64 * fraction).round() as usize).clamp(2, n);
        let outside = n - active;
        let lead = outside - outside / 2;
        Self::new(steps[lead], steps[lead + active - 1])
    }

    /// A window no timestep in `[0, total)` falls into.
    pub fn empty_for(total: usize) -> Self {
        Self {
            high: total + 1,
            low: total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortblockConfig {
    /// Refresh interval `K`: steps per policy cycle.
    pub refresh_interval: usize,
    pub ratio_mode: RatioMode,
    /// Recompute ratio in fixed mode.
    pub rho: f64,
    /// Fitted ratio curve for adaptive mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_policy: Option<RatioPolicy>,
    /// Global scaling of the adaptive curve; replaces the policy's own beta.
    pub beta: f64,
    pub window: Window,
    #[serde(default)]
    pub predict: PredictMode,
}

impl SortblockConfig {
    pub fn fixed(refresh_interval: usize, rho: f64, window: Window) -> Self {
        Self {
            refresh_interval,
            ratio_mode: RatioMode::Fixed,
            rho,
            ratio_policy: None,
            beta: 1.0,
            window,
            predict: PredictMode::Linear,
        }
    }

    pub fn adaptive(
        refresh_interval: usize,
        policy: RatioPolicy,
        beta: f64,
        window: Window,
    ) -> Self {
        Self {
            refresh_interval,
            ratio_mode: RatioMode::Adaptive,
            rho: 0.0,
            ratio_policy: Some(policy),
            beta,
            window,
            predict: PredictMode::Linear,
        }
    }

    pub fn with_predict(mut self, predict: PredictMode) -> Self {
        self.predict = predict;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.refresh_interval < 2 {
            return Err(Error::Config(format!(
                "refresh interval must be at least 2, got {}",
                self.refresh_interval
            )));
        }
        if self.window.high <= self.window.low {
            return Err(Error::Config("window high must exceed window low".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} not in [0, 1]", self.beta)));
        }
        match self.ratio_mode {
            RatioMode::Fixed if !(0.0..=1.0).contains(&self.rho) => {
                Err(Error::Config(format!("rho {} not in [0, 1]", self.rho)))
            }
            RatioMode::Adaptive if self.ratio_policy.is_none() => Err(Error::Config(
                "adaptive ratio mode needs a fitted ratio policy".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Recompute ratio at timestep `t`.
    pub fn ratio_at(&self, t: usize) -> f64 {
        match (self.ratio_mode, &self.ratio_policy) {
            (RatioMode::Adaptive, Some(policy)) => policy.evaluate_with_beta(t as f64, self.beta),
            _ => self.rho,
        }
    }
}

impl Default for SortblockConfig {
    /// K = 5, rho = 0.3, window over the inner 80% of a 50-step list on
    /// 1000 timesteps.
    fn default() -> Self {
        Self::fixed(
            5,
            0.3,
            Window {
                high: 880,
                low: 100,
            },
        )
    }
}

/// Where a set of residual deltas came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaSource {
    Computed,
    Predicted,
}

/// One delta per block from a single step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDeltaRecord {
    pub deltas: Vec<FeatureTensor>,
    pub source: DeltaSource,
    pub step: usize,
}

#[derive(Debug, Default, Clone)]
pub struct RunOptions {
    /// Policies to apply at successive ranked steps instead of the engine's
    /// own selection. Scores are still computed and traced.
    pub forced_policies: Option<Vec<Vec<bool>>>,
    /// Keep every step's model output in the trace.
    pub record_outputs: bool,
}

struct StepState {
    ctx: StepContext,
    phase: Phase,
    ratio: Option<f64>,
    blocks: Vec<BlockRecord>,
    predictions: Vec<Option<FeatureTensor>>,
    evals: usize,
}

/// The caching engine; install it as the sampler's [`BlockHook`].
pub struct SortblockEngine {
    cfg: SortblockConfig,
    num_blocks: usize,
    cache: Vec<Option<BlockCacheEntry>>,
    reference: Option<StepDeltaRecord>,
    policy: Option<PolicySequence>,
    window_entry: Option<usize>,
    forced: Option<Vec<Vec<bool>>>,
    ranked_steps_seen: usize,
    current: Option<StepState>,
    steps: Vec<StepRecord>,
    outputs: Option<Vec<FeatureTensor>>,
}

impl SortblockEngine {
    pub fn new(cfg: SortblockConfig, num_blocks: usize) -> Result<Self> {
        cfg.validate()?;
        if num_blocks == 0 {
            return Err(Error::Config("engine needs at least one block".into()));
        }
        Ok(Self {
            cfg,
            num_blocks,
            cache: vec![None; num_blocks],
            reference: None,
            policy: None,
            window_entry: None,
            forced: None,
            ranked_steps_seen: 0,
            current: None,
            steps: Vec::new(),
            outputs: None,
        })
    }

    pub fn with_options(mut self, options: RunOptions) -> Result<Self> {
        if let Some(forced) = &options.forced_policies {
            if let Some(bad) = forced.iter().find(|f| f.len() != self.num_blocks) {
                return Err(Error::Config(format!(
                    "forced policy of length {} for {} blocks",
                    bad.len(),
                    self.num_blocks
                )));
            }
        }
        self.forced = options.forced_policies;
        self.outputs = options.record_outputs.then(Vec::new);
        Ok(self)
    }

    pub fn config(&self) -> &SortblockConfig {
        &self.cfg
    }

    pub fn cache_entry(&self, block: usize) -> Option<&BlockCacheEntry> {
        self.cache.get(block).and_then(Option::as_ref)
    }

    pub fn step_records(&self) -> &[StepRecord] {
        &self.steps
    }

    /// Finished per-step records and, if requested, model outputs.
    pub fn into_parts(self) -> (Vec<StepRecord>, Option<Vec<FeatureTensor>>) {
        (self.steps, self.outputs)
    }

    fn phase_for(&mut self, ctx: &StepContext) -> Phase {
        if !self.cfg.window.contains(ctx.timestep) {
            return Phase::OutsideWindow;
        }
        let entry = *self.window_entry.get_or_insert(ctx.step);
        match (ctx.step - entry) % self.cfg.refresh_interval {
            0 => Phase::Full,
            1 => Phase::Ranked,
            _ => Phase::Follow,
        }
    }

    fn state(&mut self) -> Result<&mut StepState> {
        self.current
            .as_mut()
            .ok_or_else(|| Error::Internal("block hook called outside a step".into()))
    }

    fn predict(&self, block: usize, step: usize) -> Result<(FeatureTensor, bool)> {
        let entry = self.cache[block].as_ref().ok_or_else(|| {
            Error::Internal(format!(
                "block {block} predicted before its first evaluation"
            ))
        })?;
        let k = step - entry.last_compute_step;
        let fallback = !entry.can_extrapolate();
        let value = match self.cfg.predict {
            PredictMode::Linear => linear_predict(entry, k),
            PredictMode::Copy => entry.value.clone(),
        };
        Ok((value, fallback && self.cfg.predict == PredictMode::Linear))
    }

    fn store(
        &mut self,
        block: usize,
        step: usize,
        phase: Phase,
        output: &FeatureTensor,
    ) -> Result<()> {
        let full = matches!(phase, Phase::Full | Phase::OutsideWindow);
        match (&mut self.cache[block], full) {
            (Some(entry), true) => entry.record_full(step, output.clone()),
            (Some(entry), false) => entry.record_partial(step, output.clone()),
            (slot @ None, true) => *slot = Some(BlockCacheEntry::new(step, output.clone())),
            (None, false) => {
                return Err(Error::Internal(format!(
                    "block {block} recomputed at a partial step before any full step"
                )))
            }
        }
        Ok(())
    }

    /// Predicts every block from the cache, scores the predicted deltas
    /// against the reference deltas and fixes the cycle's policy.
    fn rank(&mut self, input: &FeatureTensor) -> Result<()> {
        let (step, timestep) = {
            let s = self.state()?;
            (s.ctx.step, s.ctx.timestep)
        };
        let reference = self
            .reference
            .take()
            .ok_or_else(|| Error::Internal("ranked step without reference deltas".into()))?;
        let mut x = input.clone();
        let mut predictions = Vec::with_capacity(self.num_blocks);
        let mut scores = Vec::with_capacity(self.num_blocks);
        let mut fallbacks = Vec::with_capacity(self.num_blocks);
        for block in 0..self.num_blocks {
            let (pred, fallback) = self.predict(block, step)?;
            let delta = pred.sub(&x)?;
            scores.push(cosine_similarity(&delta, &reference.deltas[block])?);
            fallbacks.push(fallback);
            x = pred.clone();
            predictions.push(Some(pred));
        }
        let rho = self.cfg.ratio_at(timestep);
        let mut policy = match self.forced.as_ref() {
            Some(forced) => {
                let flags = forced.get(self.ranked_steps_seen).cloned().ok_or_else(|| {
                    Error::Config(format!(
                        "only {} forced policies for ranked step #{}",
                        forced.len(),
                        self.ranked_steps_seen + 1
                    ))
                })?;
                PolicySequence {
                    flags,
                    scores: scores.clone(),
                    created_at_step: step,
                }
            }
            None => select_blocks(&scores, rho),
        };
        policy.created_at_step = step;
        self.ranked_steps_seen += 1;

        let state = self.state()?;
        state.ratio = Some(rho);
        state.predictions = predictions;
        for (block, rec) in state.blocks.iter_mut().enumerate() {
            rec.score = Some(scores[block]);
            rec.copy_fallback = fallbacks[block];
        }
        self.policy = Some(policy);
        Ok(())
    }
}

impl BlockHook for SortblockEngine {
    fn begin_step(&mut self, ctx: &StepContext) -> Result<()> {
        if self.current.is_some() {
            return Err(Error::Internal("step started twice".into()));
        }
        let phase = self.phase_for(ctx);
        let ratio = match phase {
            Phase::Follow => Some(self.cfg.ratio_at(ctx.timestep)),
            _ => None,
        };
        if phase == Phase::Full {
            self.reference = Some(StepDeltaRecord {
                deltas: Vec::with_capacity(self.num_blocks),
                source: DeltaSource::Computed,
                step: ctx.step,
            });
        }
        self.current = Some(StepState {
            ctx: *ctx,
            phase,
            ratio,
            blocks: vec![BlockRecord::default(); self.num_blocks],
            predictions: vec![None; self.num_blocks],
            evals: 0,
        });
        Ok(())
    }

    fn on_block(
        &mut self,
        block: usize,
        input: &FeatureTensor,
        eval: &mut dyn FnMut(&FeatureTensor) -> Result<BlockIO>,
    ) -> Result<FeatureTensor> {
        let (phase, step) = {
            let s = self.state()?;
            (s.phase, s.ctx.step)
        };
        if phase == Phase::Ranked && block == 0 {
            self.rank(input)?;
        }
        let recompute = match phase {
            Phase::OutsideWindow | Phase::Full => true,
            Phase::Ranked | Phase::Follow => {
                let policy = self
                    .policy
                    .as_ref()
                    .ok_or_else(|| Error::Internal("cached step without a policy".into()))?;
                policy.flags[block]
            }
        };

        let output = if recompute {
            let io = eval(input)?;
            self.store(block, step, phase, &io.output)?;
            if phase == Phase::Full {
                if let Some(reference) = self.reference.as_mut() {
                    reference.deltas.push(io.delta.clone());
                }
            }
            let state = self.state()?;
            state.evals += 1;
            let rec = &mut state.blocks[block];
            rec.computed = true;
            rec.delta_norm = io.delta.l2_norm();
            rec.l1_in_out = io.delta.mean_abs();
            io.output
        } else {
            let served = match self.state()?.predictions[block].take() {
                Some(pred) => pred,
                None => {
                    let (pred, fallback) = self.predict(block, step)?;
                    self.state()?.blocks[block].copy_fallback = fallback;
                    pred
                }
            };
            let delta = served.sub(input)?;
            let rec = &mut self.state()?.blocks[block];
            rec.delta_norm = delta.l2_norm();
            rec.l1_in_out = delta.mean_abs();
            served
        };
        if matches!(phase, Phase::Ranked | Phase::Follow) {
            self.state()?.blocks[block].flag = Some(recompute);
        }
        Ok(output)
    }

    fn end_step(&mut self, model_output: &FeatureTensor) -> Result<()> {
        let state = self
            .current
            .take()
            .ok_or_else(|| Error::Internal("step ended without starting".into()))?;
        if let Some(outputs) = self.outputs.as_mut() {
            outputs.push(model_output.clone());
        }
        let policy = match state.phase {
            Phase::Ranked => self.policy.clone(),
            _ => None,
        };
        self.steps.push(StepRecord {
            step: state.ctx.step,
            timestep: state.ctx.timestep,
            phase: state.phase,
            ratio: state.ratio,
            block_evals: state.evals,
            blocks: state.blocks,
            policy,
        });
        Ok(())
    }
}

/// Samples with the engine installed and returns the final latent and the
/// run trace.
pub fn run_sortblock(
    net: &Network,
    run: &SamplerRun,
    sched: &NoiseSchedule,
    cfg: &SortblockConfig,
) -> Result<(FeatureTensor, RunTrace)> {
    run_sortblock_with(net, run, sched, cfg, RunOptions::default())
}

pub fn run_sortblock_with(
    net: &Network,
    run: &SamplerRun,
    sched: &NoiseSchedule,
    cfg: &SortblockConfig,
    options: RunOptions,
) -> Result<(FeatureTensor, RunTrace)> {
    let mut engine = SortblockEngine::new(cfg.clone(), net.num_blocks())?.with_options(options)?;
    let start = Instant::now();
    let evals_before = net.block_evals();
    let latent = sample(net, run, sched, &mut engine)?;
    let counted = net.block_evals() - evals_before;
    let (steps, outputs) = engine.into_parts();
    let trace = RunTrace::from_steps(
        serde_json::json!({ "mode": "sortblock", "seed": run.seed, "sortblock": cfg }),
        steps,
        start.elapsed().as_secs_f64(),
        outputs,
        None,
    );
    if trace.total_block_evals != counted {
        return Err(Error::Internal(format!(
            "trace reports {} block evaluations, network counted {counted}",
            trace.total_block_evals
        )));
    }
    Ok((latent, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn cosine_examples() {
        let m = |v: &[f32]| Matrix::from_rows(&[v]);
        assert_eq!(
            cosine_similarity(&m(&[1.0, 0.0]), &m(&[0.0, 1.0])).unwrap(),
            0.0
        );
        assert!((cosine_similarity(&m(&[1.0, 2.0]), &m(&[2.0, 4.0])).unwrap() - 1.0).abs() < 1e-12);
        // brute force: dot = 3 + 4 + 3 = 10, |a||b| = 14
        let s = cosine_similarity(&m(&[1.0, 2.0, 3.0]), &m(&[3.0, 2.0, 1.0])).unwrap();
        assert!((s - 10.0 / 14.0).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&m(&[0.0, 0.0]), &m(&[1.0, 1.0])).unwrap(),
            1.0
        );
        assert!(cosine_similarity(&m(&[1.0]), &m(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn linear_predict_examples() {
        let mut entry = BlockCacheEntry::new(0, Matrix::from_rows(&[[0.0f32]]));
        entry.record_full(2, Matrix::from_rows(&[[2.0f32]]));
        assert_eq!(entry.interval, 2);
        assert_eq!(linear_predict(&entry, 0), entry.value);
        assert_eq!(linear_predict(&entry, 1).as_slice(), &[3.0]);

        // affine trajectory f(s) = 4 - 1.5 s
        let f = |s: usize| Matrix::from_rows(&[[4.0 - 1.5 * s as f32, 0.25 * s as f32]]);
        let mut entry = BlockCacheEntry::new(1, f(1));
        entry.record_full(3, f(3));
        for k in 0..6 {
            assert_eq!(linear_predict(&entry, k), f(3 + k));
        }

        // a partial recompute moves the base point but keeps the full-step slope
        entry.record_partial(5, f(5));
        assert_eq!(entry.last_compute_step, 5);
        assert_eq!(entry.full_step, 3);
        for k in 0..4 {
            assert_eq!(linear_predict(&entry, k), f(5 + k));
        }
    }

    #[test]
    fn single_evaluation_predicts_by_copy() {
        let entry = BlockCacheEntry::new(4, Matrix::from_rows(&[[1.0f32, 2.0]]));
        assert!(!entry.can_extrapolate());
        assert_eq!(linear_predict(&entry, 3), entry.value);
    }

    #[test]
    fn select_blocks_examples() {
        let scores = [0.9, 0.1, 0.5, 0.5];
        assert_eq!(select_blocks(&scores, 0.0).recompute_count(), 0);
        assert_eq!(select_blocks(&scores, 1.0).flags, vec![true; 4]);
        let p = select_blocks(&scores, 0.5);
        assert_eq!(p.flags, vec![false, true, true, false]);
    }

    #[test]
    fn budget_is_ceiling() {
        assert_eq!(recompute_budget(0.3, 12), 4);
        assert_eq!(recompute_budget(0.25, 12), 3);
        assert_eq!(recompute_budget(0.1, 30), 3);
        assert_eq!(recompute_budget(0.01, 12), 1);
        assert_eq!(recompute_budget(1.5, 12), 12);
        assert_eq!(recompute_budget(-1.0, 12), 0);
    }

    #[test]
    fn inner_window() {
        let steps: Vec<usize> = (0..50).rev().map(|i| i * 20).collect();
        let w = Window::inner(&steps, 0.8).unwrap();
        assert_eq!(
            w,
            Window {
                high: 880,
                low: 100
            }
        );
        assert_eq!(steps.iter().filter(|&&t| w.contains(t)).count(), 40);
        let w = Window::inner(&steps, 0.9).unwrap();
        assert_eq!(steps.iter().filter(|&&t| w.contains(t)).count(), 45);
        let empty = Window::empty_for(1000);
        assert!(steps.iter().all(|&t| !empty.contains(t)));
        assert!(Window::new(5, 5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SortblockConfig::default();
        cfg.validate().unwrap();
        cfg.refresh_interval = 1;
        assert!(cfg.validate().is_err());
        let cfg = SortblockConfig {
            rho: 1.2,
            ..SortblockConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SortblockConfig {
            ratio_mode: RatioMode::Adaptive,
            ..SortblockConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn selection_cardinality(scores in proptest::collection::vec(-1.0f64..1.0, 1..24), rho in 0.0f64..=1.0) {
            let p = select_blocks(&scores, rho);
            let n = scores.len();
            prop_assert_eq!(p.recompute_count(), recompute_budget(rho, n));
            prop_assert!(p.recompute_count() >= ((rho * n as f64).floor() as usize).min(n));
            // every flagged score is <= every unflagged score
            let max_flagged = scores.iter().zip(&p.flags).filter(|(_, &f)| f).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            let min_free = scores.iter().zip(&p.flags).filter(|(_, &f)| !f).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            prop_assert!(max_flagged <= min_free);
        }

        #[test]
        fn cosine_is_bounded(a in proptest::collection::vec(-10.0f32..10.0, 6), b in proptest::collection::vec(-10.0f32..10.0, 6)) {
            let s = cosine_similarity(&Matrix::from_vec(2, 3, a).unwrap(), &Matrix::from_vec(2, 3, b).unwrap()).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
