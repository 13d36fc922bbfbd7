//! Run traces, full-compute baseline recording and the offline oracle that
//! scores predicted block rankings against true next-step deltas.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blob::{read_tensor_blob, write_tensor_blob, TensorSidecar};
use crate::diffusion::{sample, NoiseSchedule, SamplerRun};
use crate::dit::{BlockHook, BlockIO, Network, StepContext};
use crate::engine::{ascending_order, cosine_similarity, PolicySequence};
use crate::error::{Error, Result};
use crate::metrics::kendall_tau;
use crate::numerics::FeatureTensor;

/// Heavy traces larger than this are refused unless a budget is passed
/// explicitly.
pub const DEFAULT_HEAVY_BUDGET_BYTES: u64 = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Full,
    Ranked,
    Follow,
    OutsideWindow,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    /// L2 norm of the served output minus the block input.
    pub delta_norm: f64,
    /// Mean absolute difference between block input and served output.
    pub l1_in_out: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Recompute flag at cached steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<bool>,
    /// The block actually ran.
    pub computed: bool,
    /// Prediction fell back to a copy for lack of a second cached value.
    #[serde(default)]
    pub copy_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub block_evals: usize,
    pub blocks: Vec<BlockRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: serde_json::Value,
    pub steps: Vec<StepRecord>,
    pub total_block_evals: u64,
    pub wall_time_secs: f64,
    /// Per-step network outputs (the epsilon predictions).
    #[serde(skip)]
    pub model_outputs: Option<Vec<FeatureTensor>>,
    /// `block_deltas[step][block]`, heavy mode only.
    #[serde(skip)]
    pub block_deltas: Option<Vec<Vec<FeatureTensor>>>,
}

impl RunTrace {
    pub fn from_steps(
        config: serde_json::Value,
        steps: Vec<StepRecord>,
        wall_time_secs: f64,
        model_outputs: Option<Vec<FeatureTensor>>,
        block_deltas: Option<Vec<Vec<FeatureTensor>>>,
    ) -> Self {
        let total_block_evals = steps.iter().map(|s| s.block_evals as u64).sum();
        Self {
            config,
            steps,
            total_block_evals,
            wall_time_secs,
            model_outputs,
            block_deltas,
        }
    }

    pub fn is_heavy(&self) -> bool {
        self.block_deltas.is_some()
    }

    pub fn num_blocks(&self) -> usize {
        self.steps.first().map_or(0, |s| s.blocks.len())
    }

    /// Policies built at ranked steps, in order.
    pub fn policies(&self) -> Vec<&PolicySequence> {
        self.steps
            .iter()
            .filter_map(|s| s.policy.as_ref())
            .collect()
    }

    pub fn phase_counts(&self) -> PhaseCounts {
        let mut c = PhaseCounts::default();
        for s in &self.steps {
            match s.phase {
                Phase::Full => c.full += 1,
                Phase::Ranked => c.ranked += 1,
                Phase::Follow => c.follow += 1,
                Phase::OutsideWindow => c.outside += 1,
            }
        }
        c
    }

    /// Writes `trace.json`, plus `outputs/` and `deltas/` tensor blobs with
    /// JSON sidecars when those tensors are present.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Internal(format!("trace serialization: {e}")))?;
        let path = dir.join("trace.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        if let Some(outputs) = &self.model_outputs {
            let sub = dir.join("outputs");
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (step, t) in outputs.iter().enumerate() {
                write_tensor_blob(&sub.join(format!("s{step:04}.f32")), t, step, None)?;
            }
        }
        if let Some(deltas) = &self.block_deltas {
            let sub = dir.join("deltas");
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (step, blocks) in deltas.iter().enumerate() {
                for (block, t) in blocks.iter().enumerate() {
                    let name = format!("s{step:04}_b{block:03}.f32");
                    write_tensor_blob(&sub.join(name), t, step, Some(block))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("trace.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut trace: RunTrace = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let n_steps = trace.steps.len();
        let n_blocks = trace.num_blocks();

        let outputs_dir = dir.join("outputs");
        if outputs_dir.is_dir() {
            let mut outputs = Vec::with_capacity(n_steps);
            for step in 0..n_steps {
                let (t, side) = read_tensor_blob(&outputs_dir.join(format!("s{step:04}.f32")))?;
                check_sidecar(&side, step, None)?;
                outputs.push(t);
            }
            trace.model_outputs = Some(outputs);
        }
        let deltas_dir = dir.join("deltas");
        if deltas_dir.is_dir() {
            let mut deltas = Vec::with_capacity(n_steps);
            for step in 0..n_steps {
                let mut row = Vec::with_capacity(n_blocks);
                for block in 0..n_blocks {
                    let name = format!("s{step:04}_b{block:03}.f32");
                    let (t, side) = read_tensor_blob(&deltas_dir.join(name))?;
                    check_sidecar(&side, step, Some(block))?;
                    row.push(t);
                }
                deltas.push(row);
            }
            trace.block_deltas = Some(deltas);
        }
        Ok(trace)
    }
}

fn check_sidecar(side: &TensorSidecar, step: usize, block: Option<usize>) -> Result<()> {
    if side.step != step || side.block != block {
        return Err(Error::Format(format!(
            "sidecar says step {} block {:?}, expected step {step} block {block:?}",
            side.step, side.block
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCounts {
    pub full: usize,
    pub ranked: usize,
    pub follow: usize,
    pub outside: usize,
}

/// Bytes a heavy trace of this size would hold in memory.
pub fn heavy_trace_bytes(steps: usize, blocks: usize, tokens: usize, channels: usize) -> u64 {
    (steps as u64) * (blocks as u64 + 1) * (tokens as u64) * (channels as u64) * 4
}

struct BaselineRecorder {
    heavy: bool,
    steps: Vec<StepRecord>,
    outputs: Vec<FeatureTensor>,
    deltas: Vec<Vec<FeatureTensor>>,
    current: Option<StepRecord>,
    current_deltas: Vec<FeatureTensor>,
}

impl BlockHook for BaselineRecorder {
    fn begin_step(&mut self, ctx: &StepContext) -> Result<()> {
        self.current = Some(StepRecord {
            step: ctx.step,
            timestep: ctx.timestep,
            phase: Phase::Full,
            ratio: None,
            block_evals: 0,
            blocks: Vec::new(),
            policy: None,
        });
        Ok(())
    }

    fn on_block(
        &mut self,
        _block: usize,
        input: &FeatureTensor,
        eval: &mut dyn FnMut(&FeatureTensor) -> Result<BlockIO>,
    ) -> Result<FeatureTensor> {
        let io = eval(input)?;
        let rec = self
            .current
            .as_mut()
            .ok_or_else(|| Error::Internal("block outside a step".into()))?;
        rec.block_evals += 1;
        rec.blocks.push(BlockRecord {
            delta_norm: io.delta.l2_norm(),
            l1_in_out: io.delta.mean_abs(),
            computed: true,
            ..BlockRecord::default()
        });
        if self.heavy {
            self.current_deltas.push(io.delta);
        }
        Ok(io.output)
    }

    fn end_step(&mut self, model_output: &FeatureTensor) -> Result<()> {
        let rec = self
            .current
            .take()
            .ok_or_else(|| Error::Internal("step ended twice".into()))?;
        self.steps.push(rec);
        self.outputs.push(model_output.clone());
        if self.heavy {
            self.deltas.push(std::mem::take(&mut self.current_deltas));
        }
        Ok(())
    }
}

/// Full-compute run. Light mode keeps per-block norms and the per-step model
/// outputs; heavy mode also keeps every block delta.
pub fn record_baseline(
    net: &Network,
    run: &SamplerRun,
    sched: &NoiseSchedule,
    heavy: bool,
) -> Result<(FeatureTensor, RunTrace)> {
    record_baseline_with_budget(net, run, sched, heavy, DEFAULT_HEAVY_BUDGET_BYTES)
}

pub fn record_baseline_with_budget(
    net: &Network,
    run: &SamplerRun,
    sched: &NoiseSchedule,
    heavy: bool,
    budget_bytes: u64,
) -> Result<(FeatureTensor, RunTrace)> {
    if heavy {
        let need = heavy_trace_bytes(
            run.step_list.len(),
            net.num_blocks(),
            net.num_tokens(),
            net.channels(),
        );
        if need > budget_bytes {
            return Err(Error::Resource(format!(
                "heavy trace needs {need} bytes, budget is {budget_bytes}"
            )));
        }
    }
    let mut rec = BaselineRecorder {
        heavy,
        steps: Vec::with_capacity(run.step_list.len()),
        outputs: Vec::with_capacity(run.step_list.len()),
        deltas: Vec::new(),
        current: None,
        current_deltas: Vec::new(),
    };
    let start = Instant::now();
    let latent = sample(net, run, sched, &mut rec)?;
    let trace = RunTrace::from_steps(
        serde_json::json!({ "mode": "baseline", "seed": run.seed, "heavy": heavy }),
        rec.steps,
        start.elapsed().as_secs_f64(),
        Some(rec.outputs),
        heavy.then_some(rec.deltas),
    );
    Ok((latent, trace))
}

/// Per-block cosine similarity between the true deltas at `step` and
/// `step + 1`.
pub fn oracle_similarities(trace: &RunTrace, step: usize) -> Result<Vec<f64>> {
    let deltas = trace
        .block_deltas
        .as_ref()
        .ok_or_else(|| Error::MissingData("oracle needs a heavy-mode trace".into()))?;
    let (now, next) = match (deltas.get(step), deltas.get(step + 1)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::MissingData(format!(
                "no step pair ({step}, {}) in a trace of {} steps",
                step + 1,
                deltas.len()
            )))
        }
    };
    now.iter()
        .zip(next)
        .map(|(a, b)| cosine_similarity(a, b))
        .collect()
}

/// Kendall tau between the ascending-score block orderings of a policy and
/// of the oracle scores.
pub fn ranking_fidelity(predicted: &PolicySequence, oracle_scores: &[f64]) -> Result<f64> {
    if predicted.scores.len() != oracle_scores.len() {
        return Err(Error::Shape(format!(
            "{} predicted scores vs {} oracle scores",
            predicted.scores.len(),
            oracle_scores.len()
        )));
    }
    kendall_tau(
        &ascending_order(&predicted.scores),
        &ascending_order(oracle_scores),
    )
}
