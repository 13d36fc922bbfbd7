//! Toy diffusion transformer: a stack of pre-norm residual blocks over a token
//! grid. Every block boundary is routed through a [`BlockHook`], which is where
//! the caching engine decides whether a block runs at all.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    gelu, layer_norm, matmul, softmax_rows, splitmix64, standard_normal, FeatureTensor, Matrix, Rng,
};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DitConfig {
    pub num_blocks: usize,
    pub num_tokens: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    /// Multiplier applied to the integer timestep before embedding. The
    /// default maps a 1000-step schedule onto `[0, 1]`.
    pub time_scale: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            num_blocks: 12,
            num_tokens: 64,
            channels: 64,
            mlp_ratio: 4,
            seed: 0,
            time_scale: 1e-3,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 {
            return Err(Error::Config(format!(
                "num_blocks must be at least 2, got {}",
                self.num_blocks
            )));
        }
        if !(self.time_scale.is_finite() && self.time_scale >= 0.0) {
            return Err(Error::Config(format!(
                "time_scale must be finite and non-negative, got {}",
                self.time_scale
            )));
        }
        if self.num_tokens == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "num_tokens, channels and mlp_ratio must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The timestep embedding width; conditioning is projected from it.
    pub fn embedding_dim(&self) -> usize {
        self.channels
    }
}

/// Input, output and residual delta of one block evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockIO {
    pub input: FeatureTensor,
    pub output: FeatureTensor,
    pub delta: FeatureTensor,
}

impl BlockIO {
    pub fn new(input: FeatureTensor, output: FeatureTensor) -> Result<Self> {
        let delta = output.sub(&input)?;
        Ok(Self {
            input,
            output,
            delta,
        })
    }
}

/// One unit of the stack. Implementations must be pure functions of their
/// arguments.
pub trait Block: Send + Sync {
    fn forward(&self, x: &FeatureTensor, timestep: usize, t_emb: &[f32]) -> Result<FeatureTensor>;
}

/// Single-head attention and MLP weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub wt: Matrix,
}

impl BlockWeights {
    /// Normal init, each matrix scaled by `1/sqrt(fan_in)`. The two
    /// projections that write into the residual stream (`wo`, `w2`) are
    /// further scaled by `1/sqrt(2 * num_blocks)`.
    pub fn random(cfg: &DitConfig, rng: &mut Rng) -> Self {
        let d = cfg.channels;
        let hidden = cfg.mlp_ratio * d;
        let e = cfg.embedding_dim();
        let residual_gain = 1.0 / ((2 * cfg.num_blocks.max(1)) as f32).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            standard_normal(rng, rows, cols).scale(1.0 / (rows as f32).sqrt())
        };
        Self {
            wq: draw(d, d),
            wk: draw(d, d),
            wv: draw(d, d),
            wo: draw(d, d).scale(residual_gain),
            w1: draw(d, hidden),
            w2: draw(hidden, d).scale(residual_gain),
            wt: draw(e, d),
        }
    }

    pub fn zeros(cfg: &DitConfig) -> Self {
        let d = cfg.channels;
        let hidden = cfg.mlp_ratio * d;
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, hidden),
            w2: Matrix::zeros(hidden, d),
            wt: Matrix::zeros(cfg.embedding_dim(), d),
        }
    }

    fn channels(&self) -> usize {
        self.wq.rows()
    }
}

/// `out = a + MLP(LN(a))` with `a = x + Attn(LN(x + t_emb Wt))`.
pub fn block_forward(block: &BlockWeights, x: &FeatureTensor, t_emb: &[f32]) -> Result<BlockIO> {
    let output = transformer_block(block, x, t_emb)?;
    BlockIO::new(x.clone(), output)
}

fn transformer_block(
    block: &BlockWeights,
    x: &FeatureTensor,
    t_emb: &[f32],
) -> Result<FeatureTensor> {
    let d = block.channels();
    if x.cols() != d {
        return Err(shape_err!(
            "block expects {d} channels, input has {}",
            x.cols()
        ));
    }
    if t_emb.len() != block.wt.rows() {
        return Err(shape_err!(
            "timestep embedding of length {} for a {}-row projection",
            t_emb.len(),
            block.wt.rows()
        ));
    }
    let emb = Matrix::from_vec(1, t_emb.len(), t_emb.to_vec())?;
    let cond = matmul(&emb, &block.wt)?;
    let h = layer_norm(&x.add_row_broadcast(cond.as_slice())?, LN_EPS);

    let q = matmul(&h, &block.wq)?;
    let k = matmul(&h, &block.wk)?;
    let v = matmul(&h, &block.wv)?;
    let scores = matmul(&q, &k.transpose())?.scale(1.0 / (d as f32).sqrt());
    let attn = matmul(&matmul(&softmax_rows(&scores), &v)?, &block.wo)?;
    let a = x.add(&attn)?;

    let mlp = matmul(
        &gelu(&matmul(&layer_norm(&a, LN_EPS), &block.w1)?),
        &block.w2,
    )?;
    a.add(&mlp)
}

impl Block for BlockWeights {
    fn forward(&self, x: &FeatureTensor, _timestep: usize, t_emb: &[f32]) -> Result<FeatureTensor> {
        transformer_block(self, x, t_emb)
    }
}

/// Sinusoidal embedding: `[sin(t f_0), .., sin(t f_{h-1}), cos(t f_0), ..]`
/// with frequencies spaced geometrically from 1 down to 1/10000.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let arg = t * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    // odd widths carry a zero pad in the last slot
    out
}

/// Per-step information handed to hooks before a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    /// Position in the sampler's step list.
    pub step: usize,
    pub timestep: usize,
    pub num_steps: usize,
}

/// Interception point at every block boundary.
///
/// `on_block` is called exactly once per block per forward pass with the
/// block's input. It returns the tensor the next block should see; calling
/// `eval` runs (and counts) the real block, so a hook that serves a cached
/// value skips the computation entirely.
pub trait BlockHook {
    fn begin_step(&mut self, _ctx: &StepContext) -> Result<()> {
        Ok(())
    }

    fn on_block(
        &mut self,
        block: usize,
        input: &FeatureTensor,
        eval: &mut dyn FnMut(&FeatureTensor) -> Result<BlockIO>,
    ) -> Result<FeatureTensor>;

    fn end_step(&mut self, _model_output: &FeatureTensor) -> Result<()> {
        Ok(())
    }
}

/// Runs every block and keeps its output.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl BlockHook for PassThrough {
    fn on_block(
        &mut self,
        _block: usize,
        input: &FeatureTensor,
        eval: &mut dyn FnMut(&FeatureTensor) -> Result<BlockIO>,
    ) -> Result<FeatureTensor> {
        Ok(eval(input)?.output)
    }
}

pub struct Network {
    num_tokens: usize,
    channels: usize,
    embedding_dim: usize,
    time_scale: f64,
    blocks: Vec<Box<dyn Block>>,
    evals: AtomicU64,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("num_tokens", &self.num_tokens)
            .field("channels", &self.channels)
            .field("num_blocks", &self.blocks.len())
            .finish()
    }
}

/// Builds the seeded transformer stack. Block `i` draws from
/// `seed ^ splitmix64(i)`, so blocks are independent but reproducible.
pub fn init_network(cfg: &DitConfig) -> Result<Network> {
    cfg.validate()?;
    Ok(Network::from_blocks(
        cfg.num_tokens,
        cfg.channels,
        cfg.embedding_dim(),
        init_block_weights(cfg),
    )
    .with_time_scale(cfg.time_scale))
}

pub fn init_block_weights(cfg: &DitConfig) -> Vec<BlockWeights> {
    (0..cfg.num_blocks)
        .map(|i| BlockWeights::random(cfg, &mut Rng::new(cfg.seed ^ splitmix64(i as u64))))
        .collect()
}

impl Network {
    pub fn from_blocks<B: Block + 'static>(
        num_tokens: usize,
        channels: usize,
        embedding_dim: usize,
        blocks: Vec<B>,
    ) -> Self {
        Self {
            num_tokens,
            channels,
            embedding_dim,
            blocks: blocks
                .into_iter()
                .map(|b| Box::new(b) as Box<dyn Block>)
                .collect(),
            time_scale: 1.0,
            evals: AtomicU64::new(0),
        }
    }

    /// Sets the timestep multiplier used for embeddings (1.0 by default).
    pub fn with_time_scale(mut self, time_scale: f64) -> Self {
        self.time_scale = time_scale;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.num_tokens, self.channels)
    }

    /// Total block evaluations since construction or the last reset.
    pub fn block_evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_block_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// Evaluates one block and bumps the evaluation counter.
    pub fn eval_block(
        &self,
        index: usize,
        x: &FeatureTensor,
        timestep: usize,
        t_emb: &[f32],
    ) -> Result<BlockIO> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Internal(format!("block index {index} out of range")))?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        let output = block.forward(x, timestep, t_emb)?;
        if output.shape() != x.shape() {
            return Err(shape_err!(
                "block {index} produced {:?} from {:?}",
                output.shape(),
                x.shape()
            ));
        }
        BlockIO::new(x.clone(), output)
    }

    /// One forward pass of the stack. The returned tensor is the
    /// epsilon-prediction for `z` at `timestep`.
    pub fn forward(
        &self,
        z: &FeatureTensor,
        timestep: usize,
        hook: &mut dyn BlockHook,
    ) -> Result<FeatureTensor> {
        if z.shape() != self.latent_shape() {
            return Err(shape_err!(
                "latent {:?} does not match network {:?}",
                z.shape(),
                self.latent_shape()
            ));
        }
        let t_emb = timestep_embedding(timestep as f64 * self.time_scale, self.embedding_dim);
        let mut x = z.clone();
        for index in 0..self.blocks.len() {
            let mut eval = |input: &FeatureTensor| self.eval_block(index, input, timestep, &t_emb);
            let next = hook.on_block(index, &x, &mut eval)?;
            if next.shape() != x.shape() {
                return Err(shape_err!(
                    "hook returned {:?} for block {index}, expected {:?}",
                    next.shape(),
                    x.shape()
                ));
            }
            x = next;
        }
        Ok(x)
    }
}

pub fn network_forward(
    net: &Network,
    z: &FeatureTensor,
    timestep: usize,
    hook: &mut dyn BlockHook,
) -> Result<FeatureTensor> {
    net.forward(z, timestep, hook)
}
