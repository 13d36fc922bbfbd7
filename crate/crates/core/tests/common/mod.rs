#![allow(dead_code)]

use sortblock::diffusion::{make_schedule, step_list, NoiseSchedule, SamplerRun};
use sortblock::dit::{Block, Network};
use sortblock::engine::Window;
use sortblock::numerics::{FeatureTensor, Matrix, Rng};
use sortblock::Result;

pub const TOTAL_T: usize = 1000;
pub const STEPS: usize = 50;

pub fn schedule() -> NoiseSchedule {
    make_schedule(TOTAL_T, 1e-4, 2e-2).unwrap()
}

pub fn steps() -> Vec<usize> {
    step_list(TOTAL_T, STEPS).unwrap()
}

pub fn inner_window(fraction: f64) -> Window {
    Window::inner(&steps(), fraction).unwrap()
}

pub fn run_for(net: &Network, seed: u64) -> SamplerRun {
    SamplerRun::from_seed(net.latent_shape(), steps(), seed)
}

/// A block whose output ignores its input and is `a + b * timestep`.
/// Integer entries keep every step of the extrapolation exact in f32.
pub struct AffineBlock {
    pub a: Matrix,
    pub b: Matrix,
}

impl Block for AffineBlock {
    fn forward(
        &self,
        _x: &FeatureTensor,
        timestep: usize,
        _t_emb: &[f32],
    ) -> Result<FeatureTensor> {
        self.b.scale(timestep as f32).add(&self.a)
    }
}

pub fn affine_network(blocks: usize, tokens: usize, channels: usize, seed: u64) -> Network {
    let mut rng = Rng::new(seed);
    let mut int_matrix = |span: i64| {
        Matrix::from_fn(tokens, channels, |_, _| {
            ((rng.next_u64() % (2 * span as u64 + 1)) as i64 - span) as f32
        })
    };
    let blocks: Vec<AffineBlock> = (0..blocks)
        .map(|_| AffineBlock {
            a: int_matrix(400),
            b: int_matrix(3),
        })
        .collect();
    Network::from_blocks(tokens, channels, channels, blocks)
}

/// Block evaluations implied by the lifecycle for a contiguous window.
pub fn lifecycle_evals(steps: &[usize], window: Window, k: usize, n: usize, m: usize) -> u64 {
    let inside = steps.iter().filter(|&&t| window.contains(t)).count();
    let outside = steps.len() - inside;
    let full = inside.div_ceil(k);
    let partial = inside - full;
    ((outside + full) * n + partial * m) as u64
}
