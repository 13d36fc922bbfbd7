//! Fidelity metrics between latents: PSNR, SSIM, relative L2 and Kendall's
//! tau for block orderings.
//!
//! Latents are compared as images by laying the tokens out on their square
//! grid (one image channel per feature channel) after an affine rescale by
//! the joint min/max of the pair.

use crate::error::{shape_err, Error, Result};
use crate::numerics::FeatureTensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Planar image with values in `[0, 1]`; `data[c][y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageView {
    width: usize,
    height: usize,
    planes: Vec<Vec<f64>>,
}

impl ImageView {
    /// Builds an image from planes, clamping values into `[0, 1]`.
    pub fn new(width: usize, height: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        if planes.is_empty() || planes.iter().any(|p| p.len() != width * height) {
            return Err(shape_err!("planes do not match a {width}x{height} image"));
        }
        let planes = planes
            .into_iter()
            .map(|p| p.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
            .collect();
        Ok(Self {
            width,
            height,
            planes,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, vec![vec![value; width * height]; channels])
            .expect("consistent planes")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    fn ensure_same_shape(&self, other: &ImageView) -> Result<()> {
        if (self.width, self.height, self.channels())
            != (other.width, other.height, other.channels())
        {
            return Err(shape_err!(
                "image {}x{}x{} vs {}x{}x{}",
                self.width,
                self.height,
                self.channels(),
                other.width,
                other.height,
                other.channels()
            ));
        }
        Ok(())
    }
}

fn grid_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(Error::Config(format!(
            "{tokens} tokens do not form a square grid"
        )));
    }
    Ok(side)
}

/// Maps two latents onto `[0, 1]` images with their joint min/max.
pub fn latent_pair_to_images(
    a: &FeatureTensor,
    b: &FeatureTensor,
) -> Result<(ImageView, ImageView)> {
    if a.shape() != b.shape() {
        return Err(shape_err!("latents {:?} vs {:?}", a.shape(), b.shape()));
    }
    let side = grid_side(a.rows())?;
    let (lo, hi) = a
        .as_slice()
        .iter()
        .chain(b.as_slice())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_image = |m: &FeatureTensor| {
        let planes = (0..m.cols())
            .map(|c| {
                (0..m.rows())
                    .map(|t| (f64::from(m.get(t, c)) - lo) / span)
                    .collect()
            })
            .collect();
        ImageView::new(side, side, planes)
    };
    Ok((to_image(a)?, to_image(b)?))
}

pub fn mse(a: &ImageView, b: &ImageView) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = (a.width * a.height * a.channels()) as f64;
    let sum: f64 = a
        .planes
        .iter()
        .zip(&b.planes)
        .flat_map(|(pa, pb)| pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(sum / n)
}

/// PSNR from a mean squared error with peak 1; zero error maps to the cap.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &ImageView, b: &ImageView) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Mean SSIM over every 7x7 window position of every channel.
pub fn ssim(a: &ImageView, b: &ImageView) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let w = SSIM_WINDOW;
    if a.width < w || a.height < w {
        return Err(Error::Config(format!(
            "SSIM needs at least {w}x{w} pixels, image is {}x{}",
            a.width, a.height
        )));
    }
    let area = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.planes.iter().zip(&b.planes) {
        for y0 in 0..=a.height - w {
            for x0 in 0..=a.width - w {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + w {
                    for x in x0..x0 + w {
                        let (va, vb) = (pa[y * a.width + x], pb[y * a.width + x]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / area, sb / area);
                let var_a = (saa / area - ma * ma).max(0.0);
                let var_b = (sbb / area - mb * mb).max(0.0);
                let cov = sab / area - ma * mb;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `||a - b|| / (||b|| + 1e-12)`.
pub fn relative_l2(a: &FeatureTensor, b: &FeatureTensor) -> Result<f64> {
    Ok(a.sub(b)?.l2_norm() / (b.l2_norm() + 1e-12))
}

fn positions(ranking: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut pos = vec![usize::MAX; n];
    for (p, &item) in ranking.iter().enumerate() {
        if item >= n || pos[item] != usize::MAX {
            return Err(Error::Config(format!(
                "{ranking:?} is not a permutation of 0..{n}"
            )));
        }
        pos[item] = p;
    }
    Ok(pos)
}

/// Kendall rank correlation of two orderings of `0..n`.
pub fn kendall_tau(ranking_a: &[usize], ranking_b: &[usize]) -> Result<f64> {
    let n = ranking_a.len();
    if ranking_b.len() != n {
        return Err(shape_err!("rankings of length {n} and {}", ranking_b.len()));
    }
    let pa = positions(ranking_a, n)?;
    let pb = positions(ranking_b, n)?;
    if n < 2 {
        return Ok(1.0);
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let sa = (pa[i] as i64 - pa[j] as i64).signum();
            let sb = (pb[i] as i64 - pb[j] as i64).signum();
            score += sa * sb;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(score as f64 / pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompareReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub relative_l2: f64,
}

impl CompareReport {
    pub const IDENTICAL: CompareReport = CompareReport {
        psnr_db: PSNR_CAP_DB,
        ssim: 1.0,
        relative_l2: 0.0,
    };
}

/// PSNR and SSIM of `candidate` against `reference`, plus relative L2.
pub fn compare_latents(
    candidate: &FeatureTensor,
    reference: &FeatureTensor,
) -> Result<CompareReport> {
    if candidate.shape() != reference.shape() {
        return Err(shape_err!(
            "latents {:?} vs {:?}",
            candidate.shape(),
            reference.shape()
        ));
    }
    if candidate.as_slice() == reference.as_slice() {
        return Ok(CompareReport::IDENTICAL);
    }
    let (ia, ib) = latent_pair_to_images(candidate, reference)?;
    Ok(CompareReport {
        psnr_db: psnr(&ia, &ib)?,
        ssim: ssim(&ia, &ib)?,
        relative_l2: relative_l2(candidate, reference)?,
    })
}
