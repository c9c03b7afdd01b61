//! Online training-sample generation.
//!
//! A random square of side `l_s` is cut from the image and rescaled to
//! `l_r x l_r`. The annotations are carried through the same affine map and
//! the target density is generated afterwards, at the output resolution,
//! with the global fixed kernel. The Gaussians in the target therefore never
//! change size under cropping or scaling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{generate_density_with, DensityMap, GaussianKernelSpec, Point, Stencil};
use crate::error::{Error, Result};
use crate::tensor::kernels::bilinear_taps;
use crate::tensor::{Shape, Tensor};

/// Smallest crop side the sampler will produce.
pub const MIN_CROP_SIDE: usize = 16;

pub const DEFAULT_SCALES: [usize; 3] = [128, 192, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Candidate output sides `L_r`; one is drawn per iteration.
    pub scales: Vec<usize>,
    /// Crop side range as fractions of `min(h, w)`.
    pub crop_fraction: (f64, f64),
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            scales: DEFAULT_SCALES.to_vec(),
            crop_fraction: (0.5, 1.0),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("candidate sample size list is empty".into()));
        }
        if let Some(bad) = self.scales.iter().find(|&&s| s % 16 != 0 || s < 32) {
            return Err(Error::Config(format!(
                "sample size {bad} must be a multiple of 16 and >= 32"
            )));
        }
        let (lo, hi) = self.crop_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop fraction range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        Ok(())
    }
}

/// Uniform draw from the candidate sizes.
pub fn pick_scale(cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<usize> {
    if cfg.scales.is_empty() {
        return Err(Error::Config("candidate sample size list is empty".into()));
    }
    Ok(cfg.scales[rng.gen_range(0..cfg.scales.len())])
}

/// Square crop: top-left `(row, col)` and side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub side: usize,
}

impl Crop {
    pub fn whole_square(side: usize) -> Self {
        Crop {
            row: 0,
            col: 0,
            side,
        }
    }

    /// Half-open membership test.
    pub fn contains(&self, p: &Point) -> bool {
        let (r0, c0, s) = (self.row as f64, self.col as f64, self.side as f64);
        p.x >= c0 && p.x < c0 + s && p.y >= r0 && p.y < r0 + s
    }

    /// Affine map into an `out x out` sample, clamped strictly below `out`.
    pub fn transform(&self, p: &Point, out: usize) -> Point {
        let k = out as f64 / self.side as f64;
        let limit = out as f64;
        let clamp = |v: f64| {
            if v >= limit {
                f64::from_bits(limit.to_bits() - 1)
            } else {
                v.max(0.0)
            }
        };
        Point::new(
            clamp((p.x - self.col as f64) * k),
            clamp((p.y - self.row as f64) * k),
        )
    }
}

/// Admissible crop side range `[ceil(lo*m), floor(hi*m)]`, `m = min(h, w)`.
pub fn crop_side_range(h: usize, w: usize, cfg: &SamplerConfig) -> Result<(usize, usize)> {
    let m = h.min(w);
    let lo = ((cfg.crop_fraction.0 * m as f64).ceil() as usize).max(MIN_CROP_SIDE);
    let hi = ((cfg.crop_fraction.1 * m as f64).floor() as usize).min(m);
    if lo > hi {
        return Err(Error::Data(format!(
            "image {w}x{h} too small for crops of at least {lo} pixels"
        )));
    }
    Ok((lo, hi))
}

pub fn draw_crop(h: usize, w: usize, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Crop> {
    let (lo, hi) = crop_side_range(h, w, cfg)?;
    let side = rng.gen_range(lo..=hi);
    Ok(Crop {
        row: rng.gen_range(0..=h - side),
        col: rng.gen_range(0..=w - side),
        side,
    })
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `(1, C, l_r, l_r)`.
    pub input: Tensor<f32>,
    pub target: DensityMap,
    pub true_count: usize,
    /// Retained annotations in sample coordinates.
    pub points: Vec<Point>,
    pub crop: Crop,
}

/// Bilinear resample of a square image region onto `out x out`, half-pixel
/// centres, clamped to the region.
pub fn resample_crop(image: &Tensor<f32>, crop: Crop, out: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if crop.row + crop.side > s.h || crop.col + crop.side > s.w || crop.side == 0 || out == 0 {
        return Err(Error::shape(
            "resample_crop",
            format!("crop {crop:?} outside image {}x{}", s.h, s.w),
        ));
    }
    let taps = bilinear_taps(crop.side, out);
    let mut result = Tensor::zeros(Shape::new(s.n, s.c, out, out));
    let dst = result.data_mut();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = image.plane(n, c);
            for &(y0, y1, wy0, wy1) in &taps {
                let r0 = (crop.row + y0) * s.w + crop.col;
                let r1 = (crop.row + y1) * s.w + crop.col;
                for &(x0, x1, wx0, wx1) in &taps {
                    let top = plane[r0 + x0] as f64 * wx0 + plane[r0 + x1] as f64 * wx1;
                    let bot = plane[r1 + x0] as f64 * wx0 + plane[r1 + x1] as f64 * wx1;
                    dst[o] = (top * wy0 + bot * wy1) as f32;
                    o += 1;
                }
            }
        }
    }
    Ok(result)
}

/// Builds the sample for a given crop. Deterministic.
pub fn sample_for_crop(
    image: &Tensor<f32>,
    points: &[Point],
    crop: Crop,
    out: usize,
    stencil: &Stencil,
    kernel: GaussianKernelSpec,
) -> Result<TrainSample> {
    let input = resample_crop(image, crop, out)?;
    let moved: Vec<Point> = points
        .iter()
        .filter(|p| crop.contains(p))
        .map(|p| crop.transform(p, out))
        .collect();
    let target = generate_density_with(&moved, out, out, stencil, kernel)?;
    Ok(TrainSample {
        input,
        target,
        true_count: moved.len(),
        points: moved,
        crop,
    })
}

/// Draws a crop and produces the `out x out` training sample for it.
pub fn online_sample(
    image: &Tensor<f32>,
    points: &[Point],
    out: usize,
    cfg: &SamplerConfig,
    stencil: &Stencil,
    kernel: GaussianKernelSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample> {
    let s = image.shape();
    let crop = draw_crop(s.h, s.w, cfg, rng)?;
    sample_for_crop(image, points, crop, out, stencil, kernel)
}
