use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{generate_density_with, make_kernel, GaussianKernelSpec, Stencil};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

use super::dataset::Dataset;
use super::sampler::{online_sample, pick_scale, SamplerConfig};

/// How training samples are cut from the dataset images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Whole images with their full-resolution density maps.
    Offline,
    /// Random square crops rescaled to a side drawn from the candidate list.
    Online,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 3, side, side)` for online batches, `(B, 3, h, w)` offline.
    pub input: Tensor<f32>,
    /// `(B, 1, ., .)` unscaled densities.
    pub target: Tensor<f32>,
    pub counts: Vec<usize>,
}

/// Replicates a single-channel image to three channels; three-channel
/// images pass through.
pub fn to_model_input<T: Element>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape();
    if s.c != 1 {
        return image.clone();
    }
    let mut data = Vec::with_capacity(3 * s.len());
    for n in 0..s.n {
        let item = image.item(n);
        for _ in 0..3 {
            data.extend_from_slice(item);
        }
    }
    Tensor::from_vec(Shape::new(s.n, 3, s.h, s.w), data).expect("extents preserved")
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, a, b)`, so every sample of every
/// iteration has its own stream.
pub fn substream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(a ^ mix64(b))))
}

/// Infinite, seed-deterministic stream of training batches.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    pool: Vec<usize>,
    cfg: SamplerConfig,
    mode: SamplingMode,
    batch_size: usize,
    kernel: GaussianKernelSpec,
    stencil: Stencil,
    iteration: u64,
}

impl<'a> BatchIter<'a> {
    /// Batches drawn from `pool` (indices into `dataset`).
    pub fn new(
        dataset: &'a Dataset,
        pool: Vec<usize>,
        cfg: SamplerConfig,
        mode: SamplingMode,
        batch_size: usize,
        kernel: GaussianKernelSpec,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if pool.is_empty() {
            return Err(Error::Config("no images to sample from".into()));
        }
        if mode == SamplingMode::Online {
            cfg.validate()?;
        }
        let stencil = make_kernel(&kernel)?;
        Ok(BatchIter {
            dataset,
            pool,
            cfg,
            mode,
            batch_size,
            kernel,
            stencil,
            iteration: 0,
        })
    }

    /// Every entry of `dataset` is eligible.
    pub fn over(
        dataset: &'a Dataset,
        cfg: SamplerConfig,
        mode: SamplingMode,
        batch_size: usize,
        kernel: GaussianKernelSpec,
    ) -> Result<Self> {
        let pool = (0..dataset.len()).collect();
        Self::new(dataset, pool, cfg, mode, batch_size, kernel)
    }

    fn next_batch(&mut self) -> Result<Batch> {
        let it = self.iteration;
        self.iteration += 1;
        let mut scale_rng = substream(self.cfg.seed, it, u64::MAX);
        let side = match self.mode {
            SamplingMode::Online => Some(pick_scale(&self.cfg, &mut scale_rng)?),
            SamplingMode::Offline => None,
        };
        let mut inputs = Vec::with_capacity(self.batch_size);
        let mut targets = Vec::with_capacity(self.batch_size);
        let mut counts = Vec::with_capacity(self.batch_size);
        for k in 0..self.batch_size {
            let mut rng = substream(self.cfg.seed, it, k as u64);
            let entry = &self.dataset.entries[self.pool[rng.gen_range(0..self.pool.len())]];
            let points = &entry.annotation.points;
            match side {
                Some(out) => {
                    let s = online_sample(
                        &entry.image,
                        points,
                        out,
                        &self.cfg,
                        &self.stencil,
                        self.kernel,
                        &mut rng,
                    )?;
                    inputs.push(to_model_input(&s.input));
                    targets.push(s.target.to_tensor::<f32>(1.0));
                    counts.push(s.true_count);
                }
                None => {
                    let map = generate_density_with(
                        points,
                        entry.height(),
                        entry.width(),
                        &self.stencil,
                        self.kernel,
                    )?;
                    // zero padding up to the network stride adds no mass
                    let (h, w) = (entry.height().next_multiple_of(16), entry.width().next_multiple_of(16));
                    inputs.push(to_model_input(&entry.image).pad_to(h, w)?);
                    targets.push(map.to_tensor::<f32>(1.0).pad_to(h, w)?);
                    counts.push(points.len());
                }
            }
        }
        let input = Tensor::stack(&inputs).map_err(|_| {
            Error::Config("offline batches need images of identical size; use batch size 1".into())
        })?;
        let target = Tensor::stack(&targets)?;
        Ok(Batch {
            input,
            target,
            counts,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
