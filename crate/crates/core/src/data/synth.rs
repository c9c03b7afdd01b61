//! Synthetic crowd scenes: bright blobs of varying size on a noisy
//! background, annotated with their exact centres.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{Point, PointAnnotation};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::dataset::{write_dataset, Dataset, Entry};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub h: usize,
    pub w: usize,
    pub n_points: usize,
    /// Per-blob standard deviation range in pixels. Visual size varies, the
    /// annotation is always a single point.
    pub blob_sigma_range: (f64, f64),
    /// Amplitude of the uniform background noise.
    pub noise_level: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            h: 128,
            w: 128,
            n_points: 40,
            blob_sigma_range: (1.5, 3.0),
            noise_level: 0.15,
        }
    }
}

const BLOB_AMPLITUDE: f64 = 0.8;

/// Renders one `(1, 1, h, w)` scene and returns it with its centres.
pub fn synth_scene(params: &SceneParams, rng: &mut impl Rng) -> (Tensor<f32>, Vec<Point>) {
    let (h, w) = (params.h, params.w);
    let mut img: Vec<f64> = (0..h * w)
        .map(|_| params.noise_level * rng.gen::<f64>())
        .collect();
    let (s_lo, s_hi) = params.blob_sigma_range;
    let mut points = Vec::with_capacity(params.n_points);
    for _ in 0..params.n_points {
        let p = Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let sigma = if s_hi > s_lo { rng.gen_range(s_lo..s_hi) } else { s_lo };
        let reach = (3.0 * sigma).ceil() as isize;
        let (cr, cc) = p.cell();
        let two_s2 = 2.0 * sigma * sigma;
        for y in (cr - reach).max(0)..=(cr + reach).min(h as isize - 1) {
            for x in (cc - reach).max(0)..=(cc + reach).min(w as isize - 1) {
                let dy = y as f64 + 0.5 - p.y;
                let dx = x as f64 + 0.5 - p.x;
                img[y as usize * w + x as usize] += BLOB_AMPLITUDE * (-(dx * dx + dy * dy) / two_s2).exp();
            }
        }
        points.push(p);
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let image = Tensor::from_vec(Shape::new(1, 1, h, w), data).expect("extents >= 1");
    (image, points)
}

/// Generator settings for a whole synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDatasetParams {
    pub images: usize,
    pub points_range: (usize, usize),
    pub scene: SceneParams,
    pub seed: u64,
}

impl Default for SynthDatasetParams {
    fn default() -> Self {
        SynthDatasetParams {
            images: 20,
            points_range: (20, 80),
            scene: SceneParams::default(),
            seed: 0,
        }
    }
}

pub fn synth_dataset(name: &str, params: &SynthDatasetParams) -> Result<Dataset> {
    let (lo, hi) = params.points_range;
    if lo > hi {
        return Err(Error::Config(format!("empty point range {lo}..{hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut entries = Vec::with_capacity(params.images);
    for i in 0..params.images {
        let scene = SceneParams {
            n_points: rng.gen_range(lo..=hi),
            ..params.scene
        };
        let (image, points) = synth_scene(&scene, &mut rng);
        let annotation = PointAnnotation {
            image_ref: format!("img_{i:04}.pgm"),
            points,
        };
        entries.push(Entry::new(image, annotation)?);
    }
    Ok(Dataset::new(name, entries))
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'static str,
    params: &'a SynthDatasetParams,
    total_count: usize,
    created_unix: u64,
}

/// Writes images, `annotations.json` and `manifest.json`. The creation time
/// in the manifest is the only non-reproducible byte.
pub fn write_synth_dataset(dir: &Path, dataset: &Dataset, params: &SynthDatasetParams) -> Result<()> {
    write_dataset(dir, dataset)?;
    let manifest = Manifest {
        generator: "synth_scene",
        params,
        total_count: dataset.total_count(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))
}
