use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{SCNetModel, ENCODER_STRIDE};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub true_count: f64,
    pub predicted_count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
    pub per_image: Vec<ImageCount>,
}

impl EvalResult {
    pub fn from_counts(per_image: Vec<ImageCount>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty image set".into()));
        }
        let n = per_image.len() as f64;
        let errors = per_image.iter().map(|c| c.predicted_count - c.true_count);
        let mae = errors.clone().map(f64::abs).sum::<f64>() / n;
        let mse = (errors.map(|e| e * e).sum::<f64>() / n).sqrt();
        Ok(EvalResult { mae, mse, per_image })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Anything that maps a `(1, C, h, w)` image to a `(1, 1, h, w)` density
/// in loss-scaled units.
pub trait Predictor {
    fn predict_density(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for SCNetModel<f32> {
    /// Zero-pads bottom and right up to the next multiple of 16 and crops
    /// the prediction back to the image extent.
    fn predict_density(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = image.shape();
        let padded = image.pad_to(
            s.h.next_multiple_of(ENCODER_STRIDE),
            s.w.next_multiple_of(ENCODER_STRIDE),
        )?;
        self.predict(&padded)?.crop_to(s.h, s.w)
    }
}

/// Predicted count per image is the density sum divided by `loss_scale`;
/// the true count is the number of annotated points.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    loss_scale: f64,
) -> Result<EvalResult> {
    let per_image = dataset
        .entries
        .iter()
        .map(|e| {
            let density = predictor.predict_density(&e.image)?;
            let sum: f64 = density.data().iter().map(|&v| v as f64).sum();
            Ok(ImageCount {
                true_count: e.count() as f64,
                predicted_count: sum / loss_scale,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_counts(per_image)
}
