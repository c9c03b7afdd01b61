use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::to_model_input;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Element, Tape, Tensor, Var};

use super::params::{ConvRef, ParamStore};
use super::ppm::{build_ppm, Ppm, PpmTrace};
use super::rfm::{build_rfm, Rfm};
use super::spec::{ModelSpec, ENCODER_STRIDE};

/// Starts predicted densities near the scale of the training targets.
const HEAD_GAIN: f64 = 0.1;

/// Instantiated network: four RFMs with 2x max pooling after each, the
/// pyramid pooling module, a 1x1 head to `r^2` channels, sub-pixel
/// rearrangement, bilinear upsampling and a final ReLU.
#[derive(Clone, Debug)]
pub struct SCNetModel<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    rfms: Vec<Rfm>,
    ppm: Ppm,
    head: ConvRef,
}

/// Every stage boundary of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// RFM outputs, before their pooling.
    pub stages: Vec<Var>,
    /// After the fourth pooling: `(n, c_f, h/16, w/16)`.
    pub encoder: Var,
    pub ppm: PpmTrace,
    /// 1x1 head output, `(n, r^2, h/16, w/16)`.
    pub head: Var,
    /// After sub-pixel rearrangement, `(n, 1, h/4, w/4)`.
    pub spcm: Var,
    /// Final non-negative density, `(n, 1, h, w)`.
    pub output: Var,
}

impl<T: Element> SCNetModel<T> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = ParamStore::new();
        let rfms = spec
            .rfm_specs()
            .into_iter()
            .enumerate()
            .map(|(i, s)| build_rfm(s, &format!("rfm{}", i + 1), &mut params, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cf = spec.feature_channels();
        let ppm = build_ppm(cf, spec.ppm_levels, "ppm", &mut params, &mut rng);
        let r = spec.spcm_factor;
        let head = ConvRef::create_with_gain(
            &mut params,
            "head",
            cf,
            r * r,
            1,
            ConvGeometry::pointwise(),
            HEAD_GAIN,
            &mut rng,
        );
        Ok(SCNetModel {
            spec,
            params,
            rfms,
            ppm,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn rfms(&self) -> &[Rfm] {
        &self.rfms
    }

    pub fn ppm(&self) -> &Ppm {
        &self.ppm
    }

    pub fn cast<U: Element>(&self) -> SCNetModel<U> {
        SCNetModel {
            spec: self.spec.clone(),
            params: self.params.cast(),
            rfms: self.rfms.clone(),
            ppm: self.ppm.clone(),
            head: self.head,
        }
    }

    /// Runs the network on `input` with parameters bound by
    /// [`ParamStore::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, bound: &[Var]) -> Result<ForwardTrace> {
        let s = tape.shape(input);
        if s.h % ENCODER_STRIDE != 0 || s.w % ENCODER_STRIDE != 0 {
            return Err(Error::InputContract(format!(
                "input extents {}x{} must be multiples of {ENCODER_STRIDE}",
                s.h, s.w
            )));
        }
        if s.c != self.spec.in_channels {
            return Err(Error::InputContract(format!(
                "input has {} channels, model expects {}",
                s.c, self.spec.in_channels
            )));
        }
        let mut x = input;
        let mut stages = Vec::with_capacity(self.rfms.len());
        for rfm in &self.rfms {
            let y = rfm.forward(tape, x, bound)?;
            stages.push(y);
            x = tape.max_pool2d(y, 2, 2)?;
        }
        let encoder = x;
        let ppm = self.ppm.forward(tape, encoder, bound)?;
        let head = self.head.apply(tape, ppm.output, bound)?;
        let spcm = tape.pixel_shuffle(head, self.spec.spcm_factor)?;
        let up = tape.upsample_bilinear(spcm, self.spec.bilinear_factor)?;
        let output = tape.relu(up);
        Ok(ForwardTrace {
            stages,
            encoder,
            ppm,
            head,
            spcm,
            output,
        })
    }

    /// Density map for a `(n, C, h, w)` image batch without recording
    /// gradients. Single-channel inputs are replicated to three channels
    /// when the model expects three.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = if image.shape().c == 1 && self.spec.in_channels == 3 {
            to_model_input(image)
        } else {
            image.clone()
        };
        let x = tape.constant(input);
        let bound = self.params.bind(&mut tape, false);
        let trace = self.forward(&mut tape, x, &bound)?;
        Ok(tape.value(trace.output).clone())
    }
}

/// Object count of a single-channel density map: the sum of its cells.
pub fn count<T: Element>(density: &Tensor<T>) -> Result<f64> {
    if density.shape().c != 1 {
        return Err(Error::shape(
            "count",
            format!("density map must be single-channel, got {}", density.shape()),
        ));
    }
    Ok(density.data().iter().map(|v| v.to_f64_lossy()).sum())
}
