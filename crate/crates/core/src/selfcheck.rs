//! Built-in gradient verification: every differentiable primitive and one
//! whole-network pass, in double precision against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ModelSpec, SCNetModel};
use crate::error::Result;
use crate::tensor::{grad_check_tape, ConvGeometry, GradCheckOptions, GradCheckReport, Shape, Tape, Tensor, Var};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

impl NamedReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<28} probes {:>4}  max rel err {:.3e}  {}",
            self.name,
            self.report.probes.len(),
            self.report.max_rel_error,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// Uniform values in `[-1, 1]` pushed at least `gap` away from zero, so
/// that ReLU and max-pool probes never straddle a kink.
fn random(shape: Shape, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.len())
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            v.signum() * (gap + v.abs() * (1.0 - gap))
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn case(name: &str, leaves: Vec<Tensor<f64>>, build: Build, seed: u64) -> Result<NamedReport> {
    let opts = GradCheckOptions {
        eps: FD_EPS,
        tol: PRIMITIVE_TOL,
        max_probes: 400,
        seed,
        ..Default::default()
    };
    Ok(NamedReport {
        name: name.to_string(),
        report: grad_check_tape(&leaves, build, opts)?,
    })
}

/// Wraps `op` in a squared-error loss against a fixed random target.
fn with_target(out: Shape, rng: &mut ChaCha8Rng, op: Build) -> Build {
    let target = random(out, 0.0, rng);
    Box::new(move |tape, v| {
        let y = op(tape, v)?;
        tape.squared_error(y, target.clone())
    })
}

fn conv_case(
    name: &str,
    input: Shape,
    cout: usize,
    k: usize,
    geometry: ConvGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<NamedReport> {
    let x = random(input, 0.0, rng);
    let w = random(Shape::new(cout, input.c, k, k), 0.0, rng);
    let b = random(Shape::new(1, cout, 1, 1), 0.0, rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, Some(bv), geometry)?;
    let out = tape.shape(y);
    let build = with_target(
        out,
        rng,
        Box::new(move |tape, v| tape.conv2d(v[0], v[1], Some(v[2]), geometry)),
    );
    case(name, vec![x, w, b], build, rng.gen())
}

/// One report per primitive, tolerance [`PRIMITIVE_TOL`].
pub fn primitive_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = vec![
        conv_case("conv2d 3x3 same", Shape::new(2, 3, 7, 6), 4, 3, ConvGeometry::same3x3(1), rng)?,
        conv_case("conv2d 3x3 dilated", Shape::new(1, 2, 11, 9), 3, 3, ConvGeometry::same3x3(4), rng)?,
        conv_case("conv2d 3x3 stride 2", Shape::new(1, 2, 9, 8), 3, 3, ConvGeometry::new(2, 1, 1), rng)?,
        conv_case("conv2d 1x1", Shape::new(2, 5, 4, 3), 2, 1, ConvGeometry::pointwise(), rng)?,
    ];

    let s = Shape::new(2, 2, 6, 8);
    let x = random(s, 0.05, rng);
    let b = with_target(Shape::new(2, 2, 3, 3), rng, Box::new(|t, v| t.avg_pool2d(v[0], 2, 3, 2, 2)));
    out.push(case("avg_pool2d", vec![x], b, rng.gen())?);

    // distinct magnitudes keep every pooling window's maximum unique
    let mut x = random(s, 0.05, rng);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 1e-2;
    }
    let b = with_target(Shape::new(2, 2, 3, 4), rng, Box::new(|t, v| t.max_pool2d(v[0], 2, 2)));
    out.push(case("max_pool2d", vec![x], b, rng.gen())?);

    let x = random(s, 0.05, rng);
    let b = with_target(s, rng, Box::new(|t, v| Ok(t.relu(v[0]))));
    out.push(case("relu", vec![x], b, rng.gen())?);

    let (x, y) = (random(s, 0.0, rng), random(s, 0.0, rng));
    let b = with_target(s, rng, Box::new(|t, v| t.add(v[0], v[1])));
    out.push(case("add", vec![x, y], b, rng.gen())?);

    let (x, y) = (random(s, 0.0, rng), random(Shape::new(2, 3, 6, 8), 0.0, rng));
    let b = with_target(Shape::new(2, 5, 6, 8), rng, Box::new(|t, v| t.concat_channels(&v[..2])));
    out.push(case("concat_channels", vec![x, y], b, rng.gen())?);

    let x = random(Shape::new(1, 8, 3, 2), 0.0, rng);
    let b = with_target(Shape::new(1, 2, 6, 4), rng, Box::new(|t, v| t.pixel_shuffle(v[0], 2)));
    out.push(case("pixel_shuffle", vec![x], b, rng.gen())?);

    let x = random(Shape::new(1, 1, 8, 4), 0.0, rng);
    let b = with_target(Shape::new(1, 16, 2, 1), rng, Box::new(|t, v| t.pixel_unshuffle(v[0], 4)));
    out.push(case("pixel_unshuffle", vec![x], b, rng.gen())?);

    let x = random(Shape::new(1, 2, 3, 5), 0.0, rng);
    let b = with_target(Shape::new(1, 2, 7, 4), rng, Box::new(|t, v| t.resize_nearest(v[0], 7, 4)));
    out.push(case("resize_nearest", vec![x], b, rng.gen())?);

    let x = random(Shape::new(1, 2, 3, 4), 0.0, rng);
    let b = with_target(Shape::new(1, 2, 12, 16), rng, Box::new(|t, v| t.upsample_bilinear(v[0], 4)));
    out.push(case("upsample_bilinear", vec![x], b, rng.gen())?);

    let x = random(s, 0.0, rng);
    let b: Build = Box::new(|t, v| {
        let total = t.sum_all(v[0]);
        t.squared_error(total, Tensor::scalar(0.3))
    });
    out.push(case("sum_all", vec![x], b, rng.gen())?);

    let x = random(s, 0.0, rng);
    let target = random(s, 0.0, rng);
    let b: Build = Box::new(move |t, v| t.squared_error(v[0], target.clone()));
    out.push(case("squared_error", vec![x], b, rng.gen())?);

    Ok(out)
}

/// Small network used by [`model_check`]: every stage kind is present.
pub fn check_spec() -> ModelSpec {
    ModelSpec {
        in_channels: 1,
        ..ModelSpec::with_widths([4, 4, 8, 8])
    }
}

/// Gradient of a full forward pass with respect to `probes` randomly chosen
/// parameter coordinates, tolerance [`MODEL_TOL`].
pub fn model_check(spec: &ModelSpec, side: usize, probes: usize, seed: u64) -> Result<NamedReport> {
    let model = SCNetModel::<f64>::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random(Shape::new(1, spec.in_channels, side, side), 0.0, &mut rng);
    let target = random(Shape::new(1, 1, side, side), 0.0, &mut rng).map(f64::abs);
    let leaves: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let opts = GradCheckOptions {
        eps: FD_EPS,
        tol: MODEL_TOL,
        max_probes: probes,
        seed,
        ..Default::default()
    };
    let report = grad_check_tape(
        &leaves,
        |tape, params| {
            let x = tape.constant(input.clone());
            let trace = model.forward(tape, x, params)?;
            tape.squared_error(trace.output, target.clone())
        },
        opts,
    )?;
    Ok(NamedReport {
        name: format!("full model ({side}x{side})"),
        report,
    })
}
