//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion does.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scnet::arch::{parameter_census, ModelSpec, SCNetModel};
use scnet::data::{online_sample, synth_dataset, Dataset, SamplerConfig, SynthDatasetParams};
use scnet::density::{
    audit_kernel_size, crop_then_rescale_density, generate_density, make_kernel, GaussianKernelSpec, Point,
    AUDIT_THRESHOLD,
};
use scnet::selfcheck::{check_spec, model_check, primitive_suite};
use scnet::tensor::kernels::{pixel_shuffle, pixel_unshuffle};
use scnet::tensor::{Shape, Tape, Tensor};
use scnet::train::{ablation_run, evaluate, AblationConfig, AblationRow, EvalResult, ImageCount, TrainConfig, Variant};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut reports = primitive_suite(0).expect("primitive checks run");
    reports.push(model_check(&check_spec(), 32, 200, 0).expect("model check runs"));
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.summary()).collect();
    let model = reports.last().unwrap();
    // probes on parameters whose gradient vanishes (dead units) are not counted
    let live = model.report.probes.iter().filter(|p| p.analytic.abs() > 1e-6).count();
    let ok = failed.is_empty() && live >= 100 && secs < 60.0;
    let detail = if failed.is_empty() {
        format!(
            "{} primitive checks, full model {} probes ({live} with non-zero gradient) max rel err {:.2e}, {secs:.1}s",
            reports.len() - 1,
            model.report.probes.len(),
            model.report.max_rel_error
        )
    } else {
        format!("failing: {}", failed.join("; "))
    };
    outcome(ok, detail)
}

fn shape_contract() -> Outcome {
    let model = SCNetModel::<f32>::new(ModelSpec::default()).unwrap();
    let cf = model.spec().feature_channels();
    let mut bad = Vec::new();
    for s in [64, 128, 256] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 3, s, s), 0.5f32));
        let bound = model.params().bind(&mut tape, false);
        let t = model.forward(&mut tape, x, &bound).unwrap();
        let got = (tape.shape(t.encoder), tape.shape(t.spcm), tape.shape(t.output));
        let want = (
            Shape::new(1, cf, s / 16, s / 16),
            Shape::new(1, 1, s / 4, s / 4),
            Shape::new(1, 1, s, s),
        );
        if got != want {
            bad.push(format!("{s}: {got:?}"));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "sizes 64, 128, 256".into() } else { bad.join("; ") })
}

fn ppm_structure() -> Outcome {
    let model = SCNetModel::<f32>::new(ModelSpec::default()).unwrap();
    let cf = model.spec().feature_channels();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 3, 256, 256), 0.5f32));
    let bound = model.params().bind(&mut tape, false);
    let t = model.forward(&mut tape, x, &bound).unwrap();
    let enc = tape.shape(t.encoder);
    let grids: Vec<(usize, usize)> = t.ppm.pooled.iter().map(|&p| (tape.shape(p).h, tape.shape(p).w)).collect();
    let width = tape.shape(t.ppm.concat).c;
    let ok = (enc.h, enc.w) == (16, 16) && grids == [(1, 1), (2, 2), (4, 4), (8, 8)] && width == 5 * cf;
    outcome(ok, format!("grids {grids:?}, pre-aggregation width {width} (c_f = {cf})"))
}

fn decoder_census() -> Outcome {
    let model = SCNetModel::<f32>::new(ModelSpec::default()).unwrap();
    let c = parameter_census(&model, 256, 256);
    let spcm = c.stage("spcm").map(|s| s.params);
    let bilinear = c.stage("bilinear").map(|s| s.params);
    outcome(
        spcm == Some(0) && bilinear == Some(0),
        format!("spcm {spcm:?}, bilinear {bilinear:?}, total {}", c.total_params),
    )
}

fn mass_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = GaussianKernelSpec::default();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(64..=512), rng.gen_range(64..=512));
        let n = rng.gen_range(0..=200);
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
            .collect();
        let map = generate_density(&pts, h, w, &spec).unwrap();
        worst = worst.max((map.count() - n as f64).abs());
    }
    outcome(worst < 1e-3, format!("1000 maps, worst |mass - count| {worst:.2e}"))
}

/// Sparse scenes so that most samples contain an isolated point.
fn augmentation_audit() -> Outcome {
    let spec = GaussianKernelSpec::default();
    let stencil = make_kernel(&spec).unwrap();
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut audited, mut worst, mut scaled, mut flagged) = (0usize, 0.0f64, 0usize, 0usize);
    let mut samples = 0;
    while samples < 1000 {
        let side = rng.gen_range(128..=256);
        let n = rng.gen_range(1..=6);
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen_range(0.0..side as f64), rng.gen_range(0.0..side as f64)))
            .collect();
        let image = Tensor::full(Shape::new(1, 1, side, side), 0.5f32);
        let out = cfg.scales[rng.gen_range(0..cfg.scales.len())];
        let s = online_sample(&image, &pts, out, &cfg, &stencil, spec, &mut rng).unwrap();
        samples += 1;
        let full = generate_density(&pts, side, side, &spec).unwrap();
        let violating = crop_then_rescale_density(&full, (s.crop.row, s.crop.col), s.crop.side, out, s.true_count).unwrap();
        let is_scaled = s.crop.side != out;
        let mut counted_scaled = false;
        for i in 0..s.points.len() {
            let Ok(a) = audit_kernel_size(&s.target, &s.points, i, AUDIT_THRESHOLD) else {
                continue;
            };
            audited += 1;
            worst = worst.max(a.max_abs_deviation);
            if is_scaled && !counted_scaled {
                counted_scaled = true;
                scaled += 1;
                if audit_kernel_size(&violating, &s.points, i, AUDIT_THRESHOLD).unwrap().flagged() {
                    flagged += 1;
                }
            }
        }
    }
    let ok = audited > 0 && worst < 1e-6 && scaled > 0 && flagged == scaled;
    outcome(
        ok,
        format!(
            "{samples} samples, {audited} isolated points, max deviation {worst:.2e}; \
             scale-then-normalize flagged in {flagged}/{scaled} scaled samples"
        ),
    )
}

fn shuffle_bijectivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = 0;
    for i in 0..100 {
        let r = if i % 2 == 0 { 2 } else { 4 };
        let shape = Shape::new(rng.gen_range(1..3), r * r * rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let y = pixel_shuffle(&x, r).unwrap();
        let back = pixel_unshuffle(&y, r).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back.shape() == shape && bits(&back) == bits(&x) {
            exact += 1;
        }
    }
    outcome(exact == 100, format!("{exact}/100 bit-exact round trips, r in {{2, 4}}"))
}

struct Benchmark {
    train: Dataset,
    test: Dataset,
    baseline_mae: f64,
}

fn benchmark() -> Benchmark {
    let all = synth_dataset(
        "synthetic",
        &SynthDatasetParams {
            images: 250,
            points_range: (20, 80),
            seed: 7,
            ..Default::default()
        },
    )
    .unwrap();
    let train = all.subset("train", &(0..200).collect::<Vec<_>>());
    let test = all.subset("test", &(200..250).collect::<Vec<_>>());
    let mean = train.mean_count();
    let baseline = EvalResult::from_counts(
        test.entries
            .iter()
            .map(|e| ImageCount {
                true_count: e.count() as f64,
                predicted_count: mean,
            })
            .collect(),
    )
    .unwrap();
    Benchmark {
        train,
        test,
        baseline_mae: baseline.mae,
    }
}

/// Reduced-width network and budget sized for a single CPU core.
fn bench_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        init_seed: seed,
        ..ModelSpec::with_widths([16, 32, 32, 32])
    }
}

fn bench_config(seed: u64) -> AblationConfig {
    AblationConfig {
        train: TrainConfig {
            iterations: ITERATIONS,
            batch_size: 4,
            learning_rate: 1e-3,
            eval_every: 25,
            keep_best: true,
            seed,
            ..Default::default()
        },
        single_scale: 96,
        scales: vec![64, 96, 128],
    }
}

const ITERATIONS: usize = 1000;
const SOFT_CRITERION: usize = 9;
const SEEDS: [u64; 3] = [0, 1, 2];

fn end_to_end(bench: &Benchmark, rows: &[Vec<AblationRow>], secs: f64) -> Outcome {
    let full = rows[0].iter().find(|r| r.variant == Variant::OnlineMultiScale).unwrap();
    let ratio = full.mae / bench.baseline_mae;
    outcome(
        ratio <= 0.5 && secs <= 1800.0,
        format!(
            "test MAE {:.2} vs mean-count baseline {:.2} (ratio {ratio:.3}) after {ITERATIONS} iterations; \
             seed-0 training took {secs:.0}s (limit 1800s)",
            full.mae, bench.baseline_mae
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation_direction(rows: &[Vec<AblationRow>]) -> Outcome {
    let med = |variant: Variant| {
        median(
            rows.iter()
                .map(|seed| seed.iter().find(|r| r.variant == variant).unwrap().mae)
                .collect(),
        )
    };
    let (base, online, multi) = (
        med(Variant::Baseline),
        med(Variant::OnlineSampling),
        med(Variant::OnlineMultiScale),
    );
    let ok = multi <= online && online <= base * 1.1;
    outcome(
        ok,
        format!("median MAE over {} seeds: baseline {base:.2}, online {online:.2}, online + multi-scale {multi:.2}", rows.len()),
    )
}

fn metric_formulas(all_rows: &[Vec<AblationRow>]) -> Outcome {
    let fixture = EvalResult::from_counts(vec![
        ImageCount {
            true_count: 10.0,
            predicted_count: 10.0,
        },
        ImageCount {
            true_count: 10.0,
            predicted_count: 14.0,
        },
    ])
    .unwrap();
    let hand = (fixture.mae - 2.0).abs() < 1e-9 && (fixture.mse - 8f64.sqrt()).abs() < 1e-9;
    let runs: Vec<&AblationRow> = all_rows.iter().flatten().collect();
    let ordered = runs.iter().all(|r| r.mse >= r.mae);
    let model = SCNetModel::<f32>::new(bench_spec(0)).unwrap();
    let bench = benchmark();
    let untrained = evaluate(&model, &bench.test, 100.0).unwrap();
    outcome(
        hand && ordered && untrained.mse >= untrained.mae,
        format!(
            "fixture MAE {:.12} MSE {:.12}; MSE >= MAE on {} training runs and an untrained model",
            fixture.mae,
            fixture.mse,
            runs.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n, name, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "gradient correctness", gradients());
    record(2, "shape contract", shape_contract());
    record(3, "pyramid pooling structure", ppm_structure());
    record(4, "parameter-free decoder", decoder_census());
    record(5, "mass conservation", mass_conservation());
    record(6, "augmentation rule compliance", augmentation_audit());
    record(7, "pixel-shuffle bijectivity", shuffle_bijectivity());

    let bench = benchmark();
    let mut rows = Vec::new();
    let mut first_secs = 0.0;
    for seed in SEEDS {
        let start = Instant::now();
        let cfg = bench_config(seed);
        rows.push(ablation_run(&bench_spec(seed), &bench.train, &bench.test, &Variant::ALL, &cfg).unwrap());
        if seed == SEEDS[0] {
            first_secs = start.elapsed().as_secs_f64();
        }
        for r in rows.last().unwrap() {
            println!("  seed {seed}: {:<44} MAE {:7.3}  MSE {:7.3}", r.variant.label(), r.mae, r.mse);
        }
    }
    record(8, "end-to-end learning", end_to_end(&bench, &rows, first_secs));
    record(9, "ablation direction", ablation_direction(&rows));
    record(10, "metric formulas", metric_formulas(&rows));

    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.passed).map(|(n, _, _)| *n).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    // criterion 9 is a soft directional check: reported, never fatal
    if failed.iter().any(|&n| n != SOFT_CRITERION) {
        std::process::exit(1);
    }
}
