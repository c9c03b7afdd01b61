use scnet::arch::{checkpoint, ModelSpec, SCNetModel};
use scnet::data::{synth_dataset, Dataset, SamplerConfig, SamplingMode, SceneParams, SynthDatasetParams};
use scnet::density::{generate_density, GaussianKernelSpec};
use scnet::tensor::Tensor;
use scnet::train::{
    ablation_run, evaluate, train, AblationConfig, Predictor, TrainConfig, Variant,
};
use scnet::Result;

fn tiny_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        init_seed: seed,
        ..ModelSpec::with_widths([4, 4, 8, 8])
    }
}

fn scenes(images: usize, side: usize, seed: u64) -> Dataset {
    synth_dataset(
        "synthetic",
        &SynthDatasetParams {
            images,
            points_range: (5, 15),
            scene: SceneParams {
                h: side,
                w: side,
                ..Default::default()
            },
            seed,
        },
    )
    .unwrap()
}

fn quick_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        learning_rate: 1e-3,
        eval_every: 0,
        sampler: SamplerConfig {
            scales: vec![32, 48],
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Returns the ground-truth density of whichever image it is handed,
/// identified by exact pixel equality.
struct Oracle {
    dataset: Dataset,
    scale: f64,
}

impl Predictor for Oracle {
    fn predict_density(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let e = self
            .dataset
            .entries
            .iter()
            .find(|e| &e.image == image)
            .expect("image belongs to the dataset");
        let map = generate_density(&e.annotation.points, e.height(), e.width(), &GaussianKernelSpec::default())?;
        Ok(map.to_tensor(self.scale))
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let data = scenes(3, 48, 1);
    let mut model = SCNetModel::<f32>::new(tiny_spec(2)).unwrap();
    let before = checkpoint::encode(&model);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick_config(1)
    };
    train(&mut model, &data, &cfg).unwrap();
    assert_eq!(checkpoint::encode(&model), before);
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let data = scenes(4, 48, 3);
    let run = || {
        let mut model = SCNetModel::<f32>::new(tiny_spec(4)).unwrap();
        train(&mut model, &data, &quick_config(8)).unwrap().losses()
    };
    let a = run();
    assert_eq!(a.len(), 8);
    assert_eq!(a, run());
}

#[test]
fn overfits_a_single_repeated_image() {
    let data = scenes(1, 64, 5);
    let mut model = SCNetModel::<f32>::new(tiny_spec(6)).unwrap();
    let cfg = TrainConfig {
        iterations: 2000,
        batch_size: 1,
        learning_rate: 1e-3,
        eval_every: 0,
        mode: SamplingMode::Offline,
        ..Default::default()
    };
    let losses = train(&mut model, &data, &cfg).unwrap().losses();
    let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(
        losses[9] >= 10.0 * tail,
        "loss at iteration 10 {} vs final {tail}",
        losses[9]
    );
}

#[test]
fn perfect_predictor_scores_zero() {
    let data = scenes(5, 40, 7);
    let oracle = Oracle {
        dataset: data.clone(),
        scale: 100.0,
    };
    let r = evaluate(&oracle, &data, 100.0).unwrap();
    // only the f32 storage of the maps separates the counts
    assert!(r.mae < 1e-6 && r.mse < 1e-6, "{r:?}");
}

#[test]
fn zero_padding_adds_no_mass() {
    // 40 is not a multiple of the network stride, 48 is
    let data = scenes(3, 40, 8);
    for e in &data.entries {
        let map = generate_density(&e.annotation.points, 40, 40, &GaussianKernelSpec::default()).unwrap();
        let t: Tensor<f32> = map.to_tensor(100.0);
        let padded = t.pad_to(48, 48).unwrap().crop_to(40, 40).unwrap();
        let a: f64 = t.data().iter().map(|&v| v as f64).sum();
        let b: f64 = padded.data().iter().map(|&v| v as f64).sum();
        assert!((a - b).abs() / 100.0 < 1e-6);
        assert!((a / 100.0 - e.count() as f64).abs() < 1e-3);
    }
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let data = scenes(3, 40, 9);
    let mut model = SCNetModel::<f32>::new(tiny_spec(10)).unwrap();
    train(&mut model, &data, &quick_config(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.scnk");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let a = evaluate(&model, &data, 100.0).unwrap();
    let b = evaluate(&loaded, &data, 100.0).unwrap();
    assert_eq!(a, b);
    assert!(a.mse >= a.mae);
}

#[test]
fn evaluation_is_independent_of_image_order() {
    let data = scenes(4, 32, 11);
    let model = SCNetModel::<f32>::new(tiny_spec(12)).unwrap();
    let reversed = data.subset("reversed", &[3, 2, 1, 0]);
    let a = evaluate(&model, &data, 100.0).unwrap();
    let b = evaluate(&model, &reversed, 100.0).unwrap();
    let mut pa: Vec<_> = a.per_image.iter().map(|c| c.predicted_count.to_bits()).collect();
    let mut pb: Vec<_> = b.per_image.iter().map(|c| c.predicted_count.to_bits()).collect();
    pa.sort_unstable();
    pb.sort_unstable();
    assert_eq!(pa, pb);
    assert!((a.mae - b.mae).abs() < 1e-12);
}

#[test]
fn identical_variants_give_identical_rows() {
    let data = scenes(4, 48, 13);
    let cfg = AblationConfig {
        train: quick_config(3),
        single_scale: 32,
        scales: vec![32, 48],
    };
    let variants = [Variant::OnlineSampling, Variant::OnlineSampling];
    let rows = ablation_run(&tiny_spec(14), &data, &data, &variants, &cfg).unwrap();
    assert_eq!(rows[0], rows[1]);
    assert!(rows[0].mse >= rows[0].mae);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut data = scenes(2, 48, 15);
    for e in &mut data.entries {
        e.image.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    }
    let mut model = SCNetModel::<f32>::new(tiny_spec(16)).unwrap();
    match train(&mut model, &data, &quick_config(5)) {
        Err(scnet::Error::Numeric(msg)) => {
            assert!(msg.contains("iteration") && msg.contains("learning rate"), "{msg}");
        }
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}
