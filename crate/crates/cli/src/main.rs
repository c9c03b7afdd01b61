use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use scnet::arch::{checkpoint, parameter_census, ModelSpec, SCNetModel};
use scnet::data::{image_io, load_annotations, synth_dataset, write_synth_dataset, Dataset, SynthDatasetParams};
use scnet::density::{generate_density, GaussianKernelSpec};
use scnet::selfcheck::{check_spec, model_check, primitive_suite};
use scnet::train::{
    ablation_run, best_checkpoint_path, evaluate, train, AblationConfig, AblationTable, Predictor,
    TrainConfig, Variant,
};

#[derive(Parser, Debug)]
#[command(name = "scnet", version, about = "Crowd counting by density-map regression")]
struct Cli {
    /// JSON settings file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic annotated dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        /// Inclusive point-count range, e.g. `20..80`.
        #[arg(long, value_parser = parse_range)]
        points: Option<(usize, usize)>,
    },
    /// Write ground-truth density maps (.dmap and .pgm) for a dataset.
    MakeDensity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train a model and write `model.scnk`, `init.scnk` and `loss.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        knobs: TrainKnobs,
    },
    /// Report MAE and MSE of a checkpoint over a dataset as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the result JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the density map and count of one image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Directory for `<stem>.dmap` and `<stem>.pgm`; defaults to the
        /// image's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant with identical budgets and compare.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Separate test set; without it a hashed fifth of `--data` is held out.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Also write the table rows as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: TrainKnobs,
    },
    /// Finite-difference verification of every primitive and the full model.
    Gradcheck,
    /// Parameter and multiply-accumulate census.
    Census {
        /// Census a saved model instead of the configured spec.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

#[derive(Args, Debug, Default)]
struct TrainKnobs {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated candidate sample sides.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected LO..HI, got `{s}`"))?;
    let lo = a.trim().parse().map_err(|e| format!("bad lower bound `{a}`: {e}"))?;
    let hi = b.trim().parse().map_err(|e| format!("bad upper bound `{b}`: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblationSettings {
    single_scale: usize,
    scales: Vec<usize>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            single_scale: 192,
            scales: vec![128, 192, 256],
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    seed: Option<u64>,
    model: ModelSpec,
    train: TrainConfig,
    synth: SynthDatasetParams,
    ablation: AblationSettings,
}

impl Settings {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
    }

    fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.train.seed = s;
            self.model.init_seed = s;
            self.synth.seed = s;
        }
    }

    fn apply_knobs(&mut self, k: &TrainKnobs) {
        let t = &mut self.train;
        if let Some(v) = k.iters {
            t.iterations = v;
        }
        if let Some(v) = k.batch {
            t.batch_size = v;
        }
        if let Some(v) = k.lr {
            t.learning_rate = v;
        }
        if let Some(v) = &k.scales {
            t.sampler.scales = v.clone();
            self.ablation.scales = v.clone();
        }
        if let Some(v) = k.sigma {
            t.kernel = GaussianKernelSpec::with_sigma(v);
        }
        if let Some(v) = k.eval_every {
            t.eval_every = v;
        }
    }
}

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<scnet::Error>() {
        Some(scnet::Error::Config(_)) => 1,
        Some(scnet::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) failed", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    load_annotations(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<SCNetModel<f32>> {
    checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    settings.apply_seed(cli.seed);
    match cli.command {
        Command::SynthData { out, images, points } => {
            let mut params = settings.synth;
            if let Some(n) = images {
                params.images = n;
            }
            if let Some(r) = points {
                params.points_range = r;
            }
            let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let dataset = synth_dataset(&name, &params)?;
            write_synth_dataset(&out, &dataset, &params)?;
            println!(
                "wrote {} images ({} points) to {}",
                dataset.len(),
                dataset.total_count(),
                out.display()
            );
        }
        Command::MakeDensity { data, out, sigma } => {
            let kernel = sigma.map(GaussianKernelSpec::with_sigma).unwrap_or(settings.train.kernel);
            let dataset = load_dataset(&data)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for e in &dataset.entries {
                let map = generate_density(&e.annotation.points, e.height(), e.width(), &kernel)?;
                let stem = Path::new(&e.annotation.image_ref).with_extension("");
                map.write_dmap(&out.join(stem.with_extension("dmap")))?;
                map.write_pgm_heatmap(&out.join(stem.with_extension("pgm")))?;
            }
            println!("wrote {} density maps to {}", dataset.len(), out.display());
        }
        Command::Train { data, out, model, knobs } => {
            settings.apply_knobs(&knobs);
            let dataset = load_dataset(&data)?;
            let mut net = match &model {
                Some(p) => load_model(p)?,
                None => SCNetModel::new(settings.model.clone())?,
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            checkpoint::save(&net, &out.join("init.scnk"))?;
            let mut cfg = settings.train;
            let final_path = out.join("model.scnk");
            cfg.checkpoint_path = Some(final_path.clone());
            let report = train(&mut net, &dataset, &cfg)?;
            report.write_csv(&out.join("loss.csv"))?;
            match report.best {
                Some((it, mae)) => println!(
                    "best held-out MAE {mae:.3} at iteration {it} -> {}",
                    best_checkpoint_path(&final_path).display()
                ),
                None => println!("no held-out evaluation was run"),
            }
            println!("final model -> {}", final_path.display());
        }
        Command::Eval { model, data, out } => {
            let net = load_model(&model)?;
            let dataset = load_dataset(&data)?;
            let result = evaluate(&net, &dataset, settings.train.loss_scale)?;
            if let Some(p) = out {
                result.write_json(&p)?;
            }
            println!("{}", result.to_json());
        }
        Command::Predict { model, image, out } => {
            let net = load_model(&model)?;
            let img = image_io::read_image(&image)?;
            let density = net.predict_density(&img)?;
            let map = scnet::density::DensityMap::from_tensor(&density, settings.train.loss_scale, settings.train.kernel);
            let dir = out.unwrap_or_else(|| image.parent().map(Path::to_path_buf).unwrap_or_default());
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let stem = image
                .file_stem()
                .ok_or_else(|| anyhow!("image path {} has no file name", image.display()))?;
            let base = dir.join(stem);
            map.write_dmap(&base.with_extension("dmap"))?;
            map.write_pgm_heatmap(&base.with_extension("pgm"))?;
            println!("{:.4}", map.count());
        }
        Command::Ablate { data, test, out, knobs } => {
            settings.apply_knobs(&knobs);
            let dataset = load_dataset(&data)?;
            let (train_set, test_set) = match test {
                Some(t) => (dataset, load_dataset(&t)?),
                None => holdout_fifth(&dataset)?,
            };
            let cfg = AblationConfig {
                train: settings.train,
                single_scale: settings.ablation.single_scale,
                scales: settings.ablation.scales,
            };
            let rows = ablation_run(&settings.model, &train_set, &test_set, &Variant::ALL, &cfg)?;
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
                fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{}", AblationTable(rows));
        }
        Command::Gradcheck => {
            let seed = settings.train.seed;
            let mut reports = primitive_suite(seed)?;
            reports.push(model_check(&check_spec(), 32, 200, seed)?);
            let failed = reports.iter().filter(|r| !r.passed()).count();
            for r in &reports {
                println!("{}", r.summary());
            }
            if failed > 0 {
                return Err(GradcheckFailed(failed).into());
            }
        }
        Command::Census { model, size } => {
            let net = match model {
                Some(p) => load_model(&p)?,
                None => SCNetModel::new(settings.model)?,
            };
            println!("{}", parameter_census(&net, size, size));
        }
    }
    Ok(())
}

/// Hashed 80/20 split of one dataset into training and test parts.
fn holdout_fifth(dataset: &Dataset) -> anyhow::Result<(Dataset, Dataset)> {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| {
        let h = (i as u64 ^ 0xAB1A7E).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        (h >> 32) % 5 == 0
    });
    if test.is_empty() || train.is_empty() {
        bail!(Usage(format!(
            "dataset of {} images is too small to split; pass --test",
            dataset.len()
        )));
    }
    Ok((dataset.subset("train", &train), dataset.subset("test", &test)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
