//! Command-line front end for training and inspecting latent-consistency
//! models and the baseline VAE. Subcommands cover training, sampling from a
//! trained run, reconstructing test inputs, interpolating between latents,
//! computing evaluation metrics, and a standalone particle-transport demo.
//! Exits 0 on success, 2 on configuration or input problems, 3 when a run
//! aborts on non-finite numbers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};
use ldc_vae::config::{DatasetChoice, TrainConfig, TrainMode};
use ldc_vae::metrics::{image_grid, pca_project, write_pgm};
use ldc_vae::models::DecoderNet;
use ldc_vae::rng::{SeedTree, Stream, StreamTag};
use ldc_vae::svgd::{
    BandwidthPolicy, GaussianMixture1d, IsotropicGaussian, ParticleSet, ScoreFunction,
};
use ldc_vae::trainer::{self, TrainedModels};
use ldc_vae::{Error, Result, Tensor};

fn main() -> ExitCode {
    let matches = build_cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

/// Non-finite numbers abort with 3; everything else is a usage or input
/// problem and exits 2, matching clap's own usage errors.
fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::NonFinite(_) => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn build_cli() -> Command {
    Command::new("ldc-vae")
        .about("Trains and inspects latent-consistency and baseline VAE models")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(train_command())
        .subcommand(sample_command())
        .subcommand(reconstruct_command())
        .subcommand(interpolate_command())
        .subcommand(eval_command())
        .subcommand(demo_command())
}

fn run(matches: &ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("sample", m)) => cmd_sample(m),
        Some(("reconstruct", m)) => cmd_reconstruct(m),
        Some(("interpolate", m)) => cmd_interpolate(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("svgd-demo", m)) => cmd_demo(m),
        _ => unreachable!("subcommand is required"),
    }
}

fn train_command() -> Command {
    let mut cmd = Command::new("train")
        .about("Trains a model and writes report.csv, config.txt, and model.ckpt")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("file of key = value lines applied before flag overrides"),
        );
    // One flag per configuration key, so the override surface and the config
    // file format cannot drift apart.
    for &key in TrainConfig::KEYS {
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE").help(key_help(key)));
    }
    cmd
}

/// One-line help per configuration key, shown by `train --help`.
fn key_help(key: &str) -> &'static str {
    match key {
        "mode" => "ldc or baseline",
        "dataset" => "mnist, two_moons, or gaussian_grid",
        "data_dir" => "directory holding the four MNIST idx files",
        "grid_k" => "side length of the gaussian_grid mode lattice",
        "synth_train" => "synthetic training sample count",
        "synth_test" => "synthetic test sample count",
        "train_limit" => "cap on training samples (0 keeps all)",
        "test_limit" => "cap on test samples (0 keeps all)",
        "x_dim" => "input dimension (0 infers it from the dataset)",
        "batch_size" => "samples per step (at least 2)",
        "epochs" => "full passes over the training set",
        "latent_dim" => "latent space dimension",
        "noise_dim" => "encoder noise dimension (0 uses latent_dim)",
        "sampler_noise_dim" => "sampler noise dimension (0 uses latent_dim)",
        "enc_x_hidden" => "encoder input-branch widths, comma separated",
        "enc_noise_hidden" => "encoder noise-branch widths, comma separated",
        "enc_merge_hidden" => "encoder merge-trunk widths, comma separated",
        "dec_hidden" => "decoder hidden widths, comma separated",
        "sampler_hidden" => "sampler hidden widths, comma separated",
        "vae_hidden" => "baseline encoder hidden widths, comma separated",
        "activation" => "relu or tanh",
        "dec_output" => "decoder output layer: sigmoid or linear",
        "lr_encoder" => "encoder Adam learning rate",
        "lr_decoder" => "decoder Adam learning rate",
        "lr_sampler" => "sampler Adam learning rate",
        "sigma2_mode" => "residual variance over norm or sqnorm",
        "bandwidth" => "median heuristic or a fixed positive value",
        "sampler_kernel_particles" => "kernel particles for the sampler: self or encoder",
        "seed" => "root seed for all randomness",
        "out_dir" => "directory for the report, config, and checkpoints",
        "checkpoint_every" => "epoch checkpoint cadence (0 disables)",
        "eval_every" => "evaluation cadence in epochs",
        _ => "configuration override",
    }
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for &key in TrainConfig::KEYS {
        if let Some(value) = m.get_one::<String>(key) {
            cfg.set(key, value)?;
        }
    }
    let out = trainer::train(&cfg)?;
    println!("trained {} model for {} epochs", cfg.mode.name(), cfg.epochs);
    if let Some(&(epoch, mmd2, test_mse)) = out.report.epoch_metrics().last() {
        println!("epoch {epoch}: mmd2 {mmd2:.6} test_mse {test_mse:.6}");
    }
    println!("artifacts in {}", cfg.out_dir);
    Ok(())
}

fn run_dir_arg() -> Arg {
    Arg::new("run_dir")
        .long("run_dir")
        .value_name("DIR")
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help("training output directory holding config.txt and model.ckpt")
}

fn out_dir_arg() -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("DIR")
        .value_parser(value_parser!(PathBuf))
        .help("output directory (defaults to the run directory)")
}

fn seed_arg() -> Arg {
    Arg::new("seed")
        .long("seed")
        .value_name("U64")
        .value_parser(value_parser!(u64))
        .help("noise seed (defaults to the training seed)")
}

fn count_arg(default: &'static str, help: &'static str) -> Arg {
    Arg::new("count")
        .long("count")
        .value_name("N")
        .default_value(default)
        .value_parser(value_parser!(usize))
        .help(help)
}

fn sample_command() -> Command {
    Command::new("sample")
        .about("Draws latents from a trained run and decodes them")
        .arg(run_dir_arg())
        .arg(count_arg("64", "number of samples to draw"))
        .arg(seed_arg())
        .arg(out_dir_arg())
}

fn reconstruct_command() -> Command {
    Command::new("reconstruct")
        .about("Encodes test samples and decodes them back")
        .arg(run_dir_arg())
        .arg(count_arg("8", "number of test samples to reconstruct"))
        .arg(seed_arg())
        .arg(out_dir_arg())
}

fn interpolate_command() -> Command {
    Command::new("interpolate")
        .about("Decodes straight-line latent paths between encoded test pairs")
        .arg(run_dir_arg())
        .arg(
            Arg::new("pairs")
                .long("pairs")
                .value_name("N")
                .default_value("4")
                .value_parser(value_parser!(usize))
                .help("number of test pairs to interpolate between"),
        )
        .arg(
            Arg::new("steps")
                .long("steps")
                .value_name("N")
                .default_value("8")
                .value_parser(value_parser!(usize))
                .help("points per path, endpoints included (at least 2)"),
        )
        .arg(seed_arg())
        .arg(out_dir_arg())
}

fn eval_command() -> Command {
    Command::new("eval")
        .about("Computes test metrics and a latent PCA scatter for a trained run")
        .arg(run_dir_arg())
        .arg(out_dir_arg())
}

fn demo_command() -> Command {
    Command::new("svgd-demo")
        .about("Transports particles toward a closed-form 1-d target and dumps the trajectory")
        .arg(
            Arg::new("target")
                .long("target")
                .value_name("NAME")
                .default_value("gauss")
                .value_parser(["gauss", "mixture"])
                .help("gauss: N(mu, sigma^2); mixture: equal-weight modes at -4 and 4"),
        )
        .arg(
            Arg::new("mu")
                .long("mu")
                .value_name("F64")
                .default_value("3.0")
                .value_parser(value_parser!(f64))
                .help("gauss target mean"),
        )
        .arg(
            Arg::new("sigma")
                .long("sigma")
                .value_name("F64")
                .default_value("2.0")
                .value_parser(value_parser!(f64))
                .help("gauss target standard deviation"),
        )
        .arg(
            Arg::new("n")
                .long("n")
                .value_name("N")
                .default_value("200")
                .value_parser(value_parser!(usize))
                .help("particle count"),
        )
        .arg(
            Arg::new("steps")
                .long("steps")
                .value_name("N")
                .default_value("500")
                .value_parser(value_parser!(usize))
                .help("transport steps"),
        )
        .arg(
            Arg::new("step_size")
                .long("step_size")
                .value_name("F64")
                .default_value("0.3")
                .value_parser(value_parser!(f64))
                .help("transport step size"),
        )
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("U64")
                .default_value("7")
                .value_parser(value_parser!(u64))
                .help("seed for the standard-normal initial particles"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("FILE")
                .default_value("trajectory.csv")
                .value_parser(value_parser!(PathBuf))
                .help("trajectory output file"),
        )
}

/// Restores the configuration and weights a training run left behind.
fn load_run(m: &ArgMatches) -> Result<(PathBuf, TrainConfig, TrainedModels)> {
    let run_dir = m.get_one::<PathBuf>("run_dir").expect("run_dir is required").clone();
    let cfg = TrainConfig::from_file(&trainer::config_path(&run_dir))?;
    let ckpt = trainer::checkpoint_path(&run_dir);
    let models = match cfg.mode {
        TrainMode::Ldc => TrainedModels::Ldc(trainer::load_ldc_models(&cfg, &ckpt)?),
        TrainMode::Baseline => {
            TrainedModels::Baseline(trainer::load_baseline_models(&cfg, &ckpt)?)
        }
    };
    Ok((run_dir, cfg, models))
}

fn out_dir(m: &ArgMatches, run_dir: &Path) -> Result<PathBuf> {
    let dir = m.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| run_dir.to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn noise_tree(m: &ArgMatches, cfg: &TrainConfig) -> SeedTree {
    SeedTree::new(m.get_one::<u64>("seed").copied().unwrap_or(cfg.seed))
}

fn decoder(models: &TrainedModels) -> &DecoderNet {
    match models {
        TrainedModels::Ldc(m) => &m.decoder,
        TrainedModels::Baseline(m) => &m.decoder,
    }
}

/// Draws `n` latents the way the trained model generates: through the
/// sampler net for latent-consistency runs, from the standard-normal prior
/// for the baseline.
fn draw_latents(models: &TrainedModels, n: usize, stream: &mut Stream) -> Result<Tensor> {
    match models {
        TrainedModels::Ldc(m) => {
            let nd = m.sampler.noise_dim();
            let eps = Tensor::new(vec![n, nd], stream.normal_vec(n * nd))?;
            trainer::sample_values(&m.sampler, &eps)
        }
        TrainedModels::Baseline(m) => {
            let d = m.encoder.latent_dim();
            Tensor::new(vec![n, d], stream.normal_vec(n * d))
        }
    }
}

/// Stochastic encoding of `x`, matching how each model was trained: noise
/// through the encoder net, or the reparameterized Gaussian posterior.
fn encode_latents(models: &TrainedModels, x: &Tensor, stream: &mut Stream) -> Result<Tensor> {
    match models {
        TrainedModels::Ldc(m) => {
            let nd = m.encoder.noise_dim();
            let eps = Tensor::new(vec![x.rows(), nd], stream.normal_vec(x.rows() * nd))?;
            trainer::encode_values(&m.encoder, x, &eps)
        }
        TrainedModels::Baseline(m) => {
            let (mu, logvar) = trainer::gaussian_forward_values(&m.encoder, x)?;
            let eps = stream.normal_vec(mu.data().len());
            let data: Vec<f64> = mu
                .data()
                .iter()
                .zip(logvar.data())
                .zip(&eps)
                .map(|((mv, lv), e)| mv + (0.5 * lv).exp() * e)
                .collect();
            Tensor::new(mu.shape().to_vec(), data)
        }
    }
}

/// Pixel layout of model outputs; only MNIST runs produce square images.
fn image_dims(cfg: &TrainConfig) -> Option<(usize, usize)> {
    if cfg.dataset != DatasetChoice::Mnist {
        return None;
    }
    let side = (cfg.x_dim as f64).sqrt().round() as usize;
    (side * side == cfg.x_dim).then_some((side, side))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

/// Header like `index,z0,z1` for `n` numbered columns after the lead columns.
fn numbered_header(lead: &str, prefix: &str, n: usize) -> String {
    let mut header = String::from(lead);
    for k in 0..n {
        header.push_str(&format!(",{prefix}{k}"));
    }
    header
}

fn indexed_rows(values: &Tensor) -> Vec<Vec<f64>> {
    (0..values.rows())
        .map(|i| {
            let mut row = vec![i as f64];
            row.extend_from_slice(values.row(i));
            row
        })
        .collect()
}

fn write_grid(
    path: &Path,
    tiles: &Tensor,
    dims: (usize, usize),
    grid_rows: usize,
    grid_cols: usize,
) -> Result<()> {
    let grid = image_grid(tiles, dims.0, dims.1, grid_rows, grid_cols)?;
    write_pgm(path, &grid)
}

fn cmd_sample(m: &ArgMatches) -> Result<()> {
    let (run_dir, cfg, models) = load_run(m)?;
    let dir = out_dir(m, &run_dir)?;
    let count = *m.get_one::<usize>("count").expect("count has a default");
    if count == 0 {
        return Err(Error::Contract("sample count must be positive".to_string()));
    }
    let mut stream = noise_tree(m, &cfg).stream(StreamTag::Demo, 0);
    let z = draw_latents(&models, count, &mut stream)?;
    let x = trainer::decode_values(decoder(&models), &z)?;

    write_csv(&dir.join("latents.csv"), &numbered_header("index", "z", z.cols()), &indexed_rows(&z))?;
    write_csv(&dir.join("samples.csv"), &numbered_header("index", "v", x.cols()), &indexed_rows(&x))?;
    if let Some(dims) = image_dims(&cfg) {
        let grid_cols = (count as f64).sqrt().ceil() as usize;
        let grid_rows = count.div_ceil(grid_cols);
        write_grid(&dir.join("samples.pgm"), &x, dims, grid_rows, grid_cols)?;
    }
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

fn cmd_reconstruct(m: &ArgMatches) -> Result<()> {
    let (run_dir, cfg, models) = load_run(m)?;
    let dir = out_dir(m, &run_dir)?;
    let count = *m.get_one::<usize>("count").expect("count has a default");
    let (_, test) = trainer::load_datasets(&cfg)?;
    if count == 0 || count > test.len() {
        return Err(Error::Contract(format!(
            "count must be in 1..={}, got {count}",
            test.len()
        )));
    }
    let idx: Vec<usize> = (0..count).collect();
    let x = test.batch(&idx)?;
    let mut stream = noise_tree(m, &cfg).stream(StreamTag::Demo, 1);
    let z = encode_latents(&models, &x, &mut stream)?;
    let x_hat = trainer::decode_values(decoder(&models), &z)?;

    let rows: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            let sse: f64 =
                x.row(i).iter().zip(x_hat.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            vec![i as f64, sse]
        })
        .collect();
    write_csv(&dir.join("reconstruct.csv"), "index,sse", &rows)?;
    let mean_sse = rows.iter().map(|r| r[1]).sum::<f64>() / count as f64;

    if let Some(dims) = test.image_dims() {
        // One grid row per sample: original left, reconstruction right.
        let mut tiles = Vec::with_capacity(count * 2);
        for i in 0..count {
            tiles.push(x.row(i).to_vec());
            tiles.push(x_hat.row(i).to_vec());
        }
        write_grid(&dir.join("reconstruct.pgm"), &Tensor::from_rows(&tiles)?, dims, count, 2)?;
    }
    println!("reconstructed {count} test samples, mean squared error {mean_sse:.6}");
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_interpolate(m: &ArgMatches) -> Result<()> {
    let (run_dir, cfg, models) = load_run(m)?;
    let dir = out_dir(m, &run_dir)?;
    let pairs = *m.get_one::<usize>("pairs").expect("pairs has a default");
    let steps = *m.get_one::<usize>("steps").expect("steps has a default");
    if pairs == 0 {
        return Err(Error::Contract("pairs must be positive".to_string()));
    }
    if steps < 2 {
        return Err(Error::Contract("steps must be at least 2 to hold both endpoints".to_string()));
    }
    let (_, test) = trainer::load_datasets(&cfg)?;
    if test.len() < 2 {
        return Err(Error::Contract("interpolation needs at least 2 test samples".to_string()));
    }
    let tree = noise_tree(m, &cfg);
    let mut pick = tree.stream(StreamTag::Demo, 3);
    let mut ends = Vec::with_capacity(pairs * 2);
    for _ in 0..pairs {
        let a = pick.below(test.len());
        let mut b = pick.below(test.len());
        while b == a {
            b = pick.below(test.len());
        }
        ends.push(a);
        ends.push(b);
    }
    let x_ends = test.batch(&ends)?;
    let mut noise = tree.stream(StreamTag::Demo, 2);
    let z_ends = encode_latents(&models, &x_ends, &mut noise)?;

    // Blend weights run k / (steps - 1), so paths include both endpoints.
    let mut blends = Vec::with_capacity(pairs * steps);
    let mut csv_rows = Vec::with_capacity(pairs * steps);
    for p in 0..pairs {
        let za = z_ends.row(2 * p);
        let zb = z_ends.row(2 * p + 1);
        for k in 0..steps {
            let w = k as f64 / (steps - 1) as f64;
            let z: Vec<f64> = za.iter().zip(zb).map(|(a, b)| (1.0 - w) * a + w * b).collect();
            let mut row = vec![p as f64, k as f64, w];
            row.extend_from_slice(&z);
            csv_rows.push(row);
            blends.push(z);
        }
    }
    let x_blend = trainer::decode_values(decoder(&models), &Tensor::from_rows(&blends)?)?;
    write_csv(
        &dir.join("interpolate.csv"),
        &numbered_header("pair,step,weight", "z", z_ends.cols()),
        &csv_rows,
    )?;

    if let Some(dims) = test.image_dims() {
        // One grid row per pair: original, the decoded path, original.
        let grid_cols = steps + 2;
        let mut tiles = Vec::with_capacity(pairs * grid_cols);
        for p in 0..pairs {
            tiles.push(x_ends.row(2 * p).to_vec());
            for k in 0..steps {
                tiles.push(x_blend.row(p * steps + k).to_vec());
            }
            tiles.push(x_ends.row(2 * p + 1).to_vec());
        }
        write_grid(&dir.join("interpolate.pgm"), &Tensor::from_rows(&tiles)?, dims, pairs, grid_cols)?;
    }
    println!("interpolated {pairs} pairs over {steps} steps");
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let (run_dir, cfg, models) = load_run(m)?;
    let dir = out_dir(m, &run_dir)?;
    let (_, test) = trainer::load_datasets(&cfg)?;
    let tree = SeedTree::new(cfg.seed);
    // Evaluation streams are keyed by the final epoch, so these metrics
    // reproduce the last epoch row of report.csv exactly.
    let epoch = cfg.epochs;
    let (metrics, clouds) = match &models {
        TrainedModels::Ldc(mods) => (
            trainer::evaluate_ldc(mods, &test, &tree, epoch)?,
            trainer::latent_clouds_ldc(mods, &test, &tree, epoch)?,
        ),
        TrainedModels::Baseline(mods) => (
            trainer::evaluate_baseline(mods, &test, &tree, epoch)?,
            trainer::latent_clouds_baseline(mods, &test, &tree, epoch)?,
        ),
    };
    write_csv(
        &dir.join("metrics.csv"),
        "test_mse,mmd2,mmd_bandwidth,n",
        &[vec![metrics.test_mse, metrics.mmd2, metrics.mmd_bandwidth, metrics.n as f64]],
    )?;

    // Both clouds share the principal plane of the pooled latents, so their
    // overlap in the scatter is meaningful.
    if clouds.encoder.cols() >= 2 {
        let n_enc = clouds.encoder.rows();
        let mut pooled = clouds.encoder.data().to_vec();
        pooled.extend_from_slice(clouds.comparison.data());
        let pooled = Tensor::new(
            vec![n_enc + clouds.comparison.rows(), clouds.encoder.cols()],
            pooled,
        )?;
        let pca = pca_project(&pooled)?;
        let mut text = String::from("cloud,pc1,pc2\n");
        for i in 0..pooled.rows() {
            let cloud = if i < n_enc { "encoder" } else { "comparison" };
            let row = pca.coords.row(i);
            text.push_str(&format!("{cloud},{},{}\n", row[0], row[1]));
        }
        write_text(&dir.join("pca.csv"), &text)?;
    }

    println!(
        "test_mse {:.6} mmd2 {:.6} (bandwidth {:.6}, n {})",
        metrics.test_mse, metrics.mmd2, metrics.mmd_bandwidth, metrics.n
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_demo(m: &ArgMatches) -> Result<()> {
    let n = *m.get_one::<usize>("n").expect("n has a default");
    let steps = *m.get_one::<usize>("steps").expect("steps has a default");
    let step_size = *m.get_one::<f64>("step_size").expect("step_size has a default");
    let seed = *m.get_one::<u64>("seed").expect("seed has a default");
    let mu = *m.get_one::<f64>("mu").expect("mu has a default");
    let sigma = *m.get_one::<f64>("sigma").expect("sigma has a default");
    let out = m.get_one::<PathBuf>("out").expect("out has a default").clone();
    if n == 0 {
        return Err(Error::Contract("particle count must be positive".to_string()));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let score: Box<dyn ScoreFunction> =
        match m.get_one::<String>("target").expect("target has a default").as_str() {
            "gauss" => Box::new(IsotropicGaussian { mean: vec![mu], variance: sigma * sigma }),
            "mixture" => Box::new(GaussianMixture1d {
                components: vec![(0.5, -4.0, 1.0), (0.5, 4.0, 1.0)],
            }),
            other => return Err(Error::Contract(format!("unknown target {other}"))),
        };

    let init = SeedTree::new(seed).stream(StreamTag::Demo, 0).normal_vec(n);
    let mut particles = ParticleSet::new(Tensor::new(vec![n, 1], init)?, step_size)?;
    let mut text = String::from("step,particle,z\n");
    let mut dump = |step: usize, positions: &Tensor| {
        for (i, z) in positions.data().iter().enumerate() {
            text.push_str(&format!("{step},{i},{z}\n"));
        }
    };
    dump(0, particles.positions());
    particles.transport_observed(score.as_ref(), steps, BandwidthPolicy::MedianPerStep, &mut dump)?;

    let positions = particles.positions().data();
    let mean = positions.iter().sum::<f64>() / n as f64;
    let var = positions.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n as f64;
    write_text(&out, &text)?;
    println!("{steps} steps over {n} particles: mean {mean:.4} var {var:.4}");
    println!("trajectory in {}", out.display());
    Ok(())
}
