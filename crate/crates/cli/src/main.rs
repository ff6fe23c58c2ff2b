use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use autodiff::Tensor;
use mvstta::eval::{predict_sample, MetricsReport, PixelPool};
use mvstta::experiment::{
    ablation_csv, dataset, k_sweep, prepare_seed, run_ablation, step_sweep, sweep_csv, ExperimentConfig, SeedRun,
    ABLATION_VARIANTS,
};
use mvstta::gradcheck::{passed, results_csv, run_suite, SuiteConfig};
use mvstta::metatta::{meta_train, pretrain, MetaConfig};
use mvstta::mvsnet::{init_params, load_checkpoint, predict_depth, save_checkpoint, ModelParams};
use mvstta::scenegen::{generate_dataset, read_scene, write_pfm, write_ppm, write_scene, Layout, SceneSample};

#[derive(Parser)]
#[command(name = "mvstta", version, about = "Multi-view stereo with meta-learned test-time adaptation")]
struct Cli {
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (TOML); missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render seeded scenes into scene directories.
    GenScenes(GenArgs),
    /// Supervised pretraining from a fresh initialization.
    Pretrain(DataArgs),
    /// Meta-auxiliary training starting from a checkpoint.
    MetaTrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint on scene directories, with or without adaptation.
    AdaptEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Override the configured number of test-time steps.
        #[arg(long)]
        tta_steps: Option<usize>,
        #[arg(long)]
        no_adapt: bool,
    },
    /// Baseline, baseline+TTA, meta and meta+TTA over every seed.
    Ablation,
    /// Meta-trained model after each configured TTA step count.
    StepSweep,
    /// Full framework with each configured top-K at test time.
    KSweep,
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth_count: Option<usize>,
    #[arg(long)]
    sources: Option<usize>,
    /// One of fronto-parallel, slanted, two-plane-step, textured-box; cycles when unset.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    brightness_jitter: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Train on these scene directories instead of the seed's generated split.
    #[arg(long)]
    scenes: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Scene directories directly below `dir`, in name order.
fn load_scenes(dir: &Path) -> Result<Vec<(String, SceneSample)>> {
    if !dir.is_dir() {
        bail!("scene directory not found: {}", dir.display());
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no scene directories in {}", dir.display());
    }
    names
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, read_scene(&p)?))
        })
        .collect()
}

/// Depth mapped linearly from the hypothesis range to gray; zero (invalid) stays black.
fn depth_image(depth: &Tensor, lo: f64, hi: f64) -> Tensor {
    let d = depth.data();
    Tensor::from_fn(&[depth.shape()[0], depth.shape()[1], 3], |i| {
        let v = d[i / 3];
        if v > 0.0 { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 }
    })
}

/// Reference and predicted depth as PFM plus 8-bit visualizations.
fn write_depth_maps(dir: &Path, name: &str, sample: &SceneSample, pred: &Tensor) -> Result<()> {
    create(dir)?;
    let reference =
        Tensor::from_fn(sample.gt_depth.shape(), |i| if sample.valid.bits()[i] { sample.gt_depth.data()[i] } else { 0.0 });
    let (lo, hi) = (sample.hyps.d_min, sample.hyps.d_max);
    for (tag, depth) in [("ref", &reference), ("pred", pred)] {
        write_pfm(&dir.join(format!("{name}_{tag}.pfm")), depth)?;
        write_ppm(&dir.join(format!("{name}_{tag}.ppm")), &depth_image(depth, lo, hi))?;
    }
    Ok(())
}

fn training_data(cfg: &ExperimentConfig, seed: u64, scenes: &Option<PathBuf>) -> Result<Vec<SceneSample>> {
    Ok(match scenes {
        Some(dir) => load_scenes(dir)?.into_iter().map(|(_, s)| s).collect(),
        None => dataset(cfg, seed)?.0,
    })
}

fn report_row(out: &mut String, name: &str, r: &MetricsReport) {
    let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", r.rel, r.tau_103, r.tau_110, r.pixel_count);
}

fn gen_scenes(cfg: &mut ExperimentConfig, args: &GenArgs, seed: u64, out: &Path) -> Result<()> {
    let spec = &mut cfg.scene;
    spec.height = args.height.unwrap_or(spec.height);
    spec.width = args.width.unwrap_or(spec.width);
    spec.depth_count = args.depth_count.unwrap_or(spec.depth_count);
    spec.m_sources = args.sources.unwrap_or(spec.m_sources);
    spec.brightness_jitter = args.brightness_jitter.unwrap_or(spec.brightness_jitter);
    if let Some(name) = &args.layout {
        let names: Vec<_> = Layout::ALL.iter().map(Layout::name).collect();
        spec.layout = Some(Layout::from_name(name).with_context(|| format!("unknown layout {name:?}; expected one of {names:?}"))?);
    }
    let spec = cfg.scene_spec(seed);
    let samples = generate_dataset(&spec, args.count)?;
    let mut csv = String::from("scene,seed,layout,valid_pixels,warp_error\n");
    for (i, s) in samples.iter().enumerate() {
        let name = format!("scene_{i:03}");
        write_scene(&out.join("scenes").join(&name), s)?;
        let _ = writeln!(csv, "{name},{},{},{},{:.6}", s.seed, s.layout.name(), s.valid.count(), s.warp_error()?);
        let reference = Tensor::from_fn(s.gt_depth.shape(), |p| if s.valid.bits()[p] { s.gt_depth.data()[p] } else { 0.0 });
        create(&out.join("depth"))?;
        write_ppm(&out.join("depth").join(format!("{name}_ref.ppm")), &depth_image(&reference, spec.d_min, spec.d_max))?;
    }
    write(&out.join("scenes.csv"), &csv)
}

fn pretrain_cmd(cfg: &ExperimentConfig, seed: u64, data: &DataArgs, out: &Path) -> Result<()> {
    let train = training_data(cfg, seed, &data.scenes)?;
    let init = init_params(&cfg.arch, seed)?;
    let (params, trace) = pretrain(&init, &train, &cfg.pretrain_config(seed))?;
    save_checkpoint(&params, &out.join("baseline.ckpt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(csv, "{},{:.9}", i + 1, l);
    }
    write(&out.join("pretrain.csv"), &csv)?;
    let pred = predict_depth(&params, &train[0].views[..cfg.meta.n_views], &train[0].hyps)?;
    write_depth_maps(&out.join("depth"), "train_000", &train[0], &pred)
}

fn meta_train_cmd(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path, data: &DataArgs, out: &Path) -> Result<()> {
    let train = training_data(cfg, seed, &data.scenes)?;
    let start = load_checkpoint(checkpoint, Some(&cfg.arch))?;
    let (params, trace) = meta_train(&start, &train, &cfg.meta_config(seed))?;
    save_checkpoint(&params, &out.join("meta.ckpt"))?;
    let mut csv = String::from("iteration,inner_loss,outer_loss\n");
    for (i, s) in trace.iter().enumerate() {
        let _ = writeln!(csv, "{},{:.9},{:.9}", i + 1, s.inner_loss, s.outer_loss);
    }
    write(&out.join("meta.csv"), &csv)?;
    let pred = predict_depth(&params, &train[0].views[..cfg.meta.n_views], &train[0].hyps)?;
    write_depth_maps(&out.join("depth"), "train_000", &train[0], &pred)
}

fn adapt_eval(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path, scenes: &Path, adapt: bool, out: &Path) -> Result<()> {
    let samples = load_scenes(scenes)?;
    let params = load_checkpoint(checkpoint, Some(&cfg.arch))?;
    let meta = cfg.meta_config(seed);
    let mut csv = String::from("scene,rel,tau103,tau110,pixels\n");
    let mut pool = PixelPool::default();
    for (name, sample) in &samples {
        let pred = predict_sample(&params, sample, &meta, adapt)?;
        let mut one = PixelPool::default();
        one.add(&pred, &sample.gt_depth, &sample.valid)?;
        pool.add(&pred, &sample.gt_depth, &sample.valid)?;
        report_row(&mut csv, name, &one.report(String::new())?);
        write_depth_maps(&out.join("depth"), name, sample, &pred)?;
    }
    report_row(&mut csv, "all", &pool.report(String::new())?);
    write(&out.join("metrics.csv"), &csv)
}

fn prepare_all(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SeedRun>> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        eprintln!("seed {seed}: pretraining and meta-training");
        let run = prepare_seed(cfg, seed)?;
        let dir = out.join(format!("seed_{seed}"));
        create(&dir)?;
        save_checkpoint(&run.baseline, &dir.join("baseline.ckpt"))?;
        save_checkpoint(&run.meta, &dir.join("meta.ckpt"))?;
        runs.push(run);
    }
    Ok(runs)
}

/// Depth maps of each seed's first test scene under `params_of`.
fn write_run_maps(runs: &[SeedRun], out: &Path, tag: &str, params_of: impl Fn(&SeedRun) -> (ModelParams, MetaConfig, bool)) -> Result<()> {
    for run in runs {
        let (params, meta, adapt) = params_of(run);
        let sample = &run.test[0];
        let pred = predict_sample(&params, sample, &meta, adapt)?;
        write_depth_maps(&out.join("depth"), &format!("seed{}_{tag}", run.seed), sample, &pred)?;
    }
    Ok(())
}

fn ablation(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let runs = prepare_all(cfg, out)?;
    let rows = run_ablation(&runs, &cfg.meta)?;
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    for (i, variant) in ABLATION_VARIANTS.iter().enumerate() {
        write_run_maps(&runs, out, &variant.replace('+', "_"), |r| {
            let params = if i < 2 { r.baseline.clone() } else { r.meta.clone() };
            (params, cfg.meta_config(r.seed), i % 2 == 1)
        })?;
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, out: &Path, steps: bool) -> Result<()> {
    let runs = prepare_all(cfg, out)?;
    let (name, csv) = if steps {
        ("step_sweep.csv", sweep_csv("steps", &step_sweep(&runs, &cfg.meta, &cfg.sweep_steps)?))
    } else {
        ("k_sweep.csv", sweep_csv("k", &k_sweep(&runs, &cfg.meta, &cfg.k_values)?))
    };
    write(&out.join(name), &csv)?;
    write_run_maps(&runs, out, "meta_tta", |r| (r.meta.clone(), cfg.meta_config(r.seed), true))
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = resolve(&cli)?;
    let out = cli.out.clone();
    create(&out)?;
    let seed = cfg.seeds[0];
    let mut ok = true;
    match &cli.command {
        Command::GenScenes(args) => gen_scenes(&mut cfg, args, seed, &out)?,
        Command::Pretrain(data) => pretrain_cmd(&cfg, seed, data, &out)?,
        Command::MetaTrain { checkpoint, data } => meta_train_cmd(&cfg, seed, checkpoint, data, &out)?,
        Command::AdaptEval { checkpoint, scenes, tta_steps, no_adapt } => {
            if let Some(n) = tta_steps {
                cfg.meta.tta_steps = *n;
            }
            adapt_eval(&cfg, seed, checkpoint, scenes, !no_adapt, &out)?
        }
        Command::Ablation => ablation(&cfg, &out)?,
        Command::StepSweep => sweep(&cfg, &out, true)?,
        Command::KSweep => sweep(&cfg, &out, false)?,
        Command::Gradcheck => {
            let results = run_suite(&SuiteConfig { seed, ..Default::default() })?;
            write(&out.join("gradcheck.csv"), &results_csv(&results))?;
            for r in results.iter().filter(|r| r.worst >= mvstta::gradcheck::TOLERANCE) {
                eprintln!("FAIL {}: worst relative error {:e}", r.name, r.worst);
            }
            ok = passed(&results);
            eprintln!("{} cases, {}", results.len(), if ok { "all passed" } else { "FAILED" });
        }
    }
    write(&out.join("config.toml"), &cfg.to_toml())?;
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
