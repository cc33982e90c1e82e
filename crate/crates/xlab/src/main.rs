use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use stitchlab::error::{Error, Result};
use stitchlab::report::write_outputs;
use stitchlab::{run, Lab, Manifest};
use stitchlab_core::data::load_uri;
use stitchlab_core::metrics::{cka_curve, Pooling, CKA_EXAMPLES};
use stitchlab_core::nn::{self, gradient_suite, ArchitectureSpec, ModelGraph, SMALL_RESNET_8};
use stitchlab_core::optim::{evaluate, train, AugmentFlags, TrainConfig, TrainSet};
use stitchlab_core::stitching::{
    connectivity, fit_stitcher, make_stitched, penalty, StitchFamily, StitchOptions,
};

#[derive(Parser)]
#[command(
    name = "stitchlab",
    version,
    about = "Model-stitching experiments at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from scratch and save a checkpoint.
    Train(TrainArgs),
    /// Fit a stitcher between two checkpoints and report the penalty.
    Stitch(StitchArgs),
    /// Linear CKA between two checkpoints at every cut.
    Cka(CkaArgs),
    /// Stitch at every cut and decide whether two networks are connected.
    Connect(ConnectArgs),
    /// Run an experiment manifest; exits non-zero if any check fails.
    Run(RunArgs),
    /// Fit a stitcher and save the stitched network as one checkpoint.
    Fold(FoldArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse and check manifests without running them.
    Validate { manifests: Vec<PathBuf> },
}

#[derive(Args)]
struct TrainArgs {
    /// `synth:<seed>:<n>[:<classes>]` or `cifar10:<dir>:<train|test>`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value = SMALL_RESNET_8)]
    arch: String,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long)]
    no_augment: bool,
    /// Test data to report the final error on.
    #[arg(long)]
    test_data: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    top: PathBuf,
    #[arg(long)]
    bottom: PathBuf,
    #[arg(long)]
    train_data: String,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Conv)]
    family: FamilyArg,
    #[arg(long, default_value_t = 1)]
    kernel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Identity,
    Permutation,
    Conv,
}

impl FitArgs {
    fn options(&self) -> StitchOptions {
        let family = match self.family {
            FamilyArg::Identity => StitchFamily::Identity,
            FamilyArg::Permutation => StitchFamily::ChannelPermutation,
            FamilyArg::Conv => StitchFamily::conv(self.kernel),
        };
        StitchOptions::new(
            family,
            TrainConfig::stitcher(self.steps, self.batch_size, self.seed),
        )
    }
}

#[derive(Args)]
struct StitchArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    test_data: String,
    #[arg(long)]
    cut: usize,
}

#[derive(Args)]
struct CkaArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, value_enum, default_value_t = PoolingArg::Pool)]
    pooling: PoolingArg,
    #[arg(long, default_value_t = CKA_EXAMPLES)]
    examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Pool,
    Flatten,
}

#[derive(Args)]
struct ConnectArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    test_data: String,
    /// Largest accepted penalty, as a fraction.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    /// Stitcher restarts per cut.
    #[arg(long, default_value_t = 1)]
    restarts: u64,
}

#[derive(Args)]
struct RunArgs {
    manifest: PathBuf,
    /// Stitchers fitted concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Where trained networks and stitch results are kept between runs.
    #[arg(long, env = "STITCHLAB_CACHE")]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    /// Output directory; defaults to the manifest's, then `results/<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FoldArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    cut: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load(path: &Path) -> Result<ModelGraph> {
    Ok(nn::load(path)?)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(|e| Error::Output(e.to_string()))?
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let data = load_uri(&a.data)?;
    let spec = ArchitectureSpec::new(&a.arch, a.width, data.classes);
    let mut model = ModelGraph::build(&spec, a.seed)?;
    let mut config = TrainConfig::base(a.steps, a.batch_size, a.seed);
    if a.no_augment {
        config.augment = AugmentFlags::NONE;
    }
    let test = a.test_data.as_deref().map(load_uri).transpose()?;
    let eval = test
        .as_ref()
        .map(|t| TrainSet::new(&t.images, &t.labels))
        .transpose()?;
    let history = train(
        &mut model,
        TrainSet::new(&data.images, &data.labels)?,
        &config,
        eval,
    )?;
    model.meta.train_digest = config.digest();
    model.meta.epoch = a.steps as u64;
    nn::save(&model, &a.out)?;
    if let Some(t) = &test {
        let e = evaluate(
            &|x| model.infer(x),
            TrainSet::new(&t.images, &t.labels)?,
            500,
        )?;
        println!(
            "test error {:.4}, cross-entropy {:.4}",
            e.error, e.cross_entropy
        );
    }
    info!("history digest {}", history.digest());
    println!("saved {}", a.out.display());
    Ok(true)
}

fn cmd_stitch(a: StitchArgs) -> Result<bool> {
    let (top, bottom) = (load(&a.fit.top)?, load(&a.fit.bottom)?);
    let (train_ds, test) = (load_uri(&a.fit.train_data)?, load_uri(&a.test_data)?);
    print_json(&penalty(
        &top,
        &bottom,
        a.cut,
        &train_ds,
        &test,
        &a.fit.options(),
    )?)?;
    Ok(true)
}

fn cmd_cka(a: CkaArgs) -> Result<bool> {
    let (x, y) = (load(&a.a)?, load(&a.b)?);
    let data = load_uri(&a.data)?;
    let pooling = match a.pooling {
        PoolingArg::Pool => Pooling::Pool,
        PoolingArg::Flatten => Pooling::Flatten,
    };
    println!("cut,cka");
    for (cut, v) in cka_curve(&x, &y, &data, pooling, a.examples, a.seed)? {
        println!("{cut},{v}");
    }
    Ok(true)
}

fn cmd_connect(a: ConnectArgs) -> Result<bool> {
    let (top, bottom) = (load(&a.fit.top)?, load(&a.fit.bottom)?);
    let (train_ds, test) = (load_uri(&a.fit.train_data)?, load_uri(&a.test_data)?);
    let seeds: Vec<u64> = (a.fit.seed..a.fit.seed + a.restarts.max(1)).collect();
    let report = connectivity(
        &top,
        &bottom,
        &train_ds,
        &test,
        &a.fit.options(),
        &seeds,
        a.threshold,
    )?;
    print_json(&report)?;
    Ok(report.passed)
}

fn cmd_run(a: RunArgs) -> Result<bool> {
    let manifest = Manifest::load(&a.manifest)?;
    manifest.validate()?;
    let cache = if a.no_cache {
        None
    } else {
        Some(
            a.cache
                .unwrap_or_else(|| PathBuf::from("target/stitchlab-cache")),
        )
    };
    let lab = Lab::new(&manifest.train_data, &manifest.test_data, cache.as_deref())?;
    let result = run(&manifest, &lab, a.jobs)?;
    let out = a
        .out
        .or_else(|| manifest.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(&manifest.id));
    write_outputs(&result, &out)?;
    for c in &result.checks {
        println!(
            "[{}] {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!(
        "{}: {} rows in {:.0}s, written to {}",
        result.experiment_id,
        result.rows.len(),
        result.wall_clock_s,
        out.display()
    );
    Ok(result.passed())
}

fn cmd_fold(a: FoldArgs) -> Result<bool> {
    let (top, bottom) = (load(&a.fit.top)?, load(&a.fit.bottom)?);
    let train_ds = load_uri(&a.fit.train_data)?;
    let opts = a.fit.options();
    let mut sm = make_stitched(&top, &bottom, a.cut, opts.family, opts.budget.seed)?;
    fit_stitcher(&mut sm, &train_ds, &opts)?;
    nn::save(&sm.fold()?, &a.out)?;
    println!("saved {}", a.out.display());
    Ok(true)
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let reports = gradient_suite(seed)?;
    for r in &reports {
        println!(
            "[{}] {:<48} {:.2e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.layer,
            r.max_rel_error
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} cases, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn cmd_validate(paths: Vec<PathBuf>) -> Result<bool> {
    let mut ok = true;
    for p in paths {
        match Manifest::load(&p).and_then(|m| m.validate().map(|_| m)) {
            Ok(m) => println!(
                "{}: ok ({}, digest {})",
                p.display(),
                m.experiment.kind(),
                &m.digest()[..12]
            ),
            Err(e) => {
                println!("{}: {e}", p.display());
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let outcome = match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Stitch(a) => cmd_stitch(a),
        Command::Cka(a) => cmd_cka(a),
        Command::Connect(a) => cmd_connect(a),
        Command::Run(a) => cmd_run(a),
        Command::Fold(a) => cmd_fold(a),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Validate { manifests } => cmd_validate(manifests),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
