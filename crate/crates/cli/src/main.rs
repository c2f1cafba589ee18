use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fmnet_core::bench::{bench_attention_scaling, BenchConfig, BenchReport, Kernel};
use fmnet_core::config::Config;
use fmnet_core::data::{self, SynthConfig};
use fmnet_core::equiv::{self, EquivRecord};
use fmnet_core::gradcheck::GradCheckReport;
use fmnet_core::gradsuite;
use fmnet_core::io::{load_checkpoint, read_pgm, read_ppm, save_checkpoint, write_pgm};
use fmnet_core::metrics::{evaluate_dirs, DEFAULT_BETA2};
use fmnet_core::model::{FmNet, ModelConfig};
use fmnet_core::train::train_overfit;
use fmnet_core::{par, Tape, Tensor};

#[derive(Parser)]
#[command(name = "fmnet", version, about = "Frequency-assisted camouflaged object detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of every differentiable op and block.
    Gradcheck {
        /// Case or group name (primitive, block, loss, model).
        #[arg(long)]
        module: Option<String>,
        /// Seeds to run; defaults to 0..5.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Recurrent/prefix linear attention and state-space correspondence.
    Equiv {
        /// Seeds to run; defaults to 0..10.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Attention scaling benchmark over a token grid.
    Bench {
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        kernels: Option<Vec<Kernel>>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset as images/*.ppm and masks/*.pgm.
    Synth {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit the network on a small dataset and save a checkpoint.
    Train {
        /// TOML file with [model], [train] and [data] sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Directory written by `synth`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict level-1 probability maps for every PPM in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAE and adaptive F-measure of predicted PGM masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BETA2)]
        beta2: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn emit(csv: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(csv.as_bytes())?;
            Ok(())
        }
    }
}

fn seeds_or(seeds: Vec<u64>, default: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        default.to_vec()
    } else {
        seeds
    }
}

fn gradcheck(module: Option<String>, seeds: Vec<u64>, csv: Option<PathBuf>) -> Result<bool> {
    let seeds = seeds_or(seeds, &gradsuite::SEEDS);
    let start = Instant::now();
    let mut out = format!("{}\n", GradCheckReport::csv_header());
    let mut failed = Vec::new();
    let mut total = 0;
    for case in gradsuite::select(module.as_deref())? {
        for &seed in &seeds {
            let r = case.run(seed)?;
            out.push_str(&r.csv_row());
            out.push('\n');
            total += 1;
            if !r.passed {
                failed.push(format!("{}@{}", r.name, r.seed));
            }
        }
    }
    emit(&out, csv.as_deref())?;
    eprintln!(
        "gradcheck: {}/{total} passed in {:.1}s{}",
        total - failed.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
    );
    Ok(failed.is_empty())
}

fn equiv_cmd(seeds: Vec<u64>, csv: Option<PathBuf>) -> Result<bool> {
    let recs = equiv::run_suite(&seeds_or(seeds, &equiv::SEEDS))?;
    let mut out = format!("{}\n", EquivRecord::csv_header());
    for r in &recs {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    emit(&out, csv.as_deref())?;
    let worst = recs.iter().map(|r| r.max_dev).fold(0.0, f64::max);
    let passed = recs.iter().filter(|r| r.passed).count();
    eprintln!("equiv: {passed}/{} passed, worst deviation {worst:.3e}", recs.len());
    Ok(passed == recs.len())
}

fn bench(grid: Option<Vec<usize>>, reps: Option<usize>, kernels: Option<Vec<Kernel>>, csv: Option<PathBuf>) -> Result<bool> {
    let mut cfg = BenchConfig::default();
    if let Some(g) = grid {
        cfg.grid = g;
    }
    if let Some(r) = reps {
        cfg.reps = r;
    }
    if let Some(k) = kernels {
        cfg.kernels = k;
    }
    let report = bench_attention_scaling(&cfg, |r| eprintln!("  {} n={} median {:.3e}s", r.kernel.name(), r.n, r.median_s))?;
    emit(&report.to_csv(), csv.as_deref())?;
    print_bench_summary(&report);
    Ok(report.passed())
}

fn print_bench_summary(report: &BenchReport) {
    for s in &report.summaries {
        let (lo, hi) = s.kernel.doubling_bounds();
        let ratios: Vec<String> = s.ratios.iter().map(|r| format!("{r:.2}")).collect();
        eprintln!(
            "bench: {} slope {:.2}, doubling ratios [{}] (bounds {lo}-{hi}) {}",
            s.kernel.name(),
            s.slope,
            ratios.join(", "),
            if s.ratios_ok { "ok" } else { "out of bounds" }
        );
    }
    if let Some(g) = report.slope_gap {
        eprintln!("bench: slope gap {g:.2} (need > {}) in {:.1}s", report.config.min_slope_gap, report.elapsed_s);
    }
}

fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<bool> {
    let cfg = SynthConfig { count: n, size, seed, ..Default::default() };
    data::write_dataset(out, &data::generate(&cfg)?)?;
    eprintln!("synth: wrote {n} samples of {size}x{size} to {}", out.display());
    Ok(true)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    Ok(v)
}

/// Stacks `[C,H,W]` tensors into `[B,C,H,W]`.
fn batch(items: &[Tensor]) -> Result<Tensor> {
    let parts: Vec<Tensor> = items
        .iter()
        .map(|t| {
            let s = t.shape();
            t.reshape(&[1, s[0], s[1], s[2]])
        })
        .collect::<fmnet_core::Result<_>>()?;
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?)
}

fn load_dataset(dir: &Path) -> Result<(Tensor, Tensor)> {
    let imgs = sorted_files(&dir.join("images"), "ppm")?;
    if imgs.is_empty() {
        bail!("no images under {}", dir.join("images").display());
    }
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for p in &imgs {
        let stem = p.file_stem().context("image file name")?.to_string_lossy().into_owned();
        images.push(read_ppm(p)?);
        let m = read_pgm(&dir.join("masks").join(format!("{stem}.pgm")))?;
        let s = m.shape().to_vec();
        masks.push(m.reshape(&[1, s[0], s[1]])?);
    }
    Ok((batch(&images)?, batch(&masks)?))
}

fn train_cmd(config: Option<PathBuf>, steps: Option<usize>, data_dir: Option<PathBuf>, out: &Path) -> Result<bool> {
    let mut cfg = match &config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let (images, masks) = match &data_dir {
        Some(d) => load_dataset(d)?,
        None => data::stack(&data::generate(&cfg.data)?)?,
    };
    let (net, mut store) = FmNet::build(cfg.model.clone())?;
    eprintln!(
        "train: {} params, {} images of {}x{}, {} steps on {} thread(s)",
        store.num_scalars(),
        images.shape()[0],
        images.shape()[2],
        images.shape()[3],
        cfg.train.steps,
        par::num_threads()
    );
    let start = Instant::now();
    let every = (cfg.train.steps / 10).max(1);
    let outcome = train_overfit(&net, &mut store, &images, &masks, &cfg.train, |r| {
        if r.step % every == 0 {
            eprintln!("  step {:4} lr {:.1e} loss {:.5}", r.step, r.lr, r.loss);
        }
    })?;
    fs::create_dir_all(out)?;
    save_checkpoint(out, &cfg.model, &store)?;
    let mut curve = String::from("step,lr,loss\n");
    for r in &outcome.curve {
        curve.push_str(&format!("{},{:e},{:.8}\n", r.step, r.lr, r.loss));
    }
    fs::write(out.join("loss.csv"), curve)?;
    let mae = outcome.thresholded_mae(&masks)?;
    eprintln!(
        "train: final loss {:.5}, thresholded MAE {:.5}, {:.1}s; checkpoint in {}",
        outcome.final_loss,
        mae,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(outcome.final_loss.is_finite())
}

fn infer(ckpt: &Path, input: &Path, out: &Path) -> Result<bool> {
    let (cfg, values): (ModelConfig, _) = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let (net, mut store) = FmNet::build(cfg)?;
    store.load(values)?;
    fs::create_dir_all(out)?;
    let files = sorted_files(input, "ppm")?;
    if files.is_empty() {
        bail!("no .ppm files in {}", input.display());
    }
    for p in &files {
        let img = batch(&[read_ppm(p)?])?;
        let tape = Tape::new();
        let ctx = store.bind(&tape, false);
        let pyr = net.forward(&ctx, ctx.input(img))?;
        let prob = pyr.logits[0].value().map(fmnet_core::autodiff::sigmoid);
        let s = prob.shape().to_vec();
        let name = format!("{}.pgm", p.file_stem().context("image file name")?.to_string_lossy());
        write_pgm(&out.join(name), &prob.reshape(&[s[2], s[3]])?)?;
    }
    eprintln!("infer: wrote {} maps to {}", files.len(), out.display());
    Ok(true)
}

fn eval(pred: &Path, gt: &Path, beta2: f64, report: Option<PathBuf>) -> Result<bool> {
    let r = evaluate_dirs(pred, gt, beta2)?;
    emit(&r.to_csv(), None)?;
    if let Some(p) = report {
        let json = serde_json::to_string_pretty(&r)?;
        fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("eval: {} images, MAE {:.5}, F {:.5} (beta2 {beta2})", r.images.len(), r.mean_mae, r.mean_f_measure);
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { module, seed, csv } => gradcheck(module, seed, csv),
        Command::Equiv { seed, csv } => equiv_cmd(seed, csv),
        Command::Bench { grid, reps, kernels, csv } => bench(grid, reps, kernels, csv),
        Command::Synth { n, size, seed, out } => synth(n, size, seed, &out),
        Command::Train { config, steps, data, out } => train_cmd(config, steps, data, &out),
        Command::Infer { ckpt, input, out } => infer(&ckpt, &input, &out),
        Command::Eval { pred, gt, beta2, report } => eval(&pred, &gt, beta2, report),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
