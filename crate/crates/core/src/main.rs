use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use svastin::attack::Ablation;
use svastin::harness::{
    execute_ablation, execute_run, file_fingerprint, loss_trace_svg, resolve_seed, residual_grid, summary_text, video_dir,
    write_run, Method, RunConfig, RunInputs, RunManifest,
};
use svastin::video_io::{load_dataset, read_png_video, save_dataset, write_png_video};
use svastin::victim::{accuracy, frame_dataset, generate_dataset, train_victim, CnnConfig, SyntheticVideoSpec, ToyCnn, TrainConfig};

#[derive(Parser)]
#[command(name = "svastin", version, about = "Sparse targeted adversarial attacks on video classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motion dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with SyntheticVideoSpec fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the toy victim classifier on a generated dataset.
    TrainVictim {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with status 1 if final validation accuracy is below this.
        #[arg(long, default_value_t = 0.95)]
        gate: f64,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train the single-frame control model instead.
        #[arg(long)]
        framewise: bool,
    },
    /// Attack a suite of validation clips.
    Attack {
        #[arg(long, value_enum, default_value_t = Method::Svastin)]
        method: Method,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Re-run the configuration recorded in a previous manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Config override, `key=value` with dotted keys.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Paired ablation runs.
    Ablate {
        #[arg(long, value_enum)]
        which: AblationArg,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Residual grids and loss-trace plots for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        gain: f32,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AblationArg {
    Dims,
    Target,
    Lll,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Dims => Ablation::Dims,
            AblationArg::Target => Ablation::Target,
            AblationArg::Lll => Ablation::Lll,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { out, spec, seed, clips_per_class, noise } => gen_data(&out, spec.as_deref(), seed, clips_per_class, noise),
        Command::TrainVictim { data, out, epochs, lr, batch_size, seed, gate, resume, framewise } => {
            let cfg = TrainConfig { epochs, lr, batch_size, seed: resolve_seed(seed)?, stop_at_accuracy: None };
            train(&data, &out, &cfg, gate, resume.as_deref(), framewise)
        }
        Command::Attack { method, victim, suite, config, manifest, out, workers, overrides } => {
            attack(method, &victim, &suite, config.as_deref(), manifest.as_deref(), &out, workers, &overrides)
        }
        Command::Ablate { which, victim, suite, config, out, workers, overrides } => {
            ablate(which.into(), &victim, &suite, config.as_deref(), &out, workers, &overrides)
        }
        Command::Report { run, gain } => report(&run, gain),
    }
}

fn gen_data(out: &Path, spec: Option<&Path>, seed: Option<u64>, cpc: Option<usize>, noise: Option<f64>) -> anyhow::Result<()> {
    let mut s: SyntheticVideoSpec = match spec {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticVideoSpec::default(),
    };
    if seed.is_some() || std::env::var(svastin::harness::SEED_ENV).is_ok() {
        s.seed = resolve_seed(seed)?;
    }
    if let Some(c) = cpc {
        s.clips_per_class = c;
    }
    if let Some(n) = noise {
        s.noise = n;
    }
    let d = generate_dataset(&s)?;
    save_dataset(out, &d)?;
    println!("wrote {} train and {} val clips of {} classes to {}", d.train.len(), d.val.len(), d.num_classes(), out.display());
    println!("fingerprint {}", d.fingerprint());
    Ok(())
}

fn train(data: &Path, out: &Path, cfg: &TrainConfig, gate: f64, resume: Option<&Path>, framewise: bool) -> anyhow::Result<()> {
    let d = load_dataset(data)?;
    let (train, val) = if framewise { frame_dataset(&d)? } else { (d.train.clone(), d.val.clone()) };
    let mut model = match resume {
        Some(p) => ToyCnn::<f32>::load(p)?,
        None => {
            let base = if framewise { CnnConfig::framewise() } else { CnnConfig::default() };
            ToyCnn::new(CnnConfig {
                in_channels: d.spec.channels,
                num_classes: d.num_classes(),
                seed: cfg.seed,
                ..base
            })?
        }
    };
    let report = train_victim(&mut model, &train, &val, cfg)?;
    model.save(out)?;
    let acc = accuracy(&model, &val)?;
    println!("validation accuracy {acc:.4} after {} epochs", report.val_accuracy.len());
    if acc < gate {
        bail!("validation accuracy {acc:.4} is below the gate {gate}");
    }
    Ok(())
}

fn load_config(path: Option<&Path>, workers: Option<usize>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut all = overrides.to_vec();
    if let Some(w) = workers {
        all.push(format!("workers={w}"));
    }
    let mut cfg = RunConfig::load(path, &all)?;
    if std::env::var(svastin::harness::SEED_ENV).is_ok() && path.is_none() && !all.iter().any(|o| o.contains("seed")) {
        let s = resolve_seed(None)?;
        cfg.attack.seed = s;
        cfg.baseline.seed = s;
        cfg.suite.seed = s;
    }
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn attack(
    method: Method,
    victim: &Path,
    suite: &Path,
    config: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
    workers: Option<usize>,
    overrides: &[String],
) -> anyhow::Result<()> {
    let data = load_dataset(suite)?;
    let model = ToyCnn::<f32>::load(victim)?;
    let victim_fingerprint = file_fingerprint(victim)?;
    let (method, cfg) = match manifest {
        Some(p) => {
            let m = RunManifest::load(p)?;
            m.verify_inputs(&data.fingerprint(), &victim_fingerprint)?;
            let mut cfg = m.config.clone();
            if let Some(w) = workers {
                cfg.workers = w;
            }
            (m.method, cfg)
        }
        None => (method, load_config(config, workers, overrides)?),
    };
    let inputs = RunInputs { data: &data, victim: &model, victim_fingerprint };
    let (items, manifest, warnings) = execute_run(method, &cfg, &inputs)?;
    for w in warnings {
        log::warn!("{w}");
    }
    write_run(out, &items, &manifest)?;
    let a = &manifest.aggregate;
    println!(
        "{}: FR {}/{}  PSNR {:.2}  SSIM {:.4}  l2,1 {:.4}  epochs {:.2}",
        method.label(),
        a.fr_numerator,
        a.fr_denominator,
        a.psnr,
        a.ssim,
        a.l21,
        a.mean_epochs
    );
    println!("results in {}", out.display());
    Ok(())
}

fn ablate(
    which: Ablation,
    victim: &Path,
    suite: &Path,
    config: Option<&Path>,
    out: &Path,
    workers: Option<usize>,
    overrides: &[String],
) -> anyhow::Result<()> {
    let data = load_dataset(suite)?;
    let model = ToyCnn::<f32>::load(victim)?;
    let cfg = load_config(config, workers, overrides)?;
    let (csv, summary, _) = execute_ablation(which, &cfg, &data, &model)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("ablation.csv"), &csv).context("writing ablation.csv")?;
    fs::write(out.join("summary.txt"), &summary).context("writing summary.txt")?;
    print!("{csv}");
    Ok(())
}

fn report(run: &Path, gain: f32) -> anyhow::Result<()> {
    let manifest = RunManifest::load(&run.join("manifest.json"))?;
    let plots = run.join("report");
    fs::create_dir_all(&plots).with_context(|| format!("creating {}", plots.display()))?;
    for rec in &manifest.records {
        let dir = video_dir(run, rec.index);
        let x_a = read_png_video(&dir.join("x_a"))?;
        let x_c = read_png_video(&dir.join("x_c"))?;
        write_png_video(&plots.join(format!("residual_{:03}", rec.index)), &residual_grid(&x_a, &x_c, gain)?)?;
        let title = format!("video {} ({} -> {})", rec.index, rec.source_label, rec.target);
        fs::write(plots.join(format!("loss_{:03}.svg", rec.index)), loss_trace_svg(&rec.result.loss_trace, &title))
            .context("writing loss plot")?;
    }
    let text = summary_text(&format!("run {}", manifest.run_id), &[(manifest.method.label().to_string(), manifest.aggregate.clone())]);
    print!("{text}");
    println!("\nplots in {}", plots.display());
    Ok(())
}
