use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sounderfeit::audio;
use sounderfeit::dataset::{self, CycleDataset, ParamRange, BOWED_PARAM_NAMES};
use sounderfeit::experiments::{
    self, LossReduction, SuiteConfig, SuiteReport, TrainConfig, DEFAULT_TRAJECTORY_STEPS,
    LATENT_SAMPLE,
};
use sounderfeit::model::{Autoencoder, DecoderModel, ExperimentCondition};
use sounderfeit::plot;
use sounderfeit::synth::{self, ParamScript};
use sounderfeit::waveguide::{self, BowedParams, BOWED_SAMPLE_RATE, CONTROL_MAX};
use sounderfeit_service::engine::{AudioDevice, Engine, EngineConfig};
use sounderfeit_service::server::{Server, ServerConfig, DEFAULT_FRAME_RATE};

#[derive(Parser)]
#[command(name = "sounderfeit", version, about = "Neural wavetable synthesis from a bowed-string model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    /// Steady-state grid over pressure x position.
    Bowed1,
    /// Randomly varying parameters.
    Bowed2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Recon,
    Latent,
    Estimate,
}

#[derive(Subcommand)]
enum Command {
    /// Build a cycle dataset from the waveguide.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        /// Grid spacing in control units (bowed1).
        #[arg(long, default_value_t = 1)]
        grid_step: usize,
        /// Number of records (bowed2).
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep only position < 64.
        #[arg(long)]
        half: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one condition; writes a checkpoint and its loss history.
    Train {
        #[arg(long)]
        condition: ExperimentCondition,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint path (default `<condition>-s<seed>.sfc`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// History path (default: checkpoint path with `.sfh`).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Also export the decoder alone.
        #[arg(long)]
        decoder: Option<PathBuf>,
        /// Write an SVG of the loss curves.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Evaluate the full suite or one metric of one checkpoint.
    Eval {
        /// Train and evaluate every condition plus the estimation cells.
        #[arg(long, requires_all = ["bowed1", "bowed2"], conflicts_with_all = ["checkpoint", "metric"])]
        suite: bool,
        #[arg(long)]
        bowed1: Option<PathBuf>,
        #[arg(long)]
        bowed2: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = DEFAULT_TRAJECTORY_STEPS)]
        trajectory_steps: usize,
        /// Suite report path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for suite figures.
        #[arg(long)]
        plots: Option<PathBuf>,
        #[arg(long, requires_all = ["dataset", "metric"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        /// Estimation over the position < 64 trajectory.
        #[arg(long)]
        half: bool,
    },
    /// Render a parameter script offline.
    Synth {
        /// Decoder export or full checkpoint.
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        script: PathBuf,
        /// `.wav`, or anything else for headerless f32.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = BOWED_SAMPLE_RATE as u32)]
        sample_rate: u32,
    },
    /// Run the live engine and the WebSocket endpoint.
    Serve {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value_t = DEFAULT_FRAME_RATE)]
        frame_rate: f64,
    },
    /// Build a dataset from periodic recordings (`--take file.wav:label`).
    Import {
        #[arg(long = "take", required = true, value_parser = parse_take)]
        takes: Vec<(PathBuf, f64)>,
        /// Fundamental of every take, Hz.
        #[arg(long)]
        f0: f64,
        #[arg(long, default_value_t = 0.0)]
        label_lo: f64,
        #[arg(long, default_value_t = 1.0)]
        label_hi: f64,
        #[arg(long, default_value = "imported")]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump raw waveguide audio at fixed parameters.
    Waveguide {
        #[arg(long, default_value_t = 64.0)]
        pressure: f64,
        #[arg(long, default_value_t = 64.0)]
        position: f64,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    batches: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    /// `mean` weighs per-element data and parameter errors; `sum` uses
    /// plain sums.
    #[arg(long, default_value = "mean", value_parser = parse_reduction)]
    reduction: LossReduction,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            n_batches: self.batches,
            learning_rate: self.lr,
            lambda: self.lambda,
            reduction: self.reduction,
            hidden: self.hidden,
            seed: self.seed,
        }
    }
}

fn parse_reduction(s: &str) -> std::result::Result<LossReduction, String> {
    LossReduction::parse(s).ok_or_else(|| format!("expected `mean` or `sum`, got `{s}`"))
}

fn parse_take(s: &str) -> std::result::Result<(PathBuf, f64), String> {
    let (path, label) = s.rsplit_once(':').ok_or("expected PATH:LABEL")?;
    let label = label.parse().map_err(|e| format!("label `{label}`: {e}"))?;
    Ok((PathBuf::from(path), label))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            kind,
            grid_step,
            count,
            seed,
            half,
            out,
        } => {
            let ds = match kind {
                DataKind::Bowed1 => dataset::build_bowed1(grid_step)?,
                DataKind::Bowed2 => dataset::build_bowed2(count, seed)?,
            };
            let ds = if half { dataset::filter_half(&ds)? } else { ds };
            ds.save(&out)?;
            println!("{}: {} records of length {}", out.display(), ds.len(), ds.data_len());
        }
        Command::Train {
            condition,
            dataset,
            train,
            out,
            history,
            decoder,
            plot: plot_path,
        } => {
            let ds = load_dataset(&dataset)?;
            let cfg = train.config();
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{condition}-s{}.sfc", cfg.seed)));
            let history = history.unwrap_or_else(|| out.with_extension("sfh"));
            let (model, hist) = experiments::train(condition, &ds, &cfg)?;
            model.save(&out)?;
            hist.save(&history)?;
            if let Some(p) = decoder {
                model.decoder_only().save(&p)?;
            }
            if let Some(p) = plot_path {
                plot::loss_curves(&p, &condition.to_string(), &hist)?;
            }
            println!(
                "{condition}: E_loss {:.5} -> {:.5}; wrote {} and {}",
                hist.initial_e_loss(),
                hist.final_e_loss(),
                out.display(),
                history.display()
            );
        }
        Command::Eval {
            suite,
            bowed1,
            bowed2,
            train,
            trajectory_steps,
            out,
            plots,
            checkpoint,
            dataset,
            metric,
            half,
        } => {
            if suite {
                let (Some(b1), Some(b2)) = (bowed1, bowed2) else {
                    bail!("--suite needs --bowed1 and --bowed2");
                };
                eval_suite(&b1, &b2, &train, trajectory_steps, out, plots)?;
            } else {
                let (Some(ck), Some(ds), Some(metric)) = (checkpoint, dataset, metric) else {
                    bail!("give --suite, or --checkpoint with --dataset and --metric");
                };
                eval_single(&ck, &ds, metric, half, trajectory_steps, train.seed)?;
            }
        }
        Command::Synth {
            decoder,
            script,
            out,
            sample_rate,
        } => {
            let model = load_decoder(&decoder)?;
            let text = std::fs::read_to_string(&script).with_context(|| format!("reading {}", script.display()))?;
            let script = ParamScript::parse(&text)?;
            let samples = synth::render_script(&model, &script, sample_rate as f64)?;
            write_audio(&out, sample_rate, &samples)?;
            println!(
                "{}: {} samples ({:.3} s)",
                out.display(),
                samples.len(),
                samples.len() as f64 / sample_rate as f64
            );
        }
        Command::Serve {
            decoder,
            host,
            port,
            frame_rate,
        } => serve(&decoder, &host, port, frame_rate)?,
        Command::Import {
            takes,
            f0,
            label_lo,
            label_hi,
            source,
            out,
        } => {
            if !(label_hi > label_lo) {
                bail!("--label-hi must exceed --label-lo");
            }
            let mut rate = None;
            let mut loaded = Vec::new();
            for (path, label) in &takes {
                let a = audio::read_wav(path).with_context(|| format!("reading {}", path.display()))?;
                if *rate.get_or_insert(a.sample_rate) != a.sample_rate {
                    bail!("{}: sample rate {} differs from the first take", path.display(), a.sample_rate);
                }
                loaded.push((a.samples, *label));
            }
            let sr = rate.expect("at least one take") as f64;
            let ds = dataset::build_imported(&source, &loaded, sr, f0, ParamRange::new(label_lo, label_hi))?;
            ds.save(&out)?;
            println!("{}: {} records of length {}", out.display(), ds.len(), ds.data_len());
        }
        Command::Waveguide {
            pressure,
            position,
            seconds,
            out,
        } => {
            let n = (seconds * BOWED_SAMPLE_RATE).round() as usize;
            let samples = waveguide::run(&BowedParams::bowed(pressure, position), n, BOWED_SAMPLE_RATE)?;
            write_audio(&out, BOWED_SAMPLE_RATE as u32, &samples)?;
        }
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<CycleDataset> {
    CycleDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_decoder(path: &Path) -> Result<DecoderModel> {
    DecoderModel::load_any(path).with_context(|| format!("loading decoder {}", path.display()))
}

fn write_audio(path: &Path, rate: u32, samples: &[f64]) -> Result<()> {
    let wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if wav {
        audio::write_wav(path, rate, samples)?;
    } else {
        audio::write_raw_f32(path, samples)?;
    }
    Ok(())
}

fn eval_suite(
    b1: &Path,
    b2: &Path,
    train: &TrainArgs,
    trajectory_steps: usize,
    out: Option<PathBuf>,
    plots: Option<PathBuf>,
) -> Result<()> {
    let ds1 = load_dataset(b1)?;
    let ds2 = load_dataset(b2)?;
    let cfg = SuiteConfig {
        train: train.config(),
        trajectory_steps,
        ..SuiteConfig::default()
    };
    let report = experiments::run_condition_suite(&ds1, &ds2, &cfg)?;
    print!("{}", report.table());
    if let Some(out) = out {
        report.save(&out)?;
    }
    if let Some(dir) = plots {
        write_suite_plots(&report, &dir)?;
    }
    Ok(())
}

fn write_suite_plots(report: &SuiteReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in &report.cells {
        let Ok(m) = &c.outcome else { continue };
        let stem = c.label.replace('/', "_");
        plot::loss_curves(&dir.join(format!("{stem}-loss.svg")), &c.label, &m.history)?;
        if let Some(l) = &m.latent {
            plot::latent_scatter(&dir.join(format!("{stem}-latent.svg")), &c.label, &l.samples)?;
        }
        if let Some(e) = &m.estimation {
            plot::estimation_overlay(&dir.join(format!("{stem}-estimate.svg")), &c.label, e, &BOWED_PARAM_NAMES)?;
        }
    }
    Ok(())
}

fn eval_single(ck: &Path, ds: &Path, metric: Metric, half: bool, steps: usize, seed: u64) -> Result<()> {
    let model = Autoencoder::load(ck).with_context(|| format!("loading checkpoint {}", ck.display()))?;
    let ds = load_dataset(ds)?;
    match metric {
        Metric::Recon => println!("recon_mse {:.6}", experiments::eval_reconstruction(&model, &ds)?),
        Metric::Latent => {
            let l = experiments::latent_stats(&model, &ds, LATENT_SAMPLE, seed)?;
            println!("ks {:?}", l.ks);
            for (i, j, r) in &l.correlations {
                println!("corr_{i}_{j} {r:.4}");
            }
            println!("occupancy {:.4}", l.occupancy);
            println!("within_unit {:.4}", l.within_unit);
        }
        Metric::Estimate => {
            let pmax = if half { CONTROL_MAX / 2.0 - 1.0 } else { CONTROL_MAX };
            let traj = experiments::make_eval_trajectory_range(steps, pmax)?;
            let r = experiments::eval_param_estimation(&model, &traj)?;
            println!("rms {:.4}", r.rms);
            println!("rms_per_param {:?}", r.per_param_rms);
            println!("skipped {:.4}", r.skipped_fraction);
        }
    }
    Ok(())
}

fn serve(decoder: &Path, host: &str, port: u16, frame_rate: f64) -> Result<()> {
    let model = load_decoder(decoder)?;
    let device = AudioDevice::from_env()?;
    let addr = format!("{host}:{port}")
        .parse()
        .with_context(|| format!("bad listen address {host}:{port}"))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let engine = Arc::new(Engine::start(
            model,
            EngineConfig {
                device,
                ..EngineConfig::default()
            },
        )?);
        let server = Server::bind(engine, ServerConfig { addr, frame_rate }).await?;
        eprintln!("listening on ws://{}", server.local_addr());
        tokio::select! {
            _ = server.run() => {}
            _ = tokio::signal::ctrl_c() => {}
        }
        Ok::<_, anyhow::Error>(())
    })
}
