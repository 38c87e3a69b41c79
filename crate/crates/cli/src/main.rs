use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use mtrack::predictor::PredictorConfig;
use mtrack_cli::commands::{self, DetSource, Study};
use mtrack_cli::config::ConfigArgs;

/// Multi-object tracking with a learned motion predictor.
///
/// Log verbosity follows the MTRACK_LOG environment variable
/// (error, warn, info, debug; default info).
#[derive(Parser)]
#[command(name = "mtrack", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic sequences (gt and noisy detections).
    Synth {
        /// TOML scene spec; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train the motion predictor on gt tracks of a sequence directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory: model.ckpt, train_log.jsonl, run.toml.
        #[arg(long)]
        out: PathBuf,
        /// Also save a checkpoint every N steps (0 = off).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Track every sequence and write MOTChallenge result files.
    Track {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained model, required with --predictor learned.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feed the tracker detections or ground-truth boxes.
        #[arg(long, value_enum, default_value = "det")]
        detections: DetSource,
        /// Write per-frame JSON-lines diagnostics next to each result.
        #[arg(long)]
        diagnostics: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score result files against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = mtrack::metrics::DEFAULT_IOU_MIN)]
        iou_min: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Number of seeds, starting at --seed (default 0).
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and compare model variants or motion models.
    Experiment {
        #[arg(value_enum)]
        study: Study,
        /// Training sequences.
        #[arg(long)]
        data: PathBuf,
        /// Held-out sequences with gt and detections.
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use this model instead of training one (motion study only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { spec, out, seed, scenes } => {
            let mut s = commands::load_synth_spec(spec.as_deref())?;
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = scenes {
                s.scenes = v;
            }
            for d in commands::synth(&s, &out)? {
                println!("{}", d.display());
            }
        }
        Cmd::Train { data, out, checkpoint_every, cfg } => {
            let cfg = cfg.resolve()?;
            commands::train_cmd(&cfg, &data, &out, checkpoint_every)?;
            println!("{}", out.join(commands::MODEL_FILE).display());
        }
        Cmd::Track { data, out, checkpoint, detections, diagnostics, cfg } => {
            let cfg = cfg.resolve()?;
            for f in commands::track_cmd(&cfg, &data, &out, checkpoint.as_deref(), detections, diagnostics)? {
                println!("{}", f.display());
            }
        }
        Cmd::Eval { gt, hyp, iou_min, json } => {
            let report = commands::eval_cmd(&gt, &hyp, iou_min)?;
            print!("{}", report.table());
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Cmd::Gradcheck { d_model, layers, heads, num_seeds, tol, cfg } => {
            let run_cfg = cfg.resolve()?;
            let model = PredictorConfig { d_model, layers, heads, ..run_cfg.model.clone() };
            let first = cfg.seed.unwrap_or(0);
            let start = std::time::Instant::now();
            let reports = commands::gradcheck_cmd(model, (first..first + num_seeds).collect(), tol, &run_cfg)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "seed {} checked {} failures {} max_rel_err {:.3e} at {}",
                    r.seed, r.checked, r.failures, r.max_rel_err, r.worst_param
                );
                failed += r.failures;
            }
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
            if failed > 0 {
                bail!(mtrack::Error::Numerical(format!("{failed} gradient entries exceed rel. tolerance {tol}")));
            }
        }
        Cmd::Experiment { study, data, eval_data, out, checkpoint, cfg } => {
            let cfg = cfg.resolve()?;
            let r = commands::experiment_cmd(study, &cfg, &data, &eval_data, &out, checkpoint.as_deref())?;
            print!("{}", r.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MTRACK_LOG", "info")).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", mtrack_cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
