//! `mesocast`: run the predictor-corrector pipeline stage by stage or end to end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mesocast_core::config::RunConfig;
use mesocast_core::pipeline::{Pipeline, RunDir, StageOutcome};
use mesocast_core::verify::VerificationReport;
use mesocast_core::Result;

#[derive(Parser)]
#[command(name = "mesocast", version, about = "Predictor-corrector forecasting of gridded fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test sequences.
    Synth(Common),
    /// Train the deterministic Swin-Unet predictor.
    TrainPredictor(Common),
    /// Train the diffusion corrector.
    TrainCorrector(Common),
    /// Estimate the cutoff wavenumber and injected noise level on the validation split.
    Calibrate(Common),
    /// Produce corrected ensembles for the test cases.
    Forecast(Common),
    /// Score the forecasts and write the report and plots.
    Verify(Common),
    /// Run every stage in order.
    Demo(Common),
}

#[derive(Args)]
struct Common {
    /// Run directory.
    #[arg(long, visible_alias = "out", default_value = "runs/default")]
    run: PathBuf,
    /// JSON run configuration; defaults to the run directory's config.json, then the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every component seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long)]
    force: bool,
    /// Restrict numerical kernels to one thread for bit-reproducible results.
    #[arg(long)]
    single_threaded: bool,
}

impl Common {
    fn pipeline(&self) -> Result<Pipeline> {
        let run = RunDir::new(&self.run);
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => Pipeline::stored_config(&run)?.unwrap_or_else(RunConfig::desk),
        };
        if let Some(seed) = self.seed {
            cfg.apply_seed(seed);
        }
        cfg.single_threaded |= self.single_threaded;
        let cfg = cfg.with_env_device();
        if cfg.single_threaded {
            // read by the tensor backend when it sizes its thread pool
            std::env::set_var("RAYON_NUM_THREADS", "1");
        }
        Pipeline::open(run, cfg, self.force)
    }
}

fn announce(stage: &str, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => eprintln!("{stage}: done"),
        StageOutcome::Skipped => eprintln!("{stage}: up to date"),
    }
}

fn summarize(report: &VerificationReport) {
    println!("sigma = {:.4}", report.sigma);
    for v in &report.calibration.per_variable {
        println!("  {:<10} k* = {:>3}  sigma = {:.4}", v.name, v.k_star, v.sigma);
    }
    println!("high-k |log PSD ratio| (predictor -> corrected member):");
    for s in &report.spectral {
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        println!(
            "  {:<10} {} -> {}",
            s.variable,
            fmt(s.high_k_predictor_error),
            fmt(s.high_k_corrected_error)
        );
    }
    println!("RMSE (predictor / ensemble mean / mean member):");
    for r in &report.rmse {
        println!(
            "  {:<10} {:.4} / {:.4} / {:.4} {}",
            r.variable, r.predictor, r.ensemble_mean, r.member_mean, r.units
        );
    }
    println!("FSS {} (predictor / PMM):", report.fss_variable);
    for e in &report.fss {
        let label = e.percentile.map_or(format!("{:.3}", e.threshold), |p| format!("p{p}"));
        println!("  {label:<6} n = {:>2}  {:.3} / {:.3}", e.scale, e.predictor, e.pmm);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => announce("synth", c.pipeline()?.synth()?),
        Command::TrainPredictor(c) => announce("train-predictor", c.pipeline()?.train_predictor()?),
        Command::TrainCorrector(c) => announce("train-corrector", c.pipeline()?.train_corrector()?),
        Command::Calibrate(c) => {
            let p = c.pipeline()?;
            announce("calibrate", p.calibrate()?);
            let calib = p.calibration()?;
            println!("sigma = {:.4}", calib.sigma_global);
        }
        Command::Forecast(c) => announce("forecast", c.pipeline()?.forecast()?),
        Command::Verify(c) => {
            let p = c.pipeline()?;
            announce("verify", p.verify()?);
            summarize(&p.report()?);
        }
        Command::Demo(c) => {
            let p = c.pipeline()?;
            p.demo()?;
            summarize(&p.report()?);
            println!("report: {}", p.run.report().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
