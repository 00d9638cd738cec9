use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lapdeconv::deconv::{deconv_cdf, deconv_density, nonnegative, DeconvConfig};
use lapdeconv::dp::{default_grid, fit_bayes, DpPrior, McmcConfig};
use lapdeconv::harness::{run, ExperimentPlan};
use lapdeconv::model::{read_observations, sample};
use lapdeconv::npmle::{fit, SolverConfig, SolverOverrides};
use lapdeconv::{Error, GroundTruthSpec};

/// Deconvolution of Laplace location mixtures.
#[derive(Parser)]
#[command(name = "lapdeconv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a sample X = Y + Z from a ground-truth spec.
    Sample {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        n: usize,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the latent Y and noise Z columns.
        #[arg(long)]
        latent: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nonparametric maximum likelihood estimate of the mixing law.
    FitNpmle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dirichlet-process posterior mean density and mixing CDF.
    FitBayes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        mcmc: Option<PathBuf>,
        /// Spacing of the output grid.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value = "bayes-out")]
        out_dir: PathBuf,
    },
    /// Kernel deconvolution density and CDF of the mixing law.
    Deconv {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to n^(-1/5).
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicated rate study; exits nonzero when too many cells fail.
    Rates {
        #[arg(long)]
        plan: PathBuf,
        /// Overrides `output_dir` in the plan.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_data(path: &Path) -> Result<Vec<f64>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_observations(f)?)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Sample {
            truth,
            n,
            seed,
            latent,
            out,
        } => {
            let mut spec = GroundTruthSpec::from_json(&read_to_string(&truth)?)?;
            if let Some(s) = seed {
                spec = spec.with_seed(s);
            }
            let mut s = sample(&spec, n)?;
            if !latent {
                s.y = None;
                s.z = None;
            }
            s.write_csv(output(out.as_deref())?)?;
        }
        Command::FitNpmle { data, config, out } => {
            let x = read_data(&data)?;
            let overrides: SolverOverrides = match config {
                Some(p) => serde_json::from_str(&read_to_string(&p)?)?,
                None => SolverOverrides::default(),
            };
            let r = fit(&x, &SolverConfig::for_data(&x).with_overrides(&overrides))?;
            let mut w = output(out.as_deref())?;
            writeln!(w, "{}", r.to_json()?)?;
            w.flush()?;
            if !r.converged {
                eprintln!("warning: certificate not met (gradient sup {:.3e})", r.gradient_sup);
            }
        }
        Command::FitBayes {
            data,
            prior,
            mcmc,
            step,
            out_dir,
        } => {
            let x = read_data(&data)?;
            let prior: DpPrior = match prior {
                Some(p) => serde_json::from_str(&read_to_string(&p)?)?,
                None => DpPrior::default(),
            };
            let cfg: McmcConfig = match mcmc {
                Some(p) => serde_json::from_str(&read_to_string(&p)?)?,
                None => McmcConfig::default(),
            };
            let grid = default_grid(&x, &prior, step)?;
            let (est, trace) = fit_bayes(&x, &prior, &cfg, grid)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("estimates.json"), est.to_json()? + "\n")?;
            est.write_grid_csv(BufWriter::new(File::create(out_dir.join("grid.csv"))?))?;
            trace.write_csv(BufWriter::new(File::create(out_dir.join("trace.csv"))?))?;
        }
        Command::Deconv { data, bandwidth, out } => {
            let x = read_data(&data)?;
            let cfg = match bandwidth {
                Some(h) => DeconvConfig::with_bandwidth(&x, h)?,
                None => DeconvConfig::for_data(&x)?,
            };
            let raw = deconv_density(&x, &cfg)?;
            let clipped = nonnegative(&raw)?;
            let cdf = deconv_cdf(&x, &cfg)?;
            let mut w = output(out.as_deref())?;
            writeln!(w, "t,density,density_nonneg,cdf")?;
            for k in 0..raw.values.len() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    raw.grid.point(k),
                    raw.values[k],
                    clipped.values[k],
                    cdf.values[k]
                )?;
            }
            w.flush()?;
        }
        Command::Rates { plan, out_dir } => {
            let mut plan = ExperimentPlan::from_json(&read_to_string(&plan)?)?;
            if out_dir.is_some() {
                plan.output_dir = out_dir;
            }
            if plan.output_dir.is_none() {
                plan.output_dir = Some(PathBuf::from("rates-out"));
            }
            let table = run(&plan)?;
            for s in &table.slopes {
                println!(
                    "{} {}: slope {:.4} (se {:.4}, r2 {:.3}, p {:.3e})",
                    s.estimator, s.metric, s.slope, s.stderr, s.r2, s.p_value
                );
            }
            if let Some(s) = &table.merging_slope {
                println!("merging: slope {:.4} (se {:.4})", s.slope, s.stderr);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::TooManyInvalidCells { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
