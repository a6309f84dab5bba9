//! The `srct` command line.
//!
//! Exit codes: 0 on success, 1 on a configuration or runtime failure, 2 on a
//! usage error, 3 when a run completed but some trials failed or some
//! responses were rejected.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::pipeline::{self, RunOptions};
use crate::population::{self, DemographicSpec};
use crate::{fixtures, Error};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INVALID: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "srct", version, about = "Persona-conditioned vignette experiments on language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Study1,
    Study2,
    Study3,
}

impl Study {
    fn fixture(self) -> fixtures::Fixture {
        match self {
            Study::Study1 => fixtures::STUDY1,
            Study::Study2 => fixtures::STUDY2,
            Study::Study3 => fixtures::STUDY3,
        }
    }
}

/// Flags shared by the stages that call providers.
#[derive(Debug, Clone, clap::Args)]
pub struct DispatchArgs {
    /// Use the in-process planted provider. No network access.
    #[arg(long)]
    pub mock: bool,
    /// Provider table (TOML, `[[providers]]` entries).
    #[arg(long, conflicts_with = "mock")]
    pub providers: Option<PathBuf>,
    /// Upper bound on trials in flight across all providers.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Sampling temperature for every provider (default 1.0).
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic population.
    Popgen {
        /// Number of personas.
        #[arg(short, long)]
        n: usize,
        /// Seed; the profile's own seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Demographic profile TOML; the bundled US adult profile by default.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "population.jsonl")]
        out: PathBuf,
    },
    /// Sample or load the population and write trial plans.
    Plan {
        /// Spec file, directory or bundled fixture name.
        spec: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        population: Option<PathBuf>,
        #[arg(long)]
        baselines: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan and dispatch every trial.
    Run {
        #[arg(required_unless_present = "from_manifest")]
        spec: Option<String>,
        #[arg(long, required_unless_present = "from_manifest")]
        seed: Option<u64>,
        /// Rerun a recorded run with its seeds and settings.
        #[arg(long, conflicts_with_all = ["spec", "seed"])]
        from_manifest: Option<PathBuf>,
        #[command(flatten)]
        dispatch: DispatchArgs,
        #[arg(long)]
        population: Option<PathBuf>,
        #[arg(long)]
        baselines: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract structured answers from a run directory's transcripts.
    Extract { run_dir: PathBuf },
    /// Extract, then compute effects, alignment and equivalence.
    Analyze {
        run_dir: PathBuf,
        #[arg(long)]
        baselines: Option<PathBuf>,
        /// Replaces the spec's bootstrap replicate count.
        #[arg(long)]
        bootstrap_reps: Option<usize>,
        /// Where tables and figure data go; the run directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render report.md from a finished analysis.
    Report { run_dir: PathBuf },
    /// Run a bundled study end to end.
    Replicate {
        study: Study,
        /// Seed; the study's own seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        dispatch: DispatchArgs,
        #[arg(long)]
        bootstrap_reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn default_out(name: &str, seed: u64) -> PathBuf {
    Path::new("runs").join(format!("{name}-seed{seed}"))
}

fn options(seed: u64, d: &DispatchArgs) -> Result<RunOptions, Failure> {
    if !d.mock && d.providers.is_none() {
        return Err(Failure::Usage("either --mock or --providers is required".into()));
    }
    if d.parallelism == Some(0) {
        return Err(Failure::Usage("--parallelism must be at least 1".into()));
    }
    Ok(RunOptions {
        seed,
        mock: d.mock,
        providers: d.providers.clone(),
        parallelism: d.parallelism,
        temperature: d.temperature,
        ..RunOptions::default()
    })
}

fn status(clean: bool) -> u8 {
    if clean {
        EXIT_OK
    } else {
        EXIT_INVALID
    }
}

fn execute(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Popgen { n, seed, spec, out } => {
            if n == 0 {
                return Err(Failure::Usage("-n must be at least 1".into()));
            }
            let mut demo = match spec {
                Some(p) => DemographicSpec::load(&p).map_err(Error::from)?,
                None => DemographicSpec::us_adults(),
            };
            if let Some(s) = seed {
                demo = demo.with_seed(s);
            }
            let personas = population::sample_population(&demo, n).map_err(Error::from)?;
            population::save_population(&out, &personas).map_err(Error::from)?;
            println!("wrote {} personas to {}", personas.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Plan {
            spec,
            seed,
            population,
            baselines,
            out,
        } => {
            let loaded = pipeline::resolve_spec(&spec)?;
            let out = out.unwrap_or_else(|| default_out(&loaded.source.spec.name, seed));
            let opts = RunOptions {
                seed,
                population,
                baselines,
                ..RunOptions::default()
            };
            let manifest = pipeline::plan(&loaded, &opts, &out)?;
            println!("planned {} trials in {}", manifest.counts.plans, out.display());
            Ok(EXIT_OK)
        }
        Command::Run {
            from_manifest: Some(manifest),
            dispatch,
            out,
            ..
        } => {
            let out = out.ok_or_else(|| Failure::Usage("--from-manifest needs --out".into()))?;
            let summary = pipeline::reproduce(&manifest, &out, dispatch.providers)?;
            println!(
                "reproduced {} trials ({} valid) in {}",
                summary.manifest.counts.transcripts,
                summary.manifest.counts.valid,
                out.display()
            );
            Ok(status(summary.manifest.counts.valid == summary.manifest.counts.transcripts))
        }
        Command::Run {
            spec,
            seed,
            dispatch,
            population,
            baselines,
            out,
            ..
        } => {
            let (Some(spec), Some(seed)) = (spec, seed) else {
                return Err(Failure::Usage("run needs a spec and --seed".into()));
            };
            let mut opts = options(seed, &dispatch)?;
            opts.population = population;
            opts.baselines = baselines;
            let loaded = pipeline::resolve_spec(&spec)?;
            let out = out.unwrap_or_else(|| default_out(&loaded.source.spec.name, seed));
            pipeline::plan(&loaded, &opts, &out)?;
            let summary = pipeline::dispatch(&out, &opts)?;
            println!("dispatched {} trials to {}: {:?}", summary.transcripts, out.display(), summary.outcomes);
            Ok(status(summary.all_ok()))
        }
        Command::Extract { run_dir } => {
            let s = pipeline::extract(&run_dir)?;
            println!("{} responses, {} valid, rejected {:?}", s.responses, s.valid, s.rejected);
            Ok(status(s.valid == s.responses))
        }
        Command::Analyze {
            run_dir,
            baselines,
            bootstrap_reps,
            out,
        } => {
            let opts = RunOptions {
                baselines,
                bootstrap_reps,
                ..RunOptions::default()
            };
            let a = pipeline::analyze(&run_dir, out.as_deref(), &opts)?;
            println!(
                "{} effect rows, {} alignment rows, {} equivalence rows, {} figures",
                a.inputs.effects.len(),
                a.inputs.alignment.len(),
                a.inputs.equivalence.len(),
                a.figures.len()
            );
            Ok(EXIT_OK)
        }
        Command::Report { run_dir } => {
            let path = pipeline::report(&run_dir)?;
            println!("wrote {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Replicate {
            study,
            seed,
            dispatch,
            bootstrap_reps,
            out,
        } => {
            let fixture = study.fixture();
            let loaded = pipeline::resolve_spec(&format!("fixtures/{}", fixture.name)).or_else(|_| {
                Ok::<_, Error>(pipeline::LoadedSpec {
                    source: fixture.source()?,
                    origin: format!("fixtures/{}", fixture.name),
                    baseline: fixture.baseline.map(|b| b.as_bytes().to_vec()),
                })
            })?;
            let seed = seed.unwrap_or(loaded.source.spec.seed);
            let mut opts = options(seed, &dispatch)?;
            opts.bootstrap_reps = bootstrap_reps;
            let out = out.unwrap_or_else(|| default_out(fixture.name, seed));
            let summary = pipeline::replicate(&loaded, &opts, &out)?;
            let c = &summary.manifest.counts;
            println!(
                "{}: {} plans, {} transcripts, {} valid; results in {}",
                fixture.name,
                c.plans,
                c.transcripts,
                c.valid,
                out.display()
            );
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os()))
}
