//! `kvpersona`: offline evidence construction, cache prefill, querying and
//! benchmarking over a repository directory.

mod commands;
mod error;
mod layout;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvpersona::harness::Pipeline;

use crate::commands::{BenchArgs, MapSource};
use crate::error::CliError;
use crate::settings::{Overrides, PrecisionFlag, Settings};

#[derive(Parser, Debug)]
#[command(name = "kvpersona", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repository directory.
    #[arg(long, global = true, env = "KVPERSONA_REPO")]
    repo: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cache storage precision.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionFlag>,
    #[arg(long, global = true)]
    k_attr: Option<usize>,
    #[arg(long, global = true)]
    k_patch: Option<usize>,
    /// Patch grid side.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Fusion exponent on the relevance map.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Minimum subject coverage of a cell.
    #[arg(long, global = true)]
    min_coverage: Option<f64>,
    /// Minimum subject-mask area fraction of an image.
    #[arg(long, global = true)]
    min_mask_area: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize `<dir>/<concept>/response.txt` into the repository metadata.
    Validate { dir: PathBuf },
    /// Mine hard patches for one concept.
    Mine {
        /// Directory of `<image>/{mask,difficulty,relevance,...}.jmap`.
        dir: Option<PathBuf>,
        /// Concept id; defaults to the directory name.
        #[arg(long)]
        concept: Option<String>,
        /// Mine this many seeded synthetic images instead of a directory.
        #[arg(long, conflicts_with = "dir")]
        synthetic_images: Option<usize>,
        #[arg(long, default_value_t = 48)]
        synthetic_size: usize,
    },
    /// Embed attributes and check patch pools.
    Index,
    /// Build concept caches; up-to-date caches are skipped.
    Prefill { concepts: Vec<String> },
    /// Answer queries in one session.
    Query {
        #[arg(long, default_value = "cli")]
        session: String,
        #[arg(required = true)]
        queries: Vec<String>,
    },
    /// Compare cached-prefix sessions with prompt concatenation.
    Bench {
        /// Queries per session, comma separated.
        #[arg(long, value_delimiter = ',')]
        q: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        pipelines: Option<Vec<Pipeline>>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        concurrency: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let overrides = Overrides {
        repo: g.repo,
        seed: g.seed,
        precision: g.precision,
        k_attr: g.k_attr,
        k_patch: g.k_patch,
        grid: g.grid,
        gamma: g.gamma,
        min_coverage: g.min_coverage,
        min_mask_area: g.min_mask_area,
    };
    let settings = Settings::resolve(g.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Validate { dir } => commands::validate(&settings, &dir),
        Command::Mine {
            dir,
            concept,
            synthetic_images,
            synthetic_size,
        } => {
            let (concept, source) = match (dir.as_deref(), synthetic_images) {
                (_, Some(images)) => {
                    let concept = concept.ok_or_else(|| {
                        CliError::Usage("--synthetic-images needs --concept".into())
                    })?;
                    let source = MapSource::Synthetic {
                        images,
                        size: synthetic_size,
                    };
                    (concept, source)
                }
                (Some(dir), None) => {
                    let concept = match concept {
                        Some(c) => c,
                        None => dir
                            .file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .ok_or_else(|| CliError::Usage("cannot infer concept id".into()))?,
                    };
                    (concept, MapSource::Dir(dir))
                }
                (None, None) => {
                    return Err(CliError::Usage(
                        "mine needs a map directory or --synthetic-images".into(),
                    ))
                }
            };
            commands::mine(&settings, &concept, source)
        }
        Command::Index => commands::index(&settings),
        Command::Prefill { concepts } => commands::prefill(&settings, &concepts),
        Command::Query { session, queries } => commands::query(&settings, &session, &queries),
        Command::Bench {
            q,
            pipelines,
            repetitions,
            concurrency,
            max_new_tokens,
        } => commands::bench(
            &settings,
            BenchArgs {
                q_values: q,
                pipelines,
                repetitions,
                concurrency,
                max_new_tokens,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
