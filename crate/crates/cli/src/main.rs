use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentforge::pipeline::tables::{read_csv, write_embedding_store, write_pool_dir, RowRef};
use latentforge::pipeline::{default_run_dir, effective_config, load_config, parse_stages};
use latentforge::seeding::derive;
use latentforge::simworld::{default_attributes, sample_labeled_latents, WorldConfig};
use latentforge::{execute_config, Error, ExecuteOptions, Latent, VectorTable, World};

#[derive(Parser)]
#[command(name = "latentforge", version, about = "Synthetic face dataset generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute pipeline stages into a run directory.
    Run(RunArgs),
    /// Write simulation-backend artifacts in the bridge file formats.
    #[command(subcommand)]
    Sim(SimCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset of stages; all stages when omitted.
    #[arg(long)]
    stages: Option<String>,
    /// Defaults to `runs/<config digest prefix>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    t_ip: Option<f64>,
}

#[derive(Args)]
struct WorldArgs {
    /// Run seed; the world is derived from it exactly as `run` does.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = WorldConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = WorldConfig::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = WorldConfig::default().noise_sigma)]
    noise_sigma: f64,
    #[arg(long, default_value_t = WorldConfig::default().child_fraction)]
    child_fraction: f64,
}

impl WorldArgs {
    fn world(&self) -> latentforge::Result<World> {
        let cfg = WorldConfig {
            dim: self.dim,
            embed_dim: self.embed_dim,
            noise_sigma: self.noise_sigma,
            child_fraction: self.child_fraction,
        };
        World::new(&default_attributes(), &cfg, derive(self.seed, "world", 0))
    }
}

#[derive(Subcommand)]
enum SimCommand {
    /// Sample a labeled candidate pool directory.
    Pool {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a LATV table of latents.
    Embed {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        latents: PathBuf,
        /// `sample_id,row_index` CSV naming the rows; row numbers otherwise.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Receives `embeddings.latv` and `embeddings.csv`.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Dependency(_) => 3,
        _ => 4,
    }
}

fn run(args: RunArgs) -> latentforge::Result<()> {
    let opts = ExecuteOptions {
        stages: args.stages.as_deref().map(parse_stages).transpose()?,
        seed_override: args.seed_override,
        t_ip: args.t_ip,
    };
    let cfg = effective_config(load_config(&args.config)?, &opts)?;
    let run_dir = args.run_dir.unwrap_or_else(|| default_run_dir(&cfg));
    let summary = execute_config(cfg, &run_dir, &opts)?;
    let names = |v: &[latentforge::StageName]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",");
    println!("run_dir: {}", summary.run_dir.display());
    println!("executed: {}", names(&summary.executed));
    println!("skipped: {}", names(&summary.skipped));
    Ok(())
}

fn sim_pool(world: &World, seed: u64, n: usize, out: &Path) -> latentforge::Result<()> {
    let samples = sample_labeled_latents(world, n, derive(seed, "pool", 0))?;
    let attrs: Vec<&str> = world.attributes().iter().map(String::as_str).collect();
    write_pool_dir(out, &samples, &attrs)?;
    log::info!("wrote {n} candidates to {}", out.display());
    Ok(())
}

fn sim_embed(world: &World, latents: &Path, index: Option<&Path>, out_dir: &Path) -> latentforge::Result<()> {
    let table = VectorTable::<f64>::read(latents)?;
    if !table.is_empty() && table.dim() != world.dim() {
        return Err(Error::Dimension {
            expected: world.dim(),
            found: table.dim(),
        });
    }
    let refs: Vec<RowRef> = match index {
        Some(p) => read_csv(p)?,
        None => (0..table.len())
            .map(|row_index| RowRef {
                sample_id: row_index.to_string(),
                row_index,
            })
            .collect(),
    };
    let entries = refs
        .into_iter()
        .map(|r| {
            let row = table.row(r.row_index).ok_or_else(|| {
                Error::Data(format!("sample `{}` points at row {} of {}", r.sample_id, r.row_index, table.len()))
            })?;
            Ok((r.sample_id, world.embed(&Latent::new(row.to_vec())?)?))
        })
        .collect::<latentforge::Result<Vec<_>>>()?;
    write_embedding_store(&out_dir.join("embeddings.latv"), &out_dir.join("embeddings.csv"), &entries)?;
    log::info!("wrote {} embeddings to {}", entries.len(), out_dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> latentforge::Result<()> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Sim(SimCommand::Pool { world, n, out }) => sim_pool(&world.world()?, world.seed, n, &out),
        Command::Sim(SimCommand::Embed {
            world,
            latents,
            index,
            out_dir,
        }) => sim_embed(&world.world()?, &latents, index.as_deref(), &out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
