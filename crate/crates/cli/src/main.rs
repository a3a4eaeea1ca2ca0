mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "cellrender", version, about = "Differentiable sensor-cell point cloud renderer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Defaults to CELLRENDER_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// brute, kdtree, binning or auto.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Optimization steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Set any config entry, e.g. `--set grid.topology.rows=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = config::parse_override)]
    sets: Vec<(String, toml::Value)>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Sample the configured scene and write it out.
    Synth,
    /// Render the scene to CRND and PGM images.
    Render,
    /// Compare analytic gradients with central differences.
    GradCheck,
    /// Fit render parameters by gradient descent.
    Optimize,
    /// Time brute force against the accelerated backends.
    Bench,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, toml::Value)>, Failure> {
    let int = |name: &str, v: u64| {
        i64::try_from(v)
            .map(toml::Value::Integer)
            .map_err(|_| Failure::Config(format!("--{name} {v} is out of range")))
    };
    let mut o = Vec::new();
    if let Some(s) = cli.seed {
        o.push(("seed".to_string(), int("seed", s)?));
    }
    if let Some(t) = cli.threads {
        o.push(("threads".to_string(), int("threads", t as u64)?));
    }
    if let Some(d) = &cli.out {
        o.push(("output.dir".to_string(), toml::Value::String(d.display().to_string())));
    }
    if let Some(b) = &cli.backend {
        o.push(("render.backend".to_string(), toml::Value::String(b.clone())));
    }
    if let Some(s) = cli.steps {
        o.push(("optimize.steps".to_string(), int("steps", s as u64)?));
    }
    o.extend(cli.sets.iter().cloned());
    Ok(o)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = config::load(cli.config.as_deref(), &overrides(cli)?).map_err(|e| Failure::Config(e.0))?;
    let env_threads = match std::env::var("CELLRENDER_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
            Failure::Config(format!("CELLRENDER_THREADS must be a positive integer, got {v:?}"))
        })?),
        Err(_) => None,
    };
    if let Some(n) = cfg.threads.or(env_threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    }

    let echo = toml::to_string(&cfg).map_err(|e| Failure::Runtime(format!("echoing config: {e}")))?;
    println!("# resolved configuration\n{echo}");
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    std::fs::write(out.join("config.toml"), &echo).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;

    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Render => commands::render_cmd(&cfg),
        Command::GradCheck => commands::grad_check(&cfg),
        Command::Optimize => commands::optimize_cmd(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
