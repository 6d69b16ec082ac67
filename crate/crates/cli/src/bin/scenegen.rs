use std::path::PathBuf;

use clap::Parser;
use gbuf_enhance::config::ExperimentConfig;
use gbuf_enhance::dataset::write_dataset;
use gbuf_enhance::scenegen::{generate_dataset, StyleTag};
use gbuf_enhance::Exec;
use gbuf_enhance_cli::CliError;

/// Renders a toy dataset straight into a directory.
#[derive(Parser, Debug)]
#[command(name = "scenegen", version)]
struct Args {
    /// Experiment TOML; only the [scenes] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "source")]
    style: String,
}

fn main() {
    let args = Args::parse();
    let result = (|| -> Result<usize, CliError> {
        let cfg = match &args.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::toy(),
        };
        let style: StyleTag = args.style.parse().map_err(|_| CliError::Config(format!("unknown style {:?}", args.style)))?;
        let samples = generate_dataset(&cfg.scenes, args.n, args.seed, style, Exec::Parallel)?;
        write_dataset(&samples, &args.out, Exec::Parallel)?;
        Ok(samples.len())
    })();
    match result {
        Ok(n) => println!("{n} samples -> {}", args.out.display()),
        Err(e) => {
            eprintln!("scenegen: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
