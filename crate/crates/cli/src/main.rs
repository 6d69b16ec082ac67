use clap::Parser;
use gbuf_enhance_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("gbenh: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
