use clap::Parser;

use boxcar_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            for path in &report.outputs {
                eprintln!("wrote {path}");
            }
        }
        Err(e) => {
            eprintln!("boxcar: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
