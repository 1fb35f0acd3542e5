use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = sacnet::cli::Cli::parse();
    if let Ok(v) = std::env::var("SAC_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SAC_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::from(sacnet::cli::run(cli))
}
