use std::process::ExitCode;

use mmda_cli::{run, config::SEED_ENV};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let env_seed = std::env::var(SEED_ENV).ok();
    match run(std::env::args().collect(), env_seed.as_deref()) {
        Ok(out) => {
            print!("{}", out.stdout);
            if out.success {
                ExitCode::SUCCESS
            } else {
                eprintln!("MMDA-E8: selftest failed");
                ExitCode::from(8)
            }
        }
        Err(e) => {
            eprintln!("MMDA-E{}: {e}", e.code());
            ExitCode::from(u8::try_from(e.code()).unwrap_or(1))
        }
    }
}
