use std::process::ExitCode;

use clap::Parser;

mod commands;
mod render;

use commands::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use commands::Failure;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn failure_codes_follow_error_class() {
        use t2sd_core::Error;
        assert_eq!(Failure::from(Error::Diverged { step: 1, loss: f64::NAN }).code, 4);
        assert_eq!(Failure::from(Error::NonFinite { op: "exp" }).code, 4);
        assert_eq!(Failure::from(Error::DegeneratePose).code, 3);
        assert_eq!(Failure::from(Error::Invalid("x".into())).code, 2);
    }
}
