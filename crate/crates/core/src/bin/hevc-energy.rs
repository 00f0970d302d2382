use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use clap::error::ErrorKind;
use hevc_energy::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::init_from_env("HEVC_ENERGY_LOG");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as validation failures.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };
    log::debug!("{:?}", cli.command);
    let outcome = run(&cli);
    let rendered = outcome.render(cli.format);
    let result = if outcome.exit_code == 0 {
        std::io::stdout().write_all(rendered.as_bytes())
    } else {
        std::io::stderr().write_all(rendered.as_bytes())
    };
    if result.is_err() {
        return ExitCode::from(3);
    }
    ExitCode::from(outcome.exit_code as u8)
}
