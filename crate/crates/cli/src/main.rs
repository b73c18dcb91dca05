use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let env_out = std::env::var_os(mixlab_cli::config::OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    ExitCode::from(mixlab_cli::main_with(std::env::args_os(), env_out))
}
